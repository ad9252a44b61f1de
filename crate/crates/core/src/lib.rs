//! Adaptive discretization of Tikhonov-regularized inverse source problems
//! with functional a posteriori error estimators.

pub mod adaptive;
pub mod benchmark;
pub mod error;
pub mod estimators;
pub mod fem;
pub mod mesh;
pub mod tikhonov;

pub use error::{Error, Result};
pub use fem::{assemble, measure_load, solve_poisson, DiscreteMeasure, FeFunction, OperatorKind, PoissonSolver, SparseOperator};
pub use mesh::{make_disk_mesh, Mesh, Point, Refinement, SubdomainMask};
pub use tikhonov::{solve_hilbert, solve_ivanov, solve_sparse, Problem, Regularizer, RegularizerKind, SolverOptions, TikhonovSolution};

/// Sets the thread count used by the sparse factorizations; 0 picks one
/// thread per core, 1 runs sequentially.
pub fn set_threads(threads: usize) {
    let par = if threads == 1 { faer::Par::Seq } else { faer::Par::rayon(threads) };
    faer::set_global_parallelism(par);
}
