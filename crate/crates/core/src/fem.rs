//! P1 finite elements: assembly, Dirichlet Poisson solves, nodal data.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Llt;
use faer::sparse::{SparseColMat, Triplet};
use faer::{MatMut, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Point};

/// Largest accepted normwise backward error of a Poisson solve.
pub const SOLVE_TOLERANCE: f64 = 1e-12;

/// Local stiffness matrix `area * grad phi_i . grad phi_j`.
pub fn element_stiffness(mesh: &Mesh, t: usize) -> [[f64; 3]; 3] {
    let g = mesh.basis_gradients(t);
    let area = mesh.area(t);
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
        }
    }
    k
}

/// Local P1 mass matrix `(area / 12) [[2,1,1],[1,2,1],[1,1,2]]`.
pub fn element_mass(area: f64) -> [[f64; 3]; 3] {
    let d = area / 6.0;
    let o = area / 12.0;
    [[d, o, o], [o, d, o], [o, o, d]]
}

/// Exact `int_K f g` for P1 functions with vertex values `f`, `g`.
pub fn element_l2_inner(area: f64, f: [f64; 3], g: [f64; 3]) -> f64 {
    let dot = f[0] * g[0] + f[1] * g[1] + f[2] * g[2];
    area / 12.0 * (dot + (f[0] + f[1] + f[2]) * (g[0] + g[1] + g[2]))
}

pub fn element_l2_sq(area: f64, f: [f64; 3]) -> f64 {
    element_l2_inner(area, f, f)
}

/// Vertex values of `coeffs` on triangle `t`.
pub fn local(mesh: &Mesh, t: usize, coeffs: &[f64]) -> [f64; 3] {
    mesh.triangle(t).map(|v| coeffs[v])
}

/// `int_{U} f g` over the union `U` of elements with `mask[t]`.
pub fn masked_l2_inner(mesh: &Mesh, f: &[f64], g: &[f64], mask: &[bool]) -> f64 {
    (0..mesh.num_triangles())
        .filter(|&t| mask[t])
        .map(|t| element_l2_inner(mesh.area(t), local(mesh, t, f), local(mesh, t, g)))
        .sum()
}

pub fn masked_l2_norm(mesh: &Mesh, f: &[f64], mask: &[bool]) -> f64 {
    masked_l2_inner(mesh, f, f, mask).max(0.0).sqrt()
}

/// Nodal interpolant of `f`.
pub fn interpolate(mesh: &Mesh, f: impl Fn(Point) -> f64) -> Vec<f64> {
    mesh.vertices().iter().map(|&p| f(p)).collect()
}

/// Interior vertices touching at least one control element. These carry the
/// discrete controls of every regularizer.
pub fn control_nodes(mesh: &Mesh) -> Vec<usize> {
    let mut touches = vec![false; mesh.num_vertices()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        if mesh.mask().in_omega_c[t] {
            for &v in tri {
                touches[v] = true;
            }
        }
    }
    (0..mesh.num_vertices())
        .filter(|&v| touches[v] && !mesh.is_boundary_vertex(v))
        .collect()
}

/// Nodal coefficients of a P1 function on a shared mesh.
#[derive(Debug, Clone)]
pub struct FeFunction {
    mesh: Arc<Mesh>,
    coeffs: Vec<f64>,
}

impl FeFunction {
    pub fn new(mesh: Arc<Mesh>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != mesh.num_vertices() {
            return Err(Error::invalid(format!(
                "expected {} coefficients, got {}",
                mesh.num_vertices(),
                coeffs.len()
            )));
        }
        Ok(Self { mesh, coeffs })
    }

    pub fn zeros(mesh: Arc<Mesh>) -> Self {
        let n = mesh.num_vertices();
        Self { mesh, coeffs: vec![0.0; n] }
    }

    pub fn interpolate(mesh: Arc<Mesh>, f: impl Fn(Point) -> f64) -> Self {
        let coeffs = interpolate(&mesh, f);
        Self { mesh, coeffs }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// `||f||_{L2(omega_o)}`.
    pub fn observation_norm(&self) -> f64 {
        masked_l2_norm(&self.mesh, &self.coeffs, &self.mesh.mask().in_omega_o)
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Dirac atoms `sum_j u_j delta_{x_j}` at mesh vertices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub vertices: Vec<usize>,
    pub coefficients: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(vertices: Vec<usize>, coefficients: Vec<f64>) -> Result<Self> {
        if vertices.len() != coefficients.len() {
            return Err(Error::invalid("atom and coefficient counts differ"));
        }
        let mut sorted = vertices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("atoms must sit at distinct vertices"));
        }
        Ok(Self { vertices, coefficients })
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Number of atoms with nonzero mass.
    pub fn support_size(&self) -> usize {
        self.coefficients.iter().filter(|&&c| c != 0.0).count()
    }

    pub fn total_variation(&self) -> f64 {
        self.coefficients.iter().map(|c| c.abs()).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.coefficients.iter().sum()
    }
}

/// Load vector `<u, e_i> = u(x_i)` of a discrete measure, over all vertices.
pub fn measure_load(mesh: &Mesh, u: &DiscreteMeasure) -> Result<Vec<f64>> {
    let mut in_control = vec![false; mesh.num_vertices()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        if mesh.mask().in_omega_c[t] {
            for &v in tri {
                in_control[v] = true;
            }
        }
    }
    let mut load = vec![0.0; mesh.num_vertices()];
    for (&v, &c) in u.vertices.iter().zip(&u.coefficients) {
        if v >= mesh.num_vertices() {
            return Err(Error::invalid(format!("atom at unknown vertex {v}")));
        }
        if mesh.is_boundary_vertex(v) {
            return Err(Error::invalid(format!("atom at boundary vertex {v}")));
        }
        if !in_control[v] {
            return Err(Error::invalid(format!("atom at vertex {v} outside the control region")));
        }
        load[v] += c;
    }
    Ok(load)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    /// Dirichlet Laplacian on the free vertices.
    Stiffness,
    /// Mass matrix over the whole domain, all vertices.
    Mass,
    /// Mass matrix over observation elements, all vertices.
    ObservationMass,
    /// Mass matrix over control elements, all vertices.
    ControlMass,
}

/// Symmetric matrix in compressed row storage. Row `i` belongs to mesh
/// vertex `dofs[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    kind: OperatorKind,
    dofs: Vec<usize>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseOperator {
    fn from_triplets(kind: OperatorKind, dofs: Vec<usize>, mut trips: Vec<(usize, usize, f64)>) -> Self {
        let n = dofs.len();
        trips.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(trips.len() / 3);
        let mut values: Vec<f64> = Vec::with_capacity(trips.len() / 3);
        let mut last = None;
        for (r, c, v) in trips {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            kind,
            dofs,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dofs.len()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Mesh vertex of each row.
    pub fn dofs(&self) -> &[usize] {
        &self.dofs
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim());
        (0..self.dim()).map(|i| self.row(i).map(|(c, v)| v * x[c]).sum()).collect()
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        (0..self.dim()).map(|i| x[i] * self.row(i).map(|(c, v)| v * x[c]).sum::<f64>()).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Dense copy, for small test problems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.dim()]; self.dim()];
        for (i, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(i) {
                row[c] = v;
            }
        }
        d
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        // Symmetric, so the row pattern doubles as the column pattern.
        let trips: Vec<Triplet<usize, usize, f64>> = (0..self.dim())
            .flat_map(|i| self.row(i).map(move |(c, v)| Triplet::new(c, i, v)))
            .collect();
        SparseColMat::try_new_from_triplets(self.dim(), self.dim(), &trips)
            .map_err(|e| Error::Assembly(format!("{e:?}")))
    }
}

/// Assembles `kind` with exact P1 element matrices.
pub fn assemble(mesh: &Mesh, kind: OperatorKind) -> Result<SparseOperator> {
    for t in 0..mesh.num_triangles() {
        if !(mesh.area(t) > 0.0) {
            return Err(Error::Assembly(format!("triangle {t} has nonpositive area")));
        }
    }
    let nt = mesh.num_triangles();
    match kind {
        OperatorKind::Stiffness => {
            let (free, index) = free_numbering(mesh);
            let mut trips = Vec::with_capacity(9 * nt);
            for t in 0..nt {
                let k = element_stiffness(mesh, t);
                let tri = mesh.triangle(t);
                for i in 0..3 {
                    let r = index[tri[i]];
                    if r == usize::MAX {
                        continue;
                    }
                    for j in 0..3 {
                        let c = index[tri[j]];
                        if c != usize::MAX {
                            trips.push((r, c, k[i][j]));
                        }
                    }
                }
            }
            Ok(SparseOperator::from_triplets(kind, free, trips))
        }
        OperatorKind::Mass | OperatorKind::ObservationMass | OperatorKind::ControlMass => {
            let mask = mesh.mask();
            let include = |t: usize| match kind {
                OperatorKind::ObservationMass => mask.in_omega_o[t],
                OperatorKind::ControlMass => mask.in_omega_c[t],
                _ => true,
            };
            let mut trips = Vec::with_capacity(9 * nt);
            for t in (0..nt).filter(|&t| include(t)) {
                let m = element_mass(mesh.area(t));
                let tri = mesh.triangle(t);
                for i in 0..3 {
                    for j in 0..3 {
                        trips.push((tri[i], tri[j], m[i][j]));
                    }
                }
            }
            Ok(SparseOperator::from_triplets(kind, (0..mesh.num_vertices()).collect(), trips))
        }
    }
}

fn free_numbering(mesh: &Mesh) -> (Vec<usize>, Vec<usize>) {
    let mut index = vec![usize::MAX; mesh.num_vertices()];
    let mut free = Vec::new();
    for v in 0..mesh.num_vertices() {
        if !mesh.is_boundary_vertex(v) {
            index[v] = free.len();
            free.push(v);
        }
    }
    (free, index)
}

/// Factorized Dirichlet Laplacian of one mesh.
#[derive(Debug)]
pub struct PoissonSolver {
    mesh: Arc<Mesh>,
    stiffness: SparseOperator,
    free_index: Vec<usize>,
    llt: Llt<usize, f64>,
    norm_inf: f64,
}

impl PoissonSolver {
    pub fn new(mesh: Arc<Mesh>) -> Result<Self> {
        let stiffness = assemble(&mesh, OperatorKind::Stiffness)?;
        let (_, free_index) = free_numbering(&mesh);
        let llt = stiffness
            .to_faer()?
            .sp_cholesky(Side::Lower)
            .map_err(|e| Error::Assembly(format!("Cholesky factorization failed: {e:?}")))?;
        let norm_inf = stiffness.norm_inf();
        Ok(Self {
            mesh,
            stiffness,
            free_index,
            llt,
            norm_inf,
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn stiffness(&self) -> &SparseOperator {
        &self.stiffness
    }

    pub fn num_free(&self) -> usize {
        self.stiffness.dim()
    }

    pub fn free_vertices(&self) -> &[usize] {
        self.stiffness.dofs()
    }

    /// Solves `K x = b` over the free vertices.
    pub fn solve_free(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.num_free();
        if rhs.len() != n {
            return Err(Error::invalid(format!("expected {n} load entries, got {}", rhs.len())));
        }
        let b_norm = rhs.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
        if b_norm == 0.0 {
            return Ok(vec![0.0; n]);
        }
        let mut x = rhs.to_vec();
        self.llt.solve_in_place(MatMut::from_column_major_slice_mut(&mut x, n, 1));
        let mut err = f64::INFINITY;
        for _ in 0..3 {
            let kx = self.stiffness.apply(&x);
            let mut r: Vec<f64> = rhs.iter().zip(&kx).map(|(b, a)| b - a).collect();
            let r_norm = r.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
            let x_norm = x.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
            err = r_norm / (self.norm_inf * x_norm + b_norm);
            if err <= SOLVE_TOLERANCE {
                return Ok(x);
            }
            if !err.is_finite() {
                break;
            }
            self.llt.solve_in_place(MatMut::from_column_major_slice_mut(&mut r, n, 1));
            x.iter_mut().zip(&r).for_each(|(xi, di)| *xi += di);
        }
        Err(Error::numerical("Poisson solve", 3, err))
    }

    /// Solves `K X = B` for `k` right-hand sides stored column-major over the
    /// free vertices, in place.
    pub fn solve_free_many(&self, rhs: &mut [f64], k: usize) -> Result<()> {
        let n = self.num_free();
        if rhs.len() != n * k {
            return Err(Error::invalid(format!("expected {} load entries, got {}", n * k, rhs.len())));
        }
        let original = rhs.to_vec();
        self.llt.solve_in_place(MatMut::from_column_major_slice_mut(rhs, n, k));
        for c in 0..k {
            let b = &original[c * n..(c + 1) * n];
            let x = &rhs[c * n..(c + 1) * n];
            let kx = self.stiffness.apply(x);
            let r_norm = b.iter().zip(&kx).fold(0.0, |m: f64, (bi, ai)| m.max((bi - ai).abs()));
            let x_norm = x.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
            let b_norm = b.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
            if b_norm > 0.0 && r_norm > SOLVE_TOLERANCE * (self.norm_inf * x_norm + b_norm) {
                let refined = self.solve_free(b)?;
                rhs[c * n..(c + 1) * n].copy_from_slice(&refined);
            }
        }
        Ok(())
    }

    /// Solves with a load over all vertices (boundary entries are ignored)
    /// and returns nodal values over all vertices, zero on the boundary.
    pub fn solve(&self, load: &[f64]) -> Result<Vec<f64>> {
        if load.len() != self.mesh.num_vertices() {
            return Err(Error::invalid(format!(
                "expected {} load entries, got {}",
                self.mesh.num_vertices(),
                load.len()
            )));
        }
        let rhs: Vec<f64> = self.free_vertices().iter().map(|&v| load[v]).collect();
        let x = self.solve_free(&rhs)?;
        Ok(self.extend(&x))
    }

    /// Scatters free-vertex values to all vertices.
    pub fn extend(&self, free: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.mesh.num_vertices()];
        for (&v, &x) in self.free_vertices().iter().zip(free) {
            full[v] = x;
        }
        full
    }

    /// Restricts nodal values to the free vertices.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free_vertices().iter().map(|&v| full[v]).collect()
    }

    /// `a(f, g) = int grad f . grad g` for nodal vectors over all vertices.
    pub fn energy_inner(&self, f: &[f64], g: &[f64]) -> f64 {
        let kf = self.stiffness.apply(&self.restrict(f));
        kf.iter().zip(self.restrict(g)).map(|(a, b)| a * b).sum()
    }

    pub fn is_free(&self, v: usize) -> bool {
        self.free_index[v] != usize::MAX
    }
}

/// Galerkin solution of the Dirichlet Poisson problem. `rhs` is either
/// indexed over the free vertices or over all vertices (boundary entries
/// then ignored).
pub fn solve_poisson(mesh: &Arc<Mesh>, rhs: &[f64]) -> Result<FeFunction> {
    let solver = PoissonSolver::new(mesh.clone())?;
    let coeffs = if rhs.len() == solver.num_free() {
        solver.extend(&solver.solve_free(rhs)?)
    } else {
        solver.solve(rhs)?
    };
    FeFunction::new(mesh.clone(), coeffs)
}
