//! Discrete Tikhonov problems on a fixed mesh.
//!
//! Every regularizer acts on coefficients at the control nodes (interior
//! vertices of control elements). For the Hilbert and Ivanov penalties these
//! are nodal values of a P1 control entering the state through the control
//! mass matrix; for the measure penalty they are Dirac masses entering
//! through point evaluation.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{self, assemble, control_nodes, DiscreteMeasure, OperatorKind, PoissonSolver, SparseOperator};
use crate::mesh::Mesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    HilbertL2,
    IvanovLinf,
    MeasureNorm,
}

impl RegularizerKind {
    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::HilbertL2 => "hilbert_l2",
            RegularizerKind::IvanovLinf => "ivanov_linf",
            RegularizerKind::MeasureNorm => "measure_norm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub kind: RegularizerKind,
    pub alpha: f64,
}

impl Regularizer {
    pub fn new(kind: RegularizerKind, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be positive and finite, got {alpha}")));
        }
        Ok(Self { kind, alpha })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Overrides the kind's default stopping tolerance.
    pub tolerance: Option<f64>,
    pub max_iterations: usize,
    /// Initial control coefficients at the control nodes.
    pub warm_start: Option<Vec<f64>>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: None,
            max_iterations: 50_000,
            warm_start: None,
        }
    }
}

impl SolverOptions {
    /// Same options with the default tolerance divided by `factor`.
    pub fn tightened(kind: RegularizerKind, factor: f64) -> Self {
        Self {
            tolerance: Some(default_tolerance(kind) / factor),
            ..Self::default()
        }
    }
}

/// Relative stopping tolerance used when none is given: KKT residual for
/// the Hilbert penalty, projected gradient for Ivanov, duality gap for the
/// measure penalty.
pub fn default_tolerance(kind: RegularizerKind) -> f64 {
    match kind {
        RegularizerKind::HilbertL2 => 1e-9,
        RegularizerKind::IvanovLinf => 1e-8,
        RegularizerKind::MeasureNorm => 1e-9,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    /// Nodal values over all vertices (zero off the control nodes).
    Function(Vec<f64>),
    Measure(DiscreteMeasure),
}

#[derive(Debug, Clone)]
pub struct TikhonovSolution {
    pub regularizer: Regularizer,
    pub mesh: Arc<Mesh>,
    pub control_nodes: Vec<usize>,
    /// Control coefficients, one per control node.
    pub u: Vec<f64>,
    /// State, nodal over all vertices.
    pub y: Vec<f64>,
    /// Adjoint `A^{-1} C^*(g - C y)`, nodal over all vertices.
    pub w: Vec<f64>,
    /// Data `g^delta`, nodal over all vertices.
    pub g: Vec<f64>,
    pub j_value: f64,
    /// `||y - g||_{L2(omega_o)}`.
    pub discrepancy: f64,
    /// Kind-specific relative stationarity measure at exit.
    pub optimality_residual: f64,
    /// Primal-dual gap at exit (measure penalty only).
    pub duality_gap: Option<f64>,
    /// Primal-dual gap at the starting point (measure penalty only).
    pub initial_duality_gap: Option<f64>,
    pub iterations: usize,
}

impl TikhonovSolution {
    pub fn kind(&self) -> RegularizerKind {
        self.regularizer.kind
    }

    pub fn alpha(&self) -> f64 {
        self.regularizer.alpha
    }

    /// Control coefficients scattered to all vertices.
    pub fn control_full(&self) -> Vec<f64> {
        let mut full = vec![0.0; self.mesh.num_vertices()];
        for (&v, &c) in self.control_nodes.iter().zip(&self.u) {
            full[v] = c;
        }
        full
    }

    pub fn control(&self) -> Control {
        match self.kind() {
            RegularizerKind::MeasureNorm => Control::Measure(self.measure().expect("measure control")),
            _ => Control::Function(self.control_full()),
        }
    }

    /// Atoms with nonzero mass, for the measure penalty.
    pub fn measure(&self) -> Option<DiscreteMeasure> {
        if self.kind() != RegularizerKind::MeasureNorm {
            return None;
        }
        let (vertices, coefficients) = self
            .control_nodes
            .iter()
            .zip(&self.u)
            .filter(|(_, &c)| c != 0.0)
            .map(|(&v, &c)| (v, c))
            .unzip();
        Some(DiscreteMeasure { vertices, coefficients })
    }

    /// Adjoint values at the control nodes.
    pub fn w_at_controls(&self) -> Vec<f64> {
        self.control_nodes.iter().map(|&v| self.w[v]).collect()
    }

    /// `max_j |w(x_j)|` over the control nodes.
    pub fn dual_certificate(&self) -> f64 {
        self.control_nodes.iter().fold(0.0, |m, &v| m.max(self.w[v].abs()))
    }
}

/// Mesh-dependent operators and data shared by all solves on one mesh.
#[derive(Debug)]
pub struct Problem {
    mesh: Arc<Mesh>,
    solver: PoissonSolver,
    obs_mass: SparseOperator,
    ctrl_mass: SparseOperator,
    control_nodes: Vec<usize>,
    lumped: Vec<f64>,
    g: Vec<f64>,
    /// `A^{-1} C^* g`.
    w_data: Vec<f64>,
}

impl Problem {
    /// `g` holds nodal data over all vertices.
    pub fn new(mesh: Arc<Mesh>, g: Vec<f64>) -> Result<Self> {
        let solver = PoissonSolver::new(mesh.clone())?;
        Self::with_solver(solver, g)
    }

    pub fn with_solver(solver: PoissonSolver, g: Vec<f64>) -> Result<Self> {
        let mesh = solver.mesh().clone();
        if g.len() != mesh.num_vertices() {
            return Err(Error::invalid(format!(
                "data has {} entries but the mesh has {} vertices",
                g.len(),
                mesh.num_vertices()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("data contains non-finite values"));
        }
        let obs_mass = assemble(&mesh, OperatorKind::ObservationMass)?;
        let ctrl_mass = assemble(&mesh, OperatorKind::ControlMass)?;
        let control_nodes = control_nodes(&mesh);
        if control_nodes.is_empty() {
            return Err(Error::invalid("the control region has no interior vertex"));
        }
        let row_sums = ctrl_mass.row_sums();
        let lumped = control_nodes.iter().map(|&v| row_sums[v]).collect();
        let w_data = solver.solve(&obs_mass.apply(&g))?;
        Ok(Self {
            mesh,
            solver,
            obs_mass,
            ctrl_mass,
            control_nodes,
            lumped,
            g,
            w_data,
        })
    }

    /// Same mesh and factorization with new data.
    pub fn with_data(self, g: Vec<f64>) -> Result<Self> {
        Self::with_solver(self.solver, g)
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn solver(&self) -> &PoissonSolver {
        &self.solver
    }

    pub fn data(&self) -> &[f64] {
        &self.g
    }

    pub fn control_nodes(&self) -> &[usize] {
        &self.control_nodes
    }

    pub fn num_controls(&self) -> usize {
        self.control_nodes.len()
    }

    pub fn observation_mass(&self) -> &SparseOperator {
        &self.obs_mass
    }

    pub fn control_mass(&self) -> &SparseOperator {
        &self.ctrl_mass
    }

    /// Row sums of the control mass matrix at the control nodes.
    pub fn lumped_control_mass(&self) -> &[f64] {
        &self.lumped
    }

    pub fn extend(&self, u: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.mesh.num_vertices()];
        for (&v, &c) in self.control_nodes.iter().zip(u) {
            full[v] = c;
        }
        full
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.control_nodes.iter().map(|&v| full[v]).collect()
    }

    /// Load vector over all vertices induced by control coefficients.
    pub fn control_load(&self, kind: RegularizerKind, u: &[f64]) -> Vec<f64> {
        let full = self.extend(u);
        match kind {
            RegularizerKind::MeasureNorm => full,
            _ => self.ctrl_mass.apply(&full),
        }
    }

    /// `B^*` of a nodal function: pairs it with every control basis element.
    pub fn control_pairing(&self, kind: RegularizerKind, f: &[f64]) -> Vec<f64> {
        match kind {
            RegularizerKind::MeasureNorm => self.restrict(f),
            _ => self.restrict(&self.ctrl_mass.apply(f)),
        }
    }

    pub fn state(&self, kind: RegularizerKind, u: &[f64]) -> Result<Vec<f64>> {
        self.solver.solve(&self.control_load(kind, u))
    }

    /// Adjoint state `A^{-1} C^*(g - C y)`.
    pub fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        let w_y = self.solver.solve(&self.obs_mass.apply(y))?;
        Ok(self.w_data.iter().zip(&w_y).map(|(a, b)| a - b).collect())
    }

    /// `||y - g||_{L2(omega_o)}`.
    pub fn discrepancy(&self, y: &[f64]) -> f64 {
        self.observation_norm_sq(&self.residual(y)).max(0.0).sqrt()
    }

    fn residual(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.g).map(|(a, b)| a - b).collect()
    }

    fn observation_norm_sq(&self, f: &[f64]) -> f64 {
        fem::masked_l2_inner(&self.mesh, f, f, &self.mesh.mask().in_omega_o)
    }

    /// `R_alpha(u)`; infinite for an Ivanov control outside the ball.
    pub fn penalty(&self, reg: Regularizer, u: &[f64]) -> f64 {
        match reg.kind {
            RegularizerKind::HilbertL2 => 0.5 * reg.alpha * self.control_mass_form(u, u),
            RegularizerKind::IvanovLinf => {
                let bound = 1.0 / reg.alpha;
                if u.iter().all(|x| x.abs() <= bound * (1.0 + 1e-12)) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            RegularizerKind::MeasureNorm => reg.alpha * u.iter().map(|x| x.abs()).sum::<f64>(),
        }
    }

    /// `J_alpha(u, S u)`.
    pub fn objective(&self, reg: Regularizer, u: &[f64]) -> Result<f64> {
        let y = self.state(reg.kind, u)?;
        Ok(0.5 * self.discrepancy(&y).powi(2) + self.penalty(reg, u))
    }

    /// `u^T M_cc v` on control coefficients.
    pub fn control_mass_form(&self, u: &[f64], v: &[f64]) -> f64 {
        let mu = self.ctrl_mass.apply(&self.extend(u));
        self.control_nodes.iter().zip(v).map(|(&n, b)| mu[n] * b).sum()
    }

    pub fn solve(&self, reg: Regularizer, opts: &SolverOptions) -> Result<TikhonovSolution> {
        if let Some(u0) = &opts.warm_start {
            if u0.len() != self.num_controls() {
                return Err(Error::invalid(format!(
                    "warm start has {} entries, expected {}",
                    u0.len(),
                    self.num_controls()
                )));
            }
        }
        match reg.kind {
            RegularizerKind::HilbertL2 => self.solve_hilbert(reg.alpha, opts),
            RegularizerKind::IvanovLinf => self.solve_ivanov(reg.alpha, opts),
            RegularizerKind::MeasureNorm => self.solve_sparse(reg.alpha, opts),
        }
    }

    fn finish(&self, reg: Regularizer, u: Vec<f64>, y: Vec<f64>, w: Vec<f64>) -> TikhonovSolution {
        let discrepancy = self.discrepancy(&y);
        let j_value = 0.5 * discrepancy * discrepancy + self.penalty(reg, &u);
        TikhonovSolution {
            regularizer: reg,
            mesh: self.mesh.clone(),
            control_nodes: self.control_nodes.clone(),
            u,
            y,
            w,
            g: self.g.clone(),
            j_value,
            discrepancy,
            optimality_residual: 0.0,
            duality_gap: None,
            initial_duality_gap: None,
            iterations: 0,
        }
    }

    /// Reduced normal equations `(alpha M_cc + B^* S^* C^* C S B) u = B^* S^* C^* g`
    /// by conjugate gradients preconditioned with the lumped control mass.
    pub fn solve_hilbert(&self, alpha: f64, opts: &SolverOptions) -> Result<TikhonovSolution> {
        let reg = Regularizer::new(RegularizerKind::HilbertL2, alpha)?;
        let kind = reg.kind;
        let tol = opts.tolerance.unwrap_or(default_tolerance(kind));
        let n = self.num_controls();
        let d = &self.lumped;
        let apply = |p: &[f64]| -> Result<Vec<f64>> {
            let y = self.state(kind, p)?;
            let w = self.solver.solve(&self.obs_mass.apply(&y))?;
            let gram = self.control_pairing(kind, &w);
            let mass = self.control_pairing(kind, &self.extend(p));
            Ok(mass.iter().zip(&gram).map(|(m, g)| alpha * m + g).collect())
        };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let b = self.control_pairing(kind, &self.w_data);
        let b_norm = b.iter().zip(d).map(|(x, di)| x * x / di).sum::<f64>().sqrt();

        let mut x = opts.warm_start.clone().unwrap_or_else(|| vec![0.0; n]);
        let mut iterations = 0;
        if b_norm > 0.0 {
            let ax = apply(&x)?;
            let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            let mut z: Vec<f64> = r.iter().zip(d).map(|(ri, di)| ri / di).collect();
            let mut p = z.clone();
            let mut rz = dot(&r, &z);
            // CG runs two orders below the reported KKT tolerance.
            let target = 1e-2 * tol * b_norm;
            while rz.max(0.0).sqrt() > target {
                if iterations >= opts.max_iterations {
                    return Err(Error::numerical("Hilbert CG", iterations, rz.sqrt() / b_norm));
                }
                let ap = apply(&p)?;
                let pap = dot(&p, &ap);
                if !(pap > 0.0) {
                    return Err(Error::numerical("Hilbert CG (loss of positivity)", iterations, rz.sqrt() / b_norm));
                }
                let step = rz / pap;
                x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += step * pi);
                r.iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= step * api);
                z = r.iter().zip(d).map(|(ri, di)| ri / di).collect();
                let rz_new = dot(&r, &z);
                let beta = rz_new / rz;
                rz = rz_new;
                p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
                iterations += 1;
            }
        } else {
            x = vec![0.0; n];
        }

        let y = self.state(kind, &x)?;
        let w = self.adjoint(&y)?;
        let mass = self.control_pairing(kind, &self.extend(&x));
        let bw = self.control_pairing(kind, &w);
        let kkt = mass
            .iter()
            .zip(&bw)
            .zip(d)
            .map(|((m, g), di)| (alpha * m - g).powi(2) / di)
            .sum::<f64>()
            .sqrt();
        let scale = bw.iter().zip(d).map(|(g, di)| g * g / di).sum::<f64>().sqrt().max(b_norm);
        let mut sol = self.finish(reg, x, y, w);
        sol.optimality_residual = if scale > 0.0 { kkt / scale } else { 0.0 };
        sol.iterations = iterations;
        if sol.optimality_residual > tol {
            return Err(Error::numerical("Hilbert KKT check", iterations, sol.optimality_residual));
        }
        Ok(sol)
    }

    /// Box-constrained least squares `|u_i| <= 1/alpha` by gradient projection
    /// in the lumped-mass metric. Spectral projected gradient steps with exact
    /// line search identify the active face; once the binding set repeats,
    /// conjugate gradients minimize over the free components of that face and
    /// the result is projected back with backtracking.
    pub fn solve_ivanov(&self, alpha: f64, opts: &SolverOptions) -> Result<TikhonovSolution> {
        let reg = Regularizer::new(RegularizerKind::IvanovLinf, alpha)?;
        let kind = reg.kind;
        let tol = opts.tolerance.unwrap_or(default_tolerance(kind));
        let bound = 1.0 / alpha;
        let d = &self.lumped;
        let clamp = |x: f64| x.clamp(-bound, bound);

        let mut u: Vec<f64> = match &opts.warm_start {
            Some(u0) => u0.iter().map(|&x| clamp(x)).collect(),
            None => vec![0.0; self.num_controls()],
        };
        let mut y = self.state(kind, &u)?;
        let mut w = self.adjoint(&y)?;
        // Euclidean gradient of the misfit is -B^* w.
        let mut grad: Vec<f64> = self.control_pairing(kind, &w).iter().map(|x| -x).collect();
        let scaled_norm = |g: &[f64]| g.iter().zip(d).map(|(gi, di)| gi * gi / di).sum::<f64>().sqrt();
        let projected = |u: &[f64], g: &[f64], step: f64| -> Vec<f64> {
            u.iter()
                .zip(g)
                .zip(d)
                .map(|((ui, gi), di)| clamp(ui - step * gi / di) - ui)
                .collect()
        };
        let pg_norm = |u: &[f64], g: &[f64]| {
            projected(u, g, 1.0)
                .iter()
                .zip(d)
                .map(|(p, di)| p * p * di)
                .sum::<f64>()
                .sqrt()
        };
        let binding_set = |u: &[f64], g: &[f64]| -> Vec<bool> {
            u.iter()
                .zip(g)
                .map(|(&ui, &gi)| (ui >= bound && gi <= 0.0) || (ui <= -bound && gi >= 0.0))
                .collect()
        };
        let scale = 1.0 + scaled_norm(&grad);
        let threshold = tol * scale;
        let mut lambda = 1.0;
        let mut iterations = 0;
        let mut res = pg_norm(&u, &grad);
        let mut prev_binding: Vec<bool> = Vec::new();
        let mut last_was_face = false;
        loop {
            if res <= threshold && last_was_face {
                break;
            }
            if iterations >= opts.max_iterations {
                return Err(Error::numerical("Ivanov gradient projection", iterations, res));
            }
            let binding = binding_set(&u, &grad);
            if !last_was_face && (binding == prev_binding || res <= threshold) {
                let improved = self.ivanov_face_step(kind, bound, &binding, &grad, &mut u, &mut y)?;
                last_was_face = true;
                if !improved && res <= threshold {
                    break;
                }
            } else {
                let dir = projected(&u, &grad, lambda);
                let slope: f64 = grad.iter().zip(&dir).map(|(g, di)| g * di).sum();
                last_was_face = false;
                if slope < 0.0 {
                    let y_dir = self.state(kind, &dir)?;
                    let curvature = self.observation_norm_sq(&y_dir);
                    let t = if curvature > 0.0 { (-slope / curvature).clamp(0.0, 1.0) } else { 1.0 };
                    u.iter_mut().zip(&dir).for_each(|(ui, di)| *ui = clamp(*ui + t * di));
                    y.iter_mut().zip(&y_dir).for_each(|(yi, di)| *yi += t * di);
                    let s_ds: f64 = dir.iter().zip(d).map(|(di, mi)| t * t * di * di * mi).sum();
                    let s_hs = t * t * curvature;
                    lambda = if s_hs > 0.0 { (s_ds / s_hs).clamp(1e-12, 1e12) } else { 1e12 };
                } else if res <= threshold {
                    break;
                }
            }
            prev_binding = binding;
            w = self.adjoint(&y)?;
            grad = self.control_pairing(kind, &w).iter().map(|x| -x).collect();
            res = pg_norm(&u, &grad);
            iterations += 1;
        }
        // Recompute the state from the final control to shed drift.
        let y = self.state(kind, &u)?;
        let w = self.adjoint(&y)?;
        let mut sol = self.finish(reg, u, y, w);
        sol.optimality_residual = res / scale;
        sol.iterations = iterations;
        Ok(sol)
    }

    /// Minimizes the misfit over the components outside `binding` by
    /// preconditioned CG, then projects onto the box with backtracking.
    /// Returns whether the misfit decreased.
    fn ivanov_face_step(
        &self,
        kind: RegularizerKind,
        bound: f64,
        binding: &[bool],
        grad: &[f64],
        u: &mut Vec<f64>,
        y: &mut Vec<f64>,
    ) -> Result<bool> {
        let d = &self.lumped;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mask = |v: &mut [f64]| v.iter_mut().zip(binding).filter(|(_, &b)| b).for_each(|(x, _)| *x = 0.0);
        let apply = |p: &[f64]| -> Result<Vec<f64>> {
            let yp = self.state(kind, p)?;
            let wp = self.solver.solve(&self.obs_mass.apply(&yp))?;
            let mut out = self.control_pairing(kind, &wp);
            mask(&mut out);
            Ok(out)
        };
        let mut r: Vec<f64> = grad.iter().map(|g| -g).collect();
        mask(&mut r);
        let free = binding.iter().filter(|b| !**b).count();
        let mut step = vec![0.0; u.len()];
        let mut z: Vec<f64> = r.iter().zip(d).map(|(ri, di)| ri / di).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let target = 1e-26 * rz;
        for _ in 0..(2 * free + 10).min(200) {
            if !(rz > target) {
                break;
            }
            let ap = apply(&p)?;
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                break;
            }
            let a = rz / pap;
            step.iter_mut().zip(&p).for_each(|(s, pi)| *s += a * pi);
            r.iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= a * api);
            z = r.iter().zip(d).map(|(ri, di)| ri / di).collect();
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
        }
        let f0 = self.observation_norm_sq(&self.residual(y));
        let mut t = 1.0;
        for _ in 0..20 {
            let cand: Vec<f64> = u.iter().zip(&step).map(|(ui, si)| (ui + t * si).clamp(-bound, bound)).collect();
            let yc = self.state(kind, &cand)?;
            if self.observation_norm_sq(&self.residual(&yc)) < f0 {
                *u = cand;
                *y = yc;
                return Ok(true);
            }
            t *= 0.5;
        }
        Ok(false)
    }

    /// Generalized lasso over Dirac masses at the control nodes.
    ///
    /// FISTA with gradient restart runs on a working set of atoms whose Gram
    /// matrix is formed explicitly; atoms violating `|w(x_j)| <= alpha` are
    /// added until the primal-dual gap of the full problem meets the
    /// tolerance. Once FISTA has settled on a sign pattern, the stationarity
    /// system on that support is solved directly and accepted only if it
    /// keeps the pattern and lowers the gap.
    pub fn solve_sparse(&self, alpha: f64, opts: &SolverOptions) -> Result<TikhonovSolution> {
        let reg = Regularizer::new(RegularizerKind::MeasureNorm, alpha)?;
        let kind = reg.kind;
        let tol = opts.tolerance.unwrap_or(default_tolerance(kind));
        let n = self.num_controls();
        let g_norm_sq = self.observation_norm_sq(&self.g);
        let w_data_c = self.restrict(&self.w_data);

        let mut x = opts.warm_start.clone().unwrap_or_else(|| vec![0.0; n]);
        let mut working: Vec<usize> = (0..n).filter(|&j| x[j] != 0.0).collect();
        let mut in_working = vec![false; n];
        working.iter().for_each(|&j| in_working[j] = true);
        let mut gram = Gram::default();
        self.extend_gram(&mut gram, &[], &working)?;

        let mut y = self.state(kind, &x)?;
        let mut w = self.adjoint(&y)?;
        let (mut gap, mut primal) = self.sparse_gap(alpha, &x, &y, &w);
        let initial_gap = gap;
        let mut iterations = 0;
        let mut inner_tol = 0.1 * tol;
        while gap > tol * (1.0 + primal) {
            let w_c = self.restrict(&w);
            let mut violators: Vec<usize> = (0..n).filter(|&j| !in_working[j] && w_c[j].abs() > alpha).collect();
            violators.sort_by(|&a, &b| w_c[b].abs().total_cmp(&w_c[a].abs()).then(a.cmp(&b)));
            let support = x.iter().filter(|&&c| c != 0.0).count();
            violators.truncate(20.max(support));
            if violators.is_empty() {
                // The reduced problem was not solved accurately enough.
                inner_tol *= 0.01;
                if inner_tol < 1e-6 * tol {
                    return Err(Error::numerical("FISTA working set", iterations, gap));
                }
            }
            self.extend_gram(&mut gram, &working, &violators)?;
            for j in violators {
                in_working[j] = true;
                working.push(j);
            }

            let b: Vec<f64> = working.iter().map(|&j| w_data_c[j]).collect();
            let x0: Vec<f64> = working.iter().map(|&j| x[j]).collect();
            let budget = opts.max_iterations.saturating_sub(iterations);
            let (xw, used) = reduced_lasso(&gram, &b, g_norm_sq, alpha, x0, inner_tol, budget)?;
            iterations += used;

            x.iter_mut().for_each(|v| *v = 0.0);
            for (&j, &c) in working.iter().zip(&xw) {
                x[j] = c;
            }
            y = self.state(kind, &x)?;
            w = self.adjoint(&y)?;
            (gap, primal) = self.sparse_gap(alpha, &x, &y, &w);

            // Drop idle atoms well inside the dual constraint.
            let support = x.iter().filter(|&&c| c != 0.0).count();
            if working.len() > 2 * support + 50 {
                let keep: Vec<bool> = working
                    .iter()
                    .map(|&j| x[j] != 0.0 || w[self.control_nodes[j]].abs() > 0.9 * alpha)
                    .collect();
                for (&j, &k) in working.iter().zip(&keep) {
                    in_working[j] = k;
                }
                let mut it = keep.iter();
                working.retain(|_| *it.next().unwrap());
                gram.retain(&keep);
            }
            if iterations >= opts.max_iterations && gap > tol * (1.0 + primal) {
                return Err(Error::numerical("FISTA", iterations, gap));
            }
        }

        let mut sol = self.finish(reg, x, y, w);
        let cert = sol.dual_certificate();
        sol.optimality_residual = ((cert - alpha) / alpha).max(0.0);
        sol.duality_gap = Some(gap);
        sol.initial_duality_gap = Some(initial_gap);
        sol.iterations = iterations;
        Ok(sol)
    }

    /// Adds atoms `new` to a Gram matrix currently indexed by `old`. Entries
    /// `<S e_i, S e_j>_{L2(omega_o)}` are read off `S C^* C S e_j` at the
    /// control nodes, so no state columns are kept.
    fn extend_gram(&self, gram: &mut Gram, old: &[usize], new: &[usize]) -> Result<()> {
        const BATCH: usize = 32;
        let nf = self.solver.num_free();
        let all: Vec<usize> = old.iter().chain(new).copied().collect();
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(new.len());
        for chunk in new.chunks(BATCH) {
            let k = chunk.len();
            let mut buf = vec![0.0; nf * k];
            for (c, &j) in chunk.iter().enumerate() {
                let load = self.control_load(RegularizerKind::MeasureNorm, &unit(self.num_controls(), j));
                buf[c * nf..(c + 1) * nf].copy_from_slice(&self.solver.restrict(&load));
            }
            self.solver.solve_free_many(&mut buf, k)?;
            let mut second = vec![0.0; nf * k];
            for c in 0..k {
                let state = self.solver.extend(&buf[c * nf..(c + 1) * nf]);
                let load = self.obs_mass.apply(&state);
                second[c * nf..(c + 1) * nf].copy_from_slice(&self.solver.restrict(&load));
            }
            self.solver.solve_free_many(&mut second, k)?;
            for c in 0..k {
                let full = self.solver.extend(&second[c * nf..(c + 1) * nf]);
                columns.push(all.iter().map(|&i| full[self.control_nodes[i]]).collect());
            }
        }
        for (pos, col) in columns.into_iter().enumerate() {
            let m = old.len() + pos + 1;
            gram.push(col[..m].to_vec());
        }
        Ok(())
    }

    /// Duality gap and primal value of the measure problem, with the dual
    /// candidate `kappa (g - y)` scaled into the feasible set.
    fn sparse_gap(&self, alpha: f64, x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
        let r2 = self.observation_norm_sq(&self.residual(y));
        let w_c = self.restrict(w);
        lasso_gap(alpha, x, &w_c, r2)
    }
}

/// Dense symmetric matrix grown one row and column at a time.
#[derive(Debug, Default, Clone)]
struct Gram {
    rows: Vec<Vec<f64>>,
}

impl Gram {
    fn len(&self) -> usize {
        self.rows.len()
    }

    /// `row` holds the new entries against all existing atoms, then the
    /// diagonal.
    fn push(&mut self, row: Vec<f64>) {
        for (r, &v) in self.rows.iter_mut().zip(&row) {
            r.push(v);
        }
        self.rows.push(row);
    }

    fn retain(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.rows.retain(|_| *it.next().unwrap());
        for r in &mut self.rows {
            let mut it = keep.iter();
            r.retain(|_| *it.next().unwrap());
        }
    }

    /// `G x`, summing rows over the nonzeros of `x` (symmetry).
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len()];
        for (r, &c) in self.rows.iter().zip(x) {
            if c != 0.0 {
                out.iter_mut().zip(r).for_each(|(o, g)| *o += c * g);
            }
        }
        out
    }
}

/// `(gap, primal)` for `min 1/2 |r|^2 + alpha |x|_1` given the residual norm
/// `r2 = |g - K x|^2` and `w = K^*(g - K x)`.
fn lasso_gap(alpha: f64, x: &[f64], w: &[f64], r2: f64) -> (f64, f64) {
    let tv: f64 = x.iter().map(|v| v.abs()).sum();
    let w_max = w.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    let kappa = if w_max > alpha { alpha / w_max } else { 1.0 };
    let pairing: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    let primal = 0.5 * r2 + alpha * tv;
    let gap = 0.5 * (1.0 - kappa).powi(2) * r2 + alpha * tv - kappa * pairing;
    (gap.max(0.0), primal)
}

/// FISTA with gradient restart on `1/2 x^T G x - b^T x + 1/2 |g|^2 + alpha |x|_1`.
fn reduced_lasso(
    gram: &Gram,
    b: &[f64],
    g_norm_sq: f64,
    alpha: f64,
    mut x: Vec<f64>,
    tol: f64,
    max_iterations: usize,
) -> Result<(Vec<f64>, usize)> {
    let k = gram.len();
    if k == 0 {
        return Ok((x, 0));
    }
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(p, q)| p * q).sum::<f64>();
    let smooth = |x: &[f64], gx: &[f64]| 0.5 * dot(x, gx) - dot(b, x) + 0.5 * g_norm_sq;
    let eval = |x: &[f64]| -> (f64, f64) {
        let gx = gram.apply(x);
        let w: Vec<f64> = b.iter().zip(&gx).map(|(bi, gi)| bi - gi).collect();
        let r2 = (2.0 * smooth(x, &gx)).max(0.0);
        let (gap, primal) = lasso_gap(alpha, x, &w, r2);
        (gap, primal)
    };

    // Step size from 20 power iterations, inflated by 5%.
    let mut v: Vec<f64> = (0..k).map(|j| 1.0 + 0.1 * ((j * 7919) % 13) as f64 / 13.0).collect();
    let mut lipschitz = 0.0;
    for _ in 0..20 {
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|c| *c /= norm);
        let gv = gram.apply(&v);
        lipschitz = dot(&v, &gv);
        v = gv;
    }
    if !(lipschitz > 0.0) {
        return Err(Error::numerical("power iteration", 20, lipschitz));
    }
    lipschitz *= 1.05;

    let (mut gap, mut primal) = eval(&x);
    let mut x_prev = x.clone();
    let mut t_k: f64 = 1.0;
    let mut iterations = 0;
    let mut last_pattern: Vec<i8> = Vec::new();
    let mut next_search = 200;
    while gap > tol * (1.0 + primal) && iterations < max_iterations {
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
        let beta = (t_k - 1.0) / t_next;
        let z: Vec<f64> = x.iter().zip(&x_prev).map(|(a, p)| a + beta * (a - p)).collect();
        let gz = gram.apply(&z);
        let grad: Vec<f64> = gz.iter().zip(b).map(|(gi, bi)| gi - bi).collect();
        let f_z = smooth(&z, &gz);
        // Backtrack in case the power-iteration estimate undershoots.
        let (x_new, gx_new) = loop {
            let step = 1.0 / lipschitz;
            let cand: Vec<f64> = z
                .iter()
                .zip(&grad)
                .map(|(zi, gi)| soft_threshold(zi - step * gi, alpha * step))
                .collect();
            let gc = gram.apply(&cand);
            let diff: Vec<f64> = cand.iter().zip(&z).map(|(a, c)| a - c).collect();
            let bound = f_z + dot(&grad, &diff) + 0.5 * lipschitz * dot(&diff, &diff);
            if smooth(&cand, &gc) <= bound + 1e-15 * (1.0 + f_z.abs()) {
                break (cand, gc);
            }
            lipschitz *= 2.0;
        };
        let uphill: f64 = z
            .iter()
            .zip(&x_new)
            .zip(&x)
            .map(|((zi, xn), xo)| (zi - xn) * (xn - xo))
            .sum();
        x_prev = std::mem::replace(&mut x, x_new);
        t_k = if uphill > 0.0 { 1.0 } else { t_next };
        iterations += 1;
        let w: Vec<f64> = b.iter().zip(&gx_new).map(|(bi, gi)| bi - gi).collect();
        (gap, primal) = lasso_gap(alpha, &x, &w, (2.0 * smooth(&x, &gx_new)).max(0.0));

        if iterations % 25 == 0 && gap > tol * (1.0 + primal) {
            let pattern: Vec<i8> = x.iter().map(|&c| (c > 0.0) as i8 - (c < 0.0) as i8).collect();
            let mut candidate = None;
            if pattern == last_pattern {
                candidate = polish_support(gram, b, alpha, &pattern);
            }
            if candidate.is_none() && iterations >= next_search {
                candidate = feature_sign(gram, b, alpha, &x, 4 * k + 100);
                next_search = 2 * iterations;
            }
            if let Some(polished) = candidate {
                let (p_gap, p_primal) = eval(&polished);
                if p_gap < gap {
                    x_prev = polished.clone();
                    x = polished;
                    (gap, primal) = (p_gap, p_primal);
                    t_k = 1.0;
                }
            }
            last_pattern = pattern;
        }
    }
    Ok((x, iterations))
}

/// Solves `G_AA x_A = b_A - alpha s_A` on the support `A` of the sign
/// pattern `s`; `None` if the system is singular or the signs change.
fn polish_support(gram: &Gram, b: &[f64], alpha: f64, pattern: &[i8]) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..pattern.len()).filter(|&j| pattern[j] != 0).collect();
    let m = support.len();
    if m == 0 {
        return None;
    }
    let a = faer::Mat::<f64>::from_fn(m, m, |i, j| gram.rows[support[i]][support[j]]);
    let llt = a.llt(faer::Side::Lower).ok()?;
    let mut rhs: Vec<f64> = support.iter().map(|&j| b[j] - alpha * pattern[j] as f64).collect();
    llt.solve_in_place(faer::MatMut::from_column_major_slice_mut(&mut rhs, m, 1));
    let mut x = vec![0.0; pattern.len()];
    for (&j, &v) in support.iter().zip(&rhs) {
        if !v.is_finite() || (v > 0.0) != (pattern[j] > 0) || v == 0.0 {
            return None;
        }
        x[j] = v;
    }
    Some(x)
}

/// Feature-sign search: activates the worst violator of `|grad_j| <= alpha`
/// among the zero coefficients, then alternates sign-consistent Newton steps
/// with a line search over zero crossings until the signs settle. Exact up
/// to the Cholesky factorizations; `None` if one fails or the step budget
/// runs out.
fn feature_sign(gram: &Gram, b: &[f64], alpha: f64, x0: &[f64], max_steps: usize) -> Option<Vec<f64>> {
    let k = b.len();
    let objective = |x: &[f64]| {
        let gx = gram.apply(x);
        x.iter()
            .zip(&gx)
            .zip(b)
            .map(|((xi, gi), bi)| 0.5 * xi * gi - bi * xi + alpha * xi.abs())
            .sum::<f64>()
    };
    let mut x = x0.to_vec();
    let mut theta: Vec<i8> = x.iter().map(|&c| (c > 0.0) as i8 - (c < 0.0) as i8).collect();
    let mut value = objective(&x);
    let mut steps = 0;
    let mut activate = theta.iter().all(|&t| t == 0);
    loop {
        if activate {
            let gx = gram.apply(&x);
            let worst = (0..k)
                .filter(|&j| theta[j] == 0)
                .map(|j| (j, gx[j] - b[j]))
                .max_by(|a, c| a.1.abs().total_cmp(&c.1.abs()));
            match worst {
                Some((j, g)) if g.abs() > alpha * (1.0 + 1e-12) => theta[j] = if g > 0.0 { -1 } else { 1 },
                _ => return Some(x),
            }
        }
        steps += 1;
        if steps > max_steps {
            return None;
        }
        let active: Vec<usize> = (0..k).filter(|&j| theta[j] != 0).collect();
        let m = active.len();
        let a = faer::Mat::<f64>::from_fn(m, m, |i, j| gram.rows[active[i]][active[j]]);
        let llt = a.llt(faer::Side::Lower).ok()?;
        let mut rhs: Vec<f64> = active.iter().map(|&j| b[j] - alpha * theta[j] as f64).collect();
        llt.solve_in_place(faer::MatMut::from_column_major_slice_mut(&mut rhs, m, 1));
        if rhs.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut target = vec![0.0; k];
        for (&j, &v) in active.iter().zip(&rhs) {
            target[j] = v;
        }
        let mut best = (objective(&target), target.clone());
        for &j in &active {
            let (from, to) = (x[j], target[j]);
            if from != 0.0 && from * to < 0.0 {
                let t = from / (from - to);
                let mut p: Vec<f64> = x.iter().zip(&target).map(|(a, c)| a + t * (c - a)).collect();
                p[j] = 0.0;
                let v = objective(&p);
                if v < best.0 {
                    best = (v, p);
                }
            }
        }
        if best.0 > value + 1e-14 * value.abs().max(1e-300) {
            return None;
        }
        value = best.0;
        x = best.1;
        let consistent = active.iter().all(|&j| (x[j] > 0.0) == (theta[j] > 0) && x[j] != 0.0);
        theta = x.iter().map(|&c| (c > 0.0) as i8 - (c < 0.0) as i8).collect();
        activate = consistent;
    }
}

fn unit(n: usize, j: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[j] = 1.0;
    e
}

/// Proximal map of `t |.|`; returns exactly zero when `|x| <= t`.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Solves the Hilbert problem on `mesh` with nodal data `g_delta`.
pub fn solve_hilbert(mesh: &Arc<Mesh>, g_delta: &[f64], alpha: f64) -> Result<TikhonovSolution> {
    Problem::new(mesh.clone(), g_delta.to_vec())?.solve_hilbert(alpha, &SolverOptions::default())
}

pub fn solve_ivanov(mesh: &Arc<Mesh>, g_delta: &[f64], alpha: f64) -> Result<TikhonovSolution> {
    Problem::new(mesh.clone(), g_delta.to_vec())?.solve_ivanov(alpha, &SolverOptions::default())
}

pub fn solve_sparse(mesh: &Arc<Mesh>, g_delta: &[f64], alpha: f64) -> Result<TikhonovSolution> {
    Problem::new(mesh.clone(), g_delta.to_vec())?.solve_sparse(alpha, &SolverOptions::default())
}
