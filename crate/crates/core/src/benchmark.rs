//! Ring-source test problem on the unit disk with a closed-form minimizer,
//! plus the convergence studies built on it.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adaptive::{dorfler_mark, run_adaptive, transfer_control, AdaptiveConfig, AdaptiveStatus, AdaptiveTrace};
use crate::error::{Error, Result};
use crate::estimators::{calibrate, sparse_report, Calibration, EstimatorConstants};
use crate::fem::{interpolate, masked_l2_norm};
use crate::mesh::{make_disk_mesh, Mesh, Point, Refinement};
use crate::tikhonov::{Problem, Regularizer, RegularizerKind, SolverOptions, TikhonovSolution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingBenchmark {
    pub rho: f64,
    pub alpha: f64,
    pub delta: f64,
    pub seed: u64,
}

impl Default for RingBenchmark {
    fn default() -> Self {
        Self {
            rho: 0.5,
            alpha: 1e-2,
            delta: 0.0,
            seed: 0,
        }
    }
}

impl RingBenchmark {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::invalid(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::invalid(format!("delta must be nonnegative, got {}", self.delta)));
        }
        Ok(())
    }

    pub fn state(&self, p: Point) -> f64 {
        exact_state(self.rho, p)
    }

    pub fn data(&self, p: Point) -> f64 {
        exact_data(self.rho, self.alpha, p)
    }
}

/// `y(x) = -(1/2 pi) ln max(rho, |x|)`, the potential of the ring source.
pub fn exact_state(rho: f64, p: Point) -> f64 {
    -p[0].hypot(p[1]).max(rho).ln() / (2.0 * PI)
}

/// Total variation of the ring source `(1/(2 pi rho)) H^1` restricted to the
/// circle of radius `rho`: density times circumference, always 1.
pub fn exact_source_mass(_rho: f64) -> f64 {
    1.0
}

/// Signed line density of the ring source. Positive: outside the ring the
/// exact state is the potential of a unit point mass, so `-Δy = u` forces a
/// source of total mass +1.
pub fn exact_source_density(rho: f64) -> f64 {
    1.0 / (2.0 * PI * rho)
}

/// Radial profile added to the state to make the ring source the exact
/// minimizer.
pub fn phi(rho: f64, r: f64) -> f64 {
    if r < rho {
        6.0 * (3.0 * r - 2.0 * rho) / rho.powi(3)
    } else {
        6.0 * (3.0 * r * r - 2.0 * r * rho - 2.0 * r + rho) / ((rho - 1.0).powi(3) * r)
    }
}

/// `g(x) = y(x) + alpha phi(|x|)`.
pub fn exact_data(rho: f64, alpha: f64, p: Point) -> f64 {
    exact_state(rho, p) + alpha * phi(rho, p[0].hypot(p[1]))
}

/// Nodal Gaussian perturbation scaled to `||n||_{L2(omega_o)} = delta`.
pub fn noise(mesh: &Mesh, delta: f64, seed: u64) -> Result<Vec<f64>> {
    if !(delta >= 0.0) {
        return Err(Error::invalid(format!("delta must be nonnegative, got {delta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n: Vec<f64> = (0..mesh.num_vertices()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = masked_l2_norm(mesh, &n, &mesh.mask().in_omega_o);
    if !(norm > 0.0) {
        return Err(Error::invalid("observation region carries no L2 mass"));
    }
    n.iter_mut().for_each(|x| *x *= delta / norm);
    Ok(n)
}

/// `g + n` with `n` from [`noise`]; `delta = 0` returns `g` unchanged.
pub fn add_noise(mesh: &Mesh, g: &[f64], delta: f64, seed: u64) -> Result<Vec<f64>> {
    if g.len() != mesh.num_vertices() {
        return Err(Error::invalid("data length differs from vertex count"));
    }
    let n = noise(mesh, delta, seed)?;
    if delta == 0.0 {
        return Ok(g.to_vec());
    }
    Ok(g.iter().zip(&n).map(|(a, b)| a + b).collect())
}

/// Least-squares slope of `ln y` against `ln x`; `None` with fewer than two
/// usable points.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// How a rate study builds its mesh sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementStrategy {
    Uniform,
    /// Dörfler marking on the sparse report's indicators.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateStudyConfig {
    pub refinement: RefinementStrategy,
    pub levels: usize,
    pub n_boundary: usize,
    /// Uniform refinements of the initial disk mesh.
    pub initial_levels: usize,
    /// Extra uniform refinements of the finest level for the reference.
    pub reference_levels: usize,
    /// Factor by which the reference solve tightens the default tolerance.
    pub reference_tightening: f64,
    pub theta_mark: f64,
    /// Fit constants on the coarsest level against the reference.
    pub calibrate: bool,
    pub constants: EstimatorConstants,
    /// Vertex cap on the reference mesh; levels beyond it are dropped.
    pub max_vertices: usize,
}

impl Default for RateStudyConfig {
    fn default() -> Self {
        Self {
            refinement: RefinementStrategy::Uniform,
            levels: 4,
            n_boundary: 48,
            initial_levels: 1,
            reference_levels: 2,
            reference_tightening: 10.0,
            theta_mark: 0.5,
            calibrate: true,
            constants: EstimatorConstants::default(),
            max_vertices: 400_000,
        }
    }
}

impl RateStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 3 {
            return Err(Error::invalid(format!("a rate study needs at least 3 levels, got {}", self.levels)));
        }
        if self.n_boundary < 3 {
            return Err(Error::invalid("n_boundary must be at least 3"));
        }
        if !(self.reference_tightening >= 1.0) {
            return Err(Error::invalid("reference_tightening must be at least 1"));
        }
        if !(self.theta_mark > 0.0 && self.theta_mark <= 1.0) {
            return Err(Error::invalid("theta_mark must lie in (0, 1]"));
        }
        self.constants.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub level: usize,
    pub num_vertices: usize,
    pub ndof: usize,
    pub num_triangles: usize,
    pub h_max: f64,
    pub h_min: f64,
    pub atoms: usize,
    /// `||C(y_h - y_ref)||` on the reference mesh.
    pub true_error: f64,
    /// `|J_h(u_h, y_h) - J_ref|`.
    pub functional_error: f64,
    pub eta_w: f64,
    pub eta_y: f64,
    pub eta_w_inf: f64,
    pub eta_kappa: f64,
    pub residual_bound: f64,
    pub functional_bound: f64,
    pub discrepancy_gap: f64,
    /// `residual_bound / true_error^2`.
    pub effectivity: f64,
    pub seconds: f64,
}

/// Fitted log-log slopes against `h_max` (uniform) or `(area / N)^{1/2}`
/// (adaptive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSlopes {
    pub abscissa: String,
    pub true_error: Option<f64>,
    pub estimator: Option<f64>,
    pub functional_error: Option<f64>,
    pub functional_bound: Option<f64>,
    pub eta_y: Option<f64>,
    pub eta_w: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub benchmark: RingBenchmark,
    pub config: RateStudyConfig,
    pub rows: Vec<RateRow>,
    pub reference_vertices: usize,
    pub reference_j: f64,
    pub calibration: Option<Calibration>,
    pub slopes: RateSlopes,
    /// Set when the vertex cap removed requested levels.
    pub truncated: bool,
}

pub const RATE_CSV_HEADER: &str = "level,num_vertices,ndof,num_triangles,h_max,h_min,atoms,true_error,functional_error,eta_w,eta_y,eta_w_inf,eta_kappa,residual_bound,functional_bound,discrepancy_gap,effectivity,seconds";

fn slope_text(name: &str, s: Option<f64>) -> String {
    match s {
        Some(v) => format!("{name}={v:.4}"),
        None => format!("{name}=none"),
    }
}

impl RateSlopes {
    pub fn summary(&self) -> String {
        format!(
            "slopes vs {}: {} {} {} {}",
            self.abscissa,
            slope_text("true_error", self.true_error),
            slope_text("estimator", self.estimator),
            slope_text("functional_error", self.functional_error),
            slope_text("functional_bound", self.functional_bound),
        )
    }
}

impl RateTable {
    /// Rows in `RATE_CSV_HEADER` order, followed by one `#` line with the
    /// fitted slopes.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{RATE_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{:e},{:e},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:.3}",
                r.level,
                r.num_vertices,
                r.ndof,
                r.num_triangles,
                r.h_max,
                r.h_min,
                r.atoms,
                r.true_error,
                r.functional_error,
                r.eta_w,
                r.eta_y,
                r.eta_w_inf,
                r.eta_kappa,
                r.residual_bound,
                r.functional_bound,
                r.discrepancy_gap,
                r.effectivity,
                r.seconds
            )?;
        }
        writeln!(out, "# {}", self.slopes.summary())?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn fit_log(x: &[f64], y: &[f64]) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0 && b.is_finite()).map(|(a, b)| (*a, *b)).unzip();
    if xs.len() < x.len() {
        return None;
    }
    fit_slope(&xs, &ys)
}

/// Chains refinements so that nodal vectors on level `i` can be carried to
/// the reference mesh.
fn prolongate_chain(chain: &[Refinement], v: &[f64]) -> Vec<f64> {
    chain.iter().fold(v.to_vec(), |acc, r| r.prolongate(&acc))
}

fn reference_size(nv: usize, extra: usize) -> usize {
    (0..extra).fold(nv, |n, _| 4 * n)
}

/// Solves the noise-free ring benchmark on a sequence of nested meshes and
/// compares the estimators with errors measured against a fine reference.
pub fn rate_study(benchmark: &RingBenchmark, config: &RateStudyConfig) -> Result<RateTable> {
    benchmark.validate()?;
    config.validate()?;
    let kind = RegularizerKind::MeasureNorm;
    let data = |p: Point| benchmark.data(p);
    let mut meshes = vec![Arc::new(make_disk_mesh(config.n_boundary, 1.0, config.initial_levels)?)];
    let mut steps: Vec<Refinement> = Vec::new();
    let mut solutions: Vec<TikhonovSolution> = Vec::new();
    let mut seconds = Vec::new();
    let mut truncated = false;
    for level in 0..config.levels {
        let mesh = meshes[level].clone();
        if reference_size(mesh.num_vertices(), config.reference_levels) > config.max_vertices {
            truncated = true;
            meshes.pop();
            steps.pop();
            break;
        }
        let start = Instant::now();
        let problem = Problem::new(mesh.clone(), interpolate(&mesh, data))?;
        let warm = match (solutions.last(), steps.last()) {
            (Some(s), Some(r)) => Some(problem.restrict(&transfer_control(kind, &s.control_full(), r))),
            _ => None,
        };
        let solution = problem.solve_sparse(
            benchmark.alpha,
            &SolverOptions {
                warm_start: warm,
                ..Default::default()
            },
        )?;
        seconds.push(start.elapsed().as_secs_f64());
        if level + 1 < config.levels {
            let refinement = match config.refinement {
                RefinementStrategy::Uniform => mesh.refine_uniform(),
                RefinementStrategy::Adaptive => {
                    let rep = sparse_report(&solution, &config.constants)?;
                    mesh.refine(&dorfler_mark(&rep.indicators, config.theta_mark))?
                }
            };
            meshes.push(Arc::new(refinement.mesh.clone()));
            steps.push(refinement);
        }
        solutions.push(solution);
    }
    if solutions.len() < 2 {
        return Err(Error::invalid("vertex cap leaves fewer than two levels"));
    }
    let finest = meshes[solutions.len() - 1].clone();
    let mut tail: Vec<Refinement> = Vec::new();
    for _ in 0..config.reference_levels {
        let next = tail.last().map(|r| &r.mesh).unwrap_or(&finest).refine_uniform();
        tail.push(next);
    }
    let reference_mesh = Arc::new(tail.last().map(|r| r.mesh.clone()).unwrap_or_else(|| (*finest).clone()));
    let reference = Problem::new(reference_mesh.clone(), interpolate(&reference_mesh, data))?;
    let mut warm = solutions.last().unwrap().control_full();
    for r in &tail {
        warm = transfer_control(kind, &warm, r);
    }
    let ref_solution = reference.solve_sparse(
        benchmark.alpha,
        &SolverOptions {
            warm_start: Some(reference.restrict(&warm)),
            ..SolverOptions::tightened(kind, config.reference_tightening)
        },
    )?;
    let chain = |level: usize| -> Vec<Refinement> { steps[level..solutions.len() - 1].iter().chain(&tail).cloned().collect() };
    let calibration = if config.calibrate {
        let c = chain(0);
        Some(calibrate(&solutions[0], &reference, &|v: &[f64]| prolongate_chain(&c, v), &config.constants)?)
    } else {
        None
    };
    let constants = calibration.as_ref().map(|c| c.constants).unwrap_or(config.constants);
    let obs = &reference_mesh.mask().in_omega_o;
    let mut rows = Vec::with_capacity(solutions.len());
    for (level, solution) in solutions.iter().enumerate() {
        let rep = sparse_report(solution, &constants)?;
        let y_ref_mesh = prolongate_chain(&chain(level), &solution.y);
        let diff: Vec<f64> = y_ref_mesh.iter().zip(&ref_solution.y).map(|(a, b)| a - b).collect();
        let true_error = masked_l2_norm(&reference_mesh, &diff, obs);
        let mesh = &solution.mesh;
        rows.push(RateRow {
            level,
            num_vertices: mesh.num_vertices(),
            ndof: mesh.boundary_vertices().iter().filter(|b| !**b).count(),
            num_triangles: mesh.num_triangles(),
            h_max: mesh.h_max(),
            h_min: mesh.h_min(),
            atoms: solution.u.iter().filter(|v| **v != 0.0).count(),
            true_error,
            functional_error: (solution.j_value - ref_solution.j_value).abs(),
            eta_w: rep.eta_w,
            eta_y: rep.eta_y,
            eta_w_inf: rep.eta_w_inf.unwrap_or(0.0),
            eta_kappa: rep.eta_kappa.unwrap_or(0.0),
            residual_bound: rep.residual_bound,
            functional_bound: rep.functional_bound,
            discrepancy_gap: rep.discrepancy_gap_bound,
            effectivity: rep.residual_bound / (true_error * true_error),
            seconds: seconds[level],
        });
    }
    let (abscissa, x): (&str, Vec<f64>) = match config.refinement {
        RefinementStrategy::Uniform => ("h_max", rows.iter().map(|r| r.h_max).collect()),
        RefinementStrategy::Adaptive => (
            "mean_h",
            rows.iter().map(|r| (reference_mesh.total_area() / r.num_triangles as f64).sqrt()).collect(),
        ),
    };
    let col = |f: fn(&RateRow) -> f64| fit_log(&x, &rows.iter().map(f).collect::<Vec<_>>());
    let slopes = RateSlopes {
        abscissa: abscissa.to_string(),
        true_error: col(|r| r.true_error),
        estimator: col(|r| r.residual_bound.sqrt()),
        functional_error: col(|r| r.functional_error),
        functional_bound: col(|r| r.functional_bound),
        eta_y: col(|r| r.eta_y),
        eta_w: col(|r| r.eta_w),
    };
    Ok(RateTable {
        benchmark: *benchmark,
        config: config.clone(),
        rows,
        reference_vertices: reference_mesh.num_vertices(),
        reference_j: ref_solution.j_value,
        calibration,
        slopes,
        truncated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeltaStudyConfig {
    pub deltas: Vec<f64>,
    pub kind: RegularizerKind,
    pub rho: f64,
    pub seed: u64,
    pub n_boundary: usize,
    pub initial_levels: usize,
    /// `delta` is overwritten per row.
    pub adaptive: AdaptiveConfig,
    pub constants: EstimatorConstants,
    /// Fit the constants once on the initial mesh at `alpha0` against this
    /// many uniform refinements; 0 keeps `constants` as given.
    pub calibration_levels: usize,
}

impl Default for DeltaStudyConfig {
    fn default() -> Self {
        Self {
            deltas: vec![4e-2, 2e-2, 1e-2, 5e-3],
            kind: RegularizerKind::MeasureNorm,
            rho: 0.5,
            seed: 0,
            n_boundary: 48,
            initial_levels: 1,
            adaptive: AdaptiveConfig::default(),
            constants: EstimatorConstants::default(),
            calibration_levels: 3,
        }
    }
}

impl DeltaStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() {
            return Err(Error::invalid("delta list is empty"));
        }
        if self.deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::invalid("every delta must be positive"));
        }
        if self.deltas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("deltas must be strictly decreasing"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::invalid(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if self.n_boundary < 3 {
            return Err(Error::invalid("n_boundary must be at least 3"));
        }
        self.adaptive.validate()?;
        self.constants.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub delta: f64,
    pub status: AdaptiveStatus,
    /// Converged with the discrepancy inside `[tau_lower delta, tau_upper delta]`.
    pub accepted: bool,
    pub alpha: Option<f64>,
    pub discrepancy: Option<f64>,
    pub j_value: Option<f64>,
    pub ndof: Option<usize>,
    pub outer_steps: usize,
    pub solves: usize,
    pub message: Option<String>,
    pub seconds: f64,
    /// Full run log; absent when the run returned an error.
    pub trace: Option<AdaptiveTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub config: DeltaStudyConfig,
    pub calibration: Option<Calibration>,
    pub rows: Vec<DeltaRow>,
    /// Log-log slope of the final discrepancy over the accepted rows.
    pub discrepancy_slope: Option<f64>,
    pub alpha_slope: Option<f64>,
}

pub const DELTA_CSV_HEADER: &str = "delta,status,accepted,alpha,discrepancy,j_value,ndof,outer_steps,solves,seconds";

impl DeltaTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{DELTA_CSV_HEADER}")?;
        let num = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for r in &self.rows {
            let status = serde_json::to_value(r.status)?;
            writeln!(
                out,
                "{:e},{},{},{},{},{},{},{},{},{:.3}",
                r.delta,
                status.as_str().unwrap_or_default(),
                r.accepted,
                num(r.alpha),
                num(r.discrepancy),
                num(r.j_value),
                r.ndof.map(|n| n.to_string()).unwrap_or_default(),
                r.outer_steps,
                r.solves,
                r.seconds
            )?;
        }
        if let Some(s) = self.discrepancy_slope {
            writeln!(out, "# slope discrepancy vs delta={s:.4}")?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Calibrates the estimator constants for a solve on `mesh` with data
/// `exact + perturbation` against `levels` uniform refinements. The
/// perturbation is carried to the reference by nodal interpolation.
pub fn calibrate_on(
    mesh: &Mesh,
    exact: &dyn Fn(&Mesh) -> Vec<f64>,
    perturbation: &[f64],
    regularizer: Regularizer,
    levels: usize,
    base: &EstimatorConstants,
) -> Result<Calibration> {
    let coarse = Arc::new(mesh.clone());
    let data: Vec<f64> = exact(&coarse).iter().zip(perturbation).map(|(a, b)| a + b).collect();
    let solution = Problem::new(coarse.clone(), data)?.solve(regularizer, &SolverOptions::default())?;
    let mut chain: Vec<Refinement> = Vec::with_capacity(levels);
    for _ in 0..levels {
        let next = chain.last().map(|r| &r.mesh).unwrap_or(mesh).refine_uniform();
        chain.push(next);
    }
    let fine = Arc::new(chain.last().map(|r| r.mesh.clone()).unwrap_or_else(|| mesh.clone()));
    let noise_fine = prolongate_chain(&chain, perturbation);
    let data_fine: Vec<f64> = exact(&fine).iter().zip(&noise_fine).map(|(a, b)| a + b).collect();
    let reference = Problem::new(fine, data_fine)?;
    calibrate(&solution, &reference, &|v: &[f64]| prolongate_chain(&chain, v), base)
}

/// Runs the adaptive discrepancy-principle loop for each noise level with
/// `g = y†` as exact data. A failing row is recorded and the study continues.
pub fn delta_study(config: &DeltaStudyConfig) -> Result<DeltaTable> {
    config.validate()?;
    let mesh0 = make_disk_mesh(config.n_boundary, 1.0, config.initial_levels)?;
    let rho = config.rho;
    let exact = move |p: Point| exact_state(rho, p);
    let calibration = if config.calibration_levels > 0 {
        let perturbation = noise(&mesh0, config.deltas[0], config.seed)?;
        Some(calibrate_on(
            &mesh0,
            &|m: &Mesh| interpolate(m, exact),
            &perturbation,
            Regularizer::new(config.kind, config.adaptive.alpha0)?,
            config.calibration_levels,
            &config.constants,
        )?)
    } else {
        None
    };
    let constants = calibration.as_ref().map(|c| c.constants).unwrap_or(config.constants);
    let mut rows = Vec::with_capacity(config.deltas.len());
    for &delta in &config.deltas {
        let start = Instant::now();
        let perturbation = noise(&mesh0, delta, config.seed)?;
        let adaptive = AdaptiveConfig {
            delta,
            ..config.adaptive.clone()
        };
        let row = match run_adaptive(&adaptive, &constants, mesh0.clone(), config.kind, &exact, &perturbation) {
            Ok(run) => {
                let trace = run.trace;
                let last = trace.final_record();
                let discrepancy = last.map(|r| r.discrepancy);
                let accepted = trace.status == AdaptiveStatus::Converged
                    && discrepancy.is_some_and(|d| d >= adaptive.tau_lower * delta && d <= adaptive.tau_upper * delta);
                DeltaRow {
                    delta,
                    status: trace.status,
                    accepted,
                    alpha: last.map(|r| r.alpha),
                    discrepancy,
                    j_value: last.map(|r| r.j_value),
                    ndof: last.map(|r| r.ndof),
                    outer_steps: trace.records.iter().map(|r| r.k + 1).max().unwrap_or(0),
                    solves: trace.records.len(),
                    message: trace.message.clone(),
                    seconds: start.elapsed().as_secs_f64(),
                    trace: Some(trace),
                }
            }
            Err(e) => DeltaRow {
                delta,
                status: AdaptiveStatus::SolverFailure,
                accepted: false,
                alpha: None,
                discrepancy: None,
                j_value: None,
                ndof: None,
                outer_steps: 0,
                solves: 0,
                message: Some(e.to_string()),
                seconds: start.elapsed().as_secs_f64(),
                trace: None,
            },
        };
        rows.push(row);
    }
    let accepted: Vec<&DeltaRow> = rows.iter().filter(|r| r.accepted).collect();
    let ds: Vec<f64> = accepted.iter().map(|r| r.delta).collect();
    let fit = |v: Vec<f64>| if ds.len() >= 2 { fit_log(&ds, &v) } else { None };
    let discrepancy_slope = fit(accepted.iter().filter_map(|r| r.discrepancy).collect());
    let alpha_slope = fit(accepted.iter().filter_map(|r| r.alpha).collect());
    Ok(DeltaTable {
        config: config.clone(),
        calibration,
        rows,
        discrepancy_slope,
        alpha_slope,
    })
}
