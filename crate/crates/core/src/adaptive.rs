//! Joint choice of regularization parameter and mesh: an outer loop over
//! `alpha_k = alpha_0 theta^k` stopped by the relaxed discrepancy principle,
//! and an inner loop refining by Dörfler marking until the estimated
//! discretization errors fall below `c1 delta` and `c2 delta^2`.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{self, EstimatorConstants, EstimatorReport};
use crate::fem::interpolate;
use crate::mesh::{Mesh, Point, Refinement};
use crate::tikhonov::{Problem, Regularizer, RegularizerKind, SolverOptions, TikhonovSolution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveConfig {
    pub tau_lower: f64,
    pub tau_upper: f64,
    pub c1: f64,
    pub c2: f64,
    pub alpha0: f64,
    pub theta: f64,
    pub theta_mark: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Inner refinement stops with a failure once a mesh exceeds this size.
    pub max_vertices: usize,
    pub delta: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            tau_lower: 1.5,
            tau_upper: 2.0,
            c1: 0.4,
            c2: 0.5,
            alpha0: 1e-2,
            theta: 0.6,
            theta_mark: 0.5,
            max_outer: 30,
            max_inner: 100,
            max_vertices: 100_000,
            delta: 1e-2,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        let lower_min = (1.0 + 2.0 * self.c2).sqrt().max(1.0 + self.c1);
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::invalid(format!("c1 and c2 must be positive, got {} and {}", self.c1, self.c2)));
        }
        if !(self.tau_lower >= lower_min) {
            return Err(Error::invalid(format!(
                "tau_lower = {} must be at least max(sqrt(1 + 2 c2), 1 + c1) = {lower_min}",
                self.tau_lower
            )));
        }
        if !(self.tau_upper > self.tau_lower) {
            return Err(Error::invalid(format!(
                "tau_upper = {} must exceed tau_lower = {}",
                self.tau_upper, self.tau_lower
            )));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::invalid(format!("theta must lie in (0, 1), got {}", self.theta)));
        }
        if !(self.theta_mark > 0.0 && self.theta_mark <= 1.0) {
            return Err(Error::invalid(format!("theta_mark must lie in (0, 1], got {}", self.theta_mark)));
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::invalid(format!("alpha0 must be positive, got {}", self.alpha0)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid(format!("delta must be positive, got {}", self.delta)));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::invalid("max_outer and max_inner must be positive"));
        }
        Ok(())
    }

    /// `alpha_0 theta^k`.
    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha0 * self.theta.powi(k as i32)
    }
}

/// Smallest set of elements, taken greedily by decreasing indicator with ties
/// going to the lower id, whose squared indicators sum to at least
/// `theta_mark^2` times the total.
pub fn dorfler_mark(indicators: &[f64], theta_mark: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..indicators.len()).filter(|&i| indicators[i] > 0.0).collect();
    order.sort_by(|&a, &b| indicators[b].total_cmp(&indicators[a]).then(a.cmp(&b)));
    if theta_mark >= 1.0 {
        return order;
    }
    let total: f64 = order.iter().map(|&i| indicators[i].powi(2)).sum();
    // A few ulps of slack keep exact ties such as 16 >= 0.8^2 * 25 intact.
    let target = theta_mark * theta_mark * total * (1.0 - 4.0 * f64::EPSILON);
    let mut sum = 0.0;
    let mut count = 0;
    for &i in &order {
        if sum >= target {
            break;
        }
        sum += indicators[i].powi(2);
        count += 1;
    }
    order.truncate(count);
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveStatus {
    /// The final record satisfies all three stopping conditions.
    Converged,
    /// The discrepancy fell below `tau_lower delta`; alpha is not increased.
    Overshoot,
    MaxOuter,
    MaxInner,
    MeshLimit,
    SolverFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveRecord {
    pub k: usize,
    pub alpha: f64,
    pub inner: usize,
    pub ndof: usize,
    pub num_triangles: usize,
    pub h_min: f64,
    pub h_max: f64,
    pub discrepancy: f64,
    pub residual_bound: f64,
    pub functional_bound: f64,
    pub discrepancy_gap: f64,
    pub eta_w: f64,
    pub eta_y: f64,
    pub eta_kappa: Option<f64>,
    pub j_value: f64,
    /// Both accuracy conditions hold on this mesh.
    pub inner_accepted: bool,
    /// Accuracy conditions and the discrepancy bracket all hold.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveTrace {
    pub config: AdaptiveConfig,
    pub kind: RegularizerKind,
    pub status: AdaptiveStatus,
    pub records: Vec<AdaptiveRecord>,
    /// Set when a solve failed.
    pub message: Option<String>,
}

/// Final solution and report of an adaptive run alongside its trace.
#[derive(Debug, Clone)]
pub struct AdaptiveRun {
    pub trace: AdaptiveTrace,
    pub solution: Option<TikhonovSolution>,
    pub report: Option<EstimatorReport>,
}

pub const TRACE_CSV_HEADER: &str =
    "k,alpha,inner,ndof,h_min,h_max,discrepancy,residual_bound,functional_bound,discrepancy_gap,eta_w,eta_y,eta_kappa,accepted";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl AdaptiveTrace {
    pub fn final_record(&self) -> Option<&AdaptiveRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TRACE_CSV_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:e},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{}",
                r.k,
                r.alpha,
                r.inner,
                r.ndof,
                r.h_min,
                r.h_max,
                r.discrepancy,
                r.residual_bound,
                r.functional_bound,
                r.discrepancy_gap,
                r.eta_w,
                r.eta_y,
                opt(r.eta_kappa),
                r.accepted
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Moves control coefficients onto the control nodes of a refined mesh:
/// atoms keep their vertex, functions are interpolated.
pub fn transfer_control(kind: RegularizerKind, full: &[f64], refinement: &Refinement) -> Vec<f64> {
    match kind {
        RegularizerKind::MeasureNorm => {
            let mut fine = full.to_vec();
            fine.resize(refinement.mesh.num_vertices(), 0.0);
            fine
        }
        _ => refinement.prolongate(full),
    }
}

/// Runs the adaptive loop from `mesh0`. The data on each mesh is the nodal
/// interpolant of `exact` plus `perturbation`, a nodal vector on `mesh0`
/// carried along by interpolation.
pub fn run_adaptive(
    config: &AdaptiveConfig,
    constants: &EstimatorConstants,
    mesh0: Mesh,
    kind: RegularizerKind,
    exact: &dyn Fn(Point) -> f64,
    perturbation: &[f64],
) -> Result<AdaptiveRun> {
    config.validate()?;
    constants.validate()?;
    if perturbation.len() != mesh0.num_vertices() {
        return Err(Error::invalid("perturbation length differs from the vertex count"));
    }
    let delta = config.delta;
    let mut trace = AdaptiveTrace {
        config: *config,
        kind,
        status: AdaptiveStatus::MaxOuter,
        records: Vec::new(),
        message: None,
    };
    let mut mesh = Arc::new(mesh0);
    let mut noise = perturbation.to_vec();
    // Control over all vertices of the current mesh, for warm starts.
    let mut warm: Option<Vec<f64>> = None;
    let mut last: Option<(TikhonovSolution, EstimatorReport)> = None;
    let finish = |mut trace: AdaptiveTrace, status, last: Option<(TikhonovSolution, EstimatorReport)>| {
        trace.status = status;
        let (solution, report) = last.map_or((None, None), |(s, r)| (Some(s), Some(r)));
        Ok(AdaptiveRun { trace, solution, report })
    };

    for k in 0..config.max_outer {
        let alpha = config.alpha(k);
        let reg = Regularizer::new(kind, alpha)?;
        let mut inner = 0;
        loop {
            let g: Vec<f64> = interpolate(&mesh, exact).iter().zip(&noise).map(|(a, b)| a + b).collect();
            let problem = Problem::new(mesh.clone(), g)?;
            let opts = SolverOptions {
                warm_start: warm.as_ref().map(|w| problem.restrict(w)),
                ..Default::default()
            };
            let solution = match problem.solve(reg, &opts) {
                Ok(s) => s,
                Err(e @ Error::NumericalFailure { .. }) => {
                    trace.message = Some(e.to_string());
                    return finish(trace, AdaptiveStatus::SolverFailure, last);
                }
                Err(e) => return Err(e),
            };
            let report = estimators::report(&solution, constants)?;
            let inner_ok = report.discrepancy_gap_bound <= config.c1 * delta && report.functional_bound <= config.c2 * delta * delta;
            let d = solution.discrepancy;
            trace.records.push(AdaptiveRecord {
                k,
                alpha,
                inner,
                ndof: problem.solver().num_free(),
                num_triangles: mesh.num_triangles(),
                h_min: mesh.h_min(),
                h_max: mesh.h_max(),
                discrepancy: d,
                residual_bound: report.residual_bound,
                functional_bound: report.functional_bound,
                discrepancy_gap: report.discrepancy_gap_bound,
                eta_w: report.eta_w,
                eta_y: report.eta_y,
                eta_kappa: report.eta_kappa,
                j_value: solution.j_value,
                inner_accepted: inner_ok,
                accepted: inner_ok && d >= config.tau_lower * delta && d <= config.tau_upper * delta,
            });
            warm = Some(solution.control_full());
            let marked = dorfler_mark(&report.indicators, config.theta_mark);
            last = Some((solution, report));
            if inner_ok {
                break;
            }
            inner += 1;
            if inner >= config.max_inner {
                return finish(trace, AdaptiveStatus::MaxInner, last);
            }
            if marked.is_empty() {
                return finish(trace, AdaptiveStatus::MaxInner, last);
            }
            let refinement = mesh.refine(&marked)?;
            if refinement.mesh.num_vertices() > config.max_vertices {
                return finish(trace, AdaptiveStatus::MeshLimit, last);
            }
            noise = refinement.prolongate(&noise);
            warm = warm.map(|w| transfer_control(kind, &w, &refinement));
            mesh = Arc::new(refinement.mesh);
        }
        let d = last.as_ref().map(|(s, _)| s.discrepancy).unwrap_or(f64::INFINITY);
        if d < config.tau_lower * delta {
            return finish(trace, AdaptiveStatus::Overshoot, last);
        }
        if d <= config.tau_upper * delta {
            return finish(trace, AdaptiveStatus::Converged, last);
        }
    }
    finish(trace, AdaptiveStatus::MaxOuter, last)
}
