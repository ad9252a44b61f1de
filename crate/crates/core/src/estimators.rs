//! Functional a posteriori bounds for the discrete Tikhonov minimizers: the
//! residual-based estimators of the adjoint and state equations, the
//! regularizer-specific bounds they feed, and the admissibility test for the
//! constants `(sigma, gamma)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{element_l2_sq, local, masked_l2_inner, masked_l2_norm};
use crate::mesh::{edge_jump_normal_gradient, Mesh};
use crate::tikhonov::{Problem, Regularizer, RegularizerKind, TikhonovSolution};

/// Constants of the interpolation, stability and pointwise estimates plus the
/// splitting parameters `(sigma, gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConstants {
    pub c_i: f64,
    pub c_s: f64,
    pub c_dirac: f64,
    pub c_inf: f64,
    pub sigma: f64,
    pub gamma: f64,
}

impl Default for EstimatorConstants {
    fn default() -> Self {
        Self {
            c_i: 1.0,
            c_s: 1.0,
            c_dirac: 1.0,
            c_inf: 1.0,
            sigma: 4.0,
            gamma: 2.0,
        }
    }
}

impl EstimatorConstants {
    /// `c_T = c_I c_S`.
    pub fn c_t(&self) -> f64 {
        self.c_i * self.c_s
    }

    /// `c_3 = c_dirac c_I c_S`.
    pub fn c_3(&self) -> f64 {
        self.c_dirac * self.c_i * self.c_s
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_i", self.c_i),
            ("c_s", self.c_s),
            ("c_dirac", self.c_dirac),
            ("c_inf", self.c_inf),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !sigma_gamma_check(self.sigma, self.gamma) {
            return Err(Error::invalid(format!(
                "(sigma, gamma) = ({}, {}) is not admissible",
                self.sigma, self.gamma
            )));
        }
        Ok(())
    }
}

/// Whether `a + b^2 <= c + d^2` implies `a + (b + d)^2 <= gamma c + sigma d^2`
/// for all `a, b, c, d >= 0`. Equivalent to
/// `2z <= (gamma - 1)((z + 1)^2 - 1) + sigma - 4` for all `z >= 0`, which is
/// decided in closed form.
pub fn sigma_gamma_check(sigma: f64, gamma: f64) -> bool {
    if !(sigma.is_finite() && gamma.is_finite()) || sigma < 4.0 || gamma <= 1.0 {
        return false;
    }
    // Quadratic (gamma - 1) z^2 + 2 (gamma - 2) z + sigma - 4, minimized at
    // z = (2 - gamma) / (gamma - 1) when gamma < 2.
    gamma >= 2.0 || (gamma - 1.0) * (sigma - 4.0) >= (2.0 - gamma).powi(2)
}

/// The sufficient condition as usually stated: `sigma = 4, gamma >= 2` or
/// `sigma > 4, gamma > 2 sigma / (sigma + sqrt(sigma^2 - 4 sigma))`. It
/// differs from [`sigma_gamma_check`] only on the boundary curve, where the
/// implication still holds.
pub fn classical_condition(sigma: f64, gamma: f64) -> bool {
    if sigma == 4.0 {
        gamma >= 2.0
    } else if sigma > 4.0 {
        gamma > 2.0 * sigma / (sigma + (sigma * sigma - 4.0 * sigma).sqrt())
    } else {
        false
    }
}

/// Result of probing the implication behind [`sigma_gamma_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaOutcome {
    pub sigma: f64,
    pub gamma: f64,
    pub check: bool,
    pub samples: usize,
    pub violations: usize,
    /// First violating `(a, b, c, d)`, if any.
    pub counterexample: Option<[f64; 4]>,
}

impl LemmaOutcome {
    /// The check and the probe agree: no violation when the check holds, a
    /// counterexample when it fails.
    pub fn consistent(&self) -> bool {
        if self.check {
            self.violations == 0
        } else {
            self.counterexample.is_some()
        }
    }
}

fn implication_violated(sigma: f64, gamma: f64, [a, b, c, d]: [f64; 4]) -> bool {
    let lhs = a + (b + d).powi(2);
    let rhs = gamma * c + sigma * d * d;
    lhs > rhs + 1e-12 * (lhs.abs() + rhs.abs())
}

/// Randomized test of the implication on `samples` points satisfying the
/// hypothesis, followed by a guided search along the extremal family
/// `d = 1, b = 1 + z, c = b^2 - 1, a = 0`.
pub fn implication_test(sigma: f64, gamma: f64, samples: usize, seed: u64) -> LemmaOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcome = LemmaOutcome {
        sigma,
        gamma,
        check: sigma_gamma_check(sigma, gamma),
        samples: 0,
        violations: 0,
        counterexample: None,
    };
    let record = |p: [f64; 4], outcome: &mut LemmaOutcome| {
        outcome.samples += 1;
        if implication_violated(sigma, gamma, p) {
            outcome.violations += 1;
            outcome.counterexample.get_or_insert(p);
        }
    };
    for _ in 0..samples {
        let d: f64 = rng.random();
        let ratio: f64 = if rng.random_bool(0.5) {
            2.0 * rng.random::<f64>()
        } else {
            1.0 + 10f64.powf(rng.random_range(-3.0..2.0))
        };
        let b = ratio * d;
        let slack = if rng.random_bool(0.5) { 0.0 } else { rng.random::<f64>() };
        let c = (b * b - d * d).max(0.0) + slack;
        let room = c + d * d - b * b;
        let a = if rng.random_bool(0.5) { room } else { room * rng.random::<f64>() };
        record([a.max(0.0), b, c, d], &mut outcome);
    }
    let mut zs: Vec<f64> = (0..=400).map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 400.0)).collect();
    zs.push(0.0);
    if gamma > 1.0 && gamma < 2.0 {
        zs.push((2.0 - gamma) / (gamma - 1.0));
    }
    for z in zs {
        let b = 1.0 + z;
        record([0.0, b, b * b - 1.0, 1.0], &mut outcome);
    }
    outcome
}

/// How the local contributions of a family combine into its total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sum,
    RootSumSquares,
    Max,
}

impl Aggregation {
    pub fn combine(self, local: &[f64]) -> f64 {
        match self {
            Aggregation::Sum => local.iter().sum(),
            Aggregation::RootSumSquares => local.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Aggregation::Max => local.iter().fold(0.0, |m: f64, &x| m.max(x)),
        }
    }
}

/// Per-element contributions of one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorFamily {
    pub name: String,
    pub aggregation: Aggregation,
    pub local: Vec<f64>,
    pub total: f64,
}

impl IndicatorFamily {
    fn new(name: &str, aggregation: Aggregation, local: Vec<f64>) -> Self {
        let total = aggregation.combine(&local);
        Self {
            name: name.to_string(),
            aggregation,
            local,
            total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub kind: RegularizerKind,
    pub alpha: f64,
    pub constants: EstimatorConstants,
    /// Marking indicator per element: root-sum-square of the family
    /// contributions, each divided by its family total.
    pub indicators: Vec<f64>,
    pub families: Vec<IndicatorFamily>,
    pub eta_w: f64,
    pub eta_y: f64,
    pub eta_w_inf: Option<f64>,
    pub eta_kappa: Option<f64>,
    pub kappa_lower: Option<f64>,
    pub rho_u_term: Option<f64>,
    pub bregman_term: Option<f64>,
    /// `||C y_h - g^delta||`.
    pub discrepancy: f64,
    pub residual_bound: f64,
    pub functional_bound: f64,
    pub discrepancy_gap_bound: f64,
}

impl EstimatorReport {
    pub fn family(&self, name: &str) -> Option<&IndicatorFamily> {
        self.families.iter().find(|f| f.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn combined_indicators(families: &[IndicatorFamily], n: usize) -> Vec<f64> {
    let mut sq = vec![0.0; n];
    for f in families.iter().filter(|f| f.total > 0.0) {
        for (s, l) in sq.iter_mut().zip(&f.local) {
            *s += (l / f.total).powi(2);
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Normal-gradient jumps per edge, zero on boundary edges.
fn edge_jumps(mesh: &Mesh, coeffs: &[f64]) -> Vec<f64> {
    (0..mesh.num_edges()).map(|e| edge_jump_normal_gradient(mesh, coeffs, e)).collect()
}

fn boundary_sum(mesh: &Mesh, t: usize, f: impl Fn(usize) -> f64) -> f64 {
    mesh.triangle_edges(t).iter().map(|&e| f(e)).sum()
}

fn boundary_max(mesh: &Mesh, t: usize, jumps: &[f64]) -> f64 {
    mesh.triangle_edges(t).iter().fold(0.0, |m: f64, &e| m.max(jumps[e].abs()))
}

fn difference(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `(sum_K h^4 ||f||^2_{L2(K)} + 1/2 h^3 ||[[grad v . nu]]||^2_{L2(dK)})^{1/2}`
/// per element, with `f` counted on masked elements only.
fn l2_residual_local(mesh: &Mesh, f: &[f64], mask: &[bool], jumps: &[f64]) -> Vec<f64> {
    (0..mesh.num_triangles())
        .map(|t| {
            let h = mesh.diameter(t);
            let vol = if mask[t] { element_l2_sq(mesh.area(t), local(mesh, t, f)) } else { 0.0 };
            let jump = boundary_sum(mesh, t, |e| jumps[e].powi(2) * mesh.edge_length(e));
            (h.powi(4) * vol + 0.5 * h.powi(3) * jump).sqrt()
        })
        .collect()
}

/// `(h^3 ||[[grad y . nu]]||^2_{L2(dK)})^{1/2}` per element, for Dirac data.
fn dirac_local(mesh: &Mesh, jumps: &[f64]) -> Vec<f64> {
    (0..mesh.num_triangles())
        .map(|t| {
            let jump = boundary_sum(mesh, t, |e| jumps[e].powi(2) * mesh.edge_length(e));
            (mesh.diameter(t).powi(3) * jump).sqrt()
        })
        .collect()
}

/// `|log h_min|^2 (h^2 ||chi_o (y - g)||_{L_inf(K)} + h ||[[grad w . nu]]||_{L_inf(dK)})`.
fn linf_local(mesh: &Mesh, misfit: &[f64], w_jumps: &[f64]) -> Vec<f64> {
    let log_factor = mesh.h_min().ln().powi(2);
    let obs = &mesh.mask().in_omega_o;
    (0..mesh.num_triangles())
        .map(|t| {
            let h = mesh.diameter(t);
            let vol = if obs[t] {
                local(mesh, t, misfit).iter().fold(0.0, |m: f64, v| m.max(v.abs()))
            } else {
                0.0
            };
            log_factor * (h * h * vol + h * boundary_max(mesh, t, w_jumps))
        })
        .collect()
}

/// `max |f|` over vertices of control elements.
fn control_sup(mesh: &Mesh, f: &[f64]) -> f64 {
    let ctrl = &mesh.mask().in_omega_c;
    (0..mesh.num_triangles())
        .filter(|&t| ctrl[t])
        .flat_map(|t| mesh.triangle(t))
        .fold(0.0, |m: f64, v| m.max(f[v].abs()))
}

type Bary = [f64; 3];

fn bary_eval(l: [f64; 3], p: Bary) -> f64 {
    l[0] * p[0] + l[1] * p[1] + l[2] * p[2]
}

/// Part of a convex polygon, given in barycentric coordinates, where the
/// affine function with vertex values `l` is nonnegative.
fn clip_nonnegative(poly: &[Bary], l: [f64; 3]) -> Vec<Bary> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for (i, &p) in poly.iter().enumerate() {
        let q = poly[(i + 1) % poly.len()];
        let (lp, lq) = (bary_eval(l, p), bary_eval(l, q));
        if lp >= 0.0 {
            out.push(p);
        }
        if (lp > 0.0 && lq < 0.0) || (lp < 0.0 && lq > 0.0) {
            let s = lp / (lp - lq);
            out.push([p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1]), p[2] + s * (q[2] - p[2])]);
        }
    }
    out
}

/// Integral over a polygon inside a triangle of area `area` of the affine
/// function with vertex values `f`.
fn polygon_integral(poly: &[Bary], f: [f64; 3], area: f64) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let p0 = poly[0];
    (1..poly.len() - 1)
        .map(|i| {
            let (p1, p2) = (poly[i], poly[i + 1]);
            let det = (p1[1] - p0[1]) * (p2[2] - p0[2]) - (p1[2] - p0[2]) * (p2[1] - p0[1]);
            area * det.abs() * (bary_eval(f, p0) + bary_eval(f, p1) + bary_eval(f, p2)) / 3.0
        })
        .sum()
}

fn polygon_abs_integral(poly: &[Bary], f: [f64; 3], area: f64) -> f64 {
    let neg = [-f[0], -f[1], -f[2]];
    polygon_integral(&clip_nonnegative(poly, f), f, area) + polygon_integral(&clip_nonnegative(poly, neg), neg, area)
}

const TRIANGLE: [Bary; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Exact `||f||_{L1(K)}` for an affine `f` with vertex values `f`.
pub fn element_l1(area: f64, f: [f64; 3]) -> f64 {
    polygon_abs_integral(&TRIANGLE, f, area)
}

/// Exact `||alpha u - sign(w)||_{L1(K)}` for affine `u` and `w`, with
/// `sign(0) = 0`.
pub fn element_sign_residual_l1(area: f64, alpha: f64, u: [f64; 3], w: [f64; 3]) -> f64 {
    let au = u.map(|x| alpha * x);
    if w.iter().all(|&x| x == 0.0) {
        return element_l1(area, au);
    }
    let pos = clip_nonnegative(&TRIANGLE, w);
    let neg = clip_nonnegative(&TRIANGLE, w.map(|x| -x));
    polygon_abs_integral(&pos, au.map(|x| x - 1.0), area) + polygon_abs_integral(&neg, au.map(|x| x + 1.0), area)
}

fn check_kind(solution: &TikhonovSolution, kind: RegularizerKind) -> Result<()> {
    if solution.kind() != kind {
        return Err(Error::invalid(format!(
            "{} report requested for a {} solution",
            kind.name(),
            solution.kind().name()
        )));
    }
    Ok(())
}

/// Elementwise `-chi_c u` part of the state residual together with the
/// jumps of `y`; the shared `eta_y` of the function-valued controls.
fn function_eta_y(solution: &TikhonovSolution) -> IndicatorFamily {
    let mesh = &solution.mesh;
    let jumps = edge_jumps(mesh, &solution.y);
    let local = l2_residual_local(mesh, &solution.control_full(), &mesh.mask().in_omega_c, &jumps);
    IndicatorFamily::new("eta_y", Aggregation::RootSumSquares, local)
}

/// Estimators for the quadratic penalty `alpha/2 ||u||^2_{L2(omega_c)}`.
pub fn hilbert_report(solution: &TikhonovSolution, constants: &EstimatorConstants) -> Result<EstimatorReport> {
    check_kind(solution, RegularizerKind::HilbertL2)?;
    constants.validate()?;
    let mesh = &solution.mesh;
    let alpha = solution.alpha();
    let misfit = difference(&solution.y, &solution.g);
    let w_jumps = edge_jumps(mesh, &solution.w);
    let eta_w = IndicatorFamily::new(
        "eta_w",
        Aggregation::RootSumSquares,
        l2_residual_local(mesh, &misfit, &mesh.mask().in_omega_o, &w_jumps),
    );
    let eta_y = function_eta_y(solution);
    let u = solution.control_full();
    let rho_u_full: Vec<f64> = u.iter().zip(&solution.w).map(|(a, b)| alpha * a - b).collect();
    let ctrl = &mesh.mask().in_omega_c;
    let rho_u = IndicatorFamily::new(
        "rho_u",
        Aggregation::RootSumSquares,
        (0..mesh.num_triangles())
            .map(|t| {
                if ctrl[t] {
                    element_l2_sq(mesh.area(t), local(mesh, t, &rho_u_full)).sqrt()
                } else {
                    0.0
                }
            })
            .collect(),
    );
    let c_t = constants.c_t();
    let r = solution.discrepancy;
    let w_part = c_t * eta_w.total + rho_u.total;
    let residual_bound = constants.gamma / alpha * w_part * w_part + constants.sigma * (c_t * eta_y.total).powi(2);
    let functional_bound = w_part * w_part / (2.0 * alpha) + c_t * eta_y.total * r;
    let families = vec![eta_w, eta_y, rho_u];
    Ok(EstimatorReport {
        kind: RegularizerKind::HilbertL2,
        alpha,
        constants: *constants,
        indicators: combined_indicators(&families, mesh.num_triangles()),
        eta_w: families[0].total,
        eta_y: families[1].total,
        eta_w_inf: None,
        eta_kappa: None,
        kappa_lower: None,
        rho_u_term: Some(families[2].total),
        bregman_term: None,
        discrepancy: r,
        residual_bound,
        functional_bound,
        discrepancy_gap_bound: c_t * families[1].total + residual_bound.sqrt(),
        families,
    })
}

/// Estimators for the constraint `||u||_{L_inf(omega_c)} <= 1/alpha`.
pub fn ivanov_report(solution: &TikhonovSolution, constants: &EstimatorConstants) -> Result<EstimatorReport> {
    check_kind(solution, RegularizerKind::IvanovLinf)?;
    constants.validate()?;
    let mesh = &solution.mesh;
    let alpha = solution.alpha();
    let misfit = difference(&solution.y, &solution.g);
    let w_jumps = edge_jumps(mesh, &solution.w);
    let obs = &mesh.mask().in_omega_o;
    let ctrl = &mesh.mask().in_omega_c;
    let eta_w = IndicatorFamily::new(
        "eta_w",
        Aggregation::Sum,
        (0..mesh.num_triangles())
            .map(|t| {
                let h = mesh.diameter(t);
                let vol = if obs[t] { element_l1(mesh.area(t), local(mesh, t, &misfit)) } else { 0.0 };
                let jump = boundary_sum(mesh, t, |e| w_jumps[e].abs() * mesh.edge_length(e));
                h.ln().abs() * h * h * (vol + jump)
            })
            .collect(),
    );
    let eta_y = function_eta_y(solution);
    let eta_w_inf = IndicatorFamily::new("eta_w_inf", Aggregation::Max, linf_local(mesh, &misfit, &w_jumps));
    let u = solution.control_full();
    let w_sup = control_sup(mesh, &solution.w);
    let dual_sup = w_sup + constants.c_inf * eta_w_inf.total;
    let rho_u = IndicatorFamily::new(
        "rho_u",
        Aggregation::Sum,
        (0..mesh.num_triangles())
            .map(|t| {
                if ctrl[t] {
                    dual_sup * element_sign_residual_l1(mesh.area(t), alpha, local(mesh, t, &u), local(mesh, t, &solution.w))
                } else {
                    0.0
                }
            })
            .collect(),
    );
    let c_t = constants.c_t();
    let r = solution.discrepancy;
    let bregman = 2.0 * c_t * eta_w.total;
    let dual_part = rho_u.total + bregman;
    let residual_bound = 2.0 * constants.gamma / alpha * dual_part + constants.sigma * (c_t * eta_y.total).powi(2);
    let functional_bound = dual_part / alpha + c_t * eta_y.total * r;
    let families = vec![eta_w, eta_y, rho_u, eta_w_inf];
    Ok(EstimatorReport {
        kind: RegularizerKind::IvanovLinf,
        alpha,
        constants: *constants,
        indicators: combined_indicators(&families, mesh.num_triangles()),
        eta_w: families[0].total,
        eta_y: families[1].total,
        eta_w_inf: Some(families[3].total),
        eta_kappa: None,
        kappa_lower: None,
        rho_u_term: Some(families[2].total),
        bregman_term: Some(bregman),
        discrepancy: r,
        residual_bound,
        functional_bound,
        discrepancy_gap_bound: c_t * families[1].total + residual_bound.sqrt(),
        families,
    })
}

/// `max((W - alpha + c e) / (W + c e), 0)` with `W = ||w_h||_{inf, omega_c}`
/// and `c e` the pointwise adjoint error bound.
pub fn eta_kappa(w_sup: f64, alpha: f64, pointwise_bound: f64) -> f64 {
    let den = w_sup + pointwise_bound;
    if den <= 0.0 {
        return 0.0;
    }
    ((w_sup - alpha + pointwise_bound) / den).clamp(0.0, 1.0)
}

/// Estimators for the measure-norm penalty `alpha ||u||_M`.
pub fn sparse_report(solution: &TikhonovSolution, constants: &EstimatorConstants) -> Result<EstimatorReport> {
    check_kind(solution, RegularizerKind::MeasureNorm)?;
    constants.validate()?;
    let mesh = &solution.mesh;
    let alpha = solution.alpha();
    let r = solution.discrepancy;
    let misfit = difference(&solution.y, &solution.g);
    let y_jumps = edge_jumps(mesh, &solution.y);
    let w_jumps = edge_jumps(mesh, &solution.w);
    let eta_y = IndicatorFamily::new("eta_y", Aggregation::RootSumSquares, dirac_local(mesh, &y_jumps));
    let eta_w = IndicatorFamily::new(
        "eta_w",
        Aggregation::RootSumSquares,
        eta_y.local.iter().map(|l| l * r).collect(),
    );
    let eta_w_inf = IndicatorFamily::new("eta_w_inf", Aggregation::Max, linf_local(mesh, &misfit, &w_jumps));
    let w_sup = control_sup(mesh, &solution.w);
    let kappa = eta_kappa(w_sup, alpha, constants.c_inf * eta_w_inf.total);
    let uw: f64 = solution.u.iter().zip(solution.w_at_controls()).map(|(a, b)| a * b).sum();
    let mass: f64 = solution.u.iter().map(|x| x.abs()).sum();
    let complementarity = (alpha * mass - uw).max(0.0);
    let y_part = constants.c_dirac * eta_y.total + kappa * r;
    let residual_bound = 2.0 * constants.gamma * (complementarity + constants.c_3() * eta_w.total + kappa * uw)
        + constants.sigma * y_part * y_part;
    let functional_bound = complementarity + constants.c_3() * eta_w.total + kappa * uw + 4.0 * y_part * r;
    let families = vec![eta_w, eta_y, eta_w_inf];
    Ok(EstimatorReport {
        kind: RegularizerKind::MeasureNorm,
        alpha,
        constants: *constants,
        indicators: combined_indicators(&families, mesh.num_triangles()),
        eta_w: families[0].total,
        eta_y: families[1].total,
        eta_w_inf: Some(families[2].total),
        eta_kappa: Some(kappa),
        kappa_lower: Some(1.0 - kappa),
        rho_u_term: None,
        bregman_term: None,
        discrepancy: r,
        residual_bound,
        functional_bound,
        discrepancy_gap_bound: constants.c_dirac * families[1].total + residual_bound.sqrt(),
        families,
    })
}

/// Report matching the solution's regularizer.
pub fn report(solution: &TikhonovSolution, constants: &EstimatorConstants) -> Result<EstimatorReport> {
    match solution.kind() {
        RegularizerKind::HilbertL2 => hilbert_report(solution, constants),
        RegularizerKind::IvanovLinf => ivanov_report(solution, constants),
        RegularizerKind::MeasureNorm => sparse_report(solution, constants),
    }
}

/// Bound on `| ||C y_h - g^delta|| - ||C y - g^delta|| |`: the state
/// estimator plus the square root of the residual bound.
pub fn discrepancy_gap(report: &EstimatorReport) -> f64 {
    let c = match report.kind {
        RegularizerKind::MeasureNorm => report.constants.c_dirac,
        _ => report.constants.c_t(),
    };
    c * report.eta_y + report.residual_bound.max(0.0).sqrt()
}

/// Twice `R(v) + R^*(K^* g^*) + G(K v) + G^*(-g^*)` for the discrete
/// problem, an upper bound for `2 (J(v) - J(u_h))`. `v` holds control
/// coefficients and `g_star` nodal values over all vertices.
pub fn duality_gap_bound(problem: &Problem, regularizer: Regularizer, v: &[f64], g_star: &[f64]) -> Result<f64> {
    let mesh = problem.mesh();
    if v.len() != problem.num_controls() || g_star.len() != mesh.num_vertices() {
        return Err(Error::invalid("candidate sizes do not match the problem"));
    }
    let alpha = regularizer.alpha;
    let kind = regularizer.kind;
    let penalty = problem.penalty(regularizer, v);
    if !penalty.is_finite() {
        return Err(Error::invalid("candidate control violates the constraint"));
    }
    let w_star = problem.solver().solve(&problem.observation_mass().apply(g_star))?;
    let conjugate = match kind {
        RegularizerKind::HilbertL2 => {
            let wc = problem.restrict(&w_star);
            problem.control_mass_form(&wc, &wc) / (2.0 * alpha)
        }
        RegularizerKind::IvanovLinf => problem.control_pairing(kind, &w_star).iter().map(|x| x.abs()).sum::<f64>() / alpha,
        RegularizerKind::MeasureNorm => {
            let norm = problem.control_pairing(kind, &w_star).iter().fold(0.0, |m: f64, x| m.max(x.abs()));
            if norm > alpha * (1.0 + 1e-12) {
                return Err(Error::InfeasibleCertificate { norm, bound: alpha });
            }
            0.0
        }
    };
    let y = problem.state(kind, v)?;
    let fit = 0.5 * problem.discrepancy(&y).powi(2);
    let obs = &mesh.mask().in_omega_o;
    let data_conjugate = 0.5 * masked_l2_inner(mesh, g_star, g_star, obs) - masked_l2_inner(mesh, g_star, problem.data(), obs);
    Ok(2.0 * (penalty + conjugate + fit + data_conjugate))
}

/// Constants fitted on one mesh against a finer reference, with the
/// observed ratio of true error to estimator per family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub constants: EstimatorConstants,
    pub ratios: Vec<(String, f64)>,
}

fn fitted(ratio: f64, fallback: f64) -> f64 {
    if ratio > 0.0 && ratio.is_finite() {
        ratio
    } else {
        fallback
    }
}

/// Fits one multiplicative constant per estimator family. The reference
/// mesh must refine the solution's mesh with vertex ids preserved, and
/// `prolongate` must interpolate nodal vectors from the coarse mesh onto it.
/// The exact state `S u_h` and adjoint `S^* C^*(g - C y_h)` are replaced by
/// their reference-mesh approximations.
pub fn calibrate(
    solution: &TikhonovSolution,
    reference: &Problem,
    prolongate: &dyn Fn(&[f64]) -> Vec<f64>,
    base: &EstimatorConstants,
) -> Result<Calibration> {
    let coarse = &solution.mesh;
    let fine = reference.mesh();
    if fine.num_vertices() < coarse.num_vertices()
        || (0..coarse.num_vertices()).any(|v| {
            let (a, b) = (coarse.vertex(v), fine.vertex(v));
            (a[0] - b[0]).abs() + (a[1] - b[1]).abs() > 1e-12
        })
    {
        return Err(Error::invalid("reference mesh does not extend the solution mesh"));
    }
    let kind = solution.kind();
    let rep = report(solution, base)?;
    let u_fine = match kind {
        RegularizerKind::MeasureNorm => {
            let mut full = vec![0.0; fine.num_vertices()];
            for (&v, &c) in solution.control_nodes.iter().zip(&solution.u) {
                full[v] = c;
            }
            reference.restrict(&full)
        }
        _ => reference.restrict(&prolongate(&solution.control_full())),
    };
    let y_h = prolongate(&solution.y);
    let w_h = prolongate(&solution.w);
    let y_hat = reference.state(kind, &u_fine)?;
    let w_hat = reference.adjoint(&y_h)?;
    let dy = difference(&y_h, &y_hat);
    let dw = difference(&w_h, &w_hat);
    let y_err = masked_l2_norm(fine, &dy, &fine.mask().in_omega_o);
    let ctrl = &fine.mask().in_omega_c;
    let w_sup_err = control_sup(fine, &dw);
    let mut c = *base;
    let mut ratios = vec![("eta_y".to_string(), y_err / rep.eta_y)];
    match kind {
        RegularizerKind::HilbertL2 | RegularizerKind::IvanovLinf => {
            let w_err = if kind == RegularizerKind::HilbertL2 {
                masked_l2_norm(fine, &dw, ctrl)
            } else {
                (0..fine.num_triangles())
                    .filter(|&t| ctrl[t])
                    .map(|t| element_l1(fine.area(t), local(fine, t, &dw)))
                    .sum()
            };
            ratios.push(("eta_w".to_string(), w_err / rep.eta_w));
            let c_t = fitted(ratios[0].1.max(ratios[1].1), base.c_t());
            c.c_i = c_t;
            c.c_s = 1.0;
        }
        RegularizerKind::MeasureNorm => {
            let pairing: f64 = solution.control_nodes.iter().zip(&solution.u).map(|(&v, &a)| a * dw[v]).sum();
            ratios.push(("eta_w".to_string(), pairing.abs() / rep.eta_w));
            c.c_dirac = fitted(ratios[0].1, base.c_dirac);
            c.c_i = fitted(ratios[1].1, base.c_3()) / c.c_dirac;
            c.c_s = 1.0;
        }
    }
    if let Some(inf) = rep.eta_w_inf {
        ratios.push(("eta_w_inf".to_string(), w_sup_err / inf));
        c.c_inf = fitted(w_sup_err / inf, base.c_inf);
    }
    Ok(Calibration { constants: c, ratios })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::exact_data;
    use crate::fem::interpolate;
    use crate::mesh::make_disk_mesh;
    use crate::tikhonov::SolverOptions;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn problem(n: usize, levels: usize, g: impl Fn([f64; 2]) -> f64) -> Problem {
        let mesh = Arc::new(make_disk_mesh(n, 1.0, levels).unwrap());
        let data = interpolate(&mesh, g);
        Problem::new(mesh, data).unwrap()
    }

    fn bump(p: [f64; 2]) -> f64 {
        0.2 * (1.0 - p[0] * p[0] - p[1] * p[1]) * (1.0 + 0.5 * p[0])
    }

    #[test]
    fn sigma_gamma_examples() {
        assert!(sigma_gamma_check(4.0, 2.0));
        assert!(!sigma_gamma_check(3.0, 100.0));
        let edge = 10.0 / (5.0 + 5f64.sqrt());
        assert!((edge - 1.381966).abs() < 1e-6);
        assert!(sigma_gamma_check(5.0, edge + 1e-9));
        assert!(!sigma_gamma_check(5.0, edge - 1e-9));
        assert!(!sigma_gamma_check(4.0, 1.999));
        // On the boundary curve the implication holds with equality.
        assert!(sigma_gamma_check(4.5, 1.5));
        assert!(!classical_condition(4.5, 1.5));
    }

    #[test]
    fn lemma_probe_finds_counterexamples() {
        for (s, g) in [(3.9, 5.0), (4.0, 1.9), (5.0, 1.3), (4.2, 1.5)] {
            let o = implication_test(s, g, 2000, 1);
            assert!(!o.check && o.counterexample.is_some(), "({s}, {g})");
        }
        let o = implication_test(4.0, 2.0, 20_000, 1);
        assert!(o.check && o.violations == 0);
    }

    proptest! {
        #[test]
        fn check_agrees_with_classical_condition_off_the_boundary(sigma in 3.0f64..10.0, gamma in 1.0f64..4.0) {
            let edge = if sigma > 4.0 { 2.0 * sigma / (sigma + (sigma * sigma - 4.0 * sigma).sqrt()) } else { 2.0 };
            prop_assume!((gamma - edge).abs() > 1e-9 && sigma != 4.0);
            prop_assert_eq!(sigma_gamma_check(sigma, gamma), classical_condition(sigma, gamma));
        }

        #[test]
        fn check_matches_scalar_inequality(sigma in 3.0f64..10.0, gamma in 0.5f64..4.0) {
            let holds = (0..=2000).all(|i| {
                let z = 10f64.powf(-4.0 + 8.0 * i as f64 / 2000.0);
                2.0 * z <= (gamma - 1.0) * ((z + 1.0).powi(2) - 1.0) + sigma - 4.0 + 1e-9
            }) && sigma >= 4.0;
            if sigma_gamma_check(sigma, gamma) {
                prop_assert!(holds);
            }
        }

        #[test]
        fn admissible_constants_satisfy_implication(
            sigma in 4.0f64..9.0, gamma in 1.0f64..4.0,
            b in 0.0f64..3.0, d in 0.0f64..3.0, slack in 0.0f64..1.0, t in 0.0f64..1.0,
        ) {
            prop_assume!(sigma_gamma_check(sigma, gamma));
            let c = (b * b - d * d).max(0.0) + slack;
            let a = t * (c + d * d - b * b);
            prop_assert!(!implication_violated(sigma, gamma, [a, b, c, d]));
        }

        #[test]
        fn discrepancy_gap_monotone(ey in 0.0f64..1.0, res in 0.0f64..1.0, dy in 0.0f64..1.0, dr in 0.0f64..1.0) {
            let mk = |eta_y: f64, residual_bound: f64| EstimatorReport {
                kind: RegularizerKind::MeasureNorm,
                alpha: 1.0,
                constants: EstimatorConstants::default(),
                indicators: vec![],
                families: vec![],
                eta_w: 0.0,
                eta_y,
                eta_w_inf: None,
                eta_kappa: None,
                kappa_lower: None,
                rho_u_term: None,
                bregman_term: None,
                discrepancy: 0.0,
                residual_bound,
                functional_bound: 0.0,
                discrepancy_gap_bound: 0.0,
            };
            prop_assert!(discrepancy_gap(&mk(ey + dy, res + dr)) >= discrepancy_gap(&mk(ey, res)));
            prop_assert_eq!(discrepancy_gap(&mk(0.0, 0.0)), 0.0);
        }

        #[test]
        fn element_l1_matches_quadrature(f0 in -1.0f64..1.0, f1 in -1.0f64..1.0, f2 in -1.0f64..1.0) {
            // Midpoint rule on a uniform subdivision into 4^6 triangles.
            let n = 64;
            let mut sum = 0.0;
            for i in 0..n {
                for j in 0..n - i {
                    let centers = [
                        ((i as f64 + 1.0 / 3.0) / n as f64, (j as f64 + 1.0 / 3.0) / n as f64),
                    ];
                    let mut pts = centers.to_vec();
                    if i + j + 1 < n {
                        pts.push(((i as f64 + 2.0 / 3.0) / n as f64, (j as f64 + 2.0 / 3.0) / n as f64));
                    }
                    for (x, y) in pts {
                        sum += (f0 * (1.0 - x - y) + f1 * x + f2 * y).abs();
                    }
                }
            }
            let quad = sum * 0.5 / (n * n) as f64;
            prop_assert!((element_l1(0.5, [f0, f1, f2]) - quad).abs() <= 2e-3);
        }
    }

    #[test]
    fn exact_l1_cases() {
        assert!((element_l1(2.0, [1.0, 1.0, 1.0]) - 2.0).abs() < 1e-15);
        // f = 1 - 2 l0 on the reference triangle: integral 1/6, negative part
        // on the corner l0 > 1/2 integrating to -1/24.
        let v = element_l1(0.5, [-1.0, 1.0, 1.0]);
        assert!((v - 0.25).abs() < 1e-14, "{v}");
        assert!((element_sign_residual_l1(0.5, 1.0, [1.0; 3], [0.2, 0.3, 0.1])).abs() < 1e-15);
        assert!((element_sign_residual_l1(0.5, 1.0, [0.0; 3], [0.0; 3])).abs() < 1e-15);
        assert!((element_sign_residual_l1(0.5, 1.0, [0.0; 3], [1.0, -1.0, 0.0]) - 0.5).abs() < 1e-14);
    }

    fn assert_families_consistent(r: &EstimatorReport) {
        for f in &r.families {
            assert!(f.local.iter().all(|&x| x >= 0.0), "{}", f.name);
            let total = f.aggregation.combine(&f.local);
            assert!((total - f.total).abs() <= 1e-12 * total.max(1e-300), "{}", f.name);
        }
        assert!(r.indicators.iter().all(|&x| x >= 0.0 && x.is_finite()));
        assert_eq!(r.indicators.len(), r.families[0].local.len());
        assert!(r.residual_bound >= 0.0 && r.functional_bound >= 0.0);
        assert!((r.discrepancy_gap_bound - discrepancy_gap(r)).abs() <= 1e-15 * r.discrepancy_gap_bound);
    }

    #[test]
    fn zero_data_gives_zero_estimators() {
        let p = problem(8, 2, |_| 0.0);
        for (kind, alpha) in [
            (RegularizerKind::HilbertL2, 1e-2),
            (RegularizerKind::IvanovLinf, 1.0),
            (RegularizerKind::MeasureNorm, 1e-2),
        ] {
            let s = p.solve(Regularizer::new(kind, alpha).unwrap(), &SolverOptions::default()).unwrap();
            let r = report(&s, &EstimatorConstants::default()).unwrap();
            assert_eq!(r.eta_w, 0.0);
            assert_eq!(r.eta_y, 0.0);
            assert_eq!(r.residual_bound, 0.0, "{kind:?}");
            assert!(r.indicators.iter().all(|&x| x == 0.0));
            if kind == RegularizerKind::MeasureNorm {
                assert_eq!(r.eta_kappa, Some(0.0));
            }
        }
    }

    #[test]
    fn wrong_kind_rejected() {
        let p = problem(8, 1, bump);
        let s = p.solve_hilbert(1e-2, &SolverOptions::default()).unwrap();
        assert!(matches!(sparse_report(&s, &EstimatorConstants::default()), Err(Error::InvalidArgument(_))));
        assert!(matches!(ivanov_report(&s, &EstimatorConstants::default()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn hilbert_rho_u_vanishes_at_discrete_optimum() {
        let p = problem(10, 2, bump);
        let s = p.solve_hilbert(1e-3, &SolverOptions::default()).unwrap();
        let r = hilbert_report(&s, &EstimatorConstants::default()).unwrap();
        let scale = masked_l2_norm(&s.mesh, &s.w, &s.mesh.mask().in_omega_c);
        assert!(r.rho_u_term.unwrap() <= 1e-7 * scale);
        assert!(r.eta_w > 0.0 && r.eta_y > 0.0);
        assert_families_consistent(&r);
    }

    #[test]
    fn ivanov_rho_u_vanishes_for_bang_bang_control() {
        // Data far below the reachable states drives every control node to
        // the upper bound while w stays positive on the control region.
        let p = problem(10, 2, |q| 5.0 * (1.0 - q[0] * q[0] - q[1] * q[1]));
        let alpha = 2.0;
        let s = p.solve_ivanov(alpha, &SolverOptions::default()).unwrap();
        assert!(s.u.iter().all(|&x| (x - 1.0 / alpha).abs() < 1e-12));
        let interior: Vec<usize> = (0..s.mesh.num_triangles())
            .filter(|&t| s.mesh.triangle(t).iter().all(|&v| !s.mesh.is_boundary_vertex(v)))
            .collect();
        let u = s.control_full();
        for t in interior {
            let l1 = element_sign_residual_l1(s.mesh.area(t), alpha, local(&s.mesh, t, &u), local(&s.mesh, t, &s.w));
            assert!(l1 <= 1e-12, "element {t}: {l1}");
        }
        let r = ivanov_report(&s, &EstimatorConstants::default()).unwrap();
        assert_families_consistent(&r);
        assert!(r.bregman_term.unwrap() == 2.0 * r.eta_w);
    }

    #[test]
    fn sparse_report_invariants() {
        let p = problem(8, 2, |x| exact_data(0.5, 1e-2, x));
        let s = p.solve_sparse(1e-2, &SolverOptions::default()).unwrap();
        let c = EstimatorConstants::default();
        let r = sparse_report(&s, &c).unwrap();
        let k = r.eta_kappa.unwrap();
        assert!((0.0..=1.0).contains(&k));
        assert_eq!(r.kappa_lower.unwrap(), 1.0 - k);
        let w_sup = control_sup(&s.mesh, &s.w);
        let ce = c.c_inf * r.eta_w_inf.unwrap();
        assert_eq!(k, ((w_sup - s.alpha() + ce) / (w_sup + ce)).max(0.0));
        assert!((r.eta_w - r.eta_y * s.discrepancy).abs() <= 1e-12 * r.eta_w);
        assert_families_consistent(&r);
    }

    #[test]
    fn eta_kappa_vanishes_when_dual_feasible() {
        assert_eq!(eta_kappa(0.5, 1.0, 0.4), 0.0);
        assert_eq!(eta_kappa(0.0, 1.0, 0.0), 0.0);
        assert!((eta_kappa(2.0, 1.0, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn duality_gap_at_optimum_is_small() {
        let p = problem(10, 2, bump);
        for (kind, alpha) in [
            (RegularizerKind::HilbertL2, 1e-3),
            (RegularizerKind::IvanovLinf, 1.0),
            (RegularizerKind::MeasureNorm, 1e-3),
        ] {
            let reg = Regularizer::new(kind, alpha).unwrap();
            let s = p.solve(reg, &SolverOptions::tightened(kind, 10.0)).unwrap();
            let mut g_star = difference(&s.g, &s.y);
            if kind == RegularizerKind::MeasureNorm {
                let kappa = (alpha / s.dual_certificate()).min(1.0);
                g_star.iter_mut().for_each(|x| *x *= kappa);
            }
            let gap = duality_gap_bound(&p, reg, &s.u, &g_star).unwrap();
            assert!(gap >= -1e-12 && gap <= 1e-6 * (1.0 + s.j_value), "{kind:?}: {gap}");
        }
    }

    #[test]
    fn duality_gap_bounds_objective_decrease_from_zero() {
        let p = problem(10, 2, bump);
        let reg = Regularizer::new(RegularizerKind::HilbertL2, 1e-2).unwrap();
        let s = p.solve(reg, &SolverOptions::default()).unwrap();
        let zero = vec![0.0; p.num_controls()];
        let g_star = difference(&s.g, &s.y);
        let gap = duality_gap_bound(&p, reg, &zero, &g_star).unwrap();
        let j0 = p.objective(reg, &zero).unwrap();
        assert!(gap >= 2.0 * (j0 - s.j_value) - 1e-12);
    }

    #[test]
    fn infeasible_measure_certificate_rejected() {
        let p = problem(10, 2, bump);
        let reg = Regularizer::new(RegularizerKind::MeasureNorm, 1e-6).unwrap();
        let zero = vec![0.0; p.num_controls()];
        let err = duality_gap_bound(&p, reg, &zero, p.data()).unwrap_err();
        assert!(matches!(err, Error::InfeasibleCertificate { .. }));
    }

    #[test]
    fn report_serializes() {
        let p = problem(8, 1, bump);
        let s = p.solve_hilbert(1e-2, &SolverOptions::default()).unwrap();
        let r = hilbert_report(&s, &EstimatorConstants::default()).unwrap();
        let back: EstimatorReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn inadmissible_constants_rejected() {
        let p = problem(8, 1, bump);
        let s = p.solve_hilbert(1e-2, &SolverOptions::default()).unwrap();
        let c = EstimatorConstants { sigma: 3.0, ..Default::default() };
        assert!(hilbert_report(&s, &c).is_err());
        let c = EstimatorConstants { c_inf: 0.0, ..Default::default() };
        assert!(hilbert_report(&s, &c).is_err());
    }

    #[test]
    fn calibration_reproduces_coarse_ratios() {
        let mesh = Arc::new(make_disk_mesh(12, 1.0, 1).unwrap());
        let r1 = mesh.refine_uniform();
        let r2 = r1.mesh.refine_uniform();
        let fine = Arc::new(r2.mesh.clone());
        let g = |x: [f64; 2]| exact_data(0.5, 1e-2, x);
        let coarse = Problem::new(mesh.clone(), interpolate(&mesh, g)).unwrap();
        let reference = Problem::new(fine.clone(), interpolate(&fine, g)).unwrap();
        let s = coarse.solve_sparse(1e-2, &SolverOptions::default()).unwrap();
        let prolong = |f: &[f64]| r2.prolongate(&r1.prolongate(f));
        let cal = calibrate(&s, &reference, &prolong, &EstimatorConstants::default()).unwrap();
        cal.constants.validate().unwrap();
        let rep = sparse_report(&s, &cal.constants).unwrap();
        let ratio = |name: &str| cal.ratios.iter().find(|(n, _)| n == name).unwrap().1;
        assert!((cal.constants.c_dirac * rep.eta_y - ratio("eta_y") * rep.eta_y).abs() <= 1e-12);
        assert!((cal.constants.c_3() - ratio("eta_w")).abs() <= 1e-12 * ratio("eta_w"));
    }
}
