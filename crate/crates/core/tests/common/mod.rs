//! Dense reference solvers for small problems, independent of the sparse
//! iterative solvers under test.
#![allow(dead_code)]

use adapttikh::tikhonov::{Problem, RegularizerKind};
use nalgebra::{DMatrix, DVector};

/// Dense reduced quadratic `1/2 u^T H u - c^T u + const` of a problem, plus
/// the pieces needed to recover states.
pub struct DenseProblem {
    pub k: DMatrix<f64>,
    pub k_inv: DMatrix<f64>,
    /// Control-to-load map over the free vertices.
    pub b: DMatrix<f64>,
    pub mo_ff: DMatrix<f64>,
    pub mcc: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    /// `(M_o g)` restricted to the free vertices.
    pub mog: DVector<f64>,
    pub free: Vec<usize>,
}

fn dense(rows: Vec<Vec<f64>>) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

impl DenseProblem {
    pub fn new(p: &Problem, kind: RegularizerKind) -> Self {
        let free = p.solver().free_vertices().to_vec();
        let controls = p.control_nodes().to_vec();
        let k = dense(p.solver().stiffness().to_dense());
        let k_inv = k.clone().try_inverse().expect("stiffness invertible");
        let mo = dense(p.observation_mass().to_dense());
        let mc = dense(p.control_mass().to_dense());
        let b = match kind {
            RegularizerKind::MeasureNorm => {
                DMatrix::from_fn(free.len(), controls.len(), |i, j| if free[i] == controls[j] { 1.0 } else { 0.0 })
            }
            _ => DMatrix::from_fn(free.len(), controls.len(), |i, j| mc[(free[i], controls[j])]),
        };
        let mcc = DMatrix::from_fn(controls.len(), controls.len(), |i, j| mc[(controls[i], controls[j])]);
        let mo_ff = DMatrix::from_fn(free.len(), free.len(), |i, j| mo[(free[i], free[j])]);
        let g = DVector::from_column_slice(p.data());
        let mog_full = &mo * &g;
        let mog = DVector::from_fn(free.len(), |i, _| mog_full[free[i]]);
        let s = &k_inv * &b;
        let h = s.transpose() * &mo_ff * &s;
        let c = s.transpose() * &mog;
        Self { k, k_inv, b, mo_ff, mcc, h, c, mog, free }
    }

    /// Full KKT block system `(y, w, u)` of the Hilbert problem.
    pub fn hilbert_kkt(&self, alpha: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let nf = self.free.len();
        let nc = self.b.ncols();
        let n = 2 * nf + nc;
        let mut a = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        a.view_mut((0, 0), (nf, nf)).copy_from(&self.k);
        a.view_mut((0, 2 * nf), (nf, nc)).copy_from(&(-&self.b));
        a.view_mut((nf, 0), (nf, nf)).copy_from(&self.mo_ff);
        a.view_mut((nf, nf), (nf, nf)).copy_from(&self.k);
        rhs.rows_mut(nf, nf).copy_from(&self.mog);
        a.view_mut((2 * nf, nf), (nc, nf)).copy_from(&(-self.b.transpose()));
        a.view_mut((2 * nf, 2 * nf), (nc, nc)).copy_from(&(alpha * &self.mcc));
        let x = a.lu().solve(&rhs).expect("KKT system solvable");
        (x.rows(0, nf).into_owned(), x.rows(nf, nf).into_owned(), x.rows(2 * nf, nc).into_owned())
    }

    /// Primal-dual active set method for `|u_i| <= bound`, checked against
    /// the KKT conditions before returning.
    pub fn box_qp(&self, bound: f64) -> DVector<f64> {
        let n = self.c.len();
        let mut u = DVector::zeros(n);
        let mut mu: DVector<f64> = DVector::zeros(n);
        let diag: Vec<f64> = (0..n).map(|i| self.h[(i, i)]).collect();
        let mut last: Option<Vec<i8>> = None;
        for _ in 0..200 {
            let state: Vec<i8> = (0..n)
                .map(|i| {
                    let t = u[i] + mu[i] / diag[i];
                    if t > bound {
                        1
                    } else if t < -bound {
                        -1
                    } else {
                        0
                    }
                })
                .collect();
            if last.as_ref() == Some(&state) {
                break;
            }
            let inactive: Vec<usize> = (0..n).filter(|&i| state[i] == 0).collect();
            let mut fixed = DVector::zeros(n);
            for i in 0..n {
                fixed[i] = state[i] as f64 * bound;
            }
            let mut next = fixed.clone();
            if !inactive.is_empty() {
                let m = inactive.len();
                let hii = DMatrix::from_fn(m, m, |a, b| self.h[(inactive[a], inactive[b])]);
                let hf = &self.h * &fixed;
                let rhs = DVector::from_fn(m, |a, _| self.c[inactive[a]] - hf[inactive[a]]);
                let sol = hii.cholesky().expect("reduced Hessian SPD").solve(&rhs);
                for (a, &i) in inactive.iter().enumerate() {
                    next[i] = sol[a];
                }
            }
            u = next;
            mu = &self.c - &self.h * &u;
            for &i in &inactive {
                mu[i] = 0.0;
            }
            last = Some(state);
        }
        // KKT: feasibility, and the negative gradient points outward on the
        // active set and vanishes on the free set.
        let grad = &self.h * &u - &self.c;
        let scale = self.c.amax().max(1e-300);
        for i in 0..n {
            assert!(u[i].abs() <= bound * (1.0 + 1e-12));
            if u[i].abs() < bound * (1.0 - 1e-12) {
                assert!(grad[i].abs() <= 1e-9 * scale, "oracle not stationary at {i}");
            } else {
                assert!(-grad[i] * u[i].signum() >= -1e-9 * scale, "oracle multiplier sign at {i}");
            }
        }
        u
    }

    /// Cyclic coordinate descent for `1/2 u^T H u - c^T u + alpha |u|_1`.
    pub fn lasso_cd(&self, alpha: f64) -> DVector<f64> {
        let n = self.c.len();
        let mut u: DVector<f64> = DVector::zeros(n);
        let mut hu: DVector<f64> = DVector::zeros(n);
        for _ in 0..2_000_000 {
            let mut change: f64 = 0.0;
            for j in 0..n {
                let hjj = self.h[(j, j)];
                let rho = self.c[j] - (hu[j] - hjj * u[j]);
                let new = if rho > alpha {
                    (rho - alpha) / hjj
                } else if rho < -alpha {
                    (rho + alpha) / hjj
                } else {
                    0.0
                };
                let delta = new - u[j];
                if delta != 0.0 {
                    for i in 0..n {
                        hu[i] += self.h[(i, j)] * delta;
                    }
                    u[j] = new;
                    change = change.max(delta.abs());
                }
            }
            if change < 1e-15 {
                break;
            }
        }
        u
    }
}
