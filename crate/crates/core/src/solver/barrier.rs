//! Log-barrier interior method with a phase-I feasibility search.
//!
//! The centering problem is solved in the scaled form
//! `psi_t(x) = f(x) - (1/t) sum_k log(-g_k(x))`, which keeps values of order one as
//! `t` grows. Dual estimates are `lambda_k = 1 / (t * (-g_k))`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{kkt_residual, ConvexProgram, SolveReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct BarrierOptions {
    pub t0: f64,
    /// Barrier growth factor per outer iteration.
    pub mu: f64,
    /// Target complementarity `1/t` at termination.
    pub tolerance: f64,
    /// Stationarity target for each centering step.
    pub stationarity: f64,
    pub max_newton: usize,
    pub max_outer: usize,
    /// KKT residual required to report convergence.
    pub kkt_tolerance: f64,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self {
            t0: 1.0,
            mu: 10.0,
            tolerance: 1e-9,
            stationarity: 1e-9,
            max_newton: 80,
            max_outer: 40,
            kkt_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BarrierSolution {
    pub x: Vec<f64>,
    pub dual: Vec<f64>,
    pub objective: f64,
    pub report: SolveReport,
}

/// Solves a convex program from `start`. When `start` is not strictly feasible a
/// phase-I problem `min s s.t. g_k(x) <= s` is solved first; if its optimum is
/// non-negative the problem is reported infeasible.
pub fn barrier_solve<P: ConvexProgram + ?Sized>(
    problem: &P,
    start: &[f64],
    options: &BarrierOptions,
) -> Result<BarrierSolution> {
    let clock = Instant::now();
    assert_eq!(start.len(), problem.dim(), "start point dimension mismatch");
    let g0 = problem.constraints(start);
    if g0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            iteration: 0,
            reason: "starting point lies outside the constraint domain".into(),
            snapshot: start.to_vec(),
        });
    }
    let mut report = SolveReport::default();
    let x0 = if g0.iter().all(|&v| v < 0.0) {
        start.to_vec()
    } else {
        phase_one(problem, start, g0.max(), options, &mut report)?
    };

    let mut x = x0;
    let mut t = options.t0;
    let mut converged = false;
    for _ in 0..options.max_outer {
        center(problem, &mut x, t, options, &mut report, None)?;
        if 1.0 / t <= options.tolerance {
            converged = true;
            break;
        }
        t *= options.mu;
    }

    let g = problem.constraints(&x);
    let mut dual: Vec<f64> = g.iter().map(|&gk| 1.0 / (t * (-gk))).collect();
    report.kkt_residual = kkt_residual(problem, &x, &dual);
    if let Some(refit) = refit_duals(problem, &x, &dual) {
        let residual = kkt_residual(problem, &x, &refit);
        if residual < report.kkt_residual {
            dual = refit;
            report.kkt_residual = residual;
        }
    }
    report.max_violation = g.max().max(0.0);
    report.converged = converged && report.kkt_residual <= options.kkt_tolerance;
    report.wall_time = clock.elapsed();
    Ok(BarrierSolution {
        objective: problem.objective(&x),
        x,
        dual,
        report,
    })
}

struct PhaseOne<'a, P: ?Sized> {
    inner: &'a P,
}

impl<P: ConvexProgram + ?Sized> ConvexProgram for PhaseOne<'_, P> {
    fn dim(&self) -> usize {
        self.inner.dim() + 1
    }

    fn num_constraints(&self) -> usize {
        self.inner.num_constraints() + 1
    }

    fn objective(&self, x: &[f64]) -> f64 {
        x[x.len() - 1]
    }

    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        g[x.len() - 1] = 1.0;
        g
    }

    fn lagrangian_hessian(&self, x: &[f64], _obj_weight: f64, weights: &[f64]) -> DMatrix<f64> {
        let n = self.inner.dim();
        let inner = self
            .inner
            .lagrangian_hessian(&x[..n], 0.0, &weights[..weights.len() - 1]);
        let mut h = DMatrix::zeros(n + 1, n + 1);
        h.view_mut((0, 0), (n, n)).copy_from(&inner);
        h
    }

    fn constraints(&self, x: &[f64]) -> DVector<f64> {
        let n = self.inner.dim();
        let s = x[n];
        let inner = self.inner.constraints(&x[..n]);
        let mut g = DVector::zeros(inner.len() + 1);
        for k in 0..inner.len() {
            g[k] = inner[k] - s;
        }
        // s >= -1 keeps the phase-I problem bounded
        g[inner.len()] = -1.0 - s;
        g
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.inner.dim();
        let inner = self.inner.jacobian(&x[..n]);
        let m = inner.nrows();
        let mut j = DMatrix::zeros(m + 1, n + 1);
        j.view_mut((0, 0), (m, n)).copy_from(&inner);
        for k in 0..m {
            j[(k, n)] = -1.0;
        }
        j[(m, n)] = -1.0;
        j
    }
}

fn phase_one<P: ConvexProgram + ?Sized>(
    problem: &P,
    start: &[f64],
    worst: f64,
    options: &BarrierOptions,
    report: &mut SolveReport,
) -> Result<Vec<f64>> {
    let aux = PhaseOne { inner: problem };
    let n = problem.dim();
    let mut y = start.to_vec();
    y.push(worst.max(0.0) + 1.0);
    let found = |y: &[f64]| problem.constraints(&y[..n]).iter().all(|&v| v < 0.0);
    let mut t = options.t0;
    for _ in 0..options.max_outer {
        if center(&aux, &mut y, t, options, report, Some(&found))? {
            y.truncate(n);
            return Ok(y);
        }
        if 1.0 / t <= options.tolerance {
            break;
        }
        t *= options.mu;
    }
    let s = y[n];
    Err(Error::Infeasible {
        reason: format!(
            "phase-I certificate: smallest achievable max constraint value is {s:.6e} >= 0"
        ),
    })
}

/// Newton centering for fixed `t`. Returns `true` if `stop` fired.
fn center<P: ConvexProgram + ?Sized>(
    problem: &P,
    x: &mut Vec<f64>,
    t: f64,
    options: &BarrierOptions,
    report: &mut SolveReport,
    stop: Option<&dyn Fn(&[f64]) -> bool>,
) -> Result<bool> {
    let psi = |y: &[f64]| -> Option<f64> {
        let g = problem.constraints(y);
        if g.iter().any(|&v| !(v.is_finite() && v < 0.0)) {
            return None;
        }
        let f = problem.objective(y);
        let b: f64 = g.iter().map(|&v| (-v).ln()).sum();
        let val = f - b / t;
        val.is_finite().then_some(val)
    };

    for _ in 0..options.max_newton {
        if let Some(stop) = stop {
            if stop(x) {
                return Ok(true);
            }
        }
        let g = problem.constraints(x);
        let jac = problem.jacobian(x);
        let inv: Vec<f64> = g.iter().map(|&v| 1.0 / (t * (-v))).collect();
        let grad = problem.gradient(x) + jac.transpose() * DVector::from_column_slice(&inv);
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(numeric(report.iterations, "non-finite barrier gradient", x));
        }
        if grad.amax() <= options.stationarity {
            return Ok(false);
        }
        let mut hess = problem.lagrangian_hessian(x, 1.0, &inv);
        // (1/t) sum grad g grad g^T / g^2 == J^T diag(t * inv^2) J
        let mut scaled = jac.clone();
        for (k, mut row) in scaled.row_iter_mut().enumerate() {
            row *= (t * inv[k] * inv[k]).sqrt();
        }
        hess += scaled.transpose() * &scaled;
        let step = solve_newton(&hess, &grad)
            .ok_or_else(|| numeric(report.iterations, "singular Newton system", x))?;
        let decrement = -grad.dot(&step);
        if !decrement.is_finite() {
            return Err(numeric(report.iterations, "non-finite Newton decrement", x));
        }
        if decrement <= 1e-20 {
            return Ok(false);
        }

        let current = psi(x).ok_or_else(|| numeric(report.iterations, "iterate left the domain", x))?;
        let mut s = 1.0;
        let mut accepted = None;
        while s > 1e-14 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + s * d).collect();
            if let Some(v) = psi(&trial) {
                // near the optimum the predicted decrease is below rounding of psi
                if decrement < 1e-10 || v <= current - 0.25 * s * decrement {
                    accepted = Some(trial);
                    break;
                }
            }
            s *= 0.5;
        }
        let Some(next) = accepted else {
            // no representable decrease left
            return Ok(false);
        };
        *x = next;
        report.iterations += 1;
        report.trajectory.push(problem.objective(x));
    }
    Ok(false)
}

/// Least-squares multipliers on the constraints the barrier estimate marks as
/// active, zero elsewhere.
///
/// The barrier estimate `1/(t(-g))` loses digits once `g` is close to rounding
/// level; refitting from stationarity recovers them.
fn refit_duals<P: ConvexProgram + ?Sized>(problem: &P, x: &[f64], estimate: &[f64]) -> Option<Vec<f64>> {
    let active: Vec<usize> = (0..estimate.len()).filter(|&k| estimate[k] > 1e-6).collect();
    if active.is_empty() {
        return None;
    }
    let jac = problem.jacobian(x);
    let a = DMatrix::from_fn(x.len(), active.len(), |i, c| jac[(active[c], i)]);
    let rhs = -problem.gradient(x);
    let lam = a.svd(true, true).solve(&rhs, 1e-12).ok()?;
    let mut dual = vec![0.0; estimate.len()];
    for (c, &k) in active.iter().enumerate() {
        dual[k] = lam[c].max(0.0);
    }
    Some(dual)
}

fn solve_newton(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let rhs = -grad;
    if let Some(ch) = hess.clone().cholesky() {
        return Some(ch.solve(&rhs));
    }
    let scale = hess.diagonal().amax().max(1.0);
    let mut delta = 1e-12 * scale;
    while delta < 1e6 * scale {
        let mut h = hess.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += delta;
        }
        if let Some(ch) = h.cholesky() {
            return Some(ch.solve(&rhs));
        }
        delta *= 100.0;
    }
    hess.clone().lu().solve(&rhs)
}

fn numeric(iteration: usize, reason: &str, x: &[f64]) -> Error {
    Error::Numeric {
        iteration,
        reason: reason.into(),
        snapshot: x.to_vec(),
    }
}
