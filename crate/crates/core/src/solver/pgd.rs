use std::time::Instant;

use super::{SolveReport, StepRule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct StopRule {
    pub max_iters: usize,
    /// Threshold on the inf-norm of the projected gradient `x - proj(x - grad f(x))`.
    pub tolerance: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            tolerance: 1e-8,
        }
    }
}

/// Projected gradient descent.
///
/// `value_grad` returns the objective and writes its gradient; `project` maps a
/// point onto the feasible set in place. The report's `kkt_residual` holds the final
/// projected-gradient norm.
pub fn projected_gradient<F, P>(
    start: &[f64],
    mut value_grad: F,
    mut project: P,
    step: &StepRule,
    stop: &StopRule,
) -> Result<(Vec<f64>, SolveReport)>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    P: FnMut(&mut [f64]),
{
    step.validate()?;
    let clock = Instant::now();
    let n = start.len();
    let mut x = start.to_vec();
    project(&mut x);
    let mut grad = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut report = SolveReport::default();

    let mut value = value_grad(&x, &mut grad);
    check_finite(value, &grad, &x, 0)?;
    let mut residual = projected_norm(&x, &grad, &mut trial, &mut project);
    while residual > stop.tolerance && report.iterations < stop.max_iters {
        let s = step.at(report.iterations);
        for i in 0..n {
            x[i] -= s * grad[i];
        }
        project(&mut x);
        value = value_grad(&x, &mut grad);
        report.iterations += 1;
        check_finite(value, &grad, &x, report.iterations)?;
        report.trajectory.push(value);
        residual = projected_norm(&x, &grad, &mut trial, &mut project);
    }
    report.kkt_residual = residual;
    report.converged = residual <= stop.tolerance;
    report.wall_time = clock.elapsed();
    Ok((x, report))
}

fn projected_norm<P: FnMut(&mut [f64])>(x: &[f64], grad: &[f64], buf: &mut [f64], project: &mut P) -> f64 {
    for i in 0..x.len() {
        buf[i] = x[i] - grad[i];
    }
    project(buf);
    x.iter()
        .zip(buf.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn check_finite(value: f64, grad: &[f64], x: &[f64], iteration: usize) -> Result<()> {
    if value.is_finite() && grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            iteration,
            reason: "objective or gradient is not finite".into(),
            snapshot: x.to_vec(),
        })
    }
}
