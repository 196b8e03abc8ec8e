//! Generic optimization machinery shared by the MAC and cross-layer optimizers.

mod barrier;
mod pgd;

pub use barrier::{barrier_solve, BarrierOptions, BarrierSolution};
pub use pgd::{projected_gradient, StopRule};

use std::time::Duration;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mac::MacState;
use crate::network::Topology;

/// A smooth convex program `min f(x) s.t. g_k(x) <= 0`.
///
/// Constraint functions may return non-finite values outside their domain; solvers
/// treat such points as infeasible.
pub trait ConvexProgram {
    fn dim(&self) -> usize;
    fn num_constraints(&self) -> usize;
    fn objective(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> DVector<f64>;
    /// Hessian of `obj_weight * f(x) + sum_k weights[k] * g_k(x)`.
    fn lagrangian_hessian(&self, x: &[f64], obj_weight: f64, weights: &[f64]) -> DMatrix<f64>;
    fn constraints(&self, x: &[f64]) -> DVector<f64>;
    /// Row `k` is the gradient of `g_k`.
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64>;
}

/// Summary of an iterative solve.
#[derive(Debug, Clone, Default)]
pub struct SolveReport {
    pub iterations: usize,
    /// Objective after each iteration; its length equals `iterations`.
    pub trajectory: Vec<f64>,
    pub max_violation: f64,
    pub kkt_residual: f64,
    pub converged: bool,
    pub wall_time: Duration,
}

/// Largest of stationarity (inf-norm of the Lagrangian gradient), primal violation,
/// complementarity slack and dual sign violation.
pub fn kkt_residual<P: ConvexProgram + ?Sized>(problem: &P, x: &[f64], dual: &[f64]) -> f64 {
    assert_eq!(dual.len(), problem.num_constraints(), "dual dimension mismatch");
    let g = problem.constraints(x);
    let j = problem.jacobian(x);
    let lam = DVector::from_column_slice(dual);
    let stationarity = (problem.gradient(x) + j.transpose() * &lam).amax();
    let mut worst = stationarity;
    for k in 0..g.len() {
        let gk = if g[k].is_finite() { g[k] } else { f64::INFINITY };
        worst = worst
            .max(gk.max(0.0))
            .max((dual[k] * gk).abs())
            .max((-dual[k]).max(0.0));
    }
    worst
}

/// One step-size sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Constant(f64),
    /// `a / (b + n)`: vanishing steps with a divergent sum.
    Diminishing { a: f64, b: f64 },
}

impl StepRule {
    pub fn at(&self, n: usize) -> f64 {
        match *self {
            StepRule::Constant(s) => s,
            StepRule::Diminishing { a, b } => a / (b + n as f64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepRule::Constant(s) => s.is_finite() && s > 0.0,
            StepRule::Diminishing { a, b } => a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid step rule {self:?}")))
        }
    }

    /// Same rule with every step multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            StepRule::Constant(s) => StepRule::Constant(s * factor),
            StepRule::Diminishing { a, b } => StepRule::Diminishing { a: a * factor, b },
        }
    }
}

/// Steps for link duals (`alpha`), session duals (`beta`) and probabilities (`phi`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub alpha: StepRule,
    pub beta: StepRule,
    pub phi: StepRule,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            alpha: StepRule::Constant(0.05),
            beta: StepRule::Constant(0.05),
            phi: StepRule::Constant(0.01),
        }
    }
}

impl StepSchedule {
    pub fn constant(alpha: f64, beta: f64, phi: f64) -> Self {
        Self {
            alpha: StepRule::Constant(alpha),
            beta: StepRule::Constant(beta),
            phi: StepRule::Constant(phi),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.alpha.validate()?;
        self.beta.validate()?;
        self.phi.validate()
    }
}

/// Clamps every link probability into `[0, 1]` and scales down the outgoing links of
/// any node whose total exceeds `1 - eps`, so that the result satisfies
/// `0 <= p_ij` and `P_i <= 1 - eps`.
pub fn project_probabilities(raw: &[f64], topology: &Topology, eps: f64) -> MacState {
    project_with_floor(raw, topology, 0.0, eps)
}

/// As [`project_probabilities`] but clamps from below at `floor` before scaling.
pub fn project_with_floor(raw: &[f64], topology: &Topology, floor: f64, eps: f64) -> MacState {
    assert_eq!(raw.len(), topology.link_count());
    let mut p: Vec<f64> = raw
        .iter()
        .map(|&v| if v.is_nan() { floor } else { v.clamp(floor, 1.0) })
        .collect();
    let cap = 1.0 - eps;
    for i in 0..topology.node_count() {
        let total: f64 = topology.out_links(i).iter().map(|&k| p[k]).sum();
        if total > cap {
            let scale = cap / total;
            for &k in topology.out_links(i) {
                p[k] *= scale;
            }
        }
    }
    MacState::from_projected(topology, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_linear, build_star};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn projection_examples() {
        let t = build_star(3).unwrap();
        // hub owns links 0 (0->1) and 2 (0->2)
        let st = project_probabilities(&[0.2, 0.3, 0.2, 0.4], &t, 0.01);
        assert_eq!(st.link_probs(), &[0.2, 0.3, 0.2, 0.4]);

        let st = project_probabilities(&[0.8, 0.3, 0.6, 0.4], &t, 0.01);
        assert_relative_eq!(st.link_probs()[0], 0.99 * 0.8 / 1.4, max_relative = 1e-14);
        assert_relative_eq!(st.link_probs()[2], 0.99 * 0.6 / 1.4, max_relative = 1e-14);
        assert_relative_eq!(st.link_probs()[0], 0.565_714_285_714_285_7, max_relative = 1e-12);
        assert_relative_eq!(st.node_probs()[0], 0.99, max_relative = 1e-14);

        let pair = build_linear(2).unwrap();
        let st = project_probabilities(&[-0.2, 0.5], &pair, 0.01);
        assert_eq!(st.link_probs(), &[0.0, 0.5]);
    }

    #[test]
    fn step_rules() {
        assert_eq!(StepRule::Constant(0.1).at(7), 0.1);
        let d = StepRule::Diminishing { a: 1.0, b: 9.0 };
        assert_eq!(d.at(1), 0.1);
        assert!(d.at(1000) < d.at(10));
        assert!(StepRule::Constant(0.0).validate().is_err());
        assert!(StepSchedule::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn projection_idempotent_and_capped(
            raw in proptest::collection::vec(-0.5f64..1.5, 12),
            eps in 1e-6f64..0.1,
        ) {
            let t = build_star(7).unwrap();
            let once = project_probabilities(&raw, &t, eps);
            let twice = project_probabilities(once.link_probs(), &t, eps);
            for (a, b) in once.link_probs().iter().zip(twice.link_probs()) {
                prop_assert!((a - b).abs() <= 1e-14);
            }
            for &pn in once.node_probs() {
                prop_assert!(pn <= 1.0 - eps + 1e-14);
            }
            for &pl in once.link_probs() {
                prop_assert!(pl >= 0.0);
            }
        }
    }
}
