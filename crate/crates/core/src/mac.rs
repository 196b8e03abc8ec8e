//! Optimal medium access control with a per-link delay bound.
//!
//! Variables are the link persistence probabilities `p_ij` and the link arrival
//! rates `r_ij` (handled in the log domain `z = log r`). The delay bound `D_c` is
//! enforced in the convex form
//!
//! ```text
//! log(1/D_c + e^z (1 - 1/(2 D_c))) - log x_ij(p) <= 0
//! ```
//!
//! and the objective is `lambda1 * E(p) - lambda2 * sum z`.

use nalgebra::{DMatrix, DVector};

use crate::delay::{link_delay, node_probabilities, throughput_of, throughputs};
use crate::error::{Error, Result};
use crate::network::Topology;
use crate::solver::{barrier_solve, BarrierOptions, ConvexProgram, SolveReport, StepSchedule};
use crate::{EPS, RATE_FLOOR};

/// Link persistence probabilities and the derived node transmission probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MacState {
    p: Vec<f64>,
    node: Vec<f64>,
}

impl MacState {
    /// Validates `0 <= p_ij <= 1` and `P_i <= 1`.
    pub fn new(topology: &Topology, p: Vec<f64>) -> Result<Self> {
        if p.len() != topology.link_count() {
            return Err(Error::Domain(format!(
                "expected {} link probabilities, got {}",
                topology.link_count(),
                p.len()
            )));
        }
        if let Some(k) = p.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!(
                "probability of link {} is {} (outside [0, 1])",
                topology.link(k),
                p[k]
            )));
        }
        let node = node_probabilities(topology, &p);
        if let Some(i) = node.iter().position(|&v| v > 1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "node {i} transmits with total probability {}",
                node[i]
            )));
        }
        Ok(Self { p, node })
    }

    /// Every link set to `value`, projected so that each node stays below `1 - EPS`.
    pub fn uniform(topology: &Topology, value: f64) -> Self {
        crate::solver::project_probabilities(&vec![value; topology.link_count()], topology, EPS)
    }

    pub(crate) fn from_projected(topology: &Topology, p: Vec<f64>) -> Self {
        let node = node_probabilities(topology, &p);
        Self { p, node }
    }

    pub fn link_probs(&self) -> &[f64] {
        &self.p
    }

    pub fn node_probs(&self) -> &[f64] {
        &self.node
    }

    pub fn throughputs(&self, topology: &Topology) -> Vec<f64> {
        (0..topology.link_count())
            .map(|k| throughput_of(topology, &self.p, &self.node, k))
            .collect()
    }
}

/// Per-link arrival rates.
#[derive(Debug, Clone, PartialEq)]
pub struct MacRates {
    pub r: Vec<f64>,
}

impl MacRates {
    pub fn z(&self) -> Vec<f64> {
        self.r.iter().map(|r| r.ln()).collect()
    }
}

/// Scalarization weights and the link delay bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    /// Energy weight.
    pub lambda1: f64,
    /// Rate-utility weight.
    pub lambda2: f64,
    /// Delay bound in slots (per link for the MAC problem).
    pub dc: f64,
}

impl Weights {
    pub fn new(lambda1: f64, lambda2: f64, dc: f64) -> Result<Self> {
        let w = Self { lambda1, lambda2, dc };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || self.lambda1 + self.lambda2 <= 0.0 {
            return Err(Error::Domain(format!(
                "weights must be non-negative and not both zero (got {}, {})",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.dc > 1.0 && self.dc.is_finite()) {
            return Err(Error::Domain(format!("delay bound must exceed 1 slot, got {}", self.dc)));
        }
        Ok(())
    }

    /// Coefficients `(a, b)` of the delay constraint `a r + b <= x`.
    fn delay_coefficients(&self) -> (f64, f64) {
        (1.0 - 0.5 / self.dc, 1.0 / self.dc)
    }
}

/// `sum_i e_i P_i`.
pub fn energy(topology: &Topology, state: &MacState) -> f64 {
    topology
        .energy()
        .iter()
        .zip(state.node_probs())
        .map(|(e, p)| e * p)
        .sum()
}

/// `sum log r`.
pub fn rate_utility(rates: &[f64]) -> Result<f64> {
    rates.iter().try_fold(0.0, |acc, &r| {
        if r > 0.0 && r.is_finite() {
            Ok(acc + r.ln())
        } else {
            Err(Error::Domain(format!("rate utility needs positive rates, got {r}")))
        }
    })
}

/// `lambda1 E - lambda2 U_r`.
pub fn mac_objective(topology: &Topology, weights: &Weights, state: &MacState, rates: &[f64]) -> Result<f64> {
    Ok(weights.lambda1 * energy(topology, state) - weights.lambda2 * rate_utility(rates)?)
}

// -- shared pieces of the barrier programs ---------------------------------------

/// `-log x_k(p)` for raw probabilities; `+inf`/NaN outside the domain.
fn neg_log_throughput(topology: &Topology, p: &[f64], node: &[f64], k: usize) -> f64 {
    -p[k].ln()
        - topology
            .contenders(k)
            .iter()
            .map(|&m| (1.0 - node[m]).ln())
            .sum::<f64>()
}

/// Adds the gradient of `-log x_k` (w.r.t. the first `L` coordinates) into `row`.
fn neg_log_throughput_grad(topology: &Topology, p: &[f64], node: &[f64], k: usize, row: &mut [f64]) {
    row[k] -= 1.0 / p[k];
    for &m in topology.contenders(k) {
        let d = 1.0 / (1.0 - node[m]);
        for &q in topology.out_links(m) {
            row[q] += d;
        }
    }
}

/// Adds `w * hess(-log x_k)` into `h`.
fn neg_log_throughput_hess(topology: &Topology, p: &[f64], node: &[f64], k: usize, w: f64, h: &mut DMatrix<f64>) {
    if w == 0.0 {
        return;
    }
    h[(k, k)] += w / (p[k] * p[k]);
    for &m in topology.contenders(k) {
        let d = w / ((1.0 - node[m]) * (1.0 - node[m]));
        for &q in topology.out_links(m) {
            for &q2 in topology.out_links(m) {
                h[(q, q2)] += d;
            }
        }
    }
}

/// Nodes that transmit on at least one link; each gets a `P_i <= 1` constraint.
fn transmitters(topology: &Topology) -> Vec<usize> {
    (0..topology.node_count())
        .filter(|&i| !topology.out_links(i).is_empty())
        .collect()
}

// -- MinDc -------------------------------------------------------------------------

/// `max w s.t. w <= log x_k(p), P_i <= 1` written as a minimization over `(p, w)`.
pub struct MaxMinProgram<'a> {
    topology: &'a Topology,
    nodes: Vec<usize>,
}

impl<'a> MaxMinProgram<'a> {
    pub fn new(topology: &'a Topology) -> Self {
        Self {
            topology,
            nodes: transmitters(topology),
        }
    }
}

impl ConvexProgram for MaxMinProgram<'_> {
    fn dim(&self) -> usize {
        self.topology.link_count() + 1
    }

    fn num_constraints(&self) -> usize {
        self.topology.link_count() + self.nodes.len()
    }

    fn objective(&self, x: &[f64]) -> f64 {
        -x[x.len() - 1]
    }

    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        g[x.len() - 1] = -1.0;
        g
    }

    fn lagrangian_hessian(&self, x: &[f64], _obj_weight: f64, weights: &[f64]) -> DMatrix<f64> {
        let links = self.topology.link_count();
        let p = &x[..links];
        let node = node_probabilities(self.topology, p);
        let mut h = DMatrix::zeros(x.len(), x.len());
        for k in 0..links {
            neg_log_throughput_hess(self.topology, p, &node, k, weights[k], &mut h);
        }
        h
    }

    fn constraints(&self, x: &[f64]) -> DVector<f64> {
        let links = self.topology.link_count();
        let (p, w) = (&x[..links], x[links]);
        let node = node_probabilities(self.topology, p);
        let mut g = DVector::zeros(self.num_constraints());
        for k in 0..links {
            g[k] = w + neg_log_throughput(self.topology, p, &node, k);
        }
        for (c, &i) in self.nodes.iter().enumerate() {
            g[links + c] = node[i] - 1.0;
        }
        g
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let links = self.topology.link_count();
        let p = &x[..links];
        let node = node_probabilities(self.topology, p);
        let mut j = DMatrix::zeros(self.num_constraints(), x.len());
        let mut row = vec![0.0; links];
        for k in 0..links {
            row.iter_mut().for_each(|v| *v = 0.0);
            neg_log_throughput_grad(self.topology, p, &node, k, &mut row);
            for (q, v) in row.iter().enumerate() {
                j[(k, q)] = *v;
            }
            j[(k, links)] = 1.0;
        }
        for (c, &i) in self.nodes.iter().enumerate() {
            for &q in self.topology.out_links(i) {
                j[(links + c, q)] = 1.0;
            }
        }
        j
    }
}

/// The smallest feasible link delay bound and the probabilities achieving it.
#[derive(Debug, Clone)]
pub struct MinDc {
    pub value: f64,
    /// Maxmin link throughput `x* = 1 / MinDc`.
    pub throughput: f64,
    pub state: MacState,
    pub report: SolveReport,
}

/// Solves the maxmin throughput problem; `MinDc = 1 / x*`.
pub fn min_dc(topology: &Topology) -> Result<MinDc> {
    let links = topology.link_count();
    if links == 0 {
        return Err(Error::Domain("topology has no links".into()));
    }
    let program = MaxMinProgram::new(topology);
    let mut start: Vec<f64> = (0..links)
        .map(|k| 0.5 / topology.out_links(topology.link(k).from).len() as f64)
        .collect();
    let x0 = throughputs(topology, &start);
    let w0 = x0.iter().fold(f64::INFINITY, |a, &v| a.min(v)).ln() - 1.0;
    start.push(w0);
    let sol = barrier_solve(&program, &start, &BarrierOptions::default())?;
    let w = sol.x[links];
    let state = MacState::from_projected(topology, sol.x[..links].to_vec());
    // the reported throughput is the achieved minimum at the returned point
    let x = state.throughputs(topology);
    let achieved = x.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    debug_assert!((achieved.ln() - w).abs() < 1e-6);
    Ok(MinDc {
        value: 1.0 / achieved,
        throughput: achieved,
        state,
        report: sol.report,
    })
}

// -- centralized MAC ---------------------------------------------------------------

/// The convex MAC program in `(p, z)`.
pub struct MacProgram<'a> {
    topology: &'a Topology,
    weights: Weights,
    nodes: Vec<usize>,
}

impl<'a> MacProgram<'a> {
    pub fn new(topology: &'a Topology, weights: Weights) -> Self {
        Self {
            topology,
            weights,
            nodes: transmitters(topology),
        }
    }

    fn links(&self) -> usize {
        self.topology.link_count()
    }

    /// Index of the first node constraint.
    fn node_base(&self) -> usize {
        self.links()
    }

    fn floor_base(&self) -> usize {
        self.links() + self.nodes.len()
    }

    fn phi(&self, z: f64) -> (f64, f64, f64) {
        let (a, b) = self.weights.delay_coefficients();
        let ez = a * z.exp();
        let s = ez / (ez + b);
        ((ez + b).ln(), s, s * (1.0 - s))
    }
}

impl ConvexProgram for MacProgram<'_> {
    fn dim(&self) -> usize {
        2 * self.links()
    }

    fn num_constraints(&self) -> usize {
        2 * self.links() + self.nodes.len()
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let l = self.links();
        let node = node_probabilities(self.topology, &x[..l]);
        let e: f64 = self.topology.energy().iter().zip(&node).map(|(e, p)| e * p).sum();
        self.weights.lambda1 * e - self.weights.lambda2 * x[l..].iter().sum::<f64>()
    }

    fn gradient(&self, _x: &[f64]) -> DVector<f64> {
        let l = self.links();
        DVector::from_fn(2 * l, |i, _| {
            if i < l {
                self.weights.lambda1 * self.topology.energy()[self.topology.link(i).from]
            } else {
                -self.weights.lambda2
            }
        })
    }

    fn lagrangian_hessian(&self, x: &[f64], _obj_weight: f64, weights: &[f64]) -> DMatrix<f64> {
        let l = self.links();
        let p = &x[..l];
        let node = node_probabilities(self.topology, p);
        let mut h = DMatrix::zeros(2 * l, 2 * l);
        for k in 0..l {
            neg_log_throughput_hess(self.topology, p, &node, k, weights[k], &mut h);
            let (_, _, curv) = self.phi(x[l + k]);
            h[(l + k, l + k)] += weights[k] * curv;
        }
        h
    }

    fn constraints(&self, x: &[f64]) -> DVector<f64> {
        let l = self.links();
        let p = &x[..l];
        let node = node_probabilities(self.topology, p);
        let mut g = DVector::zeros(self.num_constraints());
        for k in 0..l {
            g[k] = self.phi(x[l + k]).0 + neg_log_throughput(self.topology, p, &node, k);
        }
        for (c, &i) in self.nodes.iter().enumerate() {
            g[self.node_base() + c] = node[i] - 1.0;
        }
        let floor = RATE_FLOOR.ln();
        for k in 0..l {
            g[self.floor_base() + k] = floor - x[l + k];
        }
        g
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let l = self.links();
        let p = &x[..l];
        let node = node_probabilities(self.topology, p);
        let mut j = DMatrix::zeros(self.num_constraints(), 2 * l);
        let mut row = vec![0.0; l];
        for k in 0..l {
            row.iter_mut().for_each(|v| *v = 0.0);
            neg_log_throughput_grad(self.topology, p, &node, k, &mut row);
            for (q, v) in row.iter().enumerate() {
                j[(k, q)] = *v;
            }
            j[(k, l + k)] = self.phi(x[l + k]).1;
        }
        for (c, &i) in self.nodes.iter().enumerate() {
            for &q in self.topology.out_links(i) {
                j[(self.node_base() + c, q)] = 1.0;
            }
        }
        for k in 0..l {
            j[(self.floor_base() + k, l + k)] = -1.0;
        }
        j
    }
}

/// Optimal MAC operating point.
#[derive(Debug, Clone)]
pub struct MacSolution {
    pub state: MacState,
    pub rates: MacRates,
    /// Multipliers of the per-link delay constraints.
    pub duals: Vec<f64>,
    pub objective: f64,
    pub report: SolveReport,
}

impl MacSolution {
    pub fn energy(&self, topology: &Topology) -> f64 {
        energy(topology, &self.state)
    }

    pub fn rate_utility(&self) -> f64 {
        self.rates.r.iter().map(|r| r.ln()).sum()
    }

    /// Link delays under the M/G/1 model.
    pub fn delays(&self, topology: &Topology) -> Result<Vec<f64>> {
        let x = self.state.throughputs(topology);
        x.iter().zip(&self.rates.r).map(|(&x, &r)| link_delay(x, r)).collect()
    }
}

/// Centralized solution of the delay-constrained MAC problem.
pub fn solve_mac_centralized(topology: &Topology, weights: &Weights) -> Result<MacSolution> {
    weights.validate()?;
    let floor = min_dc(topology)?;
    if weights.dc <= floor.value {
        return Err(Error::Infeasible {
            reason: format!(
                "link delay bound {} does not exceed MinDc = {:.9}",
                weights.dc, floor.value
            ),
        });
    }
    let l = topology.link_count();
    let (a, b) = weights.delay_coefficients();
    let x = floor.state.throughputs(topology);
    let mut start = floor.state.link_probs().to_vec();
    start.extend(x.iter().map(|&xk| (0.5 * (xk - b) / a).max(RATE_FLOOR * 10.0).ln()));
    let program = MacProgram::new(topology, *weights);
    let sol = barrier_solve(&program, &start, &BarrierOptions::default())?;
    let state = MacState::from_projected(topology, sol.x[..l].to_vec());
    let rates = MacRates {
        r: sol.x[l..].iter().map(|z| z.exp()).collect(),
    };
    Ok(MacSolution {
        state,
        rates,
        duals: sol.dual[..l].to_vec(),
        objective: sol.objective,
        report: sol.report,
    })
}

// -- distributed MAC ----------------------------------------------------------------

/// Stationary rate of a link for dual `mu`: `lambda2 / ((mu - lambda2)(D_c - 1/2))`,
/// capped at `1 - EPS` when `mu <= lambda2` and floored at [`RATE_FLOOR`].
pub fn mac_rate_update(mu: f64, weights: &Weights) -> f64 {
    if weights.lambda2 <= 0.0 {
        return RATE_FLOOR;
    }
    let cap = 1.0 - EPS;
    if mu <= weights.lambda2 {
        return cap;
    }
    (weights.lambda2 / ((mu - weights.lambda2) * (weights.dc - 0.5))).clamp(RATE_FLOOR, cap)
}

/// Outcome of one node's probability update.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeProbUpdate {
    /// Outgoing link indices of the node, in topology order.
    pub links: Vec<usize>,
    pub probs: Vec<f64>,
    pub node_prob: f64,
    /// No admissible root of the node quadratic; the projected current value was kept.
    pub fallback: bool,
}

/// Roots of `a P^2 - b P + c = 0` in ascending order (one root when `a == 0`).
fn node_quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    if a == 0.0 {
        return if b > 0.0 { vec![c / b] } else { Vec::new() };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let q = b + disc.sqrt();
    // stable forms: small root 2c / (b + sqrt), large root (b + sqrt) / 2a
    let small = if q > 0.0 { 2.0 * c / q } else { 0.0 };
    vec![small, q / (2.0 * a)]
}

/// Best response of node `node` to the published link duals.
///
/// Reads only the duals of its own outgoing links and of the links whose success
/// probability it affects (receivers at itself or at its one-hop neighbours).
pub fn mac_prob_update(
    node: usize,
    duals: &[f64],
    weights: &Weights,
    topology: &Topology,
    current: &[f64],
) -> NodeProbUpdate {
    let links = topology.out_links(node).to_vec();
    let a = weights.lambda1 * topology.energy()[node];
    let interference: f64 = topology.affected_links(node).iter().map(|&k| duals[k]).sum();
    let own: f64 = links.iter().map(|&k| duals[k]).sum();
    let b = a + interference + own;
    let cap = 1.0 - EPS;

    let chosen = node_quadratic_roots(a, b, own)
        .into_iter()
        .find(|&root| (0.0..=cap).contains(&root));

    let Some(total) = chosen else {
        let kept: Vec<f64> = links.iter().map(|&k| current[k].clamp(EPS, cap)).collect();
        let sum: f64 = kept.iter().sum();
        let probs = if sum > cap {
            kept.iter().map(|v| v * cap / sum).collect()
        } else {
            kept
        };
        return NodeProbUpdate {
            node_prob: probs.iter().sum(),
            links,
            probs,
            fallback: true,
        };
    };

    let denom = a + interference / (1.0 - total);
    let mut probs: Vec<f64> = links
        .iter()
        .map(|&k| {
            if denom > 0.0 {
                (duals[k] / denom).clamp(EPS, cap)
            } else {
                EPS
            }
        })
        .collect();
    let sum: f64 = probs.iter().sum();
    if sum > cap {
        probs.iter_mut().for_each(|v| *v *= cap / sum);
    }
    NodeProbUpdate {
        node_prob: probs.iter().sum(),
        links,
        probs,
        fallback: false,
    }
}

/// Delay-constraint residual `log((1 - 1/(2D_c)) r + 1/D_c) - log x` per link.
pub fn mac_constraint_residuals(topology: &Topology, state: &MacState, rates: &[f64], weights: &Weights) -> Vec<f64> {
    let (a, b) = weights.delay_coefficients();
    state
        .throughputs(topology)
        .iter()
        .zip(rates)
        .map(|(&x, &r)| (a * r + b).ln() - x.ln())
        .collect()
}

/// Projected dual ascent step `[mu + alpha * residual]^+`.
pub fn mac_dual_update(
    duals: &[f64],
    topology: &Topology,
    state: &MacState,
    rates: &[f64],
    weights: &Weights,
    alpha: f64,
) -> Vec<f64> {
    let residual = mac_constraint_residuals(topology, state, rates, weights);
    duals
        .iter()
        .zip(&residual)
        .map(|(&mu, &h)| (mu + alpha * h).max(0.0))
        .collect()
}

/// The Lagrangian of the MAC program in `(p, z)` for duals `mu`.
pub fn mac_lagrangian(topology: &Topology, weights: &Weights, p: &[f64], z: &[f64], mu: &[f64]) -> f64 {
    let (a, b) = weights.delay_coefficients();
    let node = node_probabilities(topology, p);
    (0..topology.link_count())
        .map(|k| {
            let e = topology.energy()[topology.link(k).from];
            weights.lambda1 * e * p[k] - weights.lambda2 * z[k]
                + mu[k] * ((a * z[k].exp() + b).ln() + neg_log_throughput(topology, p, &node, k))
        })
        .sum()
}

/// Analytic gradient of [`mac_lagrangian`] as `(d/dp, d/dz)`.
///
/// `d/dp_ij = lambda1 e_i - mu_ij / p_ij + (sum of affected-link duals) / (1 - P_i)`.
pub fn mac_lagrangian_gradient(
    topology: &Topology,
    weights: &Weights,
    p: &[f64],
    z: &[f64],
    mu: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (a, b) = weights.delay_coefficients();
    let node = node_probabilities(topology, p);
    let dp = (0..topology.link_count())
        .map(|k| {
            let i = topology.link(k).from;
            let interference: f64 = topology.affected_links(i).iter().map(|&q| mu[q]).sum();
            weights.lambda1 * topology.energy()[i] - mu[k] / p[k] + interference / (1.0 - node[i])
        })
        .collect();
    let dz = z
        .iter()
        .zip(mu)
        .map(|(&zk, &m)| {
            let ez = a * zk.exp();
            -weights.lambda2 + m * ez / (ez + b)
        })
        .collect();
    (dp, dz)
}

#[derive(Debug, Clone, Copy)]
pub struct MacDistributedOptions {
    pub schedule: StepSchedule,
    pub max_iters: usize,
    pub initial_p: f64,
    /// Link whose probability and rate are tracked in the trace.
    pub reference_link: usize,
}

impl Default for MacDistributedOptions {
    fn default() -> Self {
        Self {
            schedule: StepSchedule::default(),
            max_iters: 400,
            initial_p: 0.1,
            reference_link: 0,
        }
    }
}

/// One recorded round of a distributed run.
#[derive(Debug, Clone, PartialEq)]
pub struct MacRound {
    pub iteration: usize,
    pub objective: f64,
    pub ref_prob: f64,
    pub ref_rate: f64,
    pub max_violation: f64,
    /// Relative errors `|v - v*| / |v*|` of objective, reference probability and rate.
    pub errors: Option<[f64; 3]>,
}

#[derive(Debug, Clone)]
pub struct MacTrace {
    pub rounds: Vec<MacRound>,
    pub state: MacState,
    pub rates: MacRates,
    pub duals: Vec<f64>,
    pub fallbacks: usize,
}

impl MacTrace {
    /// First round from which every tracked error stays below `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        iterations_below(self.rounds.iter().map(|r| r.errors), threshold)
    }
}

pub(crate) fn iterations_below<I, const N: usize>(errors: I, threshold: f64) -> Option<usize>
where
    I: DoubleEndedIterator<Item = Option<[f64; N]>> + ExactSizeIterator,
{
    let len = errors.len();
    let mut first = None;
    for (n, e) in errors.enumerate().rev() {
        match e {
            Some(e) if e.iter().all(|v| *v < threshold) => first = Some(n),
            _ => break,
        }
    }
    first.filter(|_| len > 0)
}

pub(crate) fn relative_error(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs().max(1e-12)
}

/// Tracks the worst relative constraint violation and flags growth by 10x over 100 rounds.
///
/// Violations below `VIOLATION_FLOOR` count as the floor, so noise around a
/// converged point is never flagged.
const VIOLATION_FLOOR: f64 = 1e-2;

pub(crate) struct DivergenceGuard {
    history: Vec<f64>,
}

impl DivergenceGuard {
    pub(crate) fn new() -> Self {
        Self { history: Vec::new() }
    }

    pub(crate) fn check(&mut self, iteration: usize, objective: f64, violation: f64) -> Result<()> {
        if !objective.is_finite() || !violation.is_finite() {
            return Err(Error::Divergence {
                iteration,
                reason: "objective or constraint residual is not finite".into(),
            });
        }
        self.history.push(violation);
        let n = self.history.len();
        if n > 100 {
            let old = self.history[n - 101];
            if violation > 10.0 * old.max(VIOLATION_FLOOR) {
                return Err(Error::Divergence {
                    iteration,
                    reason: format!(
                        "constraint violation grew from {old:.3e} to {violation:.3e} over 100 rounds"
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Dual-decomposition MAC iteration in bulk-synchronous rounds.
///
/// Each round first takes a projected dual step on every link using the last
/// published probabilities and rates, then every node computes its link
/// probabilities and rates from the newly published duals.
pub fn run_mac_distributed(
    topology: &Topology,
    weights: &Weights,
    options: &MacDistributedOptions,
    reference: Option<&MacSolution>,
) -> Result<MacTrace> {
    weights.validate()?;
    options.schedule.alpha.validate()?;
    let l = topology.link_count();
    if options.reference_link >= l {
        return Err(Error::Domain(format!("reference link {} out of range", options.reference_link)));
    }
    let (a, b) = weights.delay_coefficients();
    let mut state = MacState::uniform(topology, options.initial_p);
    // start every link at the largest rate meeting the bound at the initial probabilities
    let mut rates: Vec<f64> = state
        .throughputs(topology)
        .iter()
        .map(|&x| ((x - b) / a).max(RATE_FLOOR))
        .collect();
    let mut duals = vec![0.0; l];
    let mut rounds = Vec::with_capacity(options.max_iters + 1);
    let mut fallbacks = 0;
    let mut guard = DivergenceGuard::new();

    let record = |n: usize, state: &MacState, rates: &[f64]| -> Result<MacRound> {
        let objective = mac_objective(topology, weights, state, rates)?;
        let violation = mac_constraint_residuals(topology, state, rates, weights)
            .into_iter()
            .fold(0.0, f64::max);
        let k = options.reference_link;
        let errors = reference.map(|opt| {
            [
                relative_error(objective, opt.objective),
                relative_error(state.link_probs()[k], opt.state.link_probs()[k]),
                relative_error(rates[k], opt.rates.r[k]),
            ]
        });
        Ok(MacRound {
            iteration: n,
            objective,
            ref_prob: state.link_probs()[k],
            ref_rate: rates[k],
            max_violation: violation,
            errors,
        })
    };

    rounds.push(record(0, &state, &rates)?);
    for n in 1..=options.max_iters {
        let alpha = options.schedule.alpha.at(n - 1);
        duals = mac_dual_update(&duals, topology, &state, &rates, weights, alpha);

        let mut p = vec![0.0; l];
        for i in 0..topology.node_count() {
            if topology.out_links(i).is_empty() {
                continue;
            }
            let update = mac_prob_update(i, &duals, weights, topology, state.link_probs());
            fallbacks += usize::from(update.fallback);
            for (&k, &v) in update.links.iter().zip(&update.probs) {
                p[k] = v;
            }
        }
        state = MacState::from_projected(topology, p);
        rates = duals.iter().map(|&mu| mac_rate_update(mu, weights)).collect();

        let round = record(n, &state, &rates)?;
        guard.check(n, round.objective, round.max_violation)?;
        rounds.push(round);
    }
    Ok(MacTrace {
        rounds,
        state,
        rates: MacRates { r: rates },
        duals,
        fallbacks,
    })
}

// -- suboptimal rule ----------------------------------------------------------------

/// Delay-unconstrained program: `min lambda1 E(p) - lambda2 sum log x_k(p)`.
pub struct UnconstrainedProgram<'a> {
    topology: &'a Topology,
    weights: Weights,
    nodes: Vec<usize>,
}

impl<'a> UnconstrainedProgram<'a> {
    pub fn new(topology: &'a Topology, weights: Weights) -> Self {
        Self {
            topology,
            weights,
            nodes: transmitters(topology),
        }
    }
}

impl ConvexProgram for UnconstrainedProgram<'_> {
    fn dim(&self) -> usize {
        self.topology.link_count()
    }

    fn num_constraints(&self) -> usize {
        self.topology.link_count() + self.nodes.len()
    }

    fn objective(&self, p: &[f64]) -> f64 {
        let node = node_probabilities(self.topology, p);
        let e: f64 = self.topology.energy().iter().zip(&node).map(|(e, p)| e * p).sum();
        let mut val = self.weights.lambda1 * e;
        if self.weights.lambda2 > 0.0 {
            val += self.weights.lambda2
                * (0..p.len())
                    .map(|k| neg_log_throughput(self.topology, p, &node, k))
                    .sum::<f64>();
        }
        val
    }

    fn gradient(&self, p: &[f64]) -> DVector<f64> {
        let node = node_probabilities(self.topology, p);
        let mut g = vec![0.0; p.len()];
        if self.weights.lambda2 > 0.0 {
            let mut row = vec![0.0; p.len()];
            for k in 0..p.len() {
                row.iter_mut().for_each(|v| *v = 0.0);
                neg_log_throughput_grad(self.topology, p, &node, k, &mut row);
                for (gq, rq) in g.iter_mut().zip(&row) {
                    *gq += self.weights.lambda2 * rq;
                }
            }
        }
        for (k, gk) in g.iter_mut().enumerate() {
            *gk += self.weights.lambda1 * self.topology.energy()[self.topology.link(k).from];
        }
        DVector::from_vec(g)
    }

    fn lagrangian_hessian(&self, p: &[f64], obj_weight: f64, _weights: &[f64]) -> DMatrix<f64> {
        let node = node_probabilities(self.topology, p);
        let mut h = DMatrix::zeros(p.len(), p.len());
        for k in 0..p.len() {
            neg_log_throughput_hess(self.topology, p, &node, k, obj_weight * self.weights.lambda2, &mut h);
        }
        h
    }

    fn constraints(&self, p: &[f64]) -> DVector<f64> {
        let node = node_probabilities(self.topology, p);
        let l = p.len();
        let mut g = DVector::zeros(self.num_constraints());
        for k in 0..l {
            g[k] = -p[k];
        }
        for (c, &i) in self.nodes.iter().enumerate() {
            g[l + c] = node[i] - 1.0;
        }
        g
    }

    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let l = p.len();
        let mut j = DMatrix::zeros(self.num_constraints(), l);
        for k in 0..l {
            j[(k, k)] = -1.0;
        }
        for (c, &i) in self.nodes.iter().enumerate() {
            for &q in self.topology.out_links(i) {
                j[(l + c, q)] = 1.0;
            }
        }
        j
    }
}

/// Result of the non-iterative suboptimal rule.
#[derive(Debug, Clone)]
pub struct SuboptimalMac {
    pub state: MacState,
    pub rates: MacRates,
    /// `false` where `D_c < 1/x_ij`, i.e. no positive rate meets the bound.
    pub feasible: Vec<bool>,
    pub objective: f64,
}

impl SuboptimalMac {
    pub fn infeasible_links(&self) -> usize {
        self.feasible.iter().filter(|f| !**f).count()
    }
}

/// Rate making the link delay exactly `dc`: `(dc x - 1) / (dc - 1/2)`.
pub fn suboptimal_rate(x: f64, dc: f64) -> f64 {
    (dc * x - 1.0) / (dc - 0.5)
}

/// Solves the MAC problem without the delay constraint, then sets each link rate so
/// that the link delay equals `D_c` at the achieved throughput.
pub fn mac_suboptimal(topology: &Topology, weights: &Weights) -> Result<SuboptimalMac> {
    weights.validate()?;
    let program = UnconstrainedProgram::new(topology, *weights);
    let start: Vec<f64> = (0..topology.link_count())
        .map(|k| 0.5 / topology.out_links(topology.link(k).from).len() as f64)
        .collect();
    let sol = barrier_solve(&program, &start, &BarrierOptions::default())?;
    let state = crate::solver::project_with_floor(&sol.x, topology, 0.0, 0.0);
    let x = state.throughputs(topology);
    let mut feasible = Vec::with_capacity(x.len());
    let r: Vec<f64> = x
        .iter()
        .map(|&xk| {
            let ok = weights.dc * xk > 1.0;
            feasible.push(ok);
            if ok {
                suboptimal_rate(xk, weights.dc).max(RATE_FLOOR)
            } else {
                RATE_FLOOR
            }
        })
        .collect();
    let objective = mac_objective(topology, weights, &state, &r)?;
    Ok(SuboptimalMac {
        state,
        rates: MacRates { r },
        feasible,
        objective,
    })
}
