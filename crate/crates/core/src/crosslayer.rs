//! Joint congestion and contention control under end-to-end delay bounds.
//!
//! Each session `s` sends at rate `y_s` along a fixed route and must meet a delay
//! bound `D_s`. Every link used by at least one session carries a delay budget
//! `D_ij` with
//!
//! ```text
//! (1 - 1/(2 D_ij)) sum_{s on ij} y_s + 1/D_ij <= x_ij(p)      (link budget holds)
//! sum_{ij on route(s)} D_ij <= D_s                            (session bound)
//! ```
//!
//! The first constraint is exactly "M/G/1 delay of the link is at most `D_ij`".
//! The objective is `lambda1 E(p) - lambda2 sum_s log y_s`. Links carrying no
//! session are switched off (`p_ij = 0`).

use nalgebra::{DMatrix, DVector};

use crate::delay::{end_to_end_delay, node_probabilities, throughput_of, weighted_throughput_gradient};
use crate::error::{Error, Result};
use crate::mac::{energy, iterations_below, min_dc, relative_error, DivergenceGuard, MacState};
use crate::network::{Link, Network, Topology};
use crate::solver::{barrier_solve, project_with_floor, BarrierOptions, ConvexProgram, SolveReport, StepRule, StepSchedule};
use crate::{EPS, RATE_FLOOR};

/// Scalarization weights for the cross-layer problem; delay bounds live on the sessions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XlayerWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl XlayerWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let w = Self { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        // a zero rate weight makes every session rate collapse to the floor, which the
        // session-rate update cannot express
        if !(self.lambda1 >= 0.0 && self.lambda2 > 0.0 && self.lambda1.is_finite() && self.lambda2.is_finite()) {
            return Err(Error::Domain(format!(
                "cross-layer weights need lambda1 >= 0 and lambda2 > 0 (got {}, {})",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// Session rates.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionRates {
    pub y: Vec<f64>,
}

impl SessionRates {
    pub fn z(&self) -> Vec<f64> {
        self.y.iter().map(|y| y.ln()).collect()
    }

    /// Aggregate arrival rate of every link.
    pub fn link_loads(&self, network: &Network) -> Vec<f64> {
        (0..network.topology().link_count())
            .map(|k| network.sessions_on(k).iter().map(|&s| self.y[s]).sum())
            .collect()
    }

    pub fn utility(&self) -> f64 {
        self.y.iter().map(|y| y.ln()).sum()
    }
}

/// Per-link delay budgets; `None` on links that carry no session.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkDelayBudget {
    pub d: Vec<Option<f64>>,
}

/// Dual variables of the link-budget and session-bound constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossDuals {
    pub mu: Vec<f64>,
    pub v: Vec<f64>,
}

fn active_links(network: &Network) -> Vec<usize> {
    (0..network.topology().link_count())
        .filter(|&k| !network.sessions_on(k).is_empty())
        .collect()
}

fn check_bounds(network: &Network) -> Result<()> {
    if network.sessions().is_empty() {
        return Err(Error::Domain("network has no sessions".into()));
    }
    for s in network.sessions() {
        if !(s.delay_bound.is_finite() && s.delay_bound > 0.0) {
            return Err(Error::Domain(format!(
                "session {} has invalid delay bound {}",
                s.id, s.delay_bound
            )));
        }
    }
    Ok(())
}

// -- centralized ------------------------------------------------------------------

/// The convex cross-layer program in `(z_s, D_ij, p_ij)` over active links.
///
/// Variable layout: `[z_0..z_S, D_a0..D_aA, p_a0..p_aA]` where `a` runs over the
/// active links. Constraints: one log-form budget constraint per active link, one
/// bound per session, `P_i <= 1` per transmitting node and a rate floor per session.
pub struct XlayerProgram<'a> {
    network: &'a Network,
    weights: XlayerWeights,
    active: Vec<usize>,
    /// Position of each link among the active ones.
    slot: Vec<Option<usize>>,
    nodes: Vec<usize>,
}

impl<'a> XlayerProgram<'a> {
    pub fn new(network: &'a Network, weights: XlayerWeights) -> Self {
        let topology = network.topology();
        let active = active_links(network);
        let mut slot = vec![None; topology.link_count()];
        for (a, &k) in active.iter().enumerate() {
            slot[k] = Some(a);
        }
        let nodes = (0..topology.node_count())
            .filter(|&i| topology.out_links(i).iter().any(|&k| slot[k].is_some()))
            .collect();
        Self {
            network,
            weights,
            active,
            slot,
            nodes,
        }
    }

    fn sessions(&self) -> usize {
        self.network.sessions().len()
    }

    fn d_index(&self, a: usize) -> usize {
        self.sessions() + a
    }

    fn p_index(&self, a: usize) -> usize {
        self.sessions() + self.active.len() + a
    }

    /// Full link-probability vector (inactive links at zero).
    fn full_p(&self, x: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.network.topology().link_count()];
        for (a, &k) in self.active.iter().enumerate() {
            p[k] = x[self.p_index(a)];
        }
        p
    }

    fn load(&self, x: &[f64], k: usize) -> f64 {
        self.network.sessions_on(k).iter().map(|&s| x[s].exp()).sum()
    }

    /// `F = R (1 - 1/(2D)) + 1/D` and `c = 1 - R/2` for active link `a`.
    fn budget_terms(&self, x: &[f64], a: usize) -> (f64, f64, f64, f64) {
        let k = self.active[a];
        let r = self.load(x, k);
        let d = x[self.d_index(a)];
        let f = r * (1.0 - 0.5 / d) + 1.0 / d;
        (r, d, f, 1.0 - 0.5 * r)
    }

    fn layout(&self) -> (usize, usize, usize) {
        let a = self.active.len();
        (a, a + self.sessions(), a + self.sessions() + self.nodes.len())
    }

    pub fn pack(&self, rates: &SessionRates, budgets: &LinkDelayBudget, state: &MacState) -> Vec<f64> {
        let mut x = rates.z();
        x.extend(self.active.iter().map(|&k| budgets.d[k].unwrap_or(f64::NAN)));
        x.extend(self.active.iter().map(|&k| state.link_probs()[k]));
        x
    }
}

impl ConvexProgram for XlayerProgram<'_> {
    fn dim(&self) -> usize {
        self.sessions() + 2 * self.active.len()
    }

    fn num_constraints(&self) -> usize {
        self.active.len() + 2 * self.sessions() + self.nodes.len()
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let p = self.full_p(x);
        let node = node_probabilities(self.network.topology(), &p);
        let e: f64 = self.network.topology().energy().iter().zip(&node).map(|(e, p)| e * p).sum();
        self.weights.lambda1 * e - self.weights.lambda2 * x[..self.sessions()].iter().sum::<f64>()
    }

    fn gradient(&self, _x: &[f64]) -> DVector<f64> {
        let topology = self.network.topology();
        let mut g = DVector::zeros(self.dim());
        for s in 0..self.sessions() {
            g[s] = -self.weights.lambda2;
        }
        for (a, &k) in self.active.iter().enumerate() {
            g[self.p_index(a)] = self.weights.lambda1 * topology.energy()[topology.link(k).from];
        }
        g
    }

    fn lagrangian_hessian(&self, x: &[f64], _obj_weight: f64, weights: &[f64]) -> DMatrix<f64> {
        let topology = self.network.topology();
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        let p = self.full_p(x);
        let node = node_probabilities(topology, &p);
        let mut scratch = DMatrix::zeros(topology.link_count(), topology.link_count());
        for (a, &k) in self.active.iter().enumerate() {
            let w = weights[a];
            if w == 0.0 {
                continue;
            }
            let (_, d, f, c) = self.budget_terms(x, a);
            let slope = 1.0 - 0.5 / d;
            let on = self.network.sessions_on(k);
            let di = self.d_index(a);
            for &s in on {
                let qs = x[s].exp();
                h[(s, s)] += w * qs * slope / f;
                for &t in on {
                    let qt = x[t].exp();
                    h[(s, t)] -= w * qs * qt * slope * slope / (f * f);
                }
                let cross = w * qs / (d * d * f * f);
                h[(s, di)] += cross;
                h[(di, s)] += cross;
            }
            h[(di, di)] += w * (2.0 * c * f / (d * d * d) - c * c / (d * d * d * d)) / (f * f);
            scratch.fill(0.0);
            neg_log_throughput_hess(topology, &p, &node, k, w, &mut scratch);
            for (a1, &k1) in self.active.iter().enumerate() {
                for (a2, &k2) in self.active.iter().enumerate() {
                    h[(self.p_index(a1), self.p_index(a2))] += scratch[(k1, k2)];
                }
            }
        }
        h
    }

    fn constraints(&self, x: &[f64]) -> DVector<f64> {
        let topology = self.network.topology();
        let (sess_base, node_base, floor_base) = self.layout();
        let p = self.full_p(x);
        let node = node_probabilities(topology, &p);
        let mut g = DVector::zeros(self.num_constraints());
        for (a, &k) in self.active.iter().enumerate() {
            let (r, d, f, _) = self.budget_terms(x, a);
            // outside D >= 1, R < 2 the log form is no longer convex
            g[a] = if d >= 1.0 && r < 2.0 {
                f.ln() - throughput_of(topology, &p, &node, k).ln()
            } else {
                f64::NAN
            };
        }
        for (s, route) in self.network.routes().iter().enumerate() {
            let used: f64 = route.iter().map(|&k| x[self.d_index(self.slot[k].unwrap())]).sum();
            g[sess_base + s] = used - self.network.sessions()[s].delay_bound;
        }
        for (c, &i) in self.nodes.iter().enumerate() {
            g[node_base + c] = node[i] - 1.0;
        }
        for s in 0..self.sessions() {
            g[floor_base + s] = RATE_FLOOR.ln() - x[s];
        }
        g
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let topology = self.network.topology();
        let (sess_base, node_base, floor_base) = self.layout();
        let p = self.full_p(x);
        let node = node_probabilities(topology, &p);
        let mut j = DMatrix::zeros(self.num_constraints(), self.dim());
        let mut row = vec![0.0; topology.link_count()];
        for (a, &k) in self.active.iter().enumerate() {
            let (_, d, f, c) = self.budget_terms(x, a);
            let slope = 1.0 - 0.5 / d;
            for &s in self.network.sessions_on(k) {
                j[(a, s)] = x[s].exp() * slope / f;
            }
            j[(a, self.d_index(a))] = -c / (d * d * f);
            row.iter_mut().for_each(|v| *v = 0.0);
            neg_log_throughput_grad(topology, &p, &node, k, &mut row);
            for (a2, &k2) in self.active.iter().enumerate() {
                j[(a, self.p_index(a2))] = row[k2];
            }
        }
        for (s, route) in self.network.routes().iter().enumerate() {
            for &k in route {
                j[(sess_base + s, self.d_index(self.slot[k].unwrap()))] = 1.0;
            }
        }
        for (c, &i) in self.nodes.iter().enumerate() {
            for &k in topology.out_links(i) {
                if let Some(a) = self.slot[k] {
                    j[(node_base + c, self.p_index(a))] = 1.0;
                }
            }
        }
        for s in 0..self.sessions() {
            j[(floor_base + s, s)] = -1.0;
        }
        j
    }
}

fn neg_log_throughput_grad(topology: &Topology, p: &[f64], node: &[f64], k: usize, row: &mut [f64]) {
    row[k] -= 1.0 / p[k];
    for &m in topology.contenders(k) {
        let d = 1.0 / (1.0 - node[m]);
        for &q in topology.out_links(m) {
            row[q] += d;
        }
    }
}

fn neg_log_throughput_hess(topology: &Topology, p: &[f64], node: &[f64], k: usize, w: f64, h: &mut DMatrix<f64>) {
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

/// Optimal cross-layer operating point.
#[derive(Debug, Clone)]
pub struct XlayerSolution {
    pub state: MacState,
    pub rates: SessionRates,
    pub budgets: LinkDelayBudget,
    /// Multipliers of the log-form link-budget constraints (zero on inactive links).
    pub link_duals: Vec<f64>,
    pub session_duals: Vec<f64>,
    pub objective: f64,
    pub report: SolveReport,
}

impl XlayerSolution {
    /// End-to-end M/G/1 delay of every session at the solution.
    pub fn session_delays(&self, network: &Network) -> Result<Vec<f64>> {
        let topology = network.topology();
        let x = self.state.throughputs(topology);
        let r = self.rates.link_loads(network);
        network
            .routes()
            .iter()
            .map(|route| end_to_end_delay(topology, route, &x, &r))
            .collect()
    }
}

/// Centralized solution of the cross-layer problem.
pub fn solve_xlayer_centralized(network: &Network, weights: &XlayerWeights) -> Result<XlayerSolution> {
    weights.validate()?;
    check_bounds(network)?;
    let topology = network.topology();
    let program = XlayerProgram::new(network, *weights);

    let witness = active_witness(network, &program.active)?;
    let x = witness.throughputs(topology);
    let need: Vec<f64> = network
        .routes()
        .iter()
        .map(|route| route.iter().map(|&k| 1.0 / x[k]).sum())
        .collect();
    let start = strict_start(network, &program, &witness, &x, &need);
    let sol = barrier_solve(&program, &start, &BarrierOptions::default()).map_err(|e| match e {
        Error::Infeasible { .. } => {
            // name the session whose bound is smallest relative to the service times on its route
            let (worst, ratio) = need
                .iter()
                .enumerate()
                .map(|(s, n)| (s, n / network.sessions()[s].delay_bound))
                .fold((0, f64::NEG_INFINITY), |acc, v| if v.1 > acc.1 { v } else { acc });
            Error::Infeasible {
                reason: format!(
                    "delay bounds cannot be met; tightest is session {} (bound {}, route service time {:.3} slots at maxmin probabilities)",
                    network.sessions()[worst].id,
                    network.sessions()[worst].delay_bound,
                    ratio * network.sessions()[worst].delay_bound
                ),
            }
        }
        other => other,
    })?;

    let s_count = network.sessions().len();
    let a_count = program.active.len();
    let mut p = vec![0.0; topology.link_count()];
    let mut d = vec![None; topology.link_count()];
    let mut link_duals = vec![0.0; topology.link_count()];
    for (a, &k) in program.active.iter().enumerate() {
        p[k] = sol.x[program.p_index(a)];
        d[k] = Some(sol.x[program.d_index(a)]);
        link_duals[k] = sol.dual[a];
    }
    Ok(XlayerSolution {
        state: MacState::new(topology, p)?,
        rates: SessionRates {
            y: sol.x[..s_count].iter().map(|z| z.exp()).collect(),
        },
        budgets: LinkDelayBudget { d },
        link_duals,
        session_duals: sol.dual[a_count..a_count + s_count].to_vec(),
        objective: sol.objective,
        report: sol.report,
    })
}

/// Maxmin probabilities over the links that carry traffic, other links silent.
fn active_witness(network: &Network, active: &[usize]) -> Result<MacState> {
    let topology = network.topology();
    let links: Vec<Link> = active.iter().map(|&k| topology.link(k)).collect();
    let neighbors = (0..topology.node_count()).map(|i| topology.neighbors(i).to_vec()).collect();
    let sub = Topology::with_neighbors(topology.node_count(), links, topology.energy().to_vec(), neighbors)?;
    let md = min_dc(&sub)?;
    let mut p = vec![0.0; topology.link_count()];
    for &k in active {
        let sub_k = sub.link_index(topology.link(k)).expect("active link present in sub-topology");
        p[k] = md.state.link_probs()[sub_k];
    }
    MacState::new(topology, p)
}

/// A strictly feasible point when the witness leaves slack on every session bound;
/// otherwise a point with tiny rates for phase I to repair.
fn strict_start(network: &Network, program: &XlayerProgram, witness: &MacState, x: &[f64], need: &[f64]) -> Vec<f64> {
    let topology = network.topology();
    let slack = need
        .iter()
        .zip(network.sessions())
        .map(|(n, s)| s.delay_bound / n - 1.0)
        .fold(f64::INFINITY, f64::min);
    let grow = if slack > 0.0 { 1.0 + (0.5 * slack).min(1.0) } else { 2.0 };
    let d: Vec<Option<f64>> = (0..topology.link_count())
        .map(|k| (!network.sessions_on(k).is_empty()).then(|| grow / x[k]))
        .collect();
    let y = network
        .routes()
        .iter()
        .map(|route| {
            route
                .iter()
                .map(|&k| {
                    let dk = d[k].unwrap();
                    0.5 * (x[k] - 1.0 / dk) / ((1.0 - 0.5 / dk) * network.sessions_on(k).len() as f64)
                })
                .fold(0.5, f64::min)
                .max(1e-6)
        })
        .collect();
    program.pack(&SessionRates { y }, &LinkDelayBudget { d }, witness)
}

// -- distributed ------------------------------------------------------------------

/// Budget update of one link: the minimizer of
/// `D sum_s v_s + mu ((1 - 1/(2D)) sum_s y_s + 1/D)` over `1/x < D <= ceiling`,
/// i.e. `sqrt(mu (2 - sum y) / (2 sum v))` clamped to `[1/x + EPS, ceiling]`.
///
/// `ceiling` is the smallest bound among the sessions crossing the link; no budget
/// can usefully exceed it. With no session dual (`sum v = 0`) nothing prices `D`
/// and the link takes the ceiling.
pub fn link_budget_update(mu: f64, v_sum: f64, y_sum: f64, x: f64, ceiling: f64) -> f64 {
    let lower = 1.0 / x + EPS;
    let upper = ceiling.max(lower);
    if v_sum <= 0.0 {
        return upper;
    }
    let d = (mu * (2.0 - y_sum) / (2.0 * v_sum)).max(0.0).sqrt();
    d.clamp(lower, upper)
}

/// Rate update of one session: the maximizer of `lambda2 log y - y sum mu (1 - 1/(2D))`
/// over `(0, y_max]`. Returns the rate and whether the cap was hit.
pub fn session_rate_update(lambda2: f64, route_mu: &[f64], route_d: &[f64], y_max: f64) -> (f64, bool) {
    let price: f64 = route_mu
        .iter()
        .zip(route_d)
        .map(|(&mu, &d)| mu * (1.0 - 0.5 / d))
        .sum();
    if price <= 0.0 {
        return (y_max, true);
    }
    let y = lambda2 / price;
    if y >= y_max {
        (y_max, true)
    } else {
        (y.max(RATE_FLOOR), false)
    }
}

/// Link-budget residual `(1 - 1/(2D)) sum y + 1/D - x`.
pub fn link_residual(d: f64, y_sum: f64, x: f64) -> f64 {
    (1.0 - 0.5 / d) * y_sum + 1.0 / d - x
}

/// Projected gradient step on both dual families.
pub fn xlayer_dual_update_gradient(duals: &CrossDuals, h: &[f64], g: &[f64], alpha: f64, beta: f64) -> CrossDuals {
    CrossDuals {
        mu: duals.mu.iter().zip(h).map(|(&m, &hk)| (m + alpha * hk).max(0.0)).collect(),
        v: duals.v.iter().zip(g).map(|(&v, &gs)| (v + beta * gs).max(0.0)).collect(),
    }
}

/// `f = lambda1 e_sender - sum_st mu_st dx_st/dp_ij` for every link.
pub fn prob_gradient(topology: &Topology, p: &[f64], mu: &[f64], lambda1: f64) -> Vec<f64> {
    weighted_throughput_gradient(topology, p, mu)
        .into_iter()
        .enumerate()
        .map(|(k, w)| lambda1 * topology.energy()[topology.link(k).from] - w)
        .collect()
}

/// Residuals and curvature estimates carried between rounds.
#[derive(Debug, Clone, Default)]
pub struct IterationScratch {
    pub h: Vec<f64>,
    pub g: Vec<f64>,
    pub f: Vec<f64>,
    /// Secant estimates of `dh/dmu`, `dg/dv`, `df/dp`.
    pub h_curv: Vec<f64>,
    pub g_curv: Vec<f64>,
    pub f_curv: Vec<f64>,
}

/// How a single coordinate was moved by [`newton_like_step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Secant,
    Gradient,
}

/// Secant slope `(r - r_prev) / (u - u_prev)`, or `None` when undefined.
pub fn secant(u: f64, u_prev: f64, r: f64, r_prev: f64) -> Option<f64> {
    let du = u - u_prev;
    if du.abs() <= 1e-14 * u.abs().max(1.0) {
        return None;
    }
    let s = (r - r_prev) / du;
    s.is_finite().then_some(s)
}

/// Per-coordinate least-squares secant over past rounds with exponential forgetting.
///
/// Each coordinate keeps `sum w du dr / sum w du^2`, where a pair of rounds `k` steps
/// back has weight `forget^k`. With `forget = 0` this is the plain [`secant`].
#[derive(Debug, Clone)]
pub struct SecantMemory {
    num: Vec<f64>,
    den: Vec<f64>,
    forget: f64,
}

impl SecantMemory {
    pub fn new(len: usize, forget: f64) -> Self {
        Self {
            num: vec![0.0; len],
            den: vec![0.0; len],
            forget,
        }
    }

    /// Folds in the latest move of coordinate `i` and returns the current slope estimate.
    pub fn update(&mut self, i: usize, u: f64, u_prev: f64, r: f64, r_prev: f64) -> Option<f64> {
        let du = u - u_prev;
        let dr = r - r_prev;
        if secant(u, u_prev, r, r_prev).is_some() {
            self.num[i] = self.forget * self.num[i] + du * dr;
            self.den[i] = self.forget * self.den[i] + du * du;
        }
        let s = self.num[i] / self.den[i];
        (self.den[i] > 0.0 && s.is_finite()).then_some(s)
    }
}

/// One coordinate of the Newton-like update.
///
/// `ascent` selects the direction: duals ascend along their residual and the usable
/// curvature is `-slope`; probabilities descend and the usable curvature is `slope`.
/// When the curvature is not strictly positive the plain gradient step is used.
/// Usable curvature is floored at `1 / (gain_cap * gradient_step)`, so a near-flat
/// secant cannot launch the iterate. Returns the unprojected new value.
pub fn newton_like_step(
    u: f64,
    residual: f64,
    slope: Option<f64>,
    ascent: bool,
    newton_step: f64,
    gradient_step: f64,
    gain_cap: f64,
) -> (f64, StepKind) {
    let sign = if ascent { 1.0 } else { -1.0 };
    match slope.map(|s| -sign * s) {
        Some(curv) if curv > 0.0 && curv.is_finite() => {
            let curv = curv.max(1.0 / (gain_cap * gradient_step));
            (u + sign * newton_step * residual / curv, StepKind::Secant)
        }
        _ => (u + sign * gradient_step * residual, StepKind::Gradient),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XlayerVariant {
    Gradient,
    Newton,
}

#[derive(Debug, Clone, Copy)]
pub struct XlayerDistributedOptions {
    pub variant: XlayerVariant,
    /// Plain gradient steps (`alpha` link duals, `beta` session duals, `phi` probabilities).
    pub schedule: StepSchedule,
    /// Fraction of the secant step taken by the Newton-like variant.
    pub newton_damping: f64,
    /// Forgetting factor of the Newton-like secant fit, in `[0, 1)`.
    pub secant_memory: f64,
    /// Largest ratio of a secant step to the plain gradient step.
    pub secant_gain_cap: f64,
    pub max_iters: usize,
    pub initial_p: f64,
    pub initial_rate: f64,
    /// Link whose probability is tracked in the trace (falls back to the first active link).
    pub reference_link: Option<Link>,
}

/// Gradient steps that suit the dual scale of the cross-layer problem at `lambda2 ~ 10`.
pub const XLAYER_GRADIENT_SCHEDULE: StepSchedule = StepSchedule {
    alpha: StepRule::Constant(400.0),
    beta: StepRule::Constant(3e-4),
    phi: StepRule::Constant(6e-4),
};

impl Default for XlayerDistributedOptions {
    fn default() -> Self {
        Self {
            variant: XlayerVariant::Gradient,
            schedule: XLAYER_GRADIENT_SCHEDULE,
            newton_damping: 0.8,
            secant_memory: 0.8,
            secant_gain_cap: 3.0,
            max_iters: 3000,
            initial_p: 0.1,
            initial_rate: 1e-3,
            reference_link: Some(Link::new(4, 5)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct XlayerRound {
    pub iteration: usize,
    pub rates: Vec<f64>,
    pub ref_prob: f64,
    pub rate_utility: f64,
    pub objective: f64,
    pub max_violation: f64,
    /// Relative errors of the first session's rate, the reference probability and the rate utility.
    pub errors: Option<[f64; 3]>,
}

#[derive(Debug, Clone)]
pub struct XlayerTrace {
    pub rounds: Vec<XlayerRound>,
    pub state: MacState,
    pub rates: SessionRates,
    pub budgets: LinkDelayBudget,
    pub duals: CrossDuals,
    pub reference_link: usize,
    /// Coordinate updates that fell back from a secant step to a gradient step.
    pub fallbacks: usize,
    /// Rounds in which some session rate sat at its cap.
    pub capped_rounds: usize,
}

impl XlayerTrace {
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        iterations_below(self.rounds.iter().map(|r| r.errors), threshold)
    }
}

/// Distributed cross-layer iteration in bulk-synchronous rounds.
///
/// A round computes link budgets from the current duals, then session rates from
/// the duals and fresh budgets, then steps the duals along the constraint residuals,
/// and finally moves the probabilities along the Lagrangian gradient under the new
/// link duals.
pub fn run_xlayer_distributed(
    network: &Network,
    weights: &XlayerWeights,
    options: &XlayerDistributedOptions,
    reference: Option<&XlayerSolution>,
) -> Result<XlayerTrace> {
    weights.validate()?;
    check_bounds(network)?;
    options.schedule.validate()?;
    if !(options.newton_damping > 0.0 && options.newton_damping.is_finite()) {
        return Err(Error::Domain(format!("invalid Newton damping {}", options.newton_damping)));
    }
    if !(options.secant_gain_cap >= 1.0 && options.secant_gain_cap.is_finite()) {
        return Err(Error::Domain(format!("secant gain cap {} below 1", options.secant_gain_cap)));
    }
    if !(0.0..1.0).contains(&options.secant_memory) {
        return Err(Error::Domain(format!("secant memory {} outside [0, 1)", options.secant_memory)));
    }
    let topology = network.topology();
    let l = topology.link_count();
    let sessions = network.sessions();
    let active = active_links(network);
    let ref_link = options
        .reference_link
        .and_then(|link| topology.link_index(link))
        .filter(|k| !network.sessions_on(*k).is_empty())
        .unwrap_or(active[0]);

    let mut raw = vec![0.0; l];
    for &k in &active {
        raw[k] = options.initial_p;
    }
    let mut state = project_with_floor(&raw, topology, 0.0, EPS);
    let mut y = vec![options.initial_rate; sessions.len()];
    let mut d = vec![0.0; l];
    let mut duals = CrossDuals {
        mu: vec![0.0; l],
        v: vec![0.0; sessions.len()],
    };
    let mut scratch = IterationScratch::default();
    let mut prev: Option<(Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    let mut fallbacks = 0;
    let mut capped_rounds = 0;
    let mut guard = DivergenceGuard::new();
    let mut fit_h = SecantMemory::new(l, options.secant_memory);
    let mut fit_g = SecantMemory::new(sessions.len(), options.secant_memory);
    let mut fit_f = SecantMemory::new(l, options.secant_memory);
    let mut rounds = Vec::with_capacity(options.max_iters + 1);

    let record = |n: usize, state: &MacState, y: &[f64], violation: f64| -> XlayerRound {
        let utility: f64 = y.iter().map(|v| v.ln()).sum();
        let objective = weights.lambda1 * energy(topology, state) - weights.lambda2 * utility;
        let errors = reference.map(|opt| {
            [
                relative_error(y[0], opt.rates.y[0]),
                relative_error(state.link_probs()[ref_link], opt.state.link_probs()[ref_link]),
                relative_error(utility, opt.rates.utility()),
            ]
        });
        XlayerRound {
            iteration: n,
            rates: y.to_vec(),
            ref_prob: state.link_probs()[ref_link],
            rate_utility: utility,
            objective,
            max_violation: violation,
            errors,
        }
    };
    rounds.push(record(0, &state, &y, f64::NAN));

    for n in 1..=options.max_iters {
        let x = state.throughputs(topology);
        let loads = |y: &[f64], k: usize| -> f64 { network.sessions_on(k).iter().map(|&s| y[s]).sum() };

        // link budgets
        for &k in &active {
            let on = network.sessions_on(k);
            let v_sum: f64 = on.iter().map(|&s| duals.v[s]).sum();
            let ceiling = on.iter().map(|&s| sessions[s].delay_bound).fold(f64::INFINITY, f64::min);
            d[k] = link_budget_update(duals.mu[k], v_sum, loads(&y, k), x[k], ceiling);
        }

        // session rates
        let mut capped = false;
        for (s, route) in network.routes().iter().enumerate() {
            let y_max = route.iter().map(|&k| x[k] - EPS).fold(f64::INFINITY, f64::min).max(RATE_FLOOR);
            let mu: Vec<f64> = route.iter().map(|&k| duals.mu[k]).collect();
            let dk: Vec<f64> = route.iter().map(|&k| d[k]).collect();
            let (rate, hit) = session_rate_update(weights.lambda2, &mu, &dk, y_max);
            y[s] = rate;
            capped |= hit;
        }
        capped_rounds += usize::from(capped);

        // residuals
        let mut h = vec![0.0; l];
        for &k in &active {
            h[k] = link_residual(d[k], loads(&y, k), x[k]);
        }
        let g: Vec<f64> = network
            .routes()
            .iter()
            .enumerate()
            .map(|(s, route)| route.iter().map(|&k| d[k]).sum::<f64>() - sessions[s].delay_bound)
            .collect();

        let step = n - 1;
        let (alpha, beta, phi) = (
            options.schedule.alpha.at(step),
            options.schedule.beta.at(step),
            options.schedule.phi.at(step),
        );

        // duals
        let new_duals = match (options.variant, &prev) {
            (XlayerVariant::Newton, Some((mu_prev, v_prev, _))) => {
                scratch.h_curv = (0..l)
                    .map(|k| fit_h.update(k, duals.mu[k], mu_prev[k], h[k], scratch.h[k]).unwrap_or(f64::NAN))
                    .collect();
                scratch.g_curv = (0..sessions.len())
                    .map(|s| fit_g.update(s, duals.v[s], v_prev[s], g[s], scratch.g[s]).unwrap_or(f64::NAN))
                    .collect();
                let mut mu = duals.mu.clone();
                for &k in &active {
                    let slope = Some(scratch.h_curv[k]).filter(|v| v.is_finite());
                    let (val, kind) = newton_like_step(duals.mu[k], h[k], slope, true, options.newton_damping, alpha, options.secant_gain_cap);
                    fallbacks += usize::from(kind == StepKind::Gradient);
                    mu[k] = val.max(0.0);
                }
                let v = (0..sessions.len())
                    .map(|s| {
                        let slope = Some(scratch.g_curv[s]).filter(|v| v.is_finite());
                        let (val, kind) = newton_like_step(duals.v[s], g[s], slope, true, options.newton_damping, beta, options.secant_gain_cap);
                        fallbacks += usize::from(kind == StepKind::Gradient);
                        val.max(0.0)
                    })
                    .collect();
                CrossDuals { mu, v }
            }
            _ => xlayer_dual_update_gradient(&duals, &h, &g, alpha, beta),
        };

        // probabilities
        let f = prob_gradient(topology, state.link_probs(), &new_duals.mu, weights.lambda1);
        let mut raw = vec![0.0; l];
        match (options.variant, &prev) {
            (XlayerVariant::Newton, Some((_, _, p_prev))) => {
                scratch.f_curv = (0..l)
                    .map(|k| fit_f.update(k, state.link_probs()[k], p_prev[k], f[k], scratch.f[k]).unwrap_or(f64::NAN))
                    .collect();
                for &k in &active {
                    let slope = Some(scratch.f_curv[k]).filter(|v| v.is_finite());
                    let (val, kind) =
                        newton_like_step(state.link_probs()[k], f[k], slope, false, options.newton_damping, phi, options.secant_gain_cap);
                    fallbacks += usize::from(kind == StepKind::Gradient);
                    raw[k] = val;
                }
            }
            _ => {
                for &k in &active {
                    raw[k] = state.link_probs()[k] - phi * f[k];
                }
            }
        }
        let floor: Vec<f64> = (0..l).map(|k| if raw[k] != 0.0 { raw[k] } else { 0.0 }).collect();
        let next = project_active(&floor, topology, &active);

        prev = Some((duals.mu.clone(), duals.v.clone(), state.link_probs().to_vec()));
        scratch.h = h.clone();
        scratch.g = g.clone();
        scratch.f = f;
        duals = new_duals;
        state = next;

        // relative: link residuals against throughput, budget residuals against the bound
        let violation = active
            .iter()
            .map(|&k| h[k] / x[k])
            .chain(g.iter().zip(sessions).map(|(g, s)| g / s.delay_bound))
            .fold(0.0, f64::max);
        let round = record(n, &state, &y, violation);
        guard.check(n, round.objective, violation)?;
        if duals.mu.iter().chain(&duals.v).any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: n,
                reason: "dual variables are not finite".into(),
            });
        }
        rounds.push(round);
    }

    let budgets = LinkDelayBudget {
        d: (0..l).map(|k| (!network.sessions_on(k).is_empty()).then_some(d[k])).collect(),
    };
    Ok(XlayerTrace {
        rounds,
        state,
        rates: SessionRates { y },
        budgets,
        duals,
        reference_link: ref_link,
        fallbacks,
        capped_rounds,
    })
}

/// Projects active links onto `[EPS, 1]` with node totals at most `1 - EPS`;
/// inactive links stay at zero.
fn project_active(raw: &[f64], topology: &Topology, active: &[usize]) -> MacState {
    let mut p = vec![0.0; raw.len()];
    for &k in active {
        p[k] = raw[k];
    }
    let mut state = project_with_floor(&p, topology, EPS, EPS);
    let mut probs = state.link_probs().to_vec();
    let mut changed = false;
    for (k, v) in probs.iter_mut().enumerate() {
        if !active.contains(&k) && *v != 0.0 {
            *v = 0.0;
            changed = true;
        }
    }
    if changed {
        state = project_with_floor(&probs, topology, 0.0, EPS);
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_linear, Session};
    use approx::assert_relative_eq;

    fn single_link(bound: f64) -> Network {
        let t = build_linear(2).unwrap();
        Network::new(t, vec![Session::new(0, vec![Link::new(0, 1)], bound)]).unwrap()
    }

    #[test]
    fn budget_update_examples() {
        assert_relative_eq!(link_budget_update(0.8, 0.1, 0.5, 0.5, 100.0), 6f64.sqrt(), max_relative = 1e-14);
        // computed 1.2, lower bound 1/x = 2
        let d = link_budget_update(0.72, 0.5, 0.0, 0.5, 100.0);
        assert_relative_eq!(d, 2.0 + EPS, max_relative = 1e-14);
        assert_relative_eq!(link_budget_update(0.0, 0.3, 0.1, 0.5, 100.0), 2.0 + EPS);
        // tiny session dual: capped by the tightest bound
        assert_eq!(link_budget_update(1.0, 1e-12, 0.1, 0.5, 100.0), 100.0);
        // no session dual: the tightest session bound on the link
        assert_eq!(link_budget_update(1.0, 0.0, 0.1, 0.5, 33.0), 33.0);
        assert_relative_eq!(link_budget_update(1.0, 0.0, 0.1, 0.5, 1.0), 2.0 + EPS);
    }

    #[test]
    fn rate_update_examples() {
        assert_eq!(session_rate_update(10.0, &[4.0], &[1.0], 0.4), (0.4, true));
        assert_eq!(session_rate_update(10.0, &[4.0], &[1.0], 10.0).0, 5.0);
        let (y, capped) = session_rate_update(10.0, &[4.0], &[10.0], 10.0);
        assert_relative_eq!(y, 10.0 / 3.8, max_relative = 1e-14);
        assert!(!capped);
        assert_eq!(session_rate_update(10.0, &[0.0, 0.0], &[5.0, 5.0], 0.3), (0.3, true));
    }

    #[test]
    fn dual_gradient_examples() {
        let d = CrossDuals {
            mu: vec![0.3, 0.0],
            v: vec![0.0],
        };
        let out = xlayer_dual_update_gradient(&d, &[-0.5, -1.0], &[-3.0], 0.1, 0.1);
        assert_relative_eq!(out.mu[0], 0.25, max_relative = 1e-14);
        assert_eq!(out.mu[1], 0.0);
        assert_eq!(out.v[0], 0.0);
    }

    #[test]
    fn newton_like_examples() {
        // dual ascent with concave dual: slope -1 is usable curvature 1
        let h_slope = secant(0.6, 0.5, 0.1, 0.2).unwrap();
        assert_relative_eq!(h_slope, -1.0, max_relative = 1e-12);
        let (v, kind) = newton_like_step(0.6, 0.1, Some(h_slope), true, 0.5, 1.0, 4.0);
        assert_eq!(kind, StepKind::Secant);
        assert_relative_eq!(v, 0.6 + 0.5 * 0.1, max_relative = 1e-14);
        // a flat secant is clipped to gain_cap gradient steps
        let (v, _) = newton_like_step(0.6, 0.1, Some(-1e-9), true, 1.0, 0.01, 4.0);
        assert_relative_eq!(v, 0.6 + 4.0 * 0.01 * 0.1, max_relative = 1e-12);

        // positive slope on a dual means the secant saw no concavity: gradient fallback
        let h_slope = secant(0.4, 0.5, 0.1, 0.2).unwrap();
        assert_relative_eq!(h_slope, 1.0, max_relative = 1e-12);
        let (v, kind) = newton_like_step(0.4, 0.1, Some(h_slope), true, 0.5, 0.01, 4.0);
        assert_eq!(kind, StepKind::Gradient);
        assert_relative_eq!(v, 0.4 + 0.01 * 0.1, max_relative = 1e-14);

        assert_eq!(secant(0.5, 0.5, 0.1, 0.2), None);
        let (_, kind) = newton_like_step(0.5, 0.1, None, true, 0.5, 0.01, 4.0);
        assert_eq!(kind, StepKind::Gradient);

        // primal descent wants positive slope
        let (v, kind) = newton_like_step(0.3, 2.0, Some(4.0), false, 1.0, 1.0, 4.0);
        assert_eq!(kind, StepKind::Secant);
        assert_relative_eq!(v, 0.3 - 0.5);
    }

    #[test]
    fn secant_memory_weights_past_moves() {
        let mut plain = SecantMemory::new(1, 0.0);
        assert_eq!(plain.update(0, 0.5, 0.5, 1.0, 0.0), None);
        assert_relative_eq!(plain.update(0, 0.6, 0.5, 0.1, 0.2).unwrap(), -1.0, max_relative = 1e-12);
        assert_relative_eq!(plain.update(0, 0.8, 0.6, 0.5, 0.1).unwrap(), 2.0, max_relative = 1e-12);

        let mut fit = SecantMemory::new(1, 0.5);
        fit.update(0, 0.6, 0.5, 0.1, 0.2);
        // (0.5 * (0.1 * -0.1) + 0.2 * 0.4) / (0.5 * 0.01 + 0.04)
        let s = fit.update(0, 0.8, 0.6, 0.5, 0.1).unwrap();
        assert_relative_eq!(s, 0.075 / 0.045, max_relative = 1e-12);
        // a stalled coordinate keeps its estimate
        assert_relative_eq!(fit.update(0, 0.8, 0.8, 0.9, 0.5).unwrap(), s, max_relative = 1e-12);
    }

    #[test]
    fn prob_gradient_pair() {
        let t = build_linear(2).unwrap();
        let f = prob_gradient(&t, &[0.3, 0.4], &[1.0, 0.0], 0.0);
        assert_relative_eq!(f[0], -0.6, max_relative = 1e-14);
        assert_relative_eq!(f[1], 0.3, max_relative = 1e-14);
    }

    #[test]
    fn single_link_centralized_is_feasible() {
        let net = single_link(1000.0);
        let w = XlayerWeights::new(0.0, 1.0).unwrap();
        let sol = solve_xlayer_centralized(&net, &w).unwrap();
        assert_eq!(sol.state.link_probs()[1], 0.0);
        assert!(sol.budgets.d[1].is_none());
        let delays = sol.session_delays(&net).unwrap();
        assert!(delays[0] <= 1000.0 + 1e-6);
        assert!(sol.report.kkt_residual <= 1e-6);
    }

    #[test]
    fn tight_bound_drives_rate_to_floor() {
        // the link alone can serve with x -> 1, so 1/x* = 1; a bound just above 1 leaves no room
        let net = single_link(1.001);
        let w = XlayerWeights::new(1.0, 1.0).unwrap();
        let sol = solve_xlayer_centralized(&net, &w).unwrap();
        assert!(sol.rates.y[0] < 2e-3, "{}", sol.rates.y[0]);
    }

    #[test]
    fn infeasible_bound_names_session() {
        let t = build_linear(3).unwrap();
        let net = Network::new(
            t,
            vec![
                Session::new(7, vec![Link::new(0, 1), Link::new(1, 2)], 1.5),
                Session::new(8, vec![Link::new(2, 1)], 500.0),
            ],
        )
        .unwrap();
        match solve_xlayer_centralized(&net, &XlayerWeights::new(1.0, 1.0).unwrap()) {
            Err(Error::Infeasible { reason }) => assert!(reason.contains("session 7"), "{reason}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shared_link_is_fair() {
        let t = build_linear(2).unwrap();
        let net = Network::new(
            t,
            vec![
                Session::new(0, vec![Link::new(0, 1)], 200.0),
                Session::new(1, vec![Link::new(0, 1)], 200.0),
            ],
        )
        .unwrap();
        let sol = solve_xlayer_centralized(&net, &XlayerWeights::new(0.5, 1.0).unwrap()).unwrap();
        assert_relative_eq!(sol.rates.y[0], sol.rates.y[1], max_relative = 1e-5);
    }
}
