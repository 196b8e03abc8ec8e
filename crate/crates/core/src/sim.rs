//! Slot-level slotted-Aloha simulator.
//!
//! Every slot, each node picks at most one outgoing link with the link's persistence
//! probability. A node with an empty queue on that link still transmits (a dummy
//! packet), so the success frequency of a link does not depend on queue state. A
//! transmission on `i -> j` succeeds iff no node in `{j} + N(j) \ {i}` transmits in
//! the same slot. Only a success removes the head-of-line packet.
//!
//! Arrivals land at the start of a slot and may be sent in that slot. Delay is
//! counted from the arrival slot through the success slot inclusive, so a packet
//! that goes out at once has delay 1.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::delay::{end_to_end_delay, link_delay};
use crate::error::{Error, Result};
use crate::mac::MacState;
use crate::network::{Network, Topology};

/// Batches used for the batch-means standard error.
const BATCHES: usize = 20;

#[derive(Debug, Clone)]
pub struct SimConfig<'a> {
    pub topology: &'a Topology,
    pub state: &'a MacState,
    /// Poisson arrival rate of each link, packets per slot.
    pub loads: Vec<f64>,
    pub horizon: u64,
    /// Slots discarded before statistics are collected.
    pub warmup: u64,
    pub seed: u64,
}

impl<'a> SimConfig<'a> {
    /// Config with a warmup of one tenth of the horizon.
    pub fn new(topology: &'a Topology, state: &'a MacState, loads: Vec<f64>, horizon: u64, seed: u64) -> Self {
        Self {
            topology,
            state,
            loads,
            horizon,
            warmup: horizon / 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.loads.len() != self.topology.link_count() {
            return Err(Error::Domain(format!(
                "expected {} link loads, got {}",
                self.topology.link_count(),
                self.loads.len()
            )));
        }
        if self.state.link_probs().len() != self.topology.link_count() {
            return Err(Error::Domain("MAC state does not match the topology".into()));
        }
        if let Some(r) = self.loads.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(Error::Domain(format!("link load must be non-negative, got {r}")));
        }
        if self.horizon <= self.warmup {
            return Err(Error::Domain(format!(
                "horizon {} must exceed warmup {}",
                self.horizon, self.warmup
            )));
        }
        Ok(())
    }
}

/// Running mean of delays plus per-batch sums for the standard error.
#[derive(Debug, Clone)]
struct DelayAccumulator {
    count: u64,
    sum: f64,
    batch_sum: [f64; BATCHES],
    batch_count: [u64; BATCHES],
}

impl DelayAccumulator {
    fn new() -> Self {
        Self {
            count: 0,
            sum: 0.0,
            batch_sum: [0.0; BATCHES],
            batch_count: [0; BATCHES],
        }
    }

    fn push(&mut self, batch: usize, delay: f64) {
        self.count += 1;
        self.sum += delay;
        self.batch_sum[batch] += delay;
        self.batch_count[batch] += 1;
    }

    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    fn standard_error(&self) -> Option<f64> {
        let means: Vec<f64> = self
            .batch_sum
            .iter()
            .zip(&self.batch_count)
            .filter(|(_, &c)| c > 0)
            .map(|(s, &c)| s / c as f64)
            .collect();
        let n = means.len();
        if n < 2 {
            return None;
        }
        let m = means.iter().sum::<f64>() / n as f64;
        let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        Some((var / n as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkStats {
    /// Real packets delivered after the warmup that also arrived after it.
    pub delivered: u64,
    pub mean_delay: Option<f64>,
    /// Batch-means standard error of `mean_delay`.
    pub delay_se: Option<f64>,
    /// Successful transmissions (real or dummy) per slot.
    pub throughput: f64,
    /// Transmission attempts per slot.
    pub attempt_rate: f64,
    /// Time-average number of packets at the link, counted after arrivals.
    pub mean_queue: f64,
    /// `|mean_queue - load * mean_delay| / mean_queue`, when both sides are defined.
    pub little_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimStats {
    pub seed: u64,
    /// Slots over which statistics were collected.
    pub slots: u64,
    pub links: Vec<LinkStats>,
    /// Transmissions per slot of each node, dummies included.
    pub node_attempt_rate: Vec<f64>,
    /// Energy spent per slot, `sum_i e_i * attempts_i / slots`.
    pub energy_per_slot: f64,
}

#[derive(Debug, Clone, Copy)]
struct Packet {
    arrival: u64,
    session: usize,
    hop: usize,
}

/// Slot engine shared by the per-link and per-session modes.
struct Engine<'a> {
    topology: &'a Topology,
    p: &'a [f64],
    rng: ChaCha8Rng,
    queues: Vec<VecDeque<Packet>>,
    choice: Vec<Option<usize>>,
    busy: Vec<bool>,
    attempts: Vec<u64>,
    successes: Vec<u64>,
    node_attempts: Vec<u64>,
    queue_area: Vec<u64>,
}

impl<'a> Engine<'a> {
    fn new(topology: &'a Topology, state: &'a MacState, seed: u64) -> Self {
        let l = topology.link_count();
        let n = topology.node_count();
        Self {
            topology,
            p: state.link_probs(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            queues: vec![VecDeque::new(); l],
            choice: vec![None; n],
            busy: vec![false; n],
            attempts: vec![0; l],
            successes: vec![0; l],
            node_attempts: vec![0; n],
            queue_area: vec![0; l],
        }
    }

    /// Runs the channel for one slot and calls `on_success(link, packet)` for each
    /// real packet delivered. `counting` switches statistics on.
    fn slot(&mut self, counting: bool, mut on_success: impl FnMut(usize, Packet)) {
        let topology = self.topology;
        if counting {
            for (area, q) in self.queue_area.iter_mut().zip(&self.queues) {
                *area += q.len() as u64;
            }
        }
        for i in 0..topology.node_count() {
            let u: f64 = self.rng.random();
            let mut cum = 0.0;
            self.choice[i] = None;
            for &k in topology.out_links(i) {
                cum += self.p[k];
                if u < cum {
                    self.choice[i] = Some(k);
                    break;
                }
            }
            self.busy[i] = self.choice[i].is_some();
        }
        for i in 0..topology.node_count() {
            let Some(k) = self.choice[i] else { continue };
            if counting {
                self.attempts[k] += 1;
                self.node_attempts[i] += 1;
            }
            if topology.contenders(k).iter().any(|&m| self.busy[m]) {
                continue;
            }
            if counting {
                self.successes[k] += 1;
            }
            if let Some(packet) = self.queues[k].pop_front() {
                on_success(k, packet);
            }
        }
    }
}

fn poisson_streams(rates: &[f64]) -> Result<Vec<Option<Poisson<f64>>>> {
    rates
        .iter()
        .map(|&r| {
            if r > 0.0 {
                Poisson::new(r)
                    .map(Some)
                    .map_err(|e| Error::Domain(format!("arrival rate {r}: {e}")))
            } else {
                Ok(None)
            }
        })
        .collect()
}

fn batch_of(t: u64, warmup: u64, horizon: u64) -> usize {
    (((t - warmup) as u128 * BATCHES as u128) / (horizon - warmup) as u128) as usize
}

/// Simulates per-link Poisson traffic at fixed persistence probabilities.
pub fn simulate(config: &SimConfig) -> Result<SimStats> {
    config.validate()?;
    let topology = config.topology;
    let l = topology.link_count();
    let streams = poisson_streams(&config.loads)?;
    let mut engine = Engine::new(topology, config.state, config.seed);
    let mut delays = vec![DelayAccumulator::new(); l];

    for t in 0..config.horizon {
        for (k, stream) in streams.iter().enumerate() {
            if let Some(dist) = stream {
                let n = dist.sample(&mut engine.rng) as u64;
                for _ in 0..n {
                    engine.queues[k].push_back(Packet {
                        arrival: t,
                        session: 0,
                        hop: 0,
                    });
                }
            }
        }
        let counting = t >= config.warmup;
        engine.slot(counting, |k, packet| {
            if counting && packet.arrival >= config.warmup {
                let batch = batch_of(t, config.warmup, config.horizon);
                delays[k].push(batch, (t - packet.arrival + 1) as f64);
            }
        });
    }

    let slots = config.horizon - config.warmup;
    let per_slot = |v: u64| v as f64 / slots as f64;
    let links = (0..l)
        .map(|k| {
            let mean_delay = delays[k].mean();
            let mean_queue = per_slot(engine.queue_area[k]);
            let little_residual = mean_delay
                .filter(|_| mean_queue > 0.0)
                .map(|w| (mean_queue - config.loads[k] * w).abs() / mean_queue);
            LinkStats {
                delivered: delays[k].count,
                mean_delay,
                delay_se: delays[k].standard_error(),
                throughput: per_slot(engine.successes[k]),
                attempt_rate: per_slot(engine.attempts[k]),
                mean_queue,
                little_residual,
            }
        })
        .collect();
    let node_attempt_rate: Vec<f64> = engine.node_attempts.iter().map(|&a| per_slot(a)).collect();
    let energy_per_slot = node_attempt_rate
        .iter()
        .zip(topology.energy())
        .map(|(a, e)| a * e)
        .sum();
    Ok(SimStats {
        seed: config.seed,
        slots,
        links,
        node_attempt_rate,
        energy_per_slot,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    /// Relative tolerance on mean link delay.
    pub delay: f64,
    /// Relative tolerance on per-slot success frequency.
    pub throughput: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            delay: 0.05,
            throughput: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkCheck {
    pub link: usize,
    pub load: f64,
    pub analytic_delay: Option<f64>,
    /// Delivery-weighted mean over seeds.
    pub empirical_delay: Option<f64>,
    pub delay_error: Option<f64>,
    pub analytic_throughput: f64,
    /// Mean over seeds.
    pub empirical_throughput: f64,
    pub throughput_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub links: Vec<LinkCheck>,
    pub runs: Vec<SimStats>,
    pub max_delay_error: f64,
    pub max_throughput_error: f64,
    pub tolerance: Tolerance,
    pub passed: bool,
}

/// Compares simulated link delays and success frequencies with the analytic model
/// over several seeds. Links with zero load are checked on throughput only.
pub fn validate_delay_model(
    topology: &Topology,
    state: &MacState,
    loads: &[f64],
    tolerance: Tolerance,
    seeds: &[u64],
    horizon: u64,
) -> Result<ValidationReport> {
    if seeds.is_empty() {
        return Err(Error::Domain("at least one seed is required".into()));
    }
    analytic_delays(topology, state, loads)?;
    let runs = seeds
        .iter()
        .map(|&seed| simulate(&SimConfig::new(topology, state, loads.to_vec(), horizon, seed)))
        .collect::<Result<Vec<_>>>()?;
    compare_runs(topology, state, loads, tolerance, runs)
}

/// Analytic delay of every loaded link, failing on the first unstable one.
pub fn analytic_delays(topology: &Topology, state: &MacState, loads: &[f64]) -> Result<Vec<Option<f64>>> {
    if loads.len() != topology.link_count() {
        return Err(Error::Domain(format!(
            "expected {} link loads, got {}",
            topology.link_count(),
            loads.len()
        )));
    }
    let x = state.throughputs(topology);
    loads
        .iter()
        .zip(&x)
        .enumerate()
        .map(|(k, (&r, &xk))| {
            if r == 0.0 {
                return Ok(None);
            }
            link_delay(xk, r).map(Some).map_err(|e| match e {
                Error::Unstable { rate, service, .. } => Error::Unstable {
                    link: Some(topology.link(k)),
                    rate,
                    service,
                },
                other => other,
            })
        })
        .collect()
}

/// Pools finished runs (one per seed) of the same configuration against the model.
pub fn compare_runs(
    topology: &Topology,
    state: &MacState,
    loads: &[f64],
    tolerance: Tolerance,
    runs: Vec<SimStats>,
) -> Result<ValidationReport> {
    if runs.is_empty() {
        return Err(Error::Domain("at least one run is required".into()));
    }
    let analytic = analytic_delays(topology, state, loads)?;
    let x = state.throughputs(topology);

    let links: Vec<LinkCheck> = (0..topology.link_count())
        .map(|k| {
            let delivered: u64 = runs.iter().map(|s| s.links[k].delivered).sum();
            let empirical_delay = (delivered > 0).then(|| {
                runs.iter()
                    .filter_map(|s| s.links[k].mean_delay.map(|m| m * s.links[k].delivered as f64))
                    .sum::<f64>()
                    / delivered as f64
            });
            let empirical_throughput = runs.iter().map(|s| s.links[k].throughput).sum::<f64>() / runs.len() as f64;
            let delay_error = match (analytic[k], empirical_delay) {
                (Some(a), Some(e)) => Some((e - a).abs() / a),
                (Some(_), None) => Some(f64::INFINITY),
                _ => None,
            };
            let throughput_error = if x[k] > 0.0 {
                (empirical_throughput - x[k]).abs() / x[k]
            } else {
                empirical_throughput
            };
            LinkCheck {
                link: k,
                load: loads[k],
                analytic_delay: analytic[k],
                empirical_delay,
                delay_error,
                analytic_throughput: x[k],
                empirical_throughput,
                throughput_error,
            }
        })
        .collect();

    let max_delay_error = links.iter().filter_map(|c| c.delay_error).fold(0.0, f64::max);
    let max_throughput_error = links.iter().map(|c| c.throughput_error).fold(0.0, f64::max);
    Ok(ValidationReport {
        passed: max_delay_error <= tolerance.delay && max_throughput_error <= tolerance.throughput,
        links,
        runs,
        max_delay_error,
        max_throughput_error,
        tolerance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionDelay {
    pub delivered: u64,
    pub mean_delay: f64,
    pub delay_se: Option<f64>,
    /// Sum of analytic link delays along the route.
    pub analytic: f64,
    /// `mean_delay / analytic`.
    pub ratio: f64,
}

/// Forwards per-session Poisson traffic hop by hop along each route.
///
/// A packet delivered on one hop joins the next hop's queue and may be sent from the
/// following slot on. End-to-end delay runs from the source arrival slot through the
/// final success slot. The first tenth of the horizon is warmup. Sessions with rate 0
/// or no delivered packets report `None`.
pub fn measure_end_to_end(
    network: &Network,
    state: &MacState,
    rates: &[f64],
    horizon: u64,
    seed: u64,
) -> Result<Vec<Option<SessionDelay>>> {
    let topology = network.topology();
    let sessions = network.sessions();
    if rates.len() != sessions.len() {
        return Err(Error::Domain(format!(
            "expected {} session rates, got {}",
            sessions.len(),
            rates.len()
        )));
    }
    if let Some(r) = rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::Domain(format!("session rate must be non-negative, got {r}")));
    }
    let warmup = horizon / 10;
    if horizon <= warmup {
        return Err(Error::Domain(format!("horizon {horizon} too short")));
    }
    let x = state.throughputs(topology);
    let mut loads = vec![0.0; topology.link_count()];
    for (s, route) in network.routes().iter().enumerate() {
        for &k in route {
            loads[k] += rates[s];
        }
    }
    let analytic = network
        .routes()
        .iter()
        .map(|route| end_to_end_delay(topology, route, &x, &loads))
        .collect::<Result<Vec<_>>>()?;

    let streams = poisson_streams(rates)?;
    let mut engine = Engine::new(topology, state, seed);
    let mut delays = vec![DelayAccumulator::new(); sessions.len()];
    let mut forwarded: Vec<(usize, Packet)> = Vec::new();

    for t in 0..horizon {
        for (s, stream) in streams.iter().enumerate() {
            if let Some(dist) = stream {
                let first = network.route(s)[0];
                let n = dist.sample(&mut engine.rng) as u64;
                for _ in 0..n {
                    engine.queues[first].push_back(Packet {
                        arrival: t,
                        session: s,
                        hop: 0,
                    });
                }
            }
        }
        let counting = t >= warmup;
        engine.slot(counting, |_, packet| {
            let route = network.route(packet.session);
            if packet.hop + 1 < route.len() {
                forwarded.push((
                    route[packet.hop + 1],
                    Packet {
                        hop: packet.hop + 1,
                        ..packet
                    },
                ));
            } else if counting && packet.arrival >= warmup {
                let batch = batch_of(t, warmup, horizon);
                delays[packet.session].push(batch, (t - packet.arrival + 1) as f64);
            }
        });
        for (k, packet) in forwarded.drain(..) {
            engine.queues[k].push_back(packet);
        }
    }

    Ok((0..sessions.len())
        .map(|s| {
            let mean_delay = delays[s].mean()?;
            Some(SessionDelay {
                delivered: delays[s].count,
                mean_delay,
                delay_se: delays[s].standard_error(),
                analytic: analytic[s],
                ratio: mean_delay / analytic[s],
            })
        })
        .collect())
}
