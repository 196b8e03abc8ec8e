//! Queueing analytics for a slotted random-access link.
//!
//! Each link is an M/G/1 queue whose service time is geometric in the per-slot
//! success probability `x`. All delays are in slots.

use crate::error::{Error, Result};
use crate::mac::MacState;
use crate::network::{Link, Topology};

fn check_success_probability(x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 && x <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "success probability must lie in (0, 1], got {x}"
        )))
    }
}

/// Mean and variance of the geometric service time for success probability `x`.
pub fn service_stats(x: f64) -> Result<(f64, f64)> {
    check_success_probability(x)?;
    Ok((1.0 / x, (1.0 - x) / (x * x)))
}

/// Mean sojourn time (waiting plus service) of a link with success probability `x`
/// and Poisson arrival rate `r`.
pub fn link_delay(x: f64, r: f64) -> Result<f64> {
    check_success_probability(x)?;
    if !(r.is_finite() && r >= 0.0) {
        return Err(Error::Domain(format!("arrival rate must be non-negative, got {r}")));
    }
    if r >= x {
        return Err(Error::Unstable {
            link: None,
            rate: r,
            service: x,
        });
    }
    Ok((1.0 - 0.5 * r) / (x - r))
}

/// Node transmission probabilities `P_i = sum_j p_ij` for a raw link-probability vector.
pub fn node_probabilities(topology: &Topology, p: &[f64]) -> Vec<f64> {
    (0..topology.node_count())
        .map(|i| topology.out_links(i).iter().map(|&k| p[k]).sum())
        .collect()
}

/// Per-slot success probability of link `k` given raw link and node probabilities:
/// `x_ij = p_ij (1 - P_j) prod_{l in N_j \ {i}} (1 - P_l)`.
pub fn throughput_of(topology: &Topology, p: &[f64], node: &[f64], k: usize) -> f64 {
    topology
        .contenders(k)
        .iter()
        .fold(p[k], |acc, &m| acc * (1.0 - node[m]))
}

/// Success probabilities of every link for a raw probability vector.
pub fn throughputs(topology: &Topology, p: &[f64]) -> Vec<f64> {
    let node = node_probabilities(topology, p);
    (0..topology.link_count())
        .map(|k| throughput_of(topology, p, &node, k))
        .collect()
}

pub fn success_probability(topology: &Topology, state: &MacState, link: Link) -> Result<f64> {
    let k = topology.link_index(link).ok_or(Error::UnknownLink(link))?;
    Ok(throughput_of(topology, state.link_probs(), state.node_probs(), k))
}

/// `d x_k / d p_j` for links `k` and `j`, computed without dividing by `p` or `1 - P`.
pub fn throughput_derivative(topology: &Topology, p: &[f64], node: &[f64], k: usize, j: usize) -> f64 {
    let sender = topology.link(j).from;
    if k == j {
        topology
            .contenders(k)
            .iter()
            .fold(1.0, |acc, &m| acc * (1.0 - node[m]))
    } else if topology.contenders(k).contains(&sender) {
        -topology
            .contenders(k)
            .iter()
            .filter(|&&m| m != sender)
            .fold(p[k], |acc, &m| acc * (1.0 - node[m]))
    } else {
        0.0
    }
}

/// `sum_k w_k d x_k / d p_j` for every link `j`.
///
/// Only links affected by the sender of `j` contribute, so the cost is local.
pub fn weighted_throughput_gradient(topology: &Topology, p: &[f64], weights: &[f64]) -> Vec<f64> {
    let node = node_probabilities(topology, p);
    (0..topology.link_count())
        .map(|j| {
            let sender = topology.link(j).from;
            let own = weights[j] * throughput_derivative(topology, p, &node, j, j);
            let cross: f64 = topology
                .affected_links(sender)
                .iter()
                .map(|&k| weights[k] * throughput_derivative(topology, p, &node, k, j))
                .sum();
            own + cross
        })
        .collect()
}

/// Sum of link delays along a route, failing on the first unstable hop.
pub fn end_to_end_delay(topology: &Topology, route: &[usize], x: &[f64], r: &[f64]) -> Result<f64> {
    route.iter().try_fold(0.0, |acc, &k| {
        let d = link_delay(x[k], r[k]).map_err(|e| match e {
            Error::Unstable { rate, service, .. } => Error::Unstable {
                link: Some(topology.link(k)),
                rate,
                service,
            },
            other => other,
        })?;
        Ok(acc + d)
    })
}
