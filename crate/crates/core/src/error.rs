use thiserror::Error;

use crate::network::{Link, NetworkError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network size {size}: at least {min} nodes required")]
    InvalidSize { size: usize, min: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unstable queue{}: arrival rate {rate} >= service rate {service}", fmt_link(.link))]
    Unstable {
        link: Option<Link>,
        rate: f64,
        service: f64,
    },

    #[error("link ({}, {}) is not part of the topology", .0.from, .0.to)]
    UnknownLink(Link),

    #[error("infeasible problem: {reason}")]
    Infeasible { reason: String },

    /// Non-finite values or a failed linear solve inside an iterative method.
    #[error("numeric failure at iteration {iteration}: {reason}")]
    Numeric {
        iteration: usize,
        reason: String,
        snapshot: Vec<f64>,
    },

    #[error("iteration diverged at round {iteration}: {reason}; try a smaller step size")]
    Divergence { iteration: usize, reason: String },

    #[error(transparent)]
    Network(#[from] NetworkError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_link(link: &Option<Link>) -> String {
    match link {
        Some(l) => format!(" on link ({}, {})", l.from, l.to),
        None => String::new(),
    }
}
