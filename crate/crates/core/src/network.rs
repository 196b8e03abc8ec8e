//! Network description: nodes, directed links, symmetric neighbourhoods and sessions.
//!
//! A [`Topology`] is immutable once built. Neighbour sets default to the symmetric
//! closure of the link list; a network file may also list extra interference
//! neighbours (nodes within hearing range that share no link), in which case the
//! listed sets must already be symmetric.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

/// Current version of the network file format.
pub const FILE_VERSION: u32 = 1;

const SAMPLE10: &str = include_str!("../data/sample10.json");

/// A directed link `from -> to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Link {
    pub from: usize,
    pub to: usize,
}

impl Link {
    pub const fn new(from: usize, to: usize) -> Self {
        Self { from, to }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.from, self.to)
    }
}

impl From<(usize, usize)> for Link {
    fn from((from, to): (usize, usize)) -> Self {
        Self { from, to }
    }
}

/// Parse and validation failures for network descriptions.
#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("malformed network file at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{field}: {message}")]
    Schema { field: String, message: String },
    #[error("{field}: node {node} is out of range for a {node_count}-node network")]
    DanglingNode {
        field: String,
        node: usize,
        node_count: usize,
    },
    #[error("{field}: self-loop on node {node}")]
    SelfLoop { field: String, node: usize },
    #[error("{field}: duplicate link ({from}, {to})")]
    DuplicateLink { field: String, from: usize, to: usize },
    #[error("{field}: node {a} lists {b} as a neighbour but {b} does not list {a}")]
    Asymmetric { field: String, a: usize, b: usize },
    #[error("{field}: link ({from}, {to}) is not in the topology")]
    UnknownRouteLink { field: String, from: usize, to: usize },
    #[error("{field}: route is not a connected path")]
    DisconnectedRoute { field: String },
    #[error("{field}: route visits node {node} twice")]
    LoopingRoute { field: String, node: usize },
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> NetworkError {
    NetworkError::Schema {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    node_count: usize,
    links: Vec<Link>,
    energy: Vec<f64>,
    neighbors: Vec<Vec<usize>>,
    explicit_neighbors: bool,
    out_links: Vec<Vec<usize>>,
    in_links: Vec<Vec<usize>>,
    contenders: Vec<Vec<usize>>,
    affected: Vec<Vec<usize>>,
    index: HashMap<Link, usize>,
}

impl Topology {
    /// Builds a topology with neighbour sets derived from the links.
    pub fn new(node_count: usize, links: Vec<Link>, energy: Vec<f64>) -> Result<Self> {
        Self::build(node_count, links, energy, None)
    }

    /// Builds a topology with explicit neighbour lists. Every link's endpoints must
    /// be listed as mutual neighbours and the lists must be symmetric.
    pub fn with_neighbors(
        node_count: usize,
        links: Vec<Link>,
        energy: Vec<f64>,
        neighbors: Vec<Vec<usize>>,
    ) -> Result<Self> {
        Self::build(node_count, links, energy, Some(neighbors))
    }

    fn build(
        node_count: usize,
        links: Vec<Link>,
        energy: Vec<f64>,
        neighbors: Option<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        if node_count == 0 {
            return Err(schema("nodes", "must be a positive integer").into());
        }
        if energy.len() != node_count {
            return Err(schema(
                "energy",
                format!("expected {} entries, found {}", node_count, energy.len()),
            )
            .into());
        }
        for (i, &e) in energy.iter().enumerate() {
            if !(e.is_finite() && e > 0.0) {
                return Err(schema(format!("energy[{i}]"), "must be strictly positive").into());
            }
        }

        let mut index = HashMap::with_capacity(links.len());
        let mut out_links = vec![Vec::new(); node_count];
        let mut in_links = vec![Vec::new(); node_count];
        let mut derived: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); node_count];
        for (k, l) in links.iter().enumerate() {
            let field = format!("links[{k}]");
            for node in [l.from, l.to] {
                if node >= node_count {
                    return Err(NetworkError::DanglingNode {
                        field,
                        node,
                        node_count,
                    }
                    .into());
                }
            }
            if l.from == l.to {
                return Err(NetworkError::SelfLoop {
                    field,
                    node: l.from,
                }
                .into());
            }
            if index.insert(*l, k).is_some() {
                return Err(NetworkError::DuplicateLink {
                    field,
                    from: l.from,
                    to: l.to,
                }
                .into());
            }
            out_links[l.from].push(k);
            in_links[l.to].push(k);
            derived[l.from].insert(l.to);
            derived[l.to].insert(l.from);
        }

        let explicit_neighbors = neighbors.is_some();
        let neighbors: Vec<Vec<usize>> = match neighbors {
            None => derived.into_iter().map(|s| s.into_iter().collect()).collect(),
            Some(lists) => {
                if lists.len() != node_count {
                    return Err(schema(
                        "neighbors",
                        format!("expected {} lists, found {}", node_count, lists.len()),
                    )
                    .into());
                }
                let mut sets: Vec<BTreeSet<usize>> = Vec::with_capacity(node_count);
                for (i, list) in lists.iter().enumerate() {
                    let mut set = BTreeSet::new();
                    for &j in list {
                        let field = format!("neighbors[{i}]");
                        if j >= node_count {
                            return Err(NetworkError::DanglingNode {
                                field,
                                node: j,
                                node_count,
                            }
                            .into());
                        }
                        if j == i {
                            return Err(NetworkError::SelfLoop { field, node: i }.into());
                        }
                        set.insert(j);
                    }
                    sets.push(set);
                }
                for (i, set) in sets.iter().enumerate() {
                    for &j in set {
                        if !sets[j].contains(&i) {
                            return Err(NetworkError::Asymmetric {
                                field: format!("neighbors[{i}]"),
                                a: i,
                                b: j,
                            }
                            .into());
                        }
                    }
                }
                for (k, l) in links.iter().enumerate() {
                    if !sets[l.from].contains(&l.to) {
                        return Err(schema(
                            format!("links[{k}]"),
                            format!("endpoints {} and {} are not listed as neighbours", l.from, l.to),
                        )
                        .into());
                    }
                }
                sets.into_iter().map(|s| s.into_iter().collect()).collect()
            }
        };

        // Nodes whose transmissions collide with link k = (s, t): the receiver t and
        // every neighbour of t except the sender s.
        let contenders: Vec<Vec<usize>> = links
            .iter()
            .map(|l| {
                std::iter::once(l.to)
                    .chain(neighbors[l.to].iter().copied().filter(|&m| m != l.from))
                    .collect()
            })
            .collect();
        let mut affected = vec![Vec::new(); node_count];
        for (k, nodes) in contenders.iter().enumerate() {
            for &m in nodes {
                affected[m].push(k);
            }
        }

        Ok(Self {
            node_count,
            links,
            energy,
            neighbors,
            explicit_neighbors,
            out_links,
            in_links,
            contenders,
            affected,
            index,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, k: usize) -> Link {
        self.links[k]
    }

    pub fn energy(&self) -> &[f64] {
        &self.energy
    }

    /// `N_i`, sorted ascending.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    /// Indices of links leaving `node` (`O_i`).
    pub fn out_links(&self, node: usize) -> &[usize] {
        &self.out_links[node]
    }

    /// Indices of links entering `node` (`I_i`).
    pub fn in_links(&self, node: usize) -> &[usize] {
        &self.in_links[node]
    }

    /// Nodes whose transmission probability enters the success probability of link `k`.
    pub fn contenders(&self, k: usize) -> &[usize] {
        &self.contenders[k]
    }

    /// Links whose success probability depends on the transmissions of `node`.
    ///
    /// This is exactly the set of link duals a node needs from its one-hop
    /// neighbourhood: links received at the node itself, plus links received at its
    /// neighbours that it does not transmit on.
    pub fn affected_links(&self, node: usize) -> &[usize] {
        &self.affected[node]
    }

    pub fn link_index(&self, link: Link) -> Option<usize> {
        self.index.get(&link).copied()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Replaces the per-node transmit energy.
    pub fn with_energy(&self, energy: Vec<f64>) -> Result<Self> {
        let neighbors = self.explicit_neighbors.then(|| self.neighbors.clone());
        Self::build(self.node_count, self.links.clone(), energy, neighbors)
    }
}

/// A traffic session routed over a fixed loop-free path.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: usize,
    pub route: Vec<Link>,
    /// End-to-end delay bound in slots.
    pub delay_bound: f64,
}

impl Session {
    pub fn new(id: usize, route: Vec<Link>, delay_bound: f64) -> Self {
        Self {
            id,
            route,
            delay_bound,
        }
    }

    pub fn source(&self) -> Option<usize> {
        self.route.first().map(|l| l.from)
    }

    fn validate(&self, topology: &Topology, field: &str) -> Result<Vec<usize>, NetworkError> {
        if self.route.is_empty() {
            return Err(schema(format!("{field}.route"), "route must not be empty"));
        }
        if !(self.delay_bound.is_finite() && self.delay_bound > 0.0) {
            return Err(schema(
                format!("{field}.delay_bound"),
                "must be strictly positive",
            ));
        }
        let mut ids = Vec::with_capacity(self.route.len());
        for (h, l) in self.route.iter().enumerate() {
            match topology.link_index(*l) {
                Some(k) => ids.push(k),
                None => {
                    return Err(NetworkError::UnknownRouteLink {
                        field: format!("{field}.route[{h}]"),
                        from: l.from,
                        to: l.to,
                    })
                }
            }
        }
        for pair in self.route.windows(2) {
            if pair[0].to != pair[1].from {
                return Err(NetworkError::DisconnectedRoute {
                    field: format!("{field}.route"),
                });
            }
        }
        let mut seen = BTreeSet::new();
        for node in std::iter::once(self.route[0].from).chain(self.route.iter().map(|l| l.to)) {
            if !seen.insert(node) {
                return Err(NetworkError::LoopingRoute {
                    field: format!("{field}.route"),
                    node,
                });
            }
        }
        Ok(ids)
    }
}

/// A topology together with its sessions and the route/link incidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    topology: Topology,
    sessions: Vec<Session>,
    routes: Vec<Vec<usize>>,
    link_sessions: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(topology: Topology, sessions: Vec<Session>) -> Result<Self> {
        let mut routes = Vec::with_capacity(sessions.len());
        let mut ids = BTreeSet::new();
        for (n, s) in sessions.iter().enumerate() {
            let field = format!("sessions[{n}]");
            if !ids.insert(s.id) {
                return Err(schema(format!("{field}.id"), format!("duplicate session id {}", s.id)).into());
            }
            routes.push(s.validate(&topology, &field)?);
        }
        let mut link_sessions = vec![Vec::new(); topology.link_count()];
        for (s, route) in routes.iter().enumerate() {
            for &k in route {
                link_sessions[k].push(s);
            }
        }
        Ok(Self {
            topology,
            sessions,
            routes,
            link_sessions,
        })
    }

    /// A network with no sessions.
    pub fn bare(topology: Topology) -> Self {
        let link_sessions = vec![Vec::new(); topology.link_count()];
        Self {
            topology,
            sessions: Vec::new(),
            routes: Vec::new(),
            link_sessions,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    /// Link indices along session `s` (by position, not id).
    pub fn route(&self, s: usize) -> &[usize] {
        &self.routes[s]
    }

    pub fn routes(&self) -> &[Vec<usize>] {
        &self.routes
    }

    /// Sessions (by position) crossing link `k`, i.e. `S(i, j)`.
    pub fn sessions_on(&self, k: usize) -> &[usize] {
        &self.link_sessions[k]
    }

    /// Same sessions with every delay bound replaced.
    pub fn with_delay_bounds(&self, bound: f64) -> Result<Self> {
        let sessions = self
            .sessions
            .iter()
            .map(|s| Session::new(s.id, s.route.clone(), bound))
            .collect();
        Self::new(self.topology.clone(), sessions)
    }

    pub fn into_parts(self) -> (Topology, Vec<Session>) {
        (self.topology, self.sessions)
    }
}

/// Chain `0 - 1 - ... - (n-1)` with both directions on every hop.
pub fn build_linear(n: usize) -> Result<Topology> {
    if n < 2 {
        return Err(Error::InvalidSize { size: n, min: 2 });
    }
    let links = (0..n - 1)
        .flat_map(|i| [Link::new(i, i + 1), Link::new(i + 1, i)])
        .collect();
    Topology::new(n, links, vec![1.0; n])
}

/// Hub node 0 linked both ways to each of the `n - 1` leaves.
pub fn build_star(n: usize) -> Result<Topology> {
    if n < 2 {
        return Err(Error::InvalidSize { size: n, min: 2 });
    }
    let links = (1..n)
        .flat_map(|l| [Link::new(0, l), Link::new(l, 0)])
        .collect();
    Topology::new(n, links, vec![1.0; n])
}

/// The frozen 10-node, 12-link, 4-session reference network shipped with the crate.
///
/// Its adjacency is a stand-in: node, link and session counts are fixed, the exact
/// wiring is this crate's own choice and is versioned in `data/sample10.json`.
pub fn build_sample10() -> Network {
    parse_network(SAMPLE10).expect("bundled sample network is valid")
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    version: Option<u32>,
    nodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    energy: Option<Vec<f64>>,
    links: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    neighbors: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    sessions: Vec<SessionFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionFile {
    id: usize,
    route: Vec<[usize; 2]>,
    delay_bound: f64,
}

/// Parses a network document (JSON).
pub fn parse_network(text: &str) -> Result<Network> {
    let file: NetworkFile = serde_json::from_str(text).map_err(|e| NetworkError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if let Some(v) = file.version {
        if v > FILE_VERSION {
            return Err(schema("version", format!("unsupported version {v}")).into());
        }
    }
    let links = file.links.iter().map(|&[i, j]| Link::new(i, j)).collect();
    let energy = file.energy.unwrap_or_else(|| vec![1.0; file.nodes]);
    let topology = match file.neighbors {
        Some(n) => Topology::with_neighbors(file.nodes, links, energy, n)?,
        None => Topology::new(file.nodes, links, energy)?,
    };
    let sessions = file
        .sessions
        .into_iter()
        .map(|s| {
            Session::new(
                s.id,
                s.route.iter().map(|&[i, j]| Link::new(i, j)).collect(),
                s.delay_bound,
            )
        })
        .collect();
    Network::new(topology, sessions)
}

/// Serializes a network to its JSON document form.
pub fn network_to_string(topology: &Topology, sessions: &[Session]) -> String {
    let file = NetworkFile {
        version: Some(FILE_VERSION),
        nodes: topology.node_count,
        energy: Some(topology.energy.clone()),
        links: topology.links.iter().map(|l| [l.from, l.to]).collect(),
        neighbors: topology
            .explicit_neighbors
            .then(|| topology.neighbors.clone()),
        sessions: sessions
            .iter()
            .map(|s| SessionFile {
                id: s.id,
                route: s.route.iter().map(|l| [l.from, l.to]).collect(),
                delay_bound: s.delay_bound,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("network file serializes")
}

pub fn load_network(path: impl AsRef<Path>) -> Result<(Topology, Vec<Session>)> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_network(&text)?.into_parts())
}

pub fn save_network(topology: &Topology, sessions: &[Session], path: impl AsRef<Path>) -> Result<()> {
    let mut text = network_to_string(topology, sessions);
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
