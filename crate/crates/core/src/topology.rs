//! Quantum network graph model and random topology generation.
//!
//! A [`Network`] holds repeater nodes (each with a swapping success
//! probability), physical links (each with a channel count and a per-channel
//! generation success probability) and the set of source-destination pairs
//! that request end-to-end ebits.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = u32;

/// Attempts allowed when regenerating a Waxman graph until it is connected.
pub const WAXMAN_RETRY_BUDGET: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("degenerate node pair {0}:{0}")]
    DegeneratePair(NodeId),
    #[error("invalid network: {0}")]
    Validation(String),
    #[error("no connected graph after {attempts} attempts")]
    GenerationFailed { attempts: usize },
}

/// Unordered node pair `m:n`, stored with `lo < hi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodePair {
    lo: NodeId,
    hi: NodeId,
}

impl NodePair {
    pub fn new(m: NodeId, n: NodeId) -> Result<Self, TopologyError> {
        canonical_pair(m, n)
    }

    pub fn lo(self) -> NodeId {
        self.lo
    }

    pub fn hi(self) -> NodeId {
        self.hi
    }

    pub fn contains(self, v: NodeId) -> bool {
        self.lo == v || self.hi == v
    }

    /// The endpoint that is not `v`, if `v` is an endpoint.
    pub fn other(self, v: NodeId) -> Option<NodeId> {
        if v == self.lo {
            Some(self.hi)
        } else if v == self.hi {
            Some(self.lo)
        } else {
            None
        }
    }

    /// Endpoint shared with `other`, if exactly one is shared.
    pub fn shared_endpoint(self, other: NodePair) -> Option<NodeId> {
        if self == other {
            return None;
        }
        [self.lo, self.hi].into_iter().find(|&v| other.contains(v))
    }
}

impl fmt::Display for NodePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

impl Serialize for NodePair {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.lo, self.hi].serialize(s)
    }
}

impl<'de> Deserialize<'de> for NodePair {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [m, n] = <[NodeId; 2]>::deserialize(d)?;
        canonical_pair(m, n).map_err(serde::de::Error::custom)
    }
}

pub fn canonical_pair(m: NodeId, n: NodeId) -> Result<NodePair, TopologyError> {
    match m.cmp(&n) {
        std::cmp::Ordering::Less => Ok(NodePair { lo: m, hi: n }),
        std::cmp::Ordering::Greater => Ok(NodePair { lo: n, hi: m }),
        std::cmp::Ordering::Equal => Err(TopologyError::DegeneratePair(m)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    /// Swapping success probability.
    pub q: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Link {
    /// Number of quantum channels.
    pub capacity: u32,
    /// Per-channel generation success probability.
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NodeJson {
    id: NodeId,
    q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LinkJson {
    u: NodeId,
    v: NodeId,
    c: u32,
    p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NetworkJson {
    nodes: Vec<NodeJson>,
    links: Vec<LinkJson>,
    #[serde(default)]
    sd_pairs: Vec<[NodeId; 2]>,
}

/// Validated, immutable quantum network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkJson", into = "NetworkJson")]
pub struct Network {
    nodes: Vec<Node>,
    links: BTreeMap<NodePair, Link>,
    sd_pairs: BTreeSet<NodePair>,
}

impl TryFrom<NetworkJson> for Network {
    type Error = TopologyError;

    fn try_from(raw: NetworkJson) -> Result<Self, Self::Error> {
        let nodes = raw.nodes.into_iter().map(|n| Node { id: n.id, q: n.q }).collect();
        let links = raw
            .links
            .into_iter()
            .map(|l| (l.u, l.v, Link { capacity: l.c, p: l.p }))
            .collect();
        let sd = raw.sd_pairs.into_iter().map(|[s, t]| (s, t)).collect();
        build_manual(nodes, links, sd)
    }
}

impl From<Network> for NetworkJson {
    fn from(net: Network) -> Self {
        NetworkJson {
            nodes: net.nodes.iter().map(|n| NodeJson { id: n.id, q: n.q }).collect(),
            links: net
                .links
                .iter()
                .map(|(e, l)| LinkJson { u: e.lo, v: e.hi, c: l.capacity, p: l.p })
                .collect(),
            sd_pairs: net.sd_pairs.iter().map(|e| [e.lo, e.hi]).collect(),
        }
    }
}

fn check_probability(what: &str, v: f64) -> Result<(), TopologyError> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(TopologyError::Validation(format!("{what} = {v} outside (0, 1]")))
    }
}

/// Build a network from explicit nodes, links and SD pairs, checking every
/// invariant.
pub fn build_manual(
    nodes: Vec<Node>,
    links: Vec<(NodeId, NodeId, Link)>,
    sd_pairs: Vec<(NodeId, NodeId)>,
) -> Result<Network, TopologyError> {
    let mut nodes = nodes;
    nodes.sort_by_key(|n| n.id);
    for w in nodes.windows(2) {
        if w[0].id == w[1].id {
            return Err(TopologyError::Validation(format!("duplicate node {}", w[0].id)));
        }
    }
    for n in &nodes {
        check_probability(&format!("q of node {}", n.id), n.q)?;
    }
    let known = |v: NodeId| nodes.binary_search_by_key(&v, |n| n.id).is_ok();

    let mut link_map = BTreeMap::new();
    for (u, v, link) in links {
        let e = canonical_pair(u, v)?;
        if !known(u) || !known(v) {
            return Err(TopologyError::Validation(format!("link {e} has an undeclared endpoint")));
        }
        if link.capacity == 0 {
            return Err(TopologyError::Validation(format!("link {e} has zero capacity")));
        }
        check_probability(&format!("p of link {e}"), link.p)?;
        if link_map.insert(e, link).is_some() {
            return Err(TopologyError::Validation(format!("duplicate link {e}")));
        }
    }

    let mut sd = BTreeSet::new();
    for (s, t) in sd_pairs {
        let e = canonical_pair(s, t)?;
        if !known(s) || !known(t) {
            return Err(TopologyError::Validation(format!("SD pair {e} has an undeclared node")));
        }
        sd.insert(e);
    }

    Ok(Network { nodes, links: link_map, sd_pairs: sd })
}

impl Network {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn has_node(&self, v: NodeId) -> bool {
        self.position(v).is_some()
    }

    /// Dense index of node `v` in id order.
    pub fn position(&self, v: NodeId) -> Option<usize> {
        self.nodes.binary_search_by_key(&v, |n| n.id).ok()
    }

    pub fn q(&self, v: NodeId) -> Option<f64> {
        self.position(v).map(|i| self.nodes[i].q)
    }

    pub fn links(&self) -> &BTreeMap<NodePair, Link> {
        &self.links
    }

    pub fn link(&self, e: NodePair) -> Option<&Link> {
        self.links.get(&e)
    }

    pub fn sd_pairs(&self) -> &BTreeSet<NodePair> {
        &self.sd_pairs
    }

    /// Same topology with a different SD pair set.
    pub fn with_sd_pairs<I: IntoIterator<Item = NodePair>>(&self, sd: I) -> Result<Network, TopologyError> {
        let sd: BTreeSet<NodePair> = sd.into_iter().collect();
        if let Some(e) = sd.iter().find(|e| !self.has_node(e.lo) || !self.has_node(e.hi)) {
            return Err(TopologyError::Validation(format!("SD pair {e} has an undeclared node")));
        }
        Ok(Network { nodes: self.nodes.clone(), links: self.links.clone(), sd_pairs: sd })
    }

    /// Component label (dense position of the smallest node) for every node.
    pub fn components(&self) -> Vec<usize> {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for e in self.links.keys() {
            let (a, b) = (self.position(e.lo).unwrap(), self.position(e.hi).unwrap());
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut label = vec![usize::MAX; n];
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = start;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &w in &adj[u] {
                    if label[w] == usize::MAX {
                        label[w] = start;
                        queue.push_back(w);
                    }
                }
            }
        }
        label
    }

    pub fn is_connected(&self) -> bool {
        self.components().iter().all(|&c| c == 0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Network, TopologyError> {
        serde_json::from_str(s).map_err(|e| TopologyError::Validation(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaxmanParams {
    pub nodes: usize,
    pub alpha: f64,
    pub beta: f64,
    pub cap_lo: u32,
    pub cap_hi: u32,
    pub p: f64,
    pub q: f64,
}

impl Default for WaxmanParams {
    fn default() -> Self {
        WaxmanParams { nodes: 20, alpha: 0.8, beta: 0.8, cap_lo: 3, cap_hi: 10, p: 0.9, q: 0.9 }
    }
}

/// Random Waxman graph on the unit square, regenerated until connected.
///
/// Link `m:n` is present with probability `beta * exp(-d(m,n) / (alpha * L))`
/// where `L` is the largest pairwise distance of the placement.
pub fn generate_waxman(params: &WaxmanParams, seed: u64) -> Result<Network, TopologyError> {
    let WaxmanParams { nodes: n, alpha, beta, cap_lo, cap_hi, p, q } = *params;
    if n == 0 {
        return Err(TopologyError::Validation("need at least one node".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0 && beta > 0.0 && beta <= 1.0) {
        return Err(TopologyError::Validation(format!("alpha={alpha}, beta={beta} outside (0, 1]")));
    }
    if cap_lo == 0 || cap_lo > cap_hi {
        return Err(TopologyError::Validation(format!("capacity range [{cap_lo}, {cap_hi}]")));
    }
    check_probability("p", p)?;
    check_probability("q", q)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let node_list: Vec<Node> = (0..n as NodeId).map(|id| Node { id, q }).collect();
    for _ in 0..WAXMAN_RETRY_BUDGET {
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        let dist = |a: usize, b: usize| (pts[a].0 - pts[b].0).hypot(pts[a].1 - pts[b].1);
        let mut max_dist = 0.0f64;
        for a in 0..n {
            for b in a + 1..n {
                max_dist = max_dist.max(dist(a, b));
            }
        }
        let mut links = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let prob = if max_dist > 0.0 { beta * (-dist(a, b) / (alpha * max_dist)).exp() } else { beta };
                if rng.random::<f64>() < prob {
                    let capacity = rng.random_range(cap_lo..=cap_hi);
                    links.push((a as NodeId, b as NodeId, Link { capacity, p }));
                }
            }
        }
        let net = build_manual(node_list.clone(), links, Vec::new())?;
        if net.is_connected() {
            return Ok(net);
        }
    }
    Err(TopologyError::GenerationFailed { attempts: WAXMAN_RETRY_BUDGET })
}
