//! Dense indexing of node pairs, swap triples and links for one network.
//!
//! A swap `(m:n, k)` consumes one `m:k` ebit and one `k:n` ebit at node `k` to
//! produce an `m:n` ebit. Its two consumed pairs are its left (`lo:k`) and
//! right (`k:hi`) sides.

use std::ops::Range;

use crate::topology::{canonical_pair, Network, NodeId, NodePair};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left = 0,
    Right = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Swap {
    pub produced: usize,
    /// Dense position of the swapping node.
    pub via: usize,
    pub left: usize,
    pub right: usize,
}

impl Swap {
    pub fn side(&self, side: Side) -> usize {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkSlot {
    pub pair: usize,
    pub capacity: u32,
    pub p: f64,
}

#[derive(Clone, Debug)]
pub struct Layout {
    nodes: Vec<NodeId>,
    q: Vec<f64>,
    pairs: Vec<NodePair>,
    swaps: Vec<Swap>,
    produced_by: Vec<Range<usize>>,
    consumers: Vec<Vec<(usize, Side)>>,
    links: Vec<LinkSlot>,
}

impl Layout {
    /// Index every pair and every swap triple. With `prune_unreachable`, swaps
    /// whose three nodes do not share a connected component are dropped; they
    /// can never carry flow.
    pub fn new(net: &Network, prune_unreachable: bool) -> Self {
        let nodes: Vec<NodeId> = net.node_ids().collect();
        let q = net.nodes().iter().map(|n| n.q).collect();
        let n = nodes.len();
        let comp = net.components();
        let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                pairs.push(canonical_pair(nodes[i], nodes[j]).expect("distinct ids"));
            }
        }
        let pair_index = |a: usize, b: usize| -> usize {
            let (i, j) = if a < b { (a, b) } else { (b, a) };
            i * (2 * n - i - 1) / 2 + (j - i - 1)
        };

        let mut swaps = Vec::new();
        let mut produced_by = Vec::with_capacity(pairs.len());
        for i in 0..n {
            for j in i + 1..n {
                let start = swaps.len();
                let produced = pair_index(i, j);
                for k in 0..n {
                    if k == i || k == j {
                        continue;
                    }
                    if prune_unreachable && !(comp[i] == comp[j] && comp[j] == comp[k]) {
                        continue;
                    }
                    swaps.push(Swap { produced, via: k, left: pair_index(i, k), right: pair_index(k, j) });
                }
                produced_by.push(start..swaps.len());
            }
        }

        let mut consumers = vec![Vec::new(); pairs.len()];
        for (s, sw) in swaps.iter().enumerate() {
            consumers[sw.left].push((s, Side::Left));
            consumers[sw.right].push((s, Side::Right));
        }

        let links = net
            .links()
            .iter()
            .map(|(e, l)| LinkSlot {
                pair: pair_index(net.position(e.lo()).unwrap(), net.position(e.hi()).unwrap()),
                capacity: l.capacity,
                p: l.p,
            })
            .collect();

        Layout { nodes, q, pairs, swaps, produced_by, consumers, links }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn q(&self, position: usize) -> f64 {
        self.q[position]
    }

    pub fn node_id(&self, position: usize) -> NodeId {
        self.nodes[position]
    }

    pub fn pairs(&self) -> &[NodePair] {
        &self.pairs
    }

    pub fn pair(&self, index: usize) -> NodePair {
        self.pairs[index]
    }

    pub fn pair_index(&self, pair: NodePair) -> Option<usize> {
        self.pairs.binary_search(&pair).ok()
    }

    pub fn swaps(&self) -> &[Swap] {
        &self.swaps
    }

    /// Swaps producing the given pair.
    pub fn produced_by(&self, pair: usize) -> Range<usize> {
        self.produced_by[pair].clone()
    }

    /// Swaps consuming the given pair, with the side it occupies.
    pub fn consumers(&self, pair: usize) -> &[(usize, Side)] {
        &self.consumers[pair]
    }

    pub fn links(&self) -> &[LinkSlot] {
        &self.links
    }

    /// Consumed pair on `side` of swap `s`, as a node pair.
    pub fn consumed_pair(&self, s: usize, side: Side) -> NodePair {
        self.pairs[self.swaps[s].side(side)]
    }
}
