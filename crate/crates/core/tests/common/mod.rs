//! Test-only oracles, independent of the library's LP code.
#![allow(dead_code)]

use std::collections::BTreeMap;

use esdi_core::mred::RateSolution;
use esdi_core::topology::{
    build_manual, canonical_pair, generate_waxman, Link, Network, Node, NodeId, NodePair, WaxmanParams,
};
use esdi_core::workload::sample_sd_universe;

const EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cmp {
    Le,
    Ge,
    Eq,
}

/// Maximize `obj . x` subject to `rows`, `0 <= x <= upper`.
pub type Row = (Vec<(usize, f64)>, Cmp, f64);

#[derive(Clone, Debug, Default)]
pub struct DenseLp {
    pub n: usize,
    pub upper: Vec<Option<f64>>,
    pub rows: Vec<Row>,
    pub obj: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DenseOutcome {
    Optimal(f64, Vec<f64>),
    Infeasible,
    Unbounded,
}

impl DenseLp {
    pub fn var(&mut self, upper: Option<f64>) -> usize {
        self.n += 1;
        self.upper.push(upper);
        self.n - 1
    }

    pub fn row(&mut self, terms: Vec<(usize, f64)>, cmp: Cmp, rhs: f64) {
        self.rows.push((terms, cmp, rhs));
    }

    pub fn solve(&self) -> DenseOutcome {
        let mut rows = self.rows.clone();
        for (j, u) in self.upper.iter().enumerate() {
            if let Some(u) = u {
                rows.push((vec![(j, 1.0)], Cmp::Le, *u));
            }
        }
        // non-negative right-hand sides
        for r in &mut rows {
            if r.2 < 0.0 {
                r.0.iter_mut().for_each(|t| t.1 = -t.1);
                r.2 = -r.2;
                r.1 = match r.1 {
                    Cmp::Le => Cmp::Ge,
                    Cmp::Ge => Cmp::Le,
                    Cmp::Eq => Cmp::Eq,
                };
            }
        }
        let m = rows.len();
        let n_slack = rows.iter().filter(|r| r.1 != Cmp::Eq).count();
        let n_art = rows.iter().filter(|r| r.1 != Cmp::Le).count();
        let art0 = self.n + n_slack;
        let width = art0 + n_art;
        let mut t = vec![vec![0.0; width + 1]; m];
        let mut basis = vec![0; m];
        let (mut s, mut a) = (self.n, art0);
        for (i, (terms, cmp, rhs)) in rows.iter().enumerate() {
            for &(j, c) in terms {
                t[i][j] += c;
            }
            t[i][width] = *rhs;
            match cmp {
                Cmp::Le => {
                    t[i][s] = 1.0;
                    basis[i] = s;
                    s += 1;
                }
                Cmp::Ge => {
                    t[i][s] = -1.0;
                    s += 1;
                    t[i][a] = 1.0;
                    basis[i] = a;
                    a += 1;
                }
                Cmp::Eq => {
                    t[i][a] = 1.0;
                    basis[i] = a;
                    a += 1;
                }
            }
        }

        // phase 1: maximize -sum(artificials)
        let mut z = vec![0.0; width + 1];
        z[art0..width].fill(1.0);
        for i in 0..m {
            if basis[i] >= art0 {
                for j in 0..=width {
                    z[j] -= t[i][j];
                }
            }
        }
        if !pivot_loop(&mut t, &mut basis, &mut z, width, width) {
            return DenseOutcome::Unbounded;
        }
        if z[width] < -1e-7 {
            return DenseOutcome::Infeasible;
        }
        for i in 0..m {
            if basis[i] >= art0 {
                if let Some(j) = (0..art0).find(|&j| t[i][j].abs() > 1e-7) {
                    pivot(&mut t, &mut basis, &mut z, i, j, width);
                }
            }
        }

        // phase 2
        let mut z = vec![0.0; width + 1];
        for &(j, c) in &self.obj {
            z[j] -= c;
        }
        for i in 0..m {
            let b = basis[i];
            if z[b] != 0.0 {
                let f = z[b];
                for j in 0..=width {
                    z[j] -= f * t[i][j];
                }
            }
        }
        if !pivot_loop(&mut t, &mut basis, &mut z, art0, width) {
            return DenseOutcome::Unbounded;
        }
        let mut x = vec![0.0; self.n];
        for i in 0..m {
            if basis[i] < self.n {
                x[basis[i]] = t[i][width];
            }
        }
        let value = self.obj.iter().map(|&(j, c)| c * x[j]).sum();
        DenseOutcome::Optimal(value, x)
    }
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], z: &mut [f64], r: usize, e: usize, width: usize) {
    let p = t[r][e];
    t[r].iter_mut().for_each(|x| *x /= p);
    let row = t[r].clone();
    for (i, ti) in t.iter_mut().enumerate() {
        if i != r && ti[e] != 0.0 {
            let f = ti[e];
            for j in 0..=width {
                ti[j] -= f * row[j];
            }
        }
    }
    if z[e] != 0.0 {
        let f = z[e];
        for j in 0..=width {
            z[j] -= f * row[j];
        }
    }
    basis[r] = e;
}

/// Dantzig pricing, falling back to Bland's rule after a run of degenerate
/// pivots. Returns false when unbounded.
fn pivot_loop(t: &mut [Vec<f64>], basis: &mut [usize], z: &mut [f64], allowed: usize, width: usize) -> bool {
    let mut degenerate = 0;
    loop {
        let bland = degenerate > 50;
        let enter = if bland {
            (0..allowed).find(|&j| z[j] < -EPS)
        } else {
            (0..allowed).filter(|&j| z[j] < -EPS).min_by(|&a, &b| z[a].total_cmp(&z[b]))
        };
        let Some(e) = enter else { return true };
        let mut leave: Option<(usize, f64)> = None;
        for (i, ti) in t.iter().enumerate() {
            if ti[e] > EPS {
                let ratio = ti[width] / ti[e];
                let better = match leave {
                    None => true,
                    Some((l, best)) => ratio < best - EPS || (ratio <= best + EPS && basis[i] < basis[l]),
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        let Some((r, ratio)) = leave else { return false };
        degenerate = if ratio.abs() < EPS { degenerate + 1 } else { 0 };
        pivot(t, basis, z, r, e, width);
    }
}

/// MRED written out directly: two rate variables per swap, tied by an
/// explicit equality row.
pub struct OracleMred {
    pub lp: DenseLp,
    /// `I - Omega` per pair.
    pub surplus: BTreeMap<NodePair, Vec<(usize, f64)>>,
}

impl OracleMred {
    pub fn new(net: &Network) -> Self {
        let ids: Vec<NodeId> = net.node_ids().collect();
        let mut lp = DenseLp::default();
        let mut surplus: BTreeMap<NodePair, Vec<(usize, f64)>> = BTreeMap::new();
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                surplus.insert(canonical_pair(a, b).unwrap(), Vec::new());
            }
        }
        for (&e, link) in net.links() {
            let g = lp.var(Some(1.0));
            surplus.get_mut(&e).unwrap().push((g, link.p * link.capacity as f64));
        }
        let pairs: Vec<NodePair> = surplus.keys().copied().collect();
        for mn in pairs {
            let (m, n) = (mn.lo(), mn.hi());
            for &k in &ids {
                if k == m || k == n {
                    continue;
                }
                let mk = canonical_pair(m, k).unwrap();
                let kn = canonical_pair(k, n).unwrap();
                let f1 = lp.var(None);
                let f2 = lp.var(None);
                lp.row(vec![(f1, 1.0), (f2, -1.0)], Cmp::Eq, 0.0);
                let half_q = net.q(k).unwrap() / 2.0;
                surplus.get_mut(&mn).unwrap().extend([(f1, half_q), (f2, half_q)]);
                surplus.get_mut(&mk).unwrap().push((f1, -1.0));
                surplus.get_mut(&kn).unwrap().push((f2, -1.0));
            }
        }
        for (pair, terms) in &surplus {
            let cmp = if net.sd_pairs().contains(pair) { Cmp::Ge } else { Cmp::Eq };
            lp.row(terms.clone(), cmp, 0.0);
        }
        OracleMred { lp, surplus }
    }

    pub fn maximize(&self, objective: &[NodePair]) -> DenseOutcome {
        let mut lp = self.lp.clone();
        lp.obj = objective.iter().flat_map(|p| self.surplus[p].clone()).collect();
        lp.solve()
    }

    /// Require `eta[pair] >= value`.
    pub fn fix(&mut self, pair: NodePair, value: f64) {
        self.lp.row(self.surplus[&pair].clone(), Cmp::Ge, value);
    }
}

pub fn optimum(outcome: DenseOutcome) -> f64 {
    match outcome {
        DenseOutcome::Optimal(v, _) => v,
        other => panic!("oracle LP not optimal: {other:?}"),
    }
}

/// Largest violation of the MRED constraints by `sol`, computed directly
/// from its rate entries.
pub fn max_residual(net: &Network, sol: &RateSolution) -> f64 {
    let ids: Vec<NodeId> = net.node_ids().collect();
    let f = |c: NodePair, p: NodePair| sol.f(c, p);
    let mut worst: f64 = 0.0;
    for &v in sol.f_entries().values() {
        worst = worst.max(-v);
    }
    for &v in sol.g_entries().values() {
        worst = worst.max(-v).max(v - 1.0);
    }
    for (i, &m) in ids.iter().enumerate() {
        for &n in &ids[i + 1..] {
            let mn = canonical_pair(m, n).unwrap();
            let mut input = net.link(mn).map_or(0.0, |l| l.p * l.capacity as f64 * sol.g(mn));
            let mut output = 0.0;
            for &k in &ids {
                if k == m || k == n {
                    continue;
                }
                let mk = canonical_pair(m, k).unwrap();
                let kn = canonical_pair(k, n).unwrap();
                worst = worst.max((f(mk, mn) - f(kn, mn)).abs());
                input += net.q(k).unwrap() / 2.0 * (f(mk, mn) + f(kn, mn));
                // m:n consumed at n toward m:k and at m toward k:n
                output += f(mn, mk) + f(mn, kn);
            }
            if net.sd_pairs().contains(&mn) {
                worst = worst.max(output - input);
                worst = worst.max((sol.eta(mn) - (input - output)).abs());
            } else {
                worst = worst.max((input - output).abs());
            }
        }
    }
    worst
}

pub fn pair(a: NodeId, b: NodeId) -> NodePair {
    canonical_pair(a, b).unwrap()
}

/// Star with leaves A=0, B=1, D=3 around C=2; every link has two channels.
pub fn star(sd: &[(NodeId, NodeId)]) -> Network {
    let nodes = (0..4).map(|id| Node { id, q: 1.0 }).collect();
    let link = Link { capacity: 2, p: 1.0 };
    build_manual(nodes, vec![(0, 2, link), (1, 2, link), (3, 2, link)], sd.to_vec()).unwrap()
}

/// Path 0 - 1 - ... with the given capacities, uniform p and q, and the end
/// nodes as the only SD pair.
pub fn line(caps: &[u32], p: f64, q: f64) -> Network {
    let n = caps.len() as NodeId + 1;
    let nodes = (0..n).map(|id| Node { id, q }).collect();
    let links = caps.iter().enumerate().map(|(i, &c)| (i as NodeId, i as NodeId + 1, Link { capacity: c, p })).collect();
    build_manual(nodes, links, vec![(0, n - 1)]).unwrap()
}

/// Connected Waxman graph with `sd` random SD pairs.
pub fn random_net(nodes: usize, sd: usize, seed: u64) -> Network {
    let net = generate_waxman(&WaxmanParams { nodes, ..WaxmanParams::default() }, seed).unwrap();
    let universe = sample_sd_universe(&net, Some(sd), seed ^ 0x5eed);
    net.with_sd_pairs(universe).unwrap()
}

/// `E[max(min, round(X))]` for `X ~ Exp(mean)`.
pub fn truncated_exp_mean(mean: f64, min: u64) -> f64 {
    let tail = |x: f64| (-x / mean).exp();
    let mut e = min as f64 * (1.0 - tail(min as f64 + 0.5));
    let last = min + (60.0 * mean) as u64 + 10;
    for k in min + 1..=last {
        e += k as f64 * (tail(k as f64 - 0.5) - tail(k as f64 + 0.5));
    }
    e
}
