//! Multi-commodity remote entanglement distribution LPs.
//!
//! Variables are the per-link generation fractions `g[m:n] in [0,1]` and the
//! swap rates `f^{m:k}_{m:n} >= 0` (the number of `m:k` ebits per slot fed
//! into swaps at `k` that produce `m:n`). For every pair the established
//! input is
//!
//! ```text
//! I(m:n) = [m:n in E] p c g[m:n] + sum_k (q_k / 2) (f^{m:k}_{m:n} + f^{k:n}_{m:n})
//! ```
//!
//! and the consumed output is
//!
//! ```text
//! Omega(m:n) = sum_k (f^{m:n}_{m:k} + f^{m:n}_{k:n})
//! ```
//!
//! Non-SD pairs must balance (`I = Omega`), SD pairs keep the surplus
//! `eta[s:t] = I - Omega >= 0` as their end-to-end distribution rate.
//!
//! Both sides of a swap always carry the same rate, so the builder uses a
//! single LP column per swap triple and writes it to both `f` entries of the
//! returned [`RateSolution`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{Layout, Side};
use crate::lp::{LpOutcome, LpProblem, Sense, SolverError, SolverHandle, VarId};
use crate::topology::{canonical_pair, Network, NodeId, NodePair, TopologyError};

/// Values in `[-DUST, 0)` are solver noise and are snapped to zero.
pub const DUST: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("pair {0} is not indexed by this solution or network")]
pub struct IndexError(pub NodePair);

/// `f^{consumed}_{produced}`: consumed ebits of one pair fed into swaps that
/// produce the other. The two pairs share exactly one endpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub consumed: NodePair,
    pub produced: NodePair,
}

impl FlowKey {
    /// The swapping node: the endpoint of `consumed` outside `produced`.
    pub fn via(&self) -> Option<NodeId> {
        let shared = self.consumed.shared_endpoint(self.produced)?;
        let via = self.consumed.other(shared)?;
        (!self.produced.contains(via)).then_some(via)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageValue {
    pub label: String,
    pub value: f64,
}

/// Optimized generation and swapping rates plus per-SD-pair EDRs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SolutionJson", into = "SolutionJson")]
pub struct RateSolution {
    nodes: Vec<NodeId>,
    sd_pairs: BTreeSet<NodePair>,
    f: BTreeMap<FlowKey, f64>,
    g: BTreeMap<NodePair, f64>,
    eta: BTreeMap<NodePair, f64>,
    objective_log: Vec<StageValue>,
}

impl RateSolution {
    /// All-zero solution; feasible for every network.
    pub fn zero(net: &Network) -> Self {
        RateSolution {
            nodes: net.node_ids().collect(),
            sd_pairs: net.sd_pairs().clone(),
            f: BTreeMap::new(),
            g: BTreeMap::new(),
            eta: net.sd_pairs().iter().map(|&p| (p, 0.0)).collect(),
            objective_log: Vec::new(),
        }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn sd_pairs(&self) -> &BTreeSet<NodePair> {
        &self.sd_pairs
    }

    pub fn f(&self, consumed: NodePair, produced: NodePair) -> f64 {
        self.f.get(&FlowKey { consumed, produced }).copied().unwrap_or(0.0)
    }

    pub fn f_entries(&self) -> &BTreeMap<FlowKey, f64> {
        &self.f
    }

    pub fn g(&self, link: NodePair) -> f64 {
        self.g.get(&link).copied().unwrap_or(0.0)
    }

    pub fn g_entries(&self) -> &BTreeMap<NodePair, f64> {
        &self.g
    }

    /// End-to-end rate of an SD pair; zero for any other pair.
    pub fn eta(&self, pair: NodePair) -> f64 {
        self.eta.get(&pair).copied().unwrap_or(0.0)
    }

    pub fn eta_entries(&self) -> &BTreeMap<NodePair, f64> {
        &self.eta
    }

    pub fn total_eta(&self) -> f64 {
        self.eta.values().sum()
    }

    pub fn objective_log(&self) -> &[StageValue] {
        &self.objective_log
    }

    fn knows(&self, pair: NodePair) -> bool {
        let has = |v| self.nodes.binary_search(&v).is_ok();
        has(pair.lo()) && has(pair.hi())
    }

    /// Set one rate entry by hand (hand-built plans and tests).
    pub fn with_f(mut self, consumed: NodePair, produced: NodePair, value: f64) -> Self {
        self.f.insert(FlowKey { consumed, produced }, value);
        self
    }

    pub fn with_g(mut self, link: NodePair, value: f64) -> Self {
        self.g.insert(link, value);
        self
    }

    pub fn with_eta(mut self, pair: NodePair, value: f64) -> Self {
        self.sd_pairs.insert(pair);
        self.eta.insert(pair, value);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("solution serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        serde_json::from_str(s).map_err(|e| e.to_string())
    }
}

#[derive(Serialize, Deserialize)]
struct FlowJson {
    consumed: NodePair,
    produced: NodePair,
    value: f64,
}

#[derive(Serialize, Deserialize)]
struct PairValueJson {
    pair: NodePair,
    value: f64,
}

#[derive(Serialize, Deserialize)]
struct SolutionJson {
    nodes: Vec<NodeId>,
    sd_pairs: Vec<NodePair>,
    f: Vec<FlowJson>,
    g: Vec<PairValueJson>,
    eta: Vec<PairValueJson>,
    #[serde(default)]
    objective_log: Vec<StageValue>,
}

impl From<RateSolution> for SolutionJson {
    fn from(s: RateSolution) -> Self {
        let nz = |v: &f64| *v != 0.0;
        SolutionJson {
            nodes: s.nodes,
            sd_pairs: s.sd_pairs.into_iter().collect(),
            f: s.f
                .into_iter()
                .filter(|(_, v)| nz(v))
                .map(|(k, value)| FlowJson { consumed: k.consumed, produced: k.produced, value })
                .collect(),
            g: s.g.into_iter().filter(|(_, v)| nz(v)).map(|(pair, value)| PairValueJson { pair, value }).collect(),
            eta: s.eta.into_iter().filter(|(_, v)| nz(v)).map(|(pair, value)| PairValueJson { pair, value }).collect(),
            objective_log: s.objective_log,
        }
    }
}

impl TryFrom<SolutionJson> for RateSolution {
    type Error = String;

    fn try_from(raw: SolutionJson) -> Result<Self, Self::Error> {
        let mut nodes = raw.nodes;
        nodes.sort_unstable();
        nodes.dedup();
        let sd_pairs: BTreeSet<NodePair> = raw.sd_pairs.into_iter().collect();
        let mut eta: BTreeMap<NodePair, f64> = sd_pairs.iter().map(|&p| (p, 0.0)).collect();
        for e in raw.eta {
            if !sd_pairs.contains(&e.pair) {
                return Err(format!("eta given for non-SD pair {}", e.pair));
            }
            eta.insert(e.pair, e.value);
        }
        Ok(RateSolution {
            nodes,
            sd_pairs,
            f: raw.f.into_iter().map(|x| (FlowKey { consumed: x.consumed, produced: x.produced }, x.value)).collect(),
            g: raw.g.into_iter().map(|x| (x.pair, x.value)).collect(),
            eta,
            objective_log: raw.objective_log,
        })
    }
}

/// `I(m:n)`: ebits established for the pair per slot.
pub fn input_rate(pair: NodePair, sol: &RateSolution, net: &Network) -> Result<f64, IndexError> {
    if !net.has_node(pair.lo()) || !net.has_node(pair.hi()) {
        return Err(IndexError(pair));
    }
    let (m, n) = (pair.lo(), pair.hi());
    let direct = net.link(pair).map_or(0.0, |l| l.p * l.capacity as f64 * sol.g(pair));
    let mut swapped = 0.0;
    for node in net.nodes() {
        let k = node.id;
        if k == m || k == n {
            continue;
        }
        let left = canonical_pair(m, k).expect("k differs from m");
        let right = canonical_pair(k, n).expect("k differs from n");
        swapped += node.q / 2.0 * (sol.f(left, pair) + sol.f(right, pair));
    }
    Ok(direct + swapped)
}

/// `Omega(m:n)`: ebits of the pair consumed by swaps per slot.
pub fn output_rate(pair: NodePair, sol: &RateSolution) -> Result<f64, IndexError> {
    if !sol.knows(pair) {
        return Err(IndexError(pair));
    }
    let first = FlowKey { consumed: pair, produced: NodePair::new(NodeId::MIN, NodeId::MIN + 1).expect("valid") };
    let total = sol
        .f
        .range(first..)
        .take_while(|(k, _)| k.consumed == pair)
        .filter(|(k, _)| k.via().is_some())
        .map(|(_, v)| v)
        .sum();
    Ok(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MredOptions {
    /// Skip swap triples spanning disconnected components.
    pub prune_unreachable: bool,
}

/// The base LP over a network: balance rows for non-SD pairs and surplus
/// rows for SD pairs. Objectives are attached per solve stage.
#[derive(Clone, Debug)]
pub struct MredProblem {
    layout: Layout,
    lp: LpProblem,
    g_vars: Vec<VarId>,
    swap_vars: Vec<VarId>,
    net_terms: Vec<Vec<(VarId, f64)>>,
    sd: BTreeSet<NodePair>,
    components: Vec<usize>,
    balance_rows: usize,
    surplus_rows: usize,
}

pub fn build_mred(net: &Network) -> MredProblem {
    build_mred_with(net, MredOptions::default())
}

pub fn build_mred_with(net: &Network, options: MredOptions) -> MredProblem {
    let layout = Layout::new(net, options.prune_unreachable);
    let mut lp = LpProblem::new();
    let mut net_terms: Vec<Vec<(VarId, f64)>> = vec![Vec::new(); layout.pairs().len()];

    let g_vars: Vec<VarId> = layout
        .links()
        .iter()
        .map(|link| {
            let v = lp.add_var(0.0, 1.0);
            net_terms[link.pair].push((v, link.p * link.capacity as f64));
            v
        })
        .collect();

    let swap_vars: Vec<VarId> = layout
        .swaps()
        .iter()
        .map(|sw| {
            let v = lp.add_var(0.0, f64::INFINITY);
            // (q/2)(f_left + f_right) with f_left = f_right = v
            net_terms[sw.produced].push((v, layout.q(sw.via)));
            net_terms[sw.left].push((v, -1.0));
            net_terms[sw.right].push((v, -1.0));
            v
        })
        .collect();

    let sd: BTreeSet<NodePair> = net.sd_pairs().clone();
    let (mut balance_rows, mut surplus_rows) = (0, 0);
    for (i, terms) in net_terms.iter().enumerate() {
        let is_sd = sd.contains(&layout.pair(i));
        if is_sd {
            surplus_rows += 1;
        } else {
            balance_rows += 1;
        }
        if terms.is_empty() {
            continue;
        }
        lp.add_constraint(terms.clone(), if is_sd { Sense::Ge } else { Sense::Eq }, 0.0);
    }

    let pos_components = net.components();
    MredProblem {
        layout,
        lp,
        g_vars,
        swap_vars,
        net_terms,
        sd,
        components: pos_components,
        balance_rows,
        surplus_rows,
    }
}

impl MredProblem {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn lp(&self) -> &LpProblem {
        &self.lp
    }

    /// Number of `f` entries (two per swap triple).
    pub fn f_entry_count(&self) -> usize {
        2 * self.swap_vars.len()
    }

    /// Number of swap-symmetry identities, each enforced by a shared column.
    pub fn symmetry_count(&self) -> usize {
        self.swap_vars.len()
    }

    pub fn g_count(&self) -> usize {
        self.g_vars.len()
    }

    /// Pairs with an `I = Omega` balance requirement.
    pub fn balance_count(&self) -> usize {
        self.balance_rows
    }

    /// SD pairs with an `I >= Omega` requirement.
    pub fn surplus_count(&self) -> usize {
        self.surplus_rows
    }

    pub fn sd_pairs(&self) -> &BTreeSet<NodePair> {
        &self.sd
    }

    /// Linear expression for `I - Omega` of a pair.
    pub fn eta_terms(&self, pair: NodePair) -> Option<&[(VarId, f64)]> {
        self.layout.pair_index(pair).map(|i| &self.net_terms[i][..])
    }

    fn connected(&self, pair: NodePair) -> bool {
        let nodes = self.layout.nodes();
        let pos = |v| nodes.binary_search(&v).expect("pair in layout");
        self.components[pos(pair.lo())] == self.components[pos(pair.hi())]
    }

    fn sum_terms<'a, I: IntoIterator<Item = &'a NodePair>>(&self, pairs: I) -> Vec<(VarId, f64)> {
        let mut dense: BTreeMap<VarId, f64> = BTreeMap::new();
        for p in pairs {
            for &(v, c) in self.eta_terms(*p).unwrap_or(&[]) {
                *dense.entry(v).or_insert(0.0) += c;
            }
        }
        dense.into_iter().filter(|&(_, c)| c != 0.0).collect()
    }

    fn extract(&self, values: &[f64], log: Vec<StageValue>) -> RateSolution {
        let clean = |x: f64| if (-DUST..0.0).contains(&x) { 0.0 } else { x };
        let mut f = BTreeMap::new();
        for (s, sw) in self.layout.swaps().iter().enumerate() {
            let v = clean(values[self.swap_vars[s].index()]);
            if v != 0.0 {
                let produced = self.layout.pair(sw.produced);
                f.insert(FlowKey { consumed: self.layout.consumed_pair(s, Side::Left), produced }, v);
                f.insert(FlowKey { consumed: self.layout.consumed_pair(s, Side::Right), produced }, v);
            }
        }
        let mut g = BTreeMap::new();
        for (i, link) in self.layout.links().iter().enumerate() {
            let mut v = clean(values[self.g_vars[i].index()]);
            if v > 1.0 && v <= 1.0 + DUST {
                v = 1.0;
            }
            if v != 0.0 {
                g.insert(self.layout.pair(link.pair), v);
            }
        }
        let eta = self
            .sd
            .iter()
            .map(|&p| (p, clean(LpProblem::evaluate(self.eta_terms(p).unwrap_or(&[]), values))))
            .collect();
        RateSolution {
            nodes: self.layout.nodes().to_vec(),
            sd_pairs: self.sd.clone(),
            f,
            g,
            eta,
            objective_log: log,
        }
    }
}

/// One objective in a lexicographic sequence; each stage is maximized with
/// all earlier stages held at their optimum.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    /// Maximize one SD pair's rate.
    Pair(NodePair),
    /// Maximize the total rate over all SD pairs.
    Total,
    /// Maximize the summed rate of a group of SD pairs.
    Group(Vec<NodePair>),
    /// Maximize the smallest rate among connected SD pairs.
    MaxMin,
}

impl Stage {
    fn label(&self) -> String {
        match self {
            Stage::Pair(p) => format!("eta[{p}]"),
            Stage::Total => "total".into(),
            Stage::Group(ps) => {
                let names: Vec<String> = ps.iter().map(|p| p.to_string()).collect();
                format!("group[{}]", names.join(","))
            }
            Stage::MaxMin => "maxmin".into(),
        }
    }
}

/// Solve `stages` in order on top of `problem`. Returns `None` when the base
/// problem is infeasible.
pub fn solve_stages(
    problem: &MredProblem,
    stages: &[Stage],
    handle: &SolverHandle,
) -> Result<Option<RateSolution>, SolverError> {
    let mut lp = problem.lp.clone();
    let mut log = Vec::new();
    let mut last: Option<Vec<f64>> = None;

    for stage in stages {
        let label = stage.label();
        let mut stage_lp = lp.clone();
        // max-min uses an auxiliary level variable t <= eta for each pair
        let mut level: Option<(VarId, Vec<NodePair>)> = None;
        let objective = match stage {
            Stage::Pair(p) => problem
                .eta_terms(*p)
                .ok_or_else(|| SolverError::InvalidInput(format!("unknown pair {p}")))?
                .to_vec(),
            Stage::Total => problem.sum_terms(problem.sd.iter()),
            Stage::Group(ps) => problem.sum_terms(ps.iter()),
            Stage::MaxMin => {
                let pairs: Vec<NodePair> = problem.sd.iter().copied().filter(|&p| problem.connected(p)).collect();
                let t = stage_lp.add_var(0.0, f64::INFINITY);
                for p in &pairs {
                    let mut row = problem.eta_terms(*p).unwrap_or(&[]).to_vec();
                    row.push((t, -1.0));
                    stage_lp.add_constraint(row, Sense::Ge, 0.0);
                }
                level = Some((t, pairs));
                vec![(t, 1.0)]
            }
        };
        stage_lp.set_objective(objective.clone());
        let (value, values) = match handle.maximize(&stage_lp) {
            Ok(LpOutcome::Optimal { objective, values }) => (objective, values),
            Ok(LpOutcome::Infeasible) if last.is_none() => return Ok(None),
            Ok(LpOutcome::Infeasible) => return Err(SolverError::Infeasible(label)),
            Err(SolverError::Unbounded(_)) => return Err(SolverError::Unbounded(label)),
            Err(e) => return Err(e),
        };
        let slack = handle.lex_slack(value);
        match level {
            Some((_, pairs)) => {
                for p in pairs {
                    lp.add_constraint(problem.eta_terms(p).unwrap_or(&[]).to_vec(), Sense::Ge, value - slack);
                }
            }
            None => lp.add_constraint(objective, Sense::Ge, value - slack),
        }
        log.push(StageValue { label, value });
        last = Some(values[..problem.lp.num_vars()].to_vec());
    }

    let values = match last {
        Some(v) => v,
        None => {
            // no stage: any feasible point, checked with a zero objective
            match handle.maximize(&lp)? {
                LpOutcome::Optimal { values, .. } => values,
                LpOutcome::Infeasible => return Ok(None),
            }
        }
    };
    Ok(Some(problem.extract(&values, log)))
}

fn check_sd_subset(problem: &MredProblem, pairs: &[NodePair]) -> Result<(), SolverError> {
    let mut seen = BTreeSet::new();
    for p in pairs {
        if !problem.sd.contains(p) {
            return Err(SolverError::InvalidInput(format!("{p} is not an SD pair of the network")));
        }
        if !seen.insert(*p) {
            return Err(SolverError::InvalidInput(format!("{p} listed twice")));
        }
    }
    Ok(())
}

fn zero_with_log(net: &Network, label: &str) -> RateSolution {
    let mut sol = RateSolution::zero(net);
    sol.objective_log.push(StageValue { label: label.into(), value: 0.0 });
    sol
}

/// Maximize the total EDR over the network's SD pairs, breaking ties toward
/// the max-min fair split.
pub fn solve_max_total(net: &Network, handle: &SolverHandle) -> Result<RateSolution, SolverError> {
    solve_lexicographic(net, &[], true, handle)
}

/// Largest EDR the pair can get when it is the only SD pair.
pub fn solve_single_pair_edr(net: &Network, sd: NodePair, handle: &SolverHandle) -> Result<f64, SolverError> {
    let single = net.with_sd_pairs([sd]).map_err(|e: TopologyError| SolverError::InvalidInput(e.to_string()))?;
    let problem = build_mred(&single);
    let sol = solve_stages(&problem, &[Stage::Pair(sd)], handle)?
        .ok_or_else(|| SolverError::Infeasible("single pair".into()))?;
    Ok(sol.eta(sd))
}

/// Strict priorities: maximize each listed pair's EDR in turn, then (with
/// `work_conserve`) the total EDR and the max-min level over all SD pairs.
pub fn solve_lexicographic(
    net: &Network,
    priority: &[NodePair],
    work_conserve: bool,
    handle: &SolverHandle,
) -> Result<RateSolution, SolverError> {
    let problem = build_mred(net);
    check_sd_subset(&problem, priority)?;
    if net.sd_pairs().is_empty() {
        return Ok(zero_with_log(net, "total"));
    }
    let mut stages: Vec<Stage> = priority.iter().map(|&p| Stage::Pair(p)).collect();
    if work_conserve {
        stages.push(Stage::Total);
        if net.sd_pairs().len() > 1 {
            stages.push(Stage::MaxMin);
        }
    }
    if stages.is_empty() {
        return Ok(RateSolution::zero(net));
    }
    solve_stages(&problem, &stages, handle)?.ok_or_else(|| SolverError::Infeasible("base".into()))
}

/// A prioritized commodity as seen by the deadline-constrained LP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeadlineDemand {
    pub sd: NodePair,
    /// Remaining ebits.
    pub remaining: u64,
    /// Slots left before the deadline, counting the current one.
    pub slots_left: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DcOutcome {
    Feasible(RateSolution),
    Infeasible,
}

impl DcOutcome {
    pub fn is_feasible(&self) -> bool {
        matches!(self, DcOutcome::Feasible(_))
    }
}

/// Per SD pair, commodities sorted by slots left; every prefix `l` requires
/// `eta * slots_left(l) >= sum of remaining demand over the prefix`.
/// Returns the required rate rows as `(pair, minimum eta)`.
pub fn deadline_rows(prioritized: &[DeadlineDemand]) -> Result<Vec<(NodePair, f64)>, SolverError> {
    let mut groups: BTreeMap<NodePair, Vec<DeadlineDemand>> = BTreeMap::new();
    for d in prioritized {
        if d.slots_left == 0 {
            return Err(SolverError::InvalidInput(format!("commodity on {} has no slots left", d.sd)));
        }
        groups.entry(d.sd).or_default().push(*d);
    }
    let mut rows = Vec::new();
    for (pair, mut list) in groups {
        list.sort_by_key(|d| d.slots_left);
        let mut prefix = 0u64;
        for d in list {
            prefix += d.remaining;
            rows.push((pair, prefix as f64 / d.slots_left as f64));
        }
    }
    Ok(rows)
}

fn mred_dc_problem(net: &Network, prioritized: &[DeadlineDemand]) -> Result<MredProblem, SolverError> {
    let mut problem = build_mred(net);
    for d in prioritized {
        if !problem.sd.contains(&d.sd) {
            return Err(SolverError::InvalidInput(format!("{} is not an SD pair of the network", d.sd)));
        }
    }
    for (pair, need) in deadline_rows(prioritized)? {
        let terms = problem.eta_terms(pair).unwrap_or(&[]).to_vec();
        problem.lp.add_constraint(terms, Sense::Ge, need);
    }
    Ok(problem)
}

/// Deadline-constrained LP: maximize the total EDR subject to every
/// prioritized commodity finishing on expectation. Single solve.
pub fn build_and_check_mred_dc(
    net: &Network,
    prioritized: &[DeadlineDemand],
    handle: &SolverHandle,
) -> Result<DcOutcome, SolverError> {
    let problem = mred_dc_problem(net, prioritized)?;
    Ok(match solve_stages(&problem, &[Stage::Total], handle)? {
        Some(sol) => DcOutcome::Feasible(sol),
        None => DcOutcome::Infeasible,
    })
}

/// As [`build_and_check_mred_dc`], then break ties among total-optimal plans:
/// first toward the prioritized pairs, then toward the max-min fair level.
pub fn solve_mred_dc(
    net: &Network,
    prioritized: &[DeadlineDemand],
    handle: &SolverHandle,
) -> Result<DcOutcome, SolverError> {
    let problem = mred_dc_problem(net, prioritized)?;
    let mut group: Vec<NodePair> = Vec::new();
    for d in prioritized {
        if !group.contains(&d.sd) {
            group.push(d.sd);
        }
    }
    let mut stages = vec![Stage::Total];
    if !group.is_empty() {
        stages.push(Stage::Group(group));
    }
    if problem.sd.len() > 1 {
        stages.push(Stage::MaxMin);
    }
    if problem.sd.is_empty() {
        return Ok(DcOutcome::Feasible(zero_with_log(net, "total")));
    }
    Ok(match solve_stages(&problem, &stages, handle)? {
        Some(sol) => DcOutcome::Feasible(sol),
        None => DcOutcome::Infeasible,
    })
}

/// Worst residual of each constraint family of a solution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolutionReport {
    /// max |f^{m:k}_{m:n} - f^{k:n}_{m:n}|
    pub symmetry: f64,
    /// max |I - Omega| over non-SD pairs
    pub balance: f64,
    /// max (Omega - I)^+ over SD pairs
    pub surplus_deficit: f64,
    /// max distance of g outside [0, 1]
    pub g_bounds: f64,
    /// max (-f)^+
    pub f_negative: f64,
    /// max |eta - (I - Omega)| over SD pairs
    pub eta_mismatch: f64,
    /// f entries whose pairs do not form a swap triple, or pairs outside the
    /// network
    pub malformed: usize,
}

impl SolutionReport {
    pub fn max_residual(&self) -> f64 {
        [self.symmetry, self.balance, self.surplus_deficit, self.g_bounds, self.f_negative, self.eta_mismatch]
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.malformed == 0 && self.max_residual() <= tol
    }
}

/// Re-evaluate every MRED constraint on `sol` against `net`, using the SD
/// set the solution was computed for.
pub fn check_solution(net: &Network, sol: &RateSolution) -> SolutionReport {
    let mut report = SolutionReport::default();
    for (key, &v) in &sol.f {
        report.f_negative = report.f_negative.max(-v);
        let Some(via) = key.via() else {
            report.malformed += 1;
            continue;
        };
        if !net.has_node(via) || !net.has_node(key.produced.lo()) || !net.has_node(key.produced.hi()) {
            report.malformed += 1;
            continue;
        }
        // partner entry: the other side of the same swap
        let other_end = key.consumed.other(via).and_then(|e| key.produced.other(e));
        let partner = other_end.map(|e| canonical_pair(via, e).expect("distinct"));
        if let Some(partner) = partner {
            report.symmetry = report.symmetry.max((v - sol.f(partner, key.produced)).abs());
        }
    }
    for (link, &v) in &sol.g {
        if net.link(*link).is_none() {
            report.malformed += 1;
        }
        report.g_bounds = report.g_bounds.max(-v).max(v - 1.0);
    }
    for p in sol.sd_pairs.iter().chain(sol.eta.keys()) {
        if !net.has_node(p.lo()) || !net.has_node(p.hi()) {
            report.malformed += 1;
        }
    }
    let ids: Vec<NodeId> = net.node_ids().collect();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            let pair = canonical_pair(a, b).expect("distinct");
            let input = input_rate(pair, sol, net).expect("pair in network");
            let output = if sol.knows(pair) { output_rate(pair, sol).expect("known") } else { 0.0 };
            let surplus = input - output;
            if sol.sd_pairs.contains(&pair) {
                report.surplus_deficit = report.surplus_deficit.max(-surplus);
                report.eta_mismatch = report.eta_mismatch.max((sol.eta(pair) - surplus).abs());
            } else {
                report.balance = report.balance.max(surplus.abs());
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_manual, Link, Node};

    fn pair(a: NodeId, b: NodeId) -> NodePair {
        canonical_pair(a, b).unwrap()
    }

    fn line(q: f64, p: f64, caps: &[u32], sd: &[(NodeId, NodeId)]) -> Network {
        let n = caps.len() as u32 + 1;
        let nodes = (0..n).map(|id| Node { id, q }).collect();
        let links = caps.iter().enumerate().map(|(i, &c)| (i as u32, i as u32 + 1, Link { capacity: c, p })).collect();
        build_manual(nodes, links, sd.to_vec()).unwrap()
    }

    fn star() -> Network {
        let nodes = (0..4).map(|id| Node { id, q: 1.0 }).collect();
        let link = Link { capacity: 2, p: 1.0 };
        build_manual(nodes, vec![(0, 2, link), (1, 2, link), (3, 2, link)], vec![(0, 1), (0, 3)]).unwrap()
    }

    #[test]
    fn input_rate_direct_link() {
        let net = line(1.0, 1.0, &[1], &[(0, 1)]);
        let sol = RateSolution::zero(&net).with_g(pair(0, 1), 1.0);
        assert_eq!(input_rate(pair(0, 1), &sol, &net).unwrap(), 1.0);
    }

    #[test]
    fn input_rate_swapped() {
        // A=0, C=1, B=2 ; swap at C produces A:B
        let net = line(0.9, 1.0, &[1, 1], &[(0, 2)]);
        let sol = RateSolution::zero(&net).with_f(pair(0, 1), pair(0, 2), 1.0).with_f(pair(1, 2), pair(0, 2), 1.0);
        assert!((input_rate(pair(0, 2), &sol, &net).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(input_rate(pair(0, 2), &RateSolution::zero(&net), &net).unwrap(), 0.0);
        assert!(input_rate(pair(0, 9), &sol, &net).is_err());
    }

    #[test]
    fn output_rate_sums_consumers() {
        let net = line(1.0, 1.0, &[1, 1, 1], &[(0, 3)]);
        let zero = RateSolution::zero(&net);
        assert_eq!(output_rate(pair(0, 1), &zero).unwrap(), 0.0);
        let sol = zero.clone().with_f(pair(0, 1), pair(0, 2), 1.0);
        assert_eq!(output_rate(pair(0, 1), &sol).unwrap(), 1.0);
        // 1:2 feeds 0:2 (via 1) and 1:3 (via 2)
        let sol = zero.with_f(pair(1, 2), pair(0, 2), 0.3).with_f(pair(1, 2), pair(1, 3), 0.7);
        assert!((output_rate(pair(1, 2), &sol).unwrap() - 1.0).abs() < 1e-12);
        assert!(output_rate(pair(0, 7), &sol).is_err());
    }

    #[test]
    fn star_counts() {
        let problem = build_mred(&star());
        // 4 nodes: 6 pairs x 2 intermediates
        assert_eq!(problem.symmetry_count(), 12);
        assert_eq!(problem.f_entry_count(), 24);
        assert_eq!(problem.g_count(), 3);
        assert_eq!(problem.balance_count(), 4);
        assert_eq!(problem.surplus_count(), 2);
    }

    #[test]
    fn two_nodes_only_generation() {
        let net = line(1.0, 0.5, &[3], &[(0, 1)]);
        let problem = build_mred(&net);
        assert_eq!(problem.f_entry_count(), 0);
        assert_eq!(problem.g_count(), 1);
        let sol = solve_max_total(&net, &SolverHandle::default()).unwrap();
        assert!((sol.eta(pair(0, 1)) - 1.5).abs() < 1e-9);
        assert!((sol.g(pair(0, 1)) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_solution_is_feasible() {
        for net in [star(), line(0.9, 0.9, &[1, 2, 3], &[(0, 3), (1, 2)])] {
            let report = check_solution(&net, &RateSolution::zero(&net));
            assert!(report.passes(0.0), "{report:?}");
        }
    }

    #[test]
    fn two_hop_line() {
        let handle = SolverHandle::default();
        let net = line(1.0, 1.0, &[1, 1], &[(0, 2)]);
        let sol = solve_max_total(&net, &handle).unwrap();
        assert!((sol.eta(pair(0, 2)) - 1.0).abs() < 1e-9);
        let net = line(1.0, 0.5, &[1, 1], &[(0, 2)]);
        let sol = solve_max_total(&net, &handle).unwrap();
        assert!((sol.eta(pair(0, 2)) - 0.5).abs() < 1e-9);
        assert!(check_solution(&net, &sol).passes(1e-6));
    }

    #[test]
    fn empty_sd_set() {
        let net = line(1.0, 1.0, &[1, 1], &[]);
        let sol = solve_max_total(&net, &SolverHandle::default()).unwrap();
        assert_eq!(sol.total_eta(), 0.0);
        assert!(sol.f_entries().is_empty() && sol.g_entries().is_empty());
    }

    #[test]
    fn star_single_pair_and_fair_split() {
        let handle = SolverHandle::default();
        let net = star();
        assert!((solve_single_pair_edr(&net, pair(0, 1), &handle).unwrap() - 2.0).abs() < 1e-9);
        let sol = solve_max_total(&net, &handle).unwrap();
        assert!((sol.eta(pair(0, 1)) - 1.0).abs() < 1e-6);
        assert!((sol.eta(pair(0, 3)) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn disconnected_pair_has_zero_edr() {
        let nodes = (0..4).map(|id| Node { id, q: 1.0 }).collect();
        let net = build_manual(nodes, vec![(0, 1, Link { capacity: 2, p: 1.0 })], vec![]).unwrap();
        assert_eq!(solve_single_pair_edr(&net, pair(2, 3), &SolverHandle::default()).unwrap(), 0.0);
    }

    #[test]
    fn star_lexicographic() {
        let handle = SolverHandle::default();
        let sol = solve_lexicographic(&star(), &[pair(0, 1)], true, &handle).unwrap();
        assert!((sol.eta(pair(0, 1)) - 2.0).abs() < 1e-6);
        // A:C is exhausted by the prioritized pair
        assert!(sol.eta(pair(0, 3)) < 1e-6);
        assert_eq!(sol.objective_log()[0].label, "eta[0:1]");
        assert!(check_solution(&star(), &sol).passes(1e-6));
    }

    #[test]
    fn lexicographic_rejects_unknown_priority() {
        let handle = SolverHandle::default();
        assert!(solve_lexicographic(&star(), &[pair(1, 3)], true, &handle).is_err());
        assert!(solve_lexicographic(&star(), &[pair(0, 1), pair(0, 1)], true, &handle).is_err());
    }

    #[test]
    fn deadline_prefix_rows() {
        let sd = pair(0, 1);
        let rows = deadline_rows(&[
            DeadlineDemand { sd, remaining: 2, slots_left: 4 },
            DeadlineDemand { sd, remaining: 2, slots_left: 2 },
        ])
        .unwrap();
        assert_eq!(rows, vec![(sd, 1.0), (sd, 1.0)]);
        assert!(deadline_rows(&[DeadlineDemand { sd, remaining: 1, slots_left: 0 }]).is_err());
    }

    #[test]
    fn mred_dc_star() {
        let handle = SolverHandle::default();
        let net = star();
        let ab = DeadlineDemand { sd: pair(0, 1), remaining: 6, slots_left: 4 };
        let ad = DeadlineDemand { sd: pair(0, 3), remaining: 6, slots_left: 6 };
        match build_and_check_mred_dc(&net, &[ab], &handle).unwrap() {
            DcOutcome::Feasible(sol) => assert!(sol.eta(pair(0, 1)) >= 1.5 - 1e-6),
            DcOutcome::Infeasible => panic!("A:B alone is feasible"),
        }
        // jointly they need 1.5 + 1.0 from A:C's 2 ebits per slot
        assert_eq!(build_and_check_mred_dc(&net, &[ab, ad], &handle).unwrap(), DcOutcome::Infeasible);
        let tight = DeadlineDemand { sd: pair(0, 1), remaining: 3, slots_left: 1 };
        assert_eq!(build_and_check_mred_dc(&net, &[tight], &handle).unwrap(), DcOutcome::Infeasible);
        match solve_mred_dc(&net, &[ab], &handle).unwrap() {
            DcOutcome::Feasible(sol) => assert!((sol.eta(pair(0, 1)) - 2.0).abs() < 1e-6),
            DcOutcome::Infeasible => panic!(),
        }
    }

    #[test]
    fn solution_json_is_sparse_and_round_trips() {
        let handle = SolverHandle::default();
        let sol = solve_lexicographic(&star(), &[pair(0, 1)], true, &handle).unwrap();
        let v: serde_json::Value = serde_json::from_str(&sol.to_json()).unwrap();
        assert!(v["f"].as_array().unwrap().iter().all(|e| e["value"].as_f64().unwrap() != 0.0));
        let back = RateSolution::from_json(&sol.to_json()).unwrap();
        assert_eq!(back.eta(pair(0, 1)), sol.eta(pair(0, 1)));
        assert_eq!(back.f_entries().len(), v["f"].as_array().unwrap().len());
    }

    #[test]
    fn check_flags_broken_solutions() {
        let net = line(1.0, 1.0, &[1, 1], &[(0, 2)]);
        let asym = RateSolution::zero(&net).with_f(pair(0, 1), pair(0, 2), 1.0);
        assert!((check_solution(&net, &asym).symmetry - 1.0).abs() < 1e-12);
        let unbalanced = RateSolution::zero(&net).with_g(pair(0, 1), 1.0);
        assert!((check_solution(&net, &unbalanced).balance - 1.0).abs() < 1e-12);
        let bad_g = RateSolution::zero(&net).with_g(pair(0, 1), 1.5);
        assert!(check_solution(&net, &bad_g).g_bounds > 0.4);
        let bad_key = RateSolution::zero(&net).with_f(pair(0, 1), pair(0, 1), 1.0);
        assert_eq!(check_solution(&net, &bad_key).malformed, 1);
    }
}
