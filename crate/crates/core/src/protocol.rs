//! Slotted execution of a rate plan on a buffered network.
//!
//! Every pair `m:n` has an input buffer `M`, every swap side has an output
//! buffer `D` and every pair has a receiving buffer `R` feeding commodities.
//! An ebit entering `M` is switched at once: to a swap side with probability
//! proportional to that swap's rate, or to `R` with probability proportional
//! to the pair's EDR. Buffers hold the birth slot of each ebit, oldest first.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layout::{Layout, Side};
use crate::mred::RateSolution;
use crate::rng::{Phase, SlotRng};
use crate::topology::{Network, NodePair};
use crate::workload::{Commodity, CommodityId};

/// Snap `c * g` to the nearest integer when closer than this.
const ROUNDING_SNAP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributeMode {
    /// Smallest remaining demand first.
    #[default]
    Sjf,
    /// Earliest deadline first; commodities without a deadline go last.
    Edf,
}

/// How an ebit picks its destination among the weighted options.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchingRule {
    /// Independent coin toss per ebit.
    #[default]
    Random,
    /// Smooth weighted round-robin: deterministic, and after `n` ebits every
    /// destination has received within one of its share.
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub switching: SwitchingRule,
    /// Swap rounds per slot; ebits produced in one round can be swapped again
    /// in the next.
    pub swap_rounds: u32,
    /// Drop buffered ebits older than this many slots.
    pub max_buffer_age: Option<u64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig { switching: SwitchingRule::Random, swap_rounds: 1, max_buffer_age: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Destination {
    /// Output buffer on one side of a swap.
    Swap(usize, Side),
    Receive,
    /// No positive weight: stays in the input buffer.
    Park,
}

#[derive(Clone, Debug)]
struct Switching {
    /// Cumulative weights over `targets`, then the EDR weight.
    targets: Vec<(usize, Side)>,
    cumulative: Vec<f64>,
    eta: f64,
}

impl Switching {
    fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0) + self.eta
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> Destination {
        let total = self.total();
        if total <= 0.0 {
            return Destination::Park;
        }
        let u = rng.random::<f64>() * total;
        match self.cumulative.iter().position(|&c| u < c) {
            Some(i) => self.destination(i),
            None if self.eta > 0.0 => Destination::Receive,
            // rounding at the top end
            None => self.destination(self.targets.len() - 1),
        }
    }

    fn destination(&self, i: usize) -> Destination {
        match self.targets.get(i) {
            Some(&(s, side)) => Destination::Swap(s, side),
            None => Destination::Receive,
        }
    }

    fn pick_balanced(&self, credit: &mut Vec<f64>) -> Destination {
        let total = self.total();
        if total <= 0.0 {
            return Destination::Park;
        }
        let n = self.targets.len() + usize::from(self.eta > 0.0);
        credit.resize(n, 0.0);
        let mut prev = 0.0;
        let mut best = 0;
        for i in 0..n {
            let w = match self.cumulative.get(i) {
                Some(&c) => c - std::mem::replace(&mut prev, c),
                None => self.eta,
            };
            credit[i] += w / total;
            if credit[i] > credit[best] {
                best = i;
            }
        }
        credit[best] -= 1.0;
        self.destination(best)
    }

    fn probabilities(&self) -> Vec<(Destination, f64)> {
        let total = self.total();
        if total <= 0.0 {
            return vec![(Destination::Park, 1.0)];
        }
        let mut prev = 0.0;
        let mut out: Vec<(Destination, f64)> = self
            .targets
            .iter()
            .zip(&self.cumulative)
            .map(|(&(s, side), &c)| {
                let w = c - prev;
                prev = c;
                (Destination::Swap(s, side), w / total)
            })
            .collect();
        if self.eta > 0.0 {
            out.push((Destination::Receive, self.eta / total));
        }
        out
    }
}

/// A rate plan compiled against a layout for fast per-ebit decisions.
#[derive(Clone, Debug)]
pub struct ExecutionPlan {
    solution: Arc<RateSolution>,
    switching: Vec<Switching>,
    /// `c * g` per layout link.
    attempt_rate: Vec<f64>,
    active_swap: Vec<bool>,
}

impl ExecutionPlan {
    pub fn compile(layout: &Layout, solution: Arc<RateSolution>) -> Self {
        let mut rate = vec![[0.0f64; 2]; layout.swaps().len()];
        for (s, sw) in layout.swaps().iter().enumerate() {
            let produced = layout.pair(sw.produced);
            for side in [Side::Left, Side::Right] {
                rate[s][side as usize] = solution.f(layout.consumed_pair(s, side), produced).max(0.0);
            }
        }
        let active_swap: Vec<bool> = rate.iter().map(|r| r[0] > 0.0 && r[1] > 0.0).collect();
        let switching = (0..layout.pairs().len())
            .map(|i| {
                let mut targets = Vec::new();
                let mut cumulative = Vec::new();
                let mut acc = 0.0;
                for &(s, side) in layout.consumers(i) {
                    if active_swap[s] {
                        acc += rate[s][side as usize];
                        targets.push((s, side));
                        cumulative.push(acc);
                    }
                }
                let eta = solution.eta(layout.pair(i)).max(0.0);
                Switching { targets, cumulative, eta }
            })
            .collect();
        let attempt_rate = layout
            .links()
            .iter()
            .map(|l| {
                let x = l.capacity as f64 * solution.g(layout.pair(l.pair)).clamp(0.0, 1.0);
                if (x - x.round()).abs() < ROUNDING_SNAP { x.round() } else { x }
            })
            .collect();
        ExecutionPlan { solution, switching, attempt_rate, active_swap }
    }

    pub fn solution(&self) -> &Arc<RateSolution> {
        &self.solution
    }

    /// Destination probabilities for an ebit entering the input buffer of
    /// `pair`; they sum to one.
    pub fn switch_probabilities(&self, pair: usize) -> Vec<(Destination, f64)> {
        self.switching[pair].probabilities()
    }

    pub fn swap_active(&self, s: usize) -> bool {
        self.active_swap[s]
    }
}

/// Integer attempt count for rate `x` with the right expectation.
fn attempts(x: f64, rng: &mut ChaCha8Rng) -> u64 {
    let base = x.floor();
    let frac = x - base;
    base as u64 + u64::from(frac > 0.0 && rng.random::<f64>() < frac)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferTotals {
    pub input: u64,
    pub output: u64,
    pub receive: u64,
}

impl BufferTotals {
    pub fn sum(&self) -> u64 {
        self.input + self.output + self.receive
    }
}

/// Events of one slot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotCounters {
    pub generated: u64,
    pub swap_attempts: u64,
    pub swap_successes: u64,
    pub distributed: u64,
    pub dropped: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotTrace {
    pub slot: u64,
    #[serde(flatten)]
    pub counters: SlotCounters,
    pub grants: Vec<(CommodityId, u64)>,
    pub buffers: BufferTotals,
    pub resolved: bool,
}

/// Buffers of the whole network plus run-level counters.
#[derive(Clone, Debug)]
pub struct BufferState {
    layout: Arc<Layout>,
    config: ProtocolConfig,
    plan: Option<ExecutionPlan>,
    rebalance_pending: bool,
    credit: Vec<Vec<f64>>,
    input: Vec<VecDeque<u64>>,
    output: Vec<[VecDeque<u64>; 2]>,
    receive: Vec<VecDeque<u64>>,
    totals: SlotCounters,
    violations: u64,
}

impl BufferState {
    pub fn new(net: &Network, config: ProtocolConfig) -> Self {
        Self::with_layout(Arc::new(Layout::new(net, false)), config)
    }

    pub fn with_layout(layout: Arc<Layout>, config: ProtocolConfig) -> Self {
        let pairs = layout.pairs().len();
        let swaps = layout.swaps().len();
        BufferState {
            layout,
            config,
            plan: None,
            rebalance_pending: false,
            credit: vec![Vec::new(); pairs],
            input: vec![VecDeque::new(); pairs],
            output: vec![[VecDeque::new(), VecDeque::new()]; swaps],
            receive: vec![VecDeque::new(); pairs],
            totals: SlotCounters::default(),
            violations: 0,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn plan(&self) -> Option<&ExecutionPlan> {
        self.plan.as_ref()
    }

    fn pair_index(&self, pair: NodePair) -> usize {
        self.layout.pair_index(pair).expect("pair belongs to the network")
    }

    pub fn input_count(&self, pair: NodePair) -> usize {
        self.input[self.pair_index(pair)].len()
    }

    pub fn receive_count(&self, pair: NodePair) -> usize {
        self.receive[self.pair_index(pair)].len()
    }

    pub fn output_count(&self, swap: usize, side: Side) -> usize {
        self.output[swap][side as usize].len()
    }

    pub fn totals(&self) -> BufferTotals {
        BufferTotals {
            input: self.input.iter().map(|q| q.len() as u64).sum(),
            output: self.output.iter().map(|s| (s[0].len() + s[1].len()) as u64).sum(),
            receive: self.receive.iter().map(|q| q.len() as u64).sum(),
        }
    }

    /// Counters accumulated over all slots so far.
    pub fn cumulative(&self) -> &SlotCounters {
        &self.totals
    }

    pub fn conservation_violations(&self) -> u64 {
        self.violations
    }

    /// Install a new plan. Buffer contents are untouched; output buffers of
    /// swaps the plan no longer uses are returned to the input buffers and
    /// re-switched at the start of the next slot.
    pub fn apply_new_solution(&mut self, solution: Arc<RateSolution>) {
        if let Some(plan) = &self.plan {
            if Arc::ptr_eq(&plan.solution, &solution) || *plan.solution == *solution {
                return;
            }
        }
        self.plan = Some(ExecutionPlan::compile(&self.layout, solution));
        self.credit.iter_mut().for_each(Vec::clear);
        self.rebalance_pending = true;
    }

    /// Place one ebit born in `birth` that just entered the input buffer.
    pub fn opportunistic_switch(&mut self, pair: usize, birth: u64, rng: &mut ChaCha8Rng) -> Destination {
        let dest = match &self.plan {
            Some(plan) => match self.config.switching {
                SwitchingRule::Random => plan.switching[pair].pick(rng),
                SwitchingRule::Balanced => plan.switching[pair].pick_balanced(&mut self.credit[pair]),
            },
            None => Destination::Park,
        };
        match dest {
            Destination::Swap(s, side) => self.output[s][side as usize].push_back(birth),
            Destination::Receive => self.receive[pair].push_back(birth),
            Destination::Park => self.input[pair].push_back(birth),
        }
        dest
    }

    fn rebalance(&mut self, rng: &mut ChaCha8Rng) {
        let Some(plan) = &self.plan else { return };
        for (s, sides) in self.output.iter_mut().enumerate() {
            if plan.active_swap[s] {
                continue;
            }
            for side in [Side::Left, Side::Right] {
                let pair = self.layout.swaps()[s].side(side);
                self.input[pair].extend(sides[side as usize].drain(..));
            }
        }
        for pair in 0..self.input.len() {
            let mut parked: Vec<u64> = self.input[pair].drain(..).collect();
            parked.sort_unstable();
            for birth in parked {
                self.opportunistic_switch(pair, birth, rng);
            }
        }
    }

    fn drop_old(&mut self, t: u64) -> u64 {
        let Some(age) = self.config.max_buffer_age else { return 0 };
        let keep = |q: &mut VecDeque<u64>| {
            let before = q.len();
            q.retain(|&b| t.saturating_sub(b) <= age);
            (before - q.len()) as u64
        };
        let mut dropped = 0;
        for q in self.input.iter_mut().chain(self.receive.iter_mut()) {
            dropped += keep(q);
        }
        for sides in &mut self.output {
            for q in sides.iter_mut() {
                dropped += keep(q);
            }
        }
        dropped
    }

    /// Attempt generation on every link; returns new elementary ebits.
    pub fn phase_generate(&mut self, t: u64, rng: &mut ChaCha8Rng) -> u64 {
        let Some(plan) = &self.plan else { return 0 };
        let links: Vec<(usize, f64, f64)> = self
            .layout
            .links()
            .iter()
            .zip(&plan.attempt_rate)
            .map(|(l, &x)| (l.pair, x, l.p))
            .collect();
        let mut generated = 0;
        for (pair, x, p) in links {
            for _ in 0..attempts(x, rng) {
                if p >= 1.0 || rng.random::<f64>() < p {
                    generated += 1;
                    self.opportunistic_switch(pair, t, rng);
                }
            }
        }
        generated
    }

    /// One swap round at every node; returns (attempts, successes).
    pub fn phase_swap(&mut self, rng: &mut ChaCha8Rng) -> (u64, u64) {
        let Some(plan) = &self.plan else { return (0, 0) };
        let mut products = Vec::new();
        let mut tried = 0;
        for (s, sw) in self.layout.swaps().iter().enumerate() {
            if !plan.active_swap[s] {
                continue;
            }
            let [left, right] = &mut self.output[s];
            let w = left.len().min(right.len());
            let q = self.layout.q(sw.via);
            for _ in 0..w {
                let a = left.pop_front().expect("counted");
                let b = right.pop_front().expect("counted");
                tried += 1;
                if q >= 1.0 || rng.random::<f64>() < q {
                    products.push((sw.produced, a.min(b)));
                }
            }
        }
        let made = products.len() as u64;
        for (pair, birth) in products {
            self.opportunistic_switch(pair, birth, rng);
        }
        (tried, made)
    }

    /// Hand receiving-buffer ebits to active commodities of each SD pair in
    /// policy order.
    pub fn phase_distribute(
        &mut self,
        commodities: &mut [Commodity],
        active: &[usize],
        mode: DistributeMode,
        t: u64,
    ) -> Vec<(CommodityId, u64)> {
        let mut by_pair: BTreeMap<NodePair, Vec<usize>> = BTreeMap::new();
        for &i in active {
            by_pair.entry(commodities[i].sd).or_default().push(i);
        }
        let mut grants = Vec::new();
        for (pair, mut idx) in by_pair {
            let Some(p) = self.layout.pair_index(pair) else { continue };
            sort_for_distribution(commodities, &mut idx, mode);
            for i in idx {
                let available = self.receive[p].len() as u64;
                if available == 0 {
                    break;
                }
                let taken = commodities[i].grant(available, t);
                if taken > 0 {
                    self.receive[p].drain(..taken as usize);
                    grants.push((commodities[i].id, taken));
                }
            }
        }
        grants
    }

    /// Run the buffer phases of slot `t` (everything but distribution).
    pub fn run_phases(&mut self, t: u64, rng: &SlotRng) -> SlotCounters {
        let mut c = SlotCounters { dropped: self.drop_old(t), ..SlotCounters::default() };
        if self.rebalance_pending {
            self.rebalance(&mut rng.phase(t, Phase::Rebalance));
            self.rebalance_pending = false;
        }
        c.generated = self.phase_generate(t, &mut rng.phase(t, Phase::Generate));
        let mut swap_rng = rng.phase(t, Phase::Swap);
        for _ in 0..self.config.swap_rounds {
            let (a, s) = self.phase_swap(&mut swap_rng);
            c.swap_attempts += a;
            c.swap_successes += s;
        }
        c
    }

    /// Full slot: buffer phases, distribution and the conservation check.
    pub fn step(
        &mut self,
        t: u64,
        rng: &SlotRng,
        commodities: &mut [Commodity],
        active: &[usize],
        mode: DistributeMode,
    ) -> (SlotCounters, Vec<(CommodityId, u64)>) {
        let before = self.totals().sum();
        let mut c = self.run_phases(t, rng);
        let grants = self.phase_distribute(commodities, active, mode, t);
        c.distributed = grants.iter().map(|g| g.1).sum();
        let after = self.totals().sum();
        if before + c.generated + c.swap_successes != after + 2 * c.swap_attempts + c.distributed + c.dropped {
            self.violations += 1;
        }
        self.totals.generated += c.generated;
        self.totals.swap_attempts += c.swap_attempts;
        self.totals.swap_successes += c.swap_successes;
        self.totals.distributed += c.distributed;
        self.totals.dropped += c.dropped;
        (c, grants)
    }
}

/// Order commodity indices for draining one receiving buffer.
pub fn sort_for_distribution(commodities: &[Commodity], idx: &mut [usize], mode: DistributeMode) {
    match mode {
        DistributeMode::Sjf => idx.sort_by_key(|&i| (commodities[i].remaining(), commodities[i].id)),
        DistributeMode::Edf => {
            idx.sort_by_key(|&i| (commodities[i].deadline.unwrap_or(u64::MAX), commodities[i].id))
        }
    }
}
