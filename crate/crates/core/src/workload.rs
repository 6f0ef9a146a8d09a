//! Commodities (end-to-end ebit requests), stochastic workload generation and
//! active-set bookkeeping.

use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{canonical_pair, Network, NodeId, NodePair};

pub type CommodityId = u64;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload config: {0}")]
    Config(String),
    #[error("invalid commodity: {0}")]
    Commodity(String),
    #[error("workload io: {0}")]
    Io(#[from] std::io::Error),
    #[error("workload line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "slot", rename_all = "snake_case")]
pub enum Status {
    Pending,
    Active,
    Completed(u64),
    Expired(u64),
}

/// A request for `demand` end-to-end ebits between an SD pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Commodity {
    pub id: CommodityId,
    pub sd: NodePair,
    pub demand: u64,
    pub arrival: u64,
    /// Last slot in which finishing still counts; `None` means no deadline.
    pub deadline: Option<u64>,
    remaining: u64,
    status: Status,
}

impl Commodity {
    pub fn new(
        id: CommodityId,
        sd: NodePair,
        demand: u64,
        arrival: u64,
        deadline: Option<u64>,
    ) -> Result<Self, WorkloadError> {
        if demand == 0 {
            return Err(WorkloadError::Commodity(format!("commodity {id} has zero demand")));
        }
        if deadline.is_some_and(|d| d < arrival) {
            return Err(WorkloadError::Commodity(format!("commodity {id} has deadline before arrival")));
        }
        Ok(Commodity { id, sd, demand, arrival, deadline, remaining: demand, status: Status::Pending })
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn is_active(&self) -> bool {
        self.status == Status::Active
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.status, Status::Completed(_) | Status::Expired(_))
    }

    pub fn completion_slot(&self) -> Option<u64> {
        match self.status {
            Status::Completed(t) => Some(t),
            _ => None,
        }
    }

    /// Finished no later than its deadline.
    pub fn met_deadline(&self) -> bool {
        match (self.status, self.deadline) {
            (Status::Completed(t), Some(d)) => t <= d,
            _ => false,
        }
    }

    /// Remaining slots until the deadline, counting slot `t` itself.
    pub fn slots_left(&self, t: u64) -> Option<i64> {
        self.deadline.map(|d| d as i64 - t as i64 + 1)
    }

    /// Bring the status up to date for slot `t`.
    pub fn refresh(&mut self, t: u64) {
        if self.status == Status::Pending && self.arrival <= t {
            self.status = Status::Active;
        }
        if self.status == Status::Active && self.remaining > 0 && self.deadline.is_some_and(|d| d < t) {
            self.status = Status::Expired(t);
        }
    }

    /// Hand over up to `ebits` ebits in slot `t`; returns how many were taken.
    pub fn grant(&mut self, ebits: u64, t: u64) -> u64 {
        if self.status != Status::Active {
            return 0;
        }
        let taken = ebits.min(self.remaining);
        self.remaining -= taken;
        if self.remaining == 0 {
            self.status = Status::Completed(t);
        }
        taken
    }
}

/// Refresh every commodity for slot `t` and return the indices of the active
/// ones (arrived, unfinished, deadline not passed).
pub fn active_set(commodities: &mut [Commodity], t: u64) -> Vec<usize> {
    commodities
        .iter_mut()
        .enumerate()
        .filter_map(|(i, c)| {
            c.refresh(t);
            c.is_active().then_some(i)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DeadlineMode {
    None,
    /// `deadline = arrival + round(factor * u * demand)` with
    /// `u ~ Uniform[mu - halfwidth, mu + halfwidth]` slots per ebit.
    Proportional { mu: f64, halfwidth: f64, factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    /// Mean Poisson arrivals per slot.
    pub arrival_rate: f64,
    pub mean_demand: f64,
    pub min_demand: u64,
    pub deadline: DeadlineMode,
    /// Last slot in which commodities may arrive.
    pub horizon: u64,
    /// Stop generating once this many commodities exist.
    #[serde(default)]
    pub max_commodities: Option<usize>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            arrival_rate: 1.0,
            mean_demand: 600.0,
            min_demand: 100,
            deadline: DeadlineMode::Proportional { mu: 0.4, halfwidth: 0.1, factor: 1.0 },
            horizon: 1000,
            max_commodities: None,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Config(m));
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return bad(format!("arrival rate {}", self.arrival_rate));
        }
        if !(self.mean_demand > 0.0 && self.mean_demand.is_finite()) {
            return bad(format!("mean demand {}", self.mean_demand));
        }
        if self.min_demand < 1 {
            return bad("min demand must be at least 1".into());
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1".into());
        }
        if let DeadlineMode::Proportional { mu, halfwidth, factor } = self.deadline {
            if !(halfwidth >= 0.0 && mu > halfwidth) {
                return bad(format!("need mu > halfwidth >= 0, got mu={mu}, halfwidth={halfwidth}"));
            }
            if !(factor > 0.0 && factor.is_finite()) {
                return bad(format!("deadline factor {factor}"));
            }
        }
        Ok(())
    }

    pub fn has_deadlines(&self) -> bool {
        !matches!(self.deadline, DeadlineMode::None)
    }
}

fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor().max(0.0) as u64
}

/// Generate commodities slot by slot, starting at slot 1. Pure in
/// `(cfg, sd_universe, seed)`.
pub fn generate_workload(
    cfg: &WorkloadConfig,
    sd_universe: &[NodePair],
    seed: u64,
) -> Result<Vec<Commodity>, WorkloadError> {
    cfg.validate()?;
    if sd_universe.is_empty() {
        return Err(WorkloadError::Config("empty SD universe".into()));
    }
    let mut out = Vec::new();
    if cfg.arrival_rate == 0.0 {
        return Ok(out);
    }
    let limit = cfg.max_commodities.unwrap_or(usize::MAX);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arrivals = Poisson::new(cfg.arrival_rate).map_err(|e| WorkloadError::Config(e.to_string()))?;
    let demand_dist = Exp::new(1.0 / cfg.mean_demand).map_err(|e| WorkloadError::Config(e.to_string()))?;

    for slot in 1..=cfg.horizon {
        if out.len() >= limit {
            break;
        }
        let k = arrivals.sample(&mut rng) as u64;
        for _ in 0..k {
            if out.len() >= limit {
                break;
            }
            let sd = sd_universe[rng.random_range(0..sd_universe.len())];
            let demand = cfg.min_demand.max(demand_dist.sample(&mut rng).round() as u64);
            let deadline = match cfg.deadline {
                DeadlineMode::None => None,
                DeadlineMode::Proportional { mu, halfwidth, factor } => {
                    let unit = if halfwidth > 0.0 { rng.random_range(mu - halfwidth..=mu + halfwidth) } else { mu };
                    Some(slot + round_half_up(factor * unit * demand as f64))
                }
            };
            out.push(Commodity::new(out.len() as CommodityId, sd, demand, slot, deadline)?);
        }
    }
    Ok(out)
}

/// Draw `count` distinct node pairs uniformly (all pairs when `None` or when
/// `count` exceeds the number of pairs), returned in canonical order.
pub fn sample_sd_universe(net: &Network, count: Option<usize>, seed: u64) -> Vec<NodePair> {
    let ids: Vec<NodeId> = net.node_ids().collect();
    let mut all = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            all.push(canonical_pair(a, b).expect("distinct ids"));
        }
    }
    match count {
        Some(k) if k < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<NodePair> = sample(&mut rng, all.len(), k).into_iter().map(|i| all[i]).collect();
            picked.sort();
            picked
        }
        _ => all,
    }
}

#[derive(Serialize, Deserialize)]
struct CommodityLine {
    id: CommodityId,
    s: NodeId,
    t: NodeId,
    d: u64,
    a: u64,
    deadline: Option<u64>,
}

/// One JSON object per line: `{"id","s","t","d","a","deadline"}`.
pub fn write_jsonl<W: Write>(mut w: W, commodities: &[Commodity]) -> Result<(), WorkloadError> {
    for c in commodities {
        let line = CommodityLine { id: c.id, s: c.sd.lo(), t: c.sd.hi(), d: c.demand, a: c.arrival, deadline: c.deadline };
        serde_json::to_writer(&mut w, &line).map_err(|e| WorkloadError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Commodity>, WorkloadError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: CommodityLine = serde_json::from_str(&line).map_err(|source| WorkloadError::Parse { line: i + 1, source })?;
        let sd = canonical_pair(raw.s, raw.t).map_err(|e| WorkloadError::Commodity(e.to_string()))?;
        out.push(Commodity::new(raw.id, sd, raw.d, raw.a, raw.deadline)?);
    }
    Ok(out)
}
