//! Online schedulers deciding which rate plan the network executes.
//!
//! A plan is recomputed only when the set of active commodities changes.
//! * `EsdiB` maximizes total EDR over the active SD pairs with no priorities.
//! * `EsdiO` prioritizes up to `kappa` SD pairs by the smallest
//!   demand-over-EDR ratio and lets the rest use leftover resources.
//! * `EsdiE` greedily admits up to `kappa` commodities in deadline order while
//!   the deadline-constrained LP stays feasible.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{SolverError, SolverHandle};
use crate::mred::{
    build_and_check_mred_dc, deadline_rows, solve_lexicographic, solve_max_total, solve_mred_dc,
    solve_single_pair_edr, DcOutcome, DeadlineDemand, RateSolution, StageValue,
};
use crate::topology::{Network, NodePair, TopologyError};
use crate::workload::{Commodity, CommodityId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "ESDI-B")]
    EsdiB,
    #[serde(rename = "ESDI-O")]
    EsdiO,
    #[serde(rename = "ESDI-E")]
    EsdiE,
    /// Reserved baseline identifier; not implemented.
    #[serde(rename = "QPASS")]
    Qpass,
    /// Reserved baseline identifier; not implemented.
    #[serde(rename = "E2E-F")]
    E2eF,
}

impl Policy {
    pub const IMPLEMENTED: [Policy; 3] = [Policy::EsdiB, Policy::EsdiO, Policy::EsdiE];

    pub fn name(self) -> &'static str {
        match self {
            Policy::EsdiB => "ESDI-B",
            Policy::EsdiO => "ESDI-O",
            Policy::EsdiE => "ESDI-E",
            Policy::Qpass => "QPASS",
            Policy::E2eF => "E2E-F",
        }
    }

    pub fn is_implemented(self) -> bool {
        Self::IMPLEMENTED.contains(&self)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        [Policy::EsdiB, Policy::EsdiO, Policy::EsdiE, Policy::Qpass, Policy::E2eF]
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| format!("unknown policy `{s}` (expected ESDI-B, ESDI-O or ESDI-E)"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("policy {0} is a reserved baseline and is not implemented")]
    NotImplemented(Policy),
    #[error("scheduling length must be at least 1")]
    ZeroKappa,
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// One plan recomputation, as written to the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolveEvent {
    pub slot: u64,
    pub policy: Policy,
    pub active: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub priority_pairs: Vec<NodePair>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub priority_commodities: Vec<CommodityId>,
    pub stages: Vec<StageValue>,
    pub lp_calls: u64,
    pub wall_ms: f64,
}

/// Distinct SD pairs of the given commodities.
pub fn active_pairs<'a, I: IntoIterator<Item = &'a Commodity>>(active: I) -> BTreeSet<NodePair> {
    active.into_iter().map(|c| c.sd).collect()
}

/// Rank SD pairs by `min_j demand_j / edr` (original demands). Pairs with
/// zero EDR go last; ties fall back to the earliest (arrival, id) of the
/// pair's smallest commodity, then the pair itself.
pub fn rank_sd_pairs(active: &[&Commodity], edr: &BTreeMap<NodePair, f64>) -> Vec<NodePair> {
    let mut rep: BTreeMap<NodePair, &Commodity> = BTreeMap::new();
    for &c in active {
        let slot = rep.entry(c.sd).or_insert(c);
        if (c.demand, c.arrival, c.id) < (slot.demand, slot.arrival, slot.id) {
            *slot = c;
        }
    }
    let mut keyed: Vec<(f64, u64, CommodityId, NodePair)> = rep
        .into_iter()
        .map(|(pair, c)| {
            let eta = edr.get(&pair).copied().unwrap_or(0.0);
            let key = if eta > 0.0 { c.demand as f64 / eta } else { f64::INFINITY };
            (key, c.arrival, c.id, pair)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    keyed.into_iter().map(|k| k.3).collect()
}

/// Deadline-ordered admission candidates at slot `t`: commodities with a
/// deadline and at least one slot left, by (slots left, arrival, id).
pub fn admission_order<'a>(active: &[&'a Commodity], t: u64) -> Vec<&'a Commodity> {
    let mut order: Vec<(i64, &Commodity)> = active
        .iter()
        .filter_map(|&c| c.slots_left(t).filter(|&d| d > 0).map(|d| (d, c)))
        .collect();
    order.sort_by_key(|&(d, c)| (d, c.arrival, c.id));
    order.into_iter().map(|(_, c)| c).collect()
}

pub fn demand_of(c: &Commodity, t: u64) -> DeadlineDemand {
    DeadlineDemand { sd: c.sd, remaining: c.remaining(), slots_left: c.slots_left(t).unwrap_or(0).max(0) as u64 }
}

/// Per-run scheduler: cached plan, single-pair EDR cache and event log.
#[derive(Debug)]
pub struct SchedulerState {
    policy: Policy,
    kappa: usize,
    handle: SolverHandle,
    solution: Option<Arc<RateSolution>>,
    fingerprint: Option<Vec<CommodityId>>,
    plan_pairs: Option<BTreeSet<NodePair>>,
    edr: BTreeMap<NodePair, f64>,
    events: Vec<ResolveEvent>,
}

impl SchedulerState {
    pub fn new(policy: Policy, kappa: usize, handle: SolverHandle) -> Result<Self, SchedulerError> {
        if !policy.is_implemented() {
            return Err(SchedulerError::NotImplemented(policy));
        }
        if kappa == 0 {
            return Err(SchedulerError::ZeroKappa);
        }
        Ok(SchedulerState {
            policy,
            kappa,
            handle,
            solution: None,
            fingerprint: None,
            plan_pairs: None,
            edr: BTreeMap::new(),
            events: Vec::new(),
        })
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn solution(&self) -> Option<&Arc<RateSolution>> {
        self.solution.as_ref()
    }

    pub fn solver_calls(&self) -> u64 {
        self.handle.calls()
    }

    pub fn events(&self) -> &[ResolveEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<ResolveEvent> {
        std::mem::take(&mut self.events)
    }

    /// Cached single-pair EDRs computed so far.
    pub fn edr_cache(&self) -> &BTreeMap<NodePair, f64> {
        &self.edr
    }

    fn single_pair_edr(&mut self, net: &Network, pair: NodePair) -> Result<f64, SchedulerError> {
        if let Some(&v) = self.edr.get(&pair) {
            return Ok(v);
        }
        let v = solve_single_pair_edr(net, pair, &self.handle)?;
        self.edr.insert(pair, v);
        Ok(v)
    }

    /// Return the plan for slot `t`, recomputing it only if the active set
    /// differs from the previous call. Returns whether a recomputation ran.
    pub fn framework_step(
        &mut self,
        net: &Network,
        active: &[&Commodity],
        t: u64,
    ) -> Result<(Arc<RateSolution>, bool), SchedulerError> {
        let mut ids: Vec<CommodityId> = active.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if let (Some(sol), Some(fp)) = (&self.solution, &self.fingerprint) {
            if *fp == ids {
                return Ok((Arc::clone(sol), false));
            }
        }
        let started = Instant::now();
        let calls_before = self.handle.calls();
        let pairs = active_pairs(active.iter().copied());
        let sub = net.with_sd_pairs(pairs.iter().copied())?;

        let (sol, priority_pairs, priority_commodities) = match self.policy {
            Policy::EsdiB => {
                if self.plan_pairs.as_ref() == Some(&pairs) {
                    if let Some(sol) = &self.solution {
                        self.fingerprint = Some(ids);
                        return Ok((Arc::clone(sol), false));
                    }
                }
                (self.esdi_b_plan(&sub)?, Vec::new(), Vec::new())
            }
            Policy::EsdiO => {
                let (sol, prio) = self.esdi_o_update(&sub, active)?;
                (sol, prio, Vec::new())
            }
            Policy::EsdiE => {
                let (sol, admitted) = self.esdi_e_update(&sub, active, t)?;
                (sol, Vec::new(), admitted)
            }
            other => return Err(SchedulerError::NotImplemented(other)),
        };

        let sol = Arc::new(sol);
        self.events.push(ResolveEvent {
            slot: t,
            policy: self.policy,
            active: active.len(),
            priority_pairs,
            priority_commodities,
            stages: sol.objective_log().to_vec(),
            lp_calls: self.handle.calls() - calls_before,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        self.solution = Some(Arc::clone(&sol));
        self.fingerprint = Some(ids);
        self.plan_pairs = Some(pairs);
        Ok((sol, true))
    }

    /// Max-total plan over the network's SD pairs.
    pub fn esdi_b_plan(&self, net: &Network) -> Result<RateSolution, SchedulerError> {
        Ok(solve_max_total(net, &self.handle)?)
    }

    /// Priority plan over the top-`kappa` SD pairs; `net` carries the active
    /// SD pairs.
    pub fn esdi_o_update(
        &mut self,
        net: &Network,
        active: &[&Commodity],
    ) -> Result<(RateSolution, Vec<NodePair>), SchedulerError> {
        for pair in active_pairs(active.iter().copied()) {
            self.single_pair_edr(net, pair)?;
        }
        let mut ranked = rank_sd_pairs(active, &self.edr);
        ranked.truncate(self.kappa);
        let sol = solve_lexicographic(net, &ranked, true, &self.handle)?;
        Ok((sol, ranked))
    }

    /// Greedy deadline admission; `net` carries the active SD pairs. Returns
    /// the plan and the admitted commodity ids in admission order.
    pub fn esdi_e_update(
        &mut self,
        net: &Network,
        active: &[&Commodity],
        t: u64,
    ) -> Result<(RateSolution, Vec<CommodityId>), SchedulerError> {
        let mut admitted: Vec<DeadlineDemand> = Vec::new();
        let mut ids = Vec::new();
        for c in admission_order(active, t) {
            if admitted.len() == self.kappa {
                break;
            }
            let mut trial = admitted.clone();
            trial.push(demand_of(c, t));
            if self.exceeds_single_pair(net, &trial, c.sd)? {
                continue;
            }
            if build_and_check_mred_dc(net, &trial, &self.handle)?.is_feasible() {
                admitted = trial;
                ids.push(c.id);
            }
        }
        if admitted.is_empty() {
            return Ok((self.esdi_b_plan(net)?, ids));
        }
        match solve_mred_dc(net, &admitted, &self.handle)? {
            DcOutcome::Feasible(sol) => Ok((sol, ids)),
            DcOutcome::Infeasible => Err(SolverError::Infeasible("admitted set re-check".into()).into()),
        }
    }

    /// A requirement on `pair` above its single-pair EDR rules the set out
    /// without an LP solve.
    fn exceeds_single_pair(
        &mut self,
        net: &Network,
        trial: &[DeadlineDemand],
        pair: NodePair,
    ) -> Result<bool, SchedulerError> {
        let cap = self.single_pair_edr(net, pair)?;
        let rows = deadline_rows(trial)?;
        let margin = self.handle.eps_feas * cap.max(1.0);
        Ok(rows.iter().any(|&(p, need)| p == pair && need > cap + margin))
    }
}
