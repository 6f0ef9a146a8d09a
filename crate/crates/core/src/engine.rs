//! Time-slotted simulation loop and run metrics.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::Layout;
use crate::lp::SolverHandle;
use crate::protocol::{BufferState, BufferTotals, DistributeMode, ProtocolConfig, SlotCounters, SlotTrace};
use crate::rng::SlotRng;
use crate::scheduler::{Policy, ResolveEvent, SchedulerError, SchedulerState};
use crate::topology::{Network, NodePair};
use crate::workload::{active_set, Commodity, CommodityId, Status};

/// Hard stop for runs that never drain.
pub const HORIZON_CAP: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid simulation input: {0}")]
    Config(String),
    #[error("run aborted in slot {slot}: {source}")]
    Aborted {
        slot: u64,
        source: SchedulerError,
        partial: Box<RunMetrics>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub policy: Policy,
    pub kappa: usize,
    pub seed: u64,
    /// Last slot to simulate; capped at [`HORIZON_CAP`].
    pub horizon: Option<u64>,
    pub protocol: ProtocolConfig,
    /// Receiving-buffer service order; by default EDF when any commodity has
    /// a deadline, SJF otherwise.
    pub distribute: Option<DistributeMode>,
    /// Keep per-slot and per-resolve trace records.
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            policy: Policy::EsdiB,
            kappa: 1,
            seed: 0,
            horizon: None,
            protocol: ProtocolConfig::default(),
            distribute: None,
            trace: false,
        }
    }
}

/// Final state of one commodity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommodityRecord {
    pub id: CommodityId,
    pub sd: NodePair,
    pub demand: u64,
    pub arrival: u64,
    pub deadline: Option<u64>,
    pub remaining: u64,
    pub status: Status,
}

impl CommodityRecord {
    pub fn from_commodity(c: &Commodity) -> Self {
        CommodityRecord {
            id: c.id,
            sd: c.sd,
            demand: c.demand,
            arrival: c.arrival,
            deadline: c.deadline,
            remaining: c.remaining(),
            status: c.status(),
        }
    }

    /// Slots from arrival to completion, both inclusive.
    pub fn completion_time(&self) -> Option<u64> {
        match self.status {
            Status::Completed(t) => Some(t - self.arrival + 1),
            _ => None,
        }
    }

    pub fn met_deadline(&self) -> bool {
        matches!((self.status, self.deadline), (Status::Completed(t), Some(d)) if t <= d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub policy: Policy,
    pub seed: u64,
    pub success_ratio: f64,
    pub avg_completion_time: Option<f64>,
    pub unfinished: u64,
    pub n_commodities: u64,
    pub solver_calls: u64,
    pub slots: u64,
    pub wall_ms: f64,
    pub truncated: bool,
    pub resolves: u64,
    pub total_distributed: u64,
    pub conservation_violations: u64,
}

impl RunMetrics {
    /// JSON with the wall-clock field removed; identical across replays.
    pub fn replay_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("metrics serialize");
        v.as_object_mut().expect("object").remove("wall_ms");
        v.to_string()
    }
}

/// Success ratio over deadline commodities (1.0 when there are none) and
/// mean completion time over completed commodities without a deadline.
/// Returns `(success_ratio, avg_completion_time, unfinished)`.
pub fn compute_metrics(records: &[CommodityRecord]) -> (f64, Option<f64>, u64) {
    let with_deadline: Vec<&CommodityRecord> = records.iter().filter(|r| r.deadline.is_some()).collect();
    let success = if with_deadline.is_empty() {
        1.0
    } else {
        with_deadline.iter().filter(|r| r.met_deadline()).count() as f64 / with_deadline.len() as f64
    };
    let times: Vec<u64> =
        records.iter().filter(|r| r.deadline.is_none()).filter_map(CommodityRecord::completion_time).collect();
    let avg = (!times.is_empty()).then(|| times.iter().sum::<u64>() as f64 / times.len() as f64);
    let unfinished = records.iter().filter(|r| r.deadline.is_none() && r.completion_time().is_none()).count();
    (success, avg, unfinished as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    Slot(SlotTrace),
    Resolve(ResolveEvent),
}

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub records: Vec<CommodityRecord>,
    pub trace: Vec<TraceRecord>,
}

fn validate_workload(net: &Network, workload: &[Commodity]) -> Result<(), EngineError> {
    let mut ids = BTreeSet::new();
    for c in workload {
        if !ids.insert(c.id) {
            return Err(EngineError::Config(format!("duplicate commodity id {}", c.id)));
        }
        if !net.has_node(c.sd.lo()) || !net.has_node(c.sd.hi()) {
            return Err(EngineError::Config(format!("commodity {} uses unknown pair {}", c.id, c.sd)));
        }
        if c.arrival == 0 {
            return Err(EngineError::Config(format!("commodity {} arrives before slot 1", c.id)));
        }
    }
    Ok(())
}

/// State of one simulation run.
pub struct SimState {
    t: u64,
    net: Network,
    commodities: Vec<Commodity>,
    buffers: BufferState,
    scheduler: SchedulerState,
    rng: SlotRng,
    mode: DistributeMode,
    trace: Option<Vec<TraceRecord>>,
    resolves: u64,
}

impl SimState {
    pub fn new(net: &Network, workload: Vec<Commodity>, config: &SimConfig) -> Result<Self, EngineError> {
        validate_workload(net, &workload)?;
        let scheduler = SchedulerState::new(config.policy, config.kappa, SolverHandle::default())
            .map_err(|e| EngineError::Config(e.to_string()))?;
        let mode = config.distribute.unwrap_or(if workload.iter().any(|c| c.deadline.is_some()) {
            DistributeMode::Edf
        } else {
            DistributeMode::Sjf
        });
        let layout = Arc::new(Layout::new(net, false));
        Ok(SimState {
            t: 1,
            net: net.clone(),
            commodities: workload,
            buffers: BufferState::with_layout(layout, config.protocol.clone()),
            scheduler,
            rng: SlotRng::new(config.seed),
            mode,
            trace: config.trace.then(Vec::new),
            resolves: 0,
        })
    }

    /// Next slot to run.
    pub fn slot(&self) -> u64 {
        self.t
    }

    pub fn commodities(&self) -> &[Commodity] {
        &self.commodities
    }

    pub fn buffers(&self) -> &BufferState {
        &self.buffers
    }

    pub fn scheduler(&self) -> &SchedulerState {
        &self.scheduler
    }

    pub fn is_drained(&self) -> bool {
        self.commodities.iter().all(|c| c.is_terminal())
    }

    /// Admit and expire commodities, refresh the plan if the active set
    /// changed, run generation and swapping, distribute, then advance.
    pub fn run_slot(&mut self) -> Result<SlotCounters, SchedulerError> {
        let t = self.t;
        let active = active_set(&mut self.commodities, t);
        let refs: Vec<&Commodity> = active.iter().map(|&i| &self.commodities[i]).collect();
        let (sol, resolved) = self.scheduler.framework_step(&self.net, &refs, t)?;
        if resolved {
            self.resolves += 1;
            self.buffers.apply_new_solution(sol);
        }
        let (counters, grants) = self.buffers.step(t, &self.rng, &mut self.commodities, &active, self.mode);
        if let Some(trace) = &mut self.trace {
            trace.extend(self.scheduler.take_events().into_iter().map(TraceRecord::Resolve));
            trace.push(TraceRecord::Slot(SlotTrace {
                slot: t,
                counters: counters.clone(),
                grants,
                buffers: self.buffers.totals(),
                resolved,
            }));
        } else {
            self.scheduler.take_events();
        }
        self.t += 1;
        Ok(counters)
    }

    pub fn records(&self) -> Vec<CommodityRecord> {
        self.commodities.iter().map(CommodityRecord::from_commodity).collect()
    }

    pub fn buffer_totals(&self) -> BufferTotals {
        self.buffers.totals()
    }

    fn metrics(&self, policy: Policy, seed: u64, truncated: bool, wall_ms: f64) -> RunMetrics {
        let records = self.records();
        let (success_ratio, avg_completion_time, unfinished) = compute_metrics(&records);
        RunMetrics {
            policy,
            seed,
            success_ratio,
            avg_completion_time,
            unfinished,
            n_commodities: records.len() as u64,
            solver_calls: self.scheduler.solver_calls(),
            slots: self.t - 1,
            wall_ms,
            truncated,
            resolves: self.resolves,
            total_distributed: self.buffers.cumulative().distributed,
            conservation_violations: self.buffers.conservation_violations(),
        }
    }
}

/// Run until every commodity is terminal or the horizon is reached.
pub fn run_simulation(net: &Network, workload: Vec<Commodity>, config: &SimConfig) -> Result<RunOutput, EngineError> {
    let started = Instant::now();
    let horizon = config.horizon.unwrap_or(HORIZON_CAP).min(HORIZON_CAP);
    let mut state = SimState::new(net, workload, config)?;
    while !state.is_drained() && state.slot() <= horizon {
        if let Err(source) = state.run_slot() {
            let wall = started.elapsed().as_secs_f64() * 1e3;
            let partial = state.metrics(config.policy, config.seed, true, wall);
            return Err(EngineError::Aborted { slot: state.slot(), source, partial: Box::new(partial) });
        }
    }
    let truncated = !state.is_drained();
    let metrics = state.metrics(config.policy, config.seed, truncated, started.elapsed().as_secs_f64() * 1e3);
    Ok(RunOutput { metrics, records: state.records(), trace: state.trace.take().unwrap_or_default() })
}
