//! Parameter sweeps: many seeded runs, aggregated per sweep point and policy.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{run_simulation, RunMetrics, RunOutput, SimConfig, TraceRecord};
use crate::protocol::ProtocolConfig;
use crate::rng::derive_seed;
use crate::scheduler::Policy;
use crate::topology::{generate_waxman, Network, WaxmanParams};
use crate::workload::{generate_workload, sample_sd_universe, Commodity, DeadlineMode, WorkloadConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologySpec {
    /// A fresh Waxman graph per seed.
    Waxman(WaxmanParams),
    /// A network JSON file; relative paths resolve against the config file.
    File { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ArrivalRate,
    MeanDemand,
    GraphSize,
    DeadlineFactor,
    Kappa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SuccessRatio,
    AvgCompletionTime,
    Unfinished,
    Slots,
    SolverCalls,
    TotalDistributed,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::SuccessRatio,
        Metric::AvgCompletionTime,
        Metric::Unfinished,
        Metric::Slots,
        Metric::SolverCalls,
        Metric::TotalDistributed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::SuccessRatio => "success_ratio",
            Metric::AvgCompletionTime => "avg_completion_time",
            Metric::Unfinished => "unfinished",
            Metric::Slots => "slots",
            Metric::SolverCalls => "solver_calls",
            Metric::TotalDistributed => "total_distributed",
        }
    }

    pub fn of(self, m: &RunMetrics) -> Option<f64> {
        match self {
            Metric::SuccessRatio => Some(m.success_ratio),
            Metric::AvgCompletionTime => m.avg_completion_time,
            Metric::Unfinished => Some(m.unfinished as f64),
            Metric::Slots => Some(m.slots as f64),
            Metric::SolverCalls => Some(m.solver_calls as f64),
            Metric::TotalDistributed => Some(m.total_distributed as f64),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub topology: TopologySpec,
    /// Size of the SD-pair universe commodities draw from; all pairs when
    /// absent. A network file's own SD pairs take precedence.
    pub sd_pairs: Option<usize>,
    pub workload: WorkloadConfig,
    pub policies: Vec<Policy>,
    pub kappa: usize,
    pub seeds: Vec<u64>,
    /// Without a sweep the experiment is a single point with value 0.
    pub sweep: Option<Sweep>,
    pub protocol: ProtocolConfig,
    pub horizon: Option<u64>,
    /// Metrics written to the CSV; by default success ratio for deadline
    /// workloads and average completion time otherwise.
    pub csv_metrics: Option<Vec<Metric>>,
    pub out_dir: Option<PathBuf>,
    pub trace: bool,
}

impl Default for ExperimentConfig {
    /// Desk-scale arrival-rate sweep.
    fn default() -> Self {
        ExperimentConfig {
            topology: TopologySpec::Waxman(WaxmanParams { nodes: 12, cap_lo: 1, cap_hi: 3, ..WaxmanParams::default() }),
            sd_pairs: None,
            workload: WorkloadConfig {
                arrival_rate: 1.0,
                mean_demand: 60.0,
                min_demand: 10,
                deadline: DeadlineMode::Proportional { mu: 0.4, halfwidth: 0.1, factor: 1.0 },
                horizon: 1000,
                max_commodities: Some(60),
            },
            policies: vec![Policy::EsdiB, Policy::EsdiE],
            kappa: 1,
            seeds: (1..=5).collect(),
            sweep: Some(Sweep { axis: SweepAxis::ArrivalRate, values: vec![0.5, 1.0, 2.0] }),
            protocol: ProtocolConfig::default(),
            horizon: None,
            csv_metrics: None,
            out_dir: None,
            trace: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        if let TopologySpec::File { path: p } = &mut cfg.topology {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Scale topology and workload up to the full evaluation setting: 20
    /// nodes, 1000 commodities, mean demand 600 with minimum 100.
    pub fn full_scale(mut self) -> Self {
        self.topology = TopologySpec::Waxman(WaxmanParams::default());
        self.sd_pairs = None;
        self.workload = WorkloadConfig { max_commodities: Some(1000), horizon: 100_000, ..WorkloadConfig::default() };
        self
    }

    pub fn sweep_values(&self) -> Vec<f64> {
        self.sweep.as_ref().map_or(vec![0.0], |s| s.values.clone())
    }

    pub fn csv_metrics(&self) -> Vec<Metric> {
        self.csv_metrics.clone().unwrap_or_else(|| {
            vec![if self.workload.has_deadlines() { Metric::SuccessRatio } else { Metric::AvgCompletionTime }]
        })
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.policies.is_empty() {
            return bad("no policies".into());
        }
        if let Some(p) = self.policies.iter().find(|p| !p.is_implemented()) {
            return bad(format!("policy {p} is a reserved baseline and is not implemented"));
        }
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.kappa == 0 {
            return bad("kappa must be at least 1".into());
        }
        if self.protocol.swap_rounds == 0 {
            return bad("swap_rounds must be at least 1".into());
        }
        if matches!(self.csv_metrics.as_deref(), Some([])) {
            return bad("csv_metrics is empty".into());
        }
        match &self.topology {
            TopologySpec::File { path } if !path.is_file() => {
                return bad(format!("topology file {} does not exist", path.display()))
            }
            TopologySpec::Waxman(w) if w.nodes < 2 => return bad("Waxman graphs need at least 2 nodes".into()),
            _ => {}
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return bad("sweep grid is empty".into());
            }
            if sweep.values.iter().any(|v| !v.is_finite()) {
                return bad("sweep values must be finite".into());
            }
            for &v in &sweep.values {
                self.at(v)?;
            }
        } else {
            self.workload.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// The configuration at one sweep point (the sweep itself removed).
    pub fn at(&self, value: f64) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = self.clone();
        let Some(sweep) = cfg.sweep.take() else { return Ok(cfg) };
        let whole = |what: &str| {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(ExperimentError::Config(format!("{what} must be a positive integer, got {value}")))
            }
        };
        match sweep.axis {
            SweepAxis::ArrivalRate => cfg.workload.arrival_rate = value,
            SweepAxis::MeanDemand => cfg.workload.mean_demand = value,
            SweepAxis::GraphSize => match &mut cfg.topology {
                TopologySpec::Waxman(w) => w.nodes = whole("graph size")?,
                TopologySpec::File { .. } => {
                    return Err(ExperimentError::Config("graph_size sweeps need a Waxman topology".into()))
                }
            },
            SweepAxis::DeadlineFactor => match &mut cfg.workload.deadline {
                DeadlineMode::Proportional { factor, .. } => *factor = value,
                DeadlineMode::None => {
                    return Err(ExperimentError::Config("deadline_factor sweeps need deadlines".into()))
                }
            },
            SweepAxis::Kappa => cfg.kappa = whole("kappa")?,
        }
        cfg.workload.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// Network and workload of one (sweep point, seed); shared by all policies.
pub fn instance(point: &ExperimentConfig, seed: u64) -> Result<(Network, Vec<Commodity>), String> {
    let net = match &point.topology {
        TopologySpec::Waxman(w) => generate_waxman(w, derive_seed(seed, "topology")).map_err(|e| e.to_string())?,
        TopologySpec::File { path } => {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            Network::from_json(&text).map_err(|e| e.to_string())?
        }
    };
    let universe: Vec<_> = if net.sd_pairs().is_empty() {
        sample_sd_universe(&net, point.sd_pairs, derive_seed(seed, "sd-pairs"))
    } else {
        net.sd_pairs().iter().copied().collect()
    };
    let workload =
        generate_workload(&point.workload, &universe, derive_seed(seed, "workload")).map_err(|e| e.to_string())?;
    Ok((net, workload))
}

/// One run of the experiment.
pub fn run_point(point: &ExperimentConfig, policy: Policy, seed: u64) -> Result<RunOutput, String> {
    let (net, workload) = instance(point, seed)?;
    let sim = SimConfig {
        policy,
        kappa: point.kappa,
        seed,
        horizon: point.horizon,
        protocol: point.protocol.clone(),
        distribute: None,
        trace: point.trace,
    };
    run_simulation(&net, workload, &sim).map_err(|e| e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub sweep_value: f64,
    pub policy: Policy,
    pub seed: u64,
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub sweep_value: f64,
    pub policy: Policy,
    pub metric: Metric,
    pub mean: Option<f64>,
    pub stddev: Option<f64>,
    pub n_runs: usize,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_stddev(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((mean, var.sqrt()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub axis: Option<SweepAxis>,
    pub runs: Vec<RunResult>,
    pub aggregates: Vec<AggregateRow>,
    /// Metrics written to the CSV.
    pub csv_metrics: Vec<Metric>,
    #[serde(skip)]
    pub traces: Vec<Vec<TraceRecord>>,
}

impl ExperimentResults {
    pub fn aggregate(&self, value: f64, policy: Policy, metric: Metric) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|r| r.sweep_value == value && r.policy == policy && r.metric == metric)
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(|r| r.error.is_some())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["sweep_value", "policy", "metric", "mean", "stddev", "n_runs"])?;
        let fmt_opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for row in self.aggregates.iter().filter(|r| self.csv_metrics.contains(&r.metric)) {
            out.write_record([
                row.sweep_value.to_string(),
                row.policy.to_string(),
                row.metric.to_string(),
                fmt_opt(row.mean),
                fmt_opt(row.stddev),
                row.n_runs.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Write `results.csv`, `results.json` and, if traced, per-run trace
    /// files into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), ExperimentError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let csv_path = dir.join("results.csv");
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| ExperimentError::Io { path: csv_path.clone(), source: e.into() })?;
        write_atomic(&csv_path, &buf)?;
        let json = serde_json::to_vec_pretty(self).expect("results serialize");
        write_atomic(&dir.join("results.json"), &json)?;
        if !self.traces.is_empty() {
            let tdir = dir.join("traces");
            fs::create_dir_all(&tdir).map_err(io_err(&tdir))?;
            for (run, trace) in self.runs.iter().zip(&self.traces) {
                let name = format!("{}_{}_{}.jsonl", run.sweep_value, run.policy, run.seed);
                write_atomic(&tdir.join(name), &trace_jsonl(trace))?;
            }
        }
        Ok(())
    }
}

pub fn trace_jsonl(trace: &[TraceRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for rec in trace {
        serde_json::to_writer(&mut out, rec).expect("trace serializes");
        out.push(b'\n');
    }
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Run every (sweep value, policy, seed) combination on up to `workers`
/// threads and aggregate per (value, policy). Failed runs are recorded and
/// left out of the aggregates.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<ExperimentResults, ExperimentError> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for value in cfg.sweep_values() {
        let point = cfg.at(value)?;
        for &policy in &cfg.policies {
            for &seed in &cfg.seeds {
                jobs.push((value, point.clone(), policy, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let outputs: Vec<(RunResult, Vec<TraceRecord>)> = pool.install(|| {
        jobs.par_iter()
            .map(|(value, point, policy, seed)| {
                let out = run_point(point, *policy, *seed);
                let (metrics, error, trace) = match out {
                    Ok(o) => (Some(o.metrics), None, o.trace),
                    Err(e) => (None, Some(e), Vec::new()),
                };
                (RunResult { sweep_value: *value, policy: *policy, seed: *seed, metrics, error }, trace)
            })
            .collect()
    });
    let (runs, traces): (Vec<RunResult>, Vec<Vec<TraceRecord>>) = outputs.into_iter().unzip();

    let mut aggregates = Vec::new();
    for value in cfg.sweep_values() {
        for &policy in &cfg.policies {
            let group: Vec<&RunMetrics> = runs
                .iter()
                .filter(|r| r.sweep_value == value && r.policy == policy)
                .filter_map(|r| r.metrics.as_ref())
                .collect();
            for metric in Metric::ALL {
                let xs: Vec<f64> = group.iter().filter_map(|m| metric.of(m)).collect();
                let stats = mean_stddev(&xs);
                aggregates.push(AggregateRow {
                    sweep_value: value,
                    policy,
                    metric,
                    mean: stats.map(|s| s.0),
                    stddev: stats.map(|s| s.1),
                    n_runs: xs.len(),
                });
            }
        }
    }
    Ok(ExperimentResults {
        axis: cfg.sweep.as_ref().map(|s| s.axis),
        runs,
        aggregates,
        csv_metrics: cfg.csv_metrics(),
        traces: if cfg.trace { traces } else { Vec::new() },
    })
}
