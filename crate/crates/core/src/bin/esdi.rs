use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use esdi_core::engine::{run_simulation, EngineError, SimConfig};
use esdi_core::experiment::{run_experiment, trace_jsonl, ExperimentConfig, ExperimentError};
use esdi_core::mred::{check_solution, RateSolution};
use esdi_core::scheduler::Policy;
use esdi_core::topology::{generate_waxman, Network, WaxmanParams};
use esdi_core::workload::{generate_workload, read_jsonl, sample_sd_universe, write_jsonl, WorkloadConfig};

const EXIT_CONFIG: u8 = 1;
const EXIT_SOLVER: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(name = "esdi", version, about = "Entanglement scheduling and distribution simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random Waxman network as JSON.
    GenTopology(GenTopology),
    /// Generate a commodity workload as JSON lines.
    GenWorkload(GenWorkload),
    /// Run one simulation and print its metrics.
    Simulate(Simulate),
    /// Run a parameter sweep and write results.csv / results.json.
    Sweep(Sweep),
    /// Check a rate solution against a network's constraints.
    CheckSolution(CheckSolution),
}

#[derive(Args)]
struct GenTopology {
    /// Waxman parameters as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of SD pairs to sample into the network.
    #[arg(long)]
    sd_pairs: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenWorkload {
    #[arg(long)]
    topology: PathBuf,
    /// Workload parameters as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Size of the SD universe when the network lists no SD pairs.
    #[arg(long)]
    sd_pairs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Simulate {
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    workload: PathBuf,
    /// Simulation settings as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    policy: Option<Policy>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<u64>,
    /// Write metrics.json (and trace.jsonl with --trace) here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record per-slot and per-resolve events; printed to stdout without --out.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct Sweep {
    /// Experiment config JSON; the desk-scale preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    trace: bool,
    /// Scale topology and workload to the full evaluation setting.
    #[arg(long, alias = "paper-scale")]
    full_scale: bool,
}

#[derive(Args)]
struct CheckSolution {
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    solution: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Failure { code: EXIT_CONFIG, message: message.to_string() }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read(path)?).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn load_network(path: &Path) -> Result<Network, Failure> {
    Network::from_json(&read(path)?).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, bytes).map_err(|e| Failure::config(format!("{}: {e}", path.display()))),
        None => io::stdout().write_all(bytes).map_err(Failure::config),
    }
}

fn gen_topology(args: GenTopology) -> Result<(), Failure> {
    let mut params: WaxmanParams = match &args.config {
        Some(p) => read_json(p)?,
        None => WaxmanParams::default(),
    };
    if let Some(n) = args.nodes {
        params.nodes = n;
    }
    let net = generate_waxman(&params, args.seed).map_err(Failure::config)?;
    let net = match args.sd_pairs {
        Some(k) => net.with_sd_pairs(sample_sd_universe(&net, Some(k), args.seed)).map_err(Failure::config)?,
        None => net,
    };
    emit(args.out.as_deref(), format!("{}\n", net.to_json()).as_bytes())
}

fn gen_workload(args: GenWorkload) -> Result<(), Failure> {
    let net = load_network(&args.topology)?;
    let cfg: WorkloadConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => WorkloadConfig::default(),
    };
    let universe: Vec<_> = if net.sd_pairs().is_empty() {
        sample_sd_universe(&net, args.sd_pairs, args.seed)
    } else {
        net.sd_pairs().iter().copied().collect()
    };
    let workload = generate_workload(&cfg, &universe, args.seed).map_err(Failure::config)?;
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &workload).map_err(Failure::config)?;
    emit(args.out.as_deref(), &buf)
}

fn simulate(args: Simulate) -> Result<(), Failure> {
    let net = load_network(&args.topology)?;
    let file = fs::File::open(&args.workload)
        .map_err(|e| Failure::config(format!("{}: {e}", args.workload.display())))?;
    let workload = read_jsonl(BufReader::new(file)).map_err(Failure::config)?;
    let mut cfg: SimConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    cfg.policy = args.policy.unwrap_or(cfg.policy);
    cfg.kappa = args.kappa.unwrap_or(cfg.kappa);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.horizon = args.horizon.or(cfg.horizon);
    cfg.trace |= args.trace;
    if !cfg.policy.is_implemented() {
        return Err(Failure::config(format!("policy {} is a reserved baseline and is not implemented", cfg.policy)));
    }
    let out = match run_simulation(&net, workload, &cfg) {
        Ok(out) => out,
        Err(EngineError::Config(m)) => return Err(Failure::config(m)),
        Err(e @ EngineError::Aborted { .. }) => return Err(Failure { code: EXIT_SOLVER, message: e.to_string() }),
    };
    let metrics = serde_json::to_string_pretty(&out.metrics).expect("metrics serialize");
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Failure::config(format!("{}: {e}", dir.display())))?;
            emit(Some(&dir.join("metrics.json")), format!("{metrics}\n").as_bytes())?;
            if cfg.trace {
                emit(Some(&dir.join("trace.jsonl")), &trace_jsonl(&out.trace))?;
            }
        }
        None => {
            if cfg.trace {
                emit(None, &trace_jsonl(&out.trace))?;
            }
        }
    }
    println!("{metrics}");
    if out.metrics.conservation_violations > 0 {
        return Err(Failure {
            code: EXIT_INVARIANT,
            message: format!("{} slots violated ebit conservation", out.metrics.conservation_violations),
        });
    }
    Ok(())
}

fn sweep(args: Sweep) -> Result<(), Failure> {
    let to_failure = |e: ExperimentError| Failure::config(e);
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::from_json_file(p).map_err(to_failure)?,
        None => ExperimentConfig::default(),
    };
    if args.full_scale {
        cfg = cfg.full_scale();
    }
    cfg.trace |= args.trace;
    let out_dir = args.out.or(cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("results"));
    let results = run_experiment(&cfg, args.workers).map_err(to_failure)?;
    results.write_to(&out_dir).map_err(to_failure)?;
    for f in results.failures() {
        eprintln!(
            "run failed: value={} policy={} seed={}: {}",
            f.sweep_value,
            f.policy,
            f.seed,
            f.error.as_deref().unwrap_or("")
        );
    }
    let mut csv = Vec::new();
    results.write_csv(&mut csv).map_err(Failure::config)?;
    io::stdout().write_all(&csv).map_err(Failure::config)?;
    let violations: u64 = results.runs.iter().filter_map(|r| r.metrics.as_ref()).map(|m| m.conservation_violations).sum();
    if violations > 0 {
        return Err(Failure { code: EXIT_INVARIANT, message: format!("{violations} conservation violations") });
    }
    Ok(())
}

fn check(args: CheckSolution) -> Result<(), Failure> {
    let net = load_network(&args.topology)?;
    let sol = RateSolution::from_json(&read(&args.solution)?)
        .map_err(|e| Failure::config(format!("{}: {e}", args.solution.display())))?;
    let report = check_solution(&net, &sol);
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if report.passes(args.tol) {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_INVARIANT,
            message: format!("max residual {:e} exceeds {:e}", report.max_residual(), args.tol),
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenTopology(a) => gen_topology(a),
        Command::GenWorkload(a) => gen_workload(a),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::CheckSolution(a) => check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
