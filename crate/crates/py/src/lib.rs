//! Python bindings: networks, workloads, the rate LPs and the simulator.

use esdi_core::engine::{run_simulation, SimConfig};
use esdi_core::lp::SolverHandle;
use esdi_core::mred::{self, DcOutcome, DeadlineDemand};
use esdi_core::protocol::{ProtocolConfig, SwitchingRule};
use esdi_core::scheduler::Policy;
use esdi_core::topology::{self, canonical_pair, Link, Node, NodeId, NodePair, WaxmanParams};
use esdi_core::workload::{self, DeadlineMode, WorkloadConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_pair(p: (NodeId, NodeId)) -> PyResult<NodePair> {
    canonical_pair(p.0, p.1).map_err(value_err)
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    match v {
        Value::Null => Ok(py.None().into_bound(py)),
        Value::Bool(b) => b.into_bound_py_any(py),
        Value::Number(n) => match n.as_u64() {
            Some(u) => u.into_bound_py_any(py),
            None => match n.as_i64() {
                Some(i) => i.into_bound_py_any(py),
                None => n.as_f64().unwrap_or(f64::NAN).into_bound_py_any(py),
            },
        },
        Value::String(s) => s.into_bound_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            Ok(list.into_any())
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            Ok(dict.into_any())
        }
    }
}

fn serialize_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &serde_json::to_value(value).map_err(runtime_err)?)
}

/// Quantum network: nodes with swap success `q`, links with `capacity`
/// channels of success `p`, and a set of SD pairs.
#[pyclass(frozen, module = "esdi")]
struct Network {
    inner: topology::Network,
}

#[pymethods]
impl Network {
    /// `nodes` as `(id, q)`, `links` as `(u, v, capacity, p)`, `sd_pairs` as `(u, v)`.
    #[new]
    #[pyo3(signature = (nodes, links, sd_pairs=Vec::new()))]
    fn new(
        nodes: Vec<(NodeId, f64)>,
        links: Vec<(NodeId, NodeId, u32, f64)>,
        sd_pairs: Vec<(NodeId, NodeId)>,
    ) -> PyResult<Self> {
        let nodes = nodes.into_iter().map(|(id, q)| Node { id, q }).collect();
        let links = links.into_iter().map(|(u, v, capacity, p)| (u, v, Link { capacity, p })).collect();
        let inner = topology::build_manual(nodes, links, sd_pairs).map_err(value_err)?;
        Ok(Network { inner })
    }

    /// Random connected Waxman graph, optionally with `sd_pairs` sampled SD pairs.
    #[staticmethod]
    #[pyo3(signature = (nodes=20, seed=0, alpha=0.8, beta=0.8, cap_lo=3, cap_hi=10, p=0.9, q=0.9, sd_pairs=None))]
    #[allow(clippy::too_many_arguments)]
    fn waxman(
        nodes: usize,
        seed: u64,
        alpha: f64,
        beta: f64,
        cap_lo: u32,
        cap_hi: u32,
        p: f64,
        q: f64,
        sd_pairs: Option<usize>,
    ) -> PyResult<Self> {
        let params = WaxmanParams { nodes, alpha, beta, cap_lo, cap_hi, p, q };
        let net = topology::generate_waxman(&params, seed).map_err(value_err)?;
        let inner = match sd_pairs {
            Some(k) => net.with_sd_pairs(workload::sample_sd_universe(&net, Some(k), seed)).map_err(value_err)?,
            None => net,
        };
        Ok(Network { inner })
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Network { inner: topology::Network::from_json(s).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn with_sd_pairs(&self, pairs: Vec<(NodeId, NodeId)>) -> PyResult<Self> {
        let pairs = pairs.into_iter().map(to_pair).collect::<PyResult<Vec<_>>>()?;
        Ok(Network { inner: self.inner.with_sd_pairs(pairs).map_err(value_err)? })
    }

    #[getter]
    fn node_ids(&self) -> Vec<NodeId> {
        self.inner.node_ids().collect()
    }

    #[getter]
    fn sd_pairs(&self) -> Vec<(NodeId, NodeId)> {
        self.inner.sd_pairs().iter().map(|p| (p.lo(), p.hi())).collect()
    }

    /// Links as `(u, v, capacity, p)`.
    #[getter]
    fn links(&self) -> Vec<(NodeId, NodeId, u32, f64)> {
        self.inner.links().iter().map(|(e, l)| (e.lo(), e.hi(), l.capacity, l.p)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(nodes={}, links={}, sd_pairs={})",
            self.inner.node_count(),
            self.inner.links().len(),
            self.inner.sd_pairs().len()
        )
    }
}

#[pyclass(frozen, module = "esdi")]
struct RateSolution {
    inner: mred::RateSolution,
}

#[pymethods]
impl RateSolution {
    fn eta(&self, u: NodeId, v: NodeId) -> PyResult<f64> {
        Ok(self.inner.eta(to_pair((u, v))?))
    }

    fn g(&self, u: NodeId, v: NodeId) -> PyResult<f64> {
        Ok(self.inner.g(to_pair((u, v))?))
    }

    #[getter]
    fn total_eta(&self) -> f64 {
        self.inner.total_eta()
    }

    /// `{(u, v): eta}` over SD pairs with a non-zero rate.
    #[getter]
    fn etas(&self) -> Vec<((NodeId, NodeId), f64)> {
        self.inner.eta_entries().iter().map(|(p, &v)| ((p.lo(), p.hi()), v)).collect()
    }

    /// Stage labels and values of the lexicographic solve.
    #[getter]
    fn objective_log(&self) -> Vec<(String, f64)> {
        self.inner.objective_log().iter().map(|s| (s.label.clone(), s.value)).collect()
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(RateSolution { inner: mred::RateSolution::from_json(s).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn __repr__(&self) -> String {
        format!("RateSolution(total_eta={:.6})", self.inner.total_eta())
    }
}

#[pyclass(frozen, module = "esdi")]
struct Commodity {
    inner: workload::Commodity,
}

#[pymethods]
impl Commodity {
    #[new]
    #[pyo3(signature = (id, sd, demand, arrival, deadline=None))]
    fn new(id: u64, sd: (NodeId, NodeId), demand: u64, arrival: u64, deadline: Option<u64>) -> PyResult<Self> {
        let inner = workload::Commodity::new(id, to_pair(sd)?, demand, arrival, deadline).map_err(value_err)?;
        Ok(Commodity { inner })
    }

    #[getter]
    fn id(&self) -> u64 {
        self.inner.id
    }

    #[getter]
    fn sd(&self) -> (NodeId, NodeId) {
        (self.inner.sd.lo(), self.inner.sd.hi())
    }

    #[getter]
    fn demand(&self) -> u64 {
        self.inner.demand
    }

    #[getter]
    fn arrival(&self) -> u64 {
        self.inner.arrival
    }

    #[getter]
    fn deadline(&self) -> Option<u64> {
        self.inner.deadline
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!("Commodity(id={}, sd={}, demand={}, arrival={}, deadline={:?})", c.id, c.sd, c.demand, c.arrival, c.deadline)
    }
}

/// Poisson arrivals over the network's SD pairs (all pairs when it has none).
/// Deadlines are proportional to demand when `deadline_mu` is given.
#[pyfunction]
#[pyo3(signature = (
    net, seed=0, arrival_rate=1.0, mean_demand=60.0, min_demand=10, horizon=1000,
    max_commodities=None, deadline_mu=None, deadline_halfwidth=0.1, deadline_factor=1.0,
))]
#[allow(clippy::too_many_arguments)]
fn generate_workload(
    net: &Network,
    seed: u64,
    arrival_rate: f64,
    mean_demand: f64,
    min_demand: u64,
    horizon: u64,
    max_commodities: Option<usize>,
    deadline_mu: Option<f64>,
    deadline_halfwidth: f64,
    deadline_factor: f64,
) -> PyResult<Vec<Commodity>> {
    let deadline = match deadline_mu {
        Some(mu) => DeadlineMode::Proportional { mu, halfwidth: deadline_halfwidth, factor: deadline_factor },
        None => DeadlineMode::None,
    };
    let cfg = WorkloadConfig { arrival_rate, mean_demand, min_demand, deadline, horizon, max_commodities };
    let universe: Vec<NodePair> = if net.inner.sd_pairs().is_empty() {
        workload::sample_sd_universe(&net.inner, None, seed)
    } else {
        net.inner.sd_pairs().iter().copied().collect()
    };
    let list = workload::generate_workload(&cfg, &universe, seed).map_err(value_err)?;
    Ok(list.into_iter().map(|inner| Commodity { inner }).collect())
}

#[pyfunction]
fn solve_max_total(net: &Network) -> PyResult<RateSolution> {
    let inner = mred::solve_max_total(&net.inner, &SolverHandle::default()).map_err(runtime_err)?;
    Ok(RateSolution { inner })
}

#[pyfunction]
fn solve_single_pair_edr(net: &Network, sd: (NodeId, NodeId)) -> PyResult<f64> {
    mred::solve_single_pair_edr(&net.inner, to_pair(sd)?, &SolverHandle::default()).map_err(runtime_err)
}

#[pyfunction]
#[pyo3(signature = (net, priority, work_conserve=true))]
fn solve_lexicographic(net: &Network, priority: Vec<(NodeId, NodeId)>, work_conserve: bool) -> PyResult<RateSolution> {
    let priority = priority.into_iter().map(to_pair).collect::<PyResult<Vec<_>>>()?;
    let inner = mred::solve_lexicographic(&net.inner, &priority, work_conserve, &SolverHandle::default())
        .map_err(runtime_err)?;
    Ok(RateSolution { inner })
}

/// Deadline-constrained plan for `(sd, remaining, slots_left)` demands, or
/// `None` when they cannot all be met.
#[pyfunction]
fn solve_mred_dc(net: &Network, demands: Vec<((NodeId, NodeId), u64, u64)>) -> PyResult<Option<RateSolution>> {
    let demands = demands
        .into_iter()
        .map(|(sd, remaining, slots_left)| Ok(DeadlineDemand { sd: to_pair(sd)?, remaining, slots_left }))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(match mred::solve_mred_dc(&net.inner, &demands, &SolverHandle::default()).map_err(runtime_err)? {
        DcOutcome::Feasible(inner) => Some(RateSolution { inner }),
        DcOutcome::Infeasible => None,
    })
}

/// Constraint residuals of `sol` on `net`, plus `passes` at `tol`.
#[pyfunction]
#[pyo3(signature = (net, sol, tol=1e-6))]
fn check_solution<'py>(py: Python<'py>, net: &Network, sol: &RateSolution, tol: f64) -> PyResult<Bound<'py, PyAny>> {
    let report = mred::check_solution(&net.inner, &sol.inner);
    let out = serialize_to_py(py, &report)?;
    out.set_item("max_residual", report.max_residual())?;
    out.set_item("passes", report.passes(tol))?;
    Ok(out)
}

/// Run one simulation and return its metrics and per-commodity records.
#[pyfunction]
#[pyo3(signature = (net, workload, policy="ESDI-B", kappa=1, seed=0, horizon=None, switching="random"))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    net: &Network,
    workload: Vec<PyRef<'py, Commodity>>,
    policy: &str,
    kappa: usize,
    seed: u64,
    horizon: Option<u64>,
    switching: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let policy: Policy = policy.parse().map_err(value_err)?;
    let switching = match switching {
        "random" => SwitchingRule::Random,
        "balanced" => SwitchingRule::Balanced,
        other => return Err(value_err(format!("unknown switching rule {other:?}"))),
    };
    let cfg = SimConfig {
        policy,
        kappa,
        seed,
        horizon,
        protocol: ProtocolConfig { switching, ..ProtocolConfig::default() },
        ..SimConfig::default()
    };
    let commodities = workload.iter().map(|c| c.inner.clone()).collect();
    let out = py.detach(|| run_simulation(&net.inner, commodities, &cfg)).map_err(runtime_err)?;
    let result = PyDict::new(py);
    result.set_item("metrics", serialize_to_py(py, &out.metrics)?)?;
    let records = PyList::empty(py);
    for r in &out.records {
        let d = serialize_to_py(py, r)?;
        d.set_item("completion_time", r.completion_time())?;
        d.set_item("met_deadline", r.met_deadline())?;
        records.append(d)?;
    }
    result.set_item("records", records)?;
    Ok(result.into_any())
}

#[pymodule]
fn esdi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_class::<RateSolution>()?;
    m.add_class::<Commodity>()?;
    m.add_function(wrap_pyfunction!(generate_workload, m)?)?;
    m.add_function(wrap_pyfunction!(solve_max_total, m)?)?;
    m.add_function(wrap_pyfunction!(solve_single_pair_edr, m)?)?;
    m.add_function(wrap_pyfunction!(solve_lexicographic, m)?)?;
    m.add_function(wrap_pyfunction!(solve_mred_dc, m)?)?;
    m.add_function(wrap_pyfunction!(check_solution, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
