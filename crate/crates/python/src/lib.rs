//! Python bindings: profiles, the cost model and planner, in-memory ring
//! collectives, the simulator, and the validation suites.

use gsync::backends::sim::{sim_run, sim_sweep, SimOptions};
use gsync::collectives::{exchange_in_memory, CollectiveKind, ReduceOp};
use gsync::cost::{self, ClusterConfig, ParallelismPlan};
use gsync::profile::{load_profile, ModelProfile, Precision};
use gsync::validate::{run_all, ValidateOptions};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_kind(s: &str) -> PyResult<CollectiveKind> {
    Ok(match s {
        "allreduce" => CollectiveKind::Allreduce,
        "reduce_scatter" => CollectiveKind::ReduceScatter,
        "allgather" => CollectiveKind::Allgather,
        "broadcast" => CollectiveKind::Broadcast,
        _ => return Err(err(format!("unknown collective '{s}'"))),
    })
}

fn parse_op(s: &str) -> PyResult<ReduceOp> {
    Ok(match s {
        "sum" => ReduceOp::Sum,
        "max" => ReduceOp::Max,
        "min" => ReduceOp::Min,
        _ => return Err(err(format!("unknown reduction '{s}'"))),
    })
}

#[pyclass(name = "Profile", frozen)]
struct PyProfile(ModelProfile);

#[pymethods]
impl PyProfile {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_profile(path).map(PyProfile).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        ModelProfile::from_json_str(text).map(PyProfile).map_err(err)
    }

    fn to_json(&self) -> String {
        self.0.to_json_string()
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn default_minibatch(&self) -> u64 {
        self.0.default_minibatch
    }

    #[getter]
    fn total_params(&self) -> u64 {
        self.0.total_params()
    }

    fn layer_names(&self) -> Vec<String> {
        self.0.layers.iter().map(|l| l.name.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.0.layers.len()
    }

    fn __repr__(&self) -> String {
        format!("Profile({:?}, layers={}, params={})", self.0.name, self.0.layers.len(), self.0.total_params())
    }
}

#[pyclass(name = "Cluster", from_py_object)]
#[derive(Clone)]
struct PyCluster(ClusterConfig);

#[pymethods]
impl PyCluster {
    #[new]
    #[pyo3(signature = (world, alpha=5e-6, beta=1.25e9, gamma=3e12, eta=0.9, wire="fp32"))]
    fn new(world: usize, alpha: f64, beta: f64, gamma: f64, eta: f64, wire: &str) -> PyResult<Self> {
        let c = ClusterConfig {
            world,
            alpha,
            beta,
            gamma,
            eta,
            wire: wire.parse::<Precision>().map_err(err)?,
        };
        c.validate().map_err(err)?;
        Ok(PyCluster(c))
    }

    #[staticmethod]
    fn ethernet_10g(world: usize) -> Self {
        PyCluster(ClusterConfig::ethernet_10g(world))
    }

    #[staticmethod]
    fn fabric_100g(world: usize) -> Self {
        PyCluster(ClusterConfig::fabric_100g(world))
    }

    fn with_world(&self, world: usize) -> Self {
        PyCluster(self.0.with_world(world))
    }

    #[getter]
    fn world(&self) -> usize {
        self.0.world
    }
    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }
    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }
    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }
    #[getter]
    fn eta(&self) -> f64 {
        self.0.eta
    }

    fn __repr__(&self) -> String {
        let c = &self.0;
        format!("Cluster(world={}, alpha={:e}, beta={:e}, gamma={:e}, eta={})", c.world, c.alpha, c.beta, c.gamma, c.eta)
    }
}

fn plan_for(p: &ModelProfile, group_sizes: Option<Vec<usize>>) -> PyResult<ParallelismPlan> {
    match group_sizes {
        None => Ok(ParallelismPlan::uniform(p, 1)),
        Some(g) => ParallelismPlan::from_group_sizes(p, &g).map_err(err),
    }
}

/// Per-layer group sizes (one per parameterized layer) chosen by the planner.
#[pyfunction]
#[pyo3(signature = (profile, cluster, mb=None))]
fn select_plan(profile: &PyProfile, cluster: &PyCluster, mb: Option<u64>) -> PyResult<Vec<usize>> {
    let mb = mb.unwrap_or(profile.0.default_minibatch);
    let plan = cost::select_plan(&profile.0, &cluster.0, mb, &cost::divisors(cluster.0.world)).map_err(err)?;
    Ok(plan.layers.iter().map(|l| l.group_size).collect())
}

/// Returns `(total_s, compute_s, exposed_s)`.
#[pyfunction]
#[pyo3(signature = (profile, cluster, mb=None, group_sizes=None))]
fn estimate_iteration_time(
    profile: &PyProfile,
    cluster: &PyCluster,
    mb: Option<u64>,
    group_sizes: Option<Vec<usize>>,
) -> PyResult<(f64, f64, f64)> {
    let mb = mb.unwrap_or(profile.0.default_minibatch);
    let plan = plan_for(&profile.0, group_sizes)?;
    let e = cost::estimate_iteration_time(&profile.0, &plan, &cluster.0, mb).map_err(err)?;
    Ok((e.total_s, e.compute_s, e.exposed_s()))
}

#[pyfunction]
fn estimate_collective_time(kind: &str, nbytes: f64, n: usize, cluster: &PyCluster) -> PyResult<f64> {
    Ok(cost::estimate_collective_time(parse_kind(kind)?, nbytes, n, &cluster.0))
}

/// Runs a chunked ring collective in memory. Returns the per-member outputs
/// and the largest partial-sum magnitude placed on a lossy wire.
#[pyfunction]
#[pyo3(signature = (inputs, kind="allreduce", op="sum", wire="fp32", chunk_bytes=65536))]
fn collective(
    inputs: Vec<Vec<f32>>,
    kind: &str,
    op: &str,
    wire: &str,
    chunk_bytes: usize,
) -> PyResult<(Vec<Vec<f32>>, f32)> {
    let wire = wire.parse::<Precision>().map_err(err)?;
    let out = exchange_in_memory(parse_kind(kind)?, inputs, parse_op(op)?, wire, chunk_bytes).map_err(err)?;
    Ok((out.outputs, out.max_partial_abs))
}

/// Simulates `iterations` training iterations and returns summary metrics.
#[pyfunction]
#[pyo3(signature = (profile, cluster, mb=None, iterations=3, seed=0, prioritize=true, quantize=false, group_sizes=None))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    profile: &PyProfile,
    cluster: &PyCluster,
    mb: Option<u64>,
    iterations: usize,
    seed: u64,
    prioritize: bool,
    quantize: bool,
    group_sizes: Option<Vec<usize>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mb = mb.unwrap_or(profile.0.default_minibatch);
    let plan = plan_for(&profile.0, group_sizes)?;
    let opts = SimOptions {
        prioritize,
        quantize,
        ..SimOptions::default()
    };
    let m = sim_run(&profile.0, &plan, &cluster.0, mb, iterations, seed, &opts).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("world", m.world)?;
    d.set_item("iteration_s", m.iteration_s)?;
    d.set_item("exposed_comm_s", m.exposed_comm_s)?;
    d.set_item("link_utilization", m.link_utilization)?;
    d.set_item("wire_bytes_per_iteration", m.wire_bytes_per_iteration)?;
    d.set_item("preemptions", m.preemptions)?;
    d.set_item("makespan_s", m.makespan_s)?;
    d.set_item("csv", m.to_csv())?;
    Ok(d)
}

/// Weak-scaling sweep in the simulator. Returns `(P, iter_time_s, efficiency)` rows.
#[pyfunction]
#[pyo3(signature = (profile, cluster, worlds, mb=None, iterations=3, seed=0, prioritize=true))]
fn sweep(
    profile: &PyProfile,
    cluster: &PyCluster,
    worlds: Vec<usize>,
    mb: Option<u64>,
    iterations: usize,
    seed: u64,
    prioritize: bool,
) -> PyResult<Vec<(usize, f64, f64)>> {
    let mb = mb.unwrap_or(profile.0.default_minibatch);
    let opts = SimOptions {
        prioritize,
        ..SimOptions::default()
    };
    let rows = sim_sweep(&profile.0, &cluster.0, mb, &worlds, iterations, seed, &opts).map_err(err)?;
    Ok(rows.into_iter().map(|r| (r.world, r.iter_time_s, r.efficiency)).collect())
}

/// Runs every validation suite. Returns `(suite, passed, verdict)` rows.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn validate(seed: u64) -> Vec<(String, bool, String)> {
    run_all(&ValidateOptions { inject_fault: false, seed })
        .into_iter()
        .map(|s| (s.suite.to_string(), s.passed(), s.verdict()))
        .collect()
}

#[pymodule]
fn _gsync(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProfile>()?;
    m.add_class::<PyCluster>()?;
    m.add_function(wrap_pyfunction!(select_plan, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_iteration_time, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_collective_time, m)?)?;
    m.add_function(wrap_pyfunction!(collective, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    Ok(())
}
