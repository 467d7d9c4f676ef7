//! Python bindings: graphs, edge splits, training, metrics and the benchmark runner.

use std::path::PathBuf;

use graphae::bench::{self, DatasetPaths, RunSpec, Task};
use graphae::metrics::{self, KMeansOptions};
use graphae::model::{KlScale, ModelKind};
use graphae::split::Pair;
use graphae::trainer::{self, NodeSampling, TrainConfig, Validation};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: graphae::Error) -> PyErr {
    match e {
        graphae::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse<T: std::str::FromStr>(what: &str, s: &str) -> PyResult<T> {
    s.parse().map_err(|_| PyValueError::new_err(format!("unknown {what} '{s}'")))
}

fn kl_scale(s: &str) -> PyResult<KlScale> {
    match s {
        "per_entry" => Ok(KlScale::PerEntry),
        "per_node" => Ok(KlScale::PerNode),
        _ => Err(PyValueError::new_err(format!("unknown kl_scale '{s}'"))),
    }
}

fn sampling(n: Option<usize>) -> NodeSampling {
    match n {
        None => NodeSampling::Auto,
        Some(0) => NodeSampling::Off,
        Some(k) => NodeSampling::Nodes(k),
    }
}

/// Undirected simple graph with optional node features and labels.
#[pyclass(name = "Graph", module = "graphae_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyGraph {
    inner: graphae::Graph,
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (n, edges, features=None, labels=None))]
    fn new(n: usize, edges: Vec<(usize, usize)>, features: Option<Vec<Vec<f64>>>, labels: Option<Vec<usize>>) -> PyResult<Self> {
        let mut g = graphae::Graph::from_edges(n, edges).map_err(py_err)?;
        if let Some(x) = features {
            g = g.with_features(to_array(x)?).map_err(py_err)?;
        }
        if let Some(l) = labels {
            g = g.with_labels(l).map_err(py_err)?;
        }
        Ok(Self { inner: g })
    }

    /// Reads an edge list plus optional feature and label files.
    #[staticmethod]
    #[pyo3(signature = (edges, features=None, labels=None, row_normalize=false))]
    fn load(edges: PathBuf, features: Option<PathBuf>, labels: Option<PathBuf>, row_normalize: bool) -> PyResult<Self> {
        let paths = DatasetPaths { edges, features, labels };
        Ok(Self {
            inner: bench::load_dataset(&paths, row_normalize).map_err(py_err)?,
        })
    }

    /// Stochastic block model with contiguous equal-size blocks.
    #[staticmethod]
    #[pyo3(signature = (n, blocks, p_in, p_out, seed=0))]
    fn sbm(n: usize, blocks: usize, p_in: f64, p_out: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::make_sbm(n, blocks, p_in, p_out, seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn edges(&self) -> Vec<Pair> {
        self.inner.edges().to_vec()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels().map(<[usize]>::to_vec)
    }

    #[getter]
    fn node_ids(&self) -> Vec<String> {
        self.inner.node_ids().to_vec()
    }

    fn has_edge(&self, u: usize, v: usize) -> bool {
        self.inner.has_edge(u, v)
    }

    fn degree(&self, u: usize) -> PyResult<usize> {
        if u >= self.inner.n() {
            return Err(PyValueError::new_err(format!("node {u} out of range")));
        }
        Ok(self.inner.degree(u))
    }

    fn __repr__(&self) -> String {
        format!("Graph(n={}, m={})", self.inner.n(), self.inner.m())
    }
}

/// Held-out positive and negative pairs plus the training graph.
#[pyclass(name = "EdgeSplit", module = "graphae_py")]
pub struct PyEdgeSplit {
    inner: graphae::EdgeSplit,
}

#[pymethods]
impl PyEdgeSplit {
    #[getter]
    fn train_graph(&self) -> PyGraph {
        PyGraph {
            inner: self.inner.train_graph.clone(),
        }
    }

    #[getter]
    fn val_pos(&self) -> Vec<Pair> {
        self.inner.val_pos.clone()
    }

    #[getter]
    fn val_neg(&self) -> Vec<Pair> {
        self.inner.val_neg.clone()
    }

    #[getter]
    fn test_pos(&self) -> Vec<Pair> {
        self.inner.test_pos.clone()
    }

    #[getter]
    fn test_neg(&self) -> Vec<Pair> {
        self.inner.test_neg.clone()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "EdgeSplit(train_m={}, val={}, test={})",
            self.inner.train_graph.m(),
            self.inner.val_pos.len(),
            self.inner.test_pos.len()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (graph, val_frac=0.05, test_frac=0.10, seed=0))]
fn split_edges(graph: &PyGraph, val_frac: f64, test_frac: f64, seed: u64) -> PyResult<PyEdgeSplit> {
    Ok(PyEdgeSplit {
        inner: graphae::split::split_edges(&graph.inner, val_frac, test_frac, seed).map_err(py_err)?,
    })
}

/// Outcome of one training run.
#[pyclass(name = "TrainResult", module = "graphae_py")]
pub struct PyTrainResult {
    inner: graphae::TrainRecord,
}

#[pymethods]
impl PyTrainResult {
    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.inner.losses.clone()
    }

    #[getter]
    fn kl(&self) -> Vec<f64> {
        self.inner.kl.clone()
    }

    #[getter]
    fn val_auc(&self) -> Vec<(usize, f64)> {
        self.inner.val_auc.clone()
    }

    #[getter]
    fn embedding(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.embedding())
    }

    #[getter]
    fn wallclock_s(&self) -> f64 {
        self.inner.wallclock_s
    }

    /// Decoder probabilities `sigmoid(z_u · z_v)` for the given pairs.
    fn scores(&self, pairs: Vec<Pair>) -> PyResult<Vec<f64>> {
        let z = self.inner.embedding();
        pairs
            .iter()
            .map(|&(u, v)| {
                if u >= z.nrows() || v >= z.nrows() {
                    return Err(PyValueError::new_err(format!("pair ({u}, {v}) out of range")));
                }
                let x = z.row(u).dot(&z.row(v));
                Ok(1.0 / (1.0 + (-x).exp()))
            })
            .collect()
    }

    fn save_params(&self, path: PathBuf) -> PyResult<()> {
        self.inner.params.save(path).map_err(py_err)
    }

    fn history_csv(&self) -> String {
        self.inner.history_csv()
    }
}

#[allow(clippy::too_many_arguments)]
fn config(
    model: &str,
    dim: usize,
    hidden: usize,
    layers: usize,
    lr: f64,
    epochs: usize,
    seed: u64,
    sample_nodes: Option<usize>,
    reweight: bool,
    khop_alpha: Option<f64>,
    use_features: bool,
    kl: &str,
) -> PyResult<TrainConfig> {
    Ok(TrainConfig {
        dim,
        hidden,
        layers,
        lr,
        epochs,
        seed,
        sample_nodes: sampling(sample_nodes),
        reweight,
        khop_alpha,
        use_features,
        kl_scale: kl_scale(kl)?,
        ..TrainConfig::new(parse::<ModelKind>("model", model)?)
    })
}

/// Trains one model. `sample_nodes=None` picks automatically, `0` disables sampling.
#[pyfunction]
#[pyo3(signature = (
    graph, model="gcn_ae", dim=16, hidden=32, layers=2, lr=0.01, epochs=200, seed=42,
    sample_nodes=None, reweight=true, khop_alpha=None, use_features=false, kl_scale="per_entry",
    val_pos=None, val_neg=None,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    graph: &PyGraph,
    model: &str,
    dim: usize,
    hidden: usize,
    layers: usize,
    lr: f64,
    epochs: usize,
    seed: u64,
    sample_nodes: Option<usize>,
    reweight: bool,
    khop_alpha: Option<f64>,
    use_features: bool,
    kl_scale: &str,
    val_pos: Option<Vec<Pair>>,
    val_neg: Option<Vec<Pair>>,
) -> PyResult<PyTrainResult> {
    let cfg = config(model, dim, hidden, layers, lr, epochs, seed, sample_nodes, reweight, khop_alpha, use_features, kl_scale)?;
    let g = &graph.inner;
    let record = py.detach(|| match (&val_pos, &val_neg) {
        (Some(pos), Some(neg)) => trainer::train_with_validation(g, &cfg, Some(Validation { pos, neg })),
        _ => trainer::train(g, &cfg),
    });
    Ok(PyTrainResult {
        inner: record.map_err(py_err)?,
    })
}

/// Runs the repeated-seed benchmark and returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (
    graph, model="gcn_ae", task="link_prediction", runs=10, epochs=200, seed=42, dim=16, hidden=32,
    layers=2, lr=0.01, sample_nodes=None, reweight=true, khop_alpha=None, use_features=false,
    kl_scale="per_entry", jobs=1, dataset="graph",
))]
#[allow(clippy::too_many_arguments)]
fn run_benchmark(
    py: Python<'_>,
    graph: &PyGraph,
    model: &str,
    task: &str,
    runs: usize,
    epochs: usize,
    seed: u64,
    dim: usize,
    hidden: usize,
    layers: usize,
    lr: f64,
    sample_nodes: Option<usize>,
    reweight: bool,
    khop_alpha: Option<f64>,
    use_features: bool,
    kl_scale: &str,
    jobs: usize,
    dataset: &str,
) -> PyResult<String> {
    let task = match task {
        "link_prediction" => Task::LinkPrediction,
        "node_clustering" => Task::NodeClustering,
        _ => return Err(PyValueError::new_err(format!("unknown task '{task}'"))),
    };
    let cfg = config(model, dim, hidden, layers, lr, epochs, seed, sample_nodes, reweight, khop_alpha, use_features, kl_scale)?;
    let spec = RunSpec {
        runs,
        jobs,
        ..RunSpec::new(dataset, task, cfg)
    };
    let g = &graph.inner;
    let report = py.detach(|| bench::run(g, &spec)).map_err(py_err)?;
    report.to_json().map_err(py_err)
}

#[pyfunction]
fn roc_auc(pos: Vec<f64>, neg: Vec<f64>) -> PyResult<f64> {
    metrics::roc_auc(&pos, &neg).map_err(py_err)
}

#[pyfunction]
fn average_precision(pos: Vec<f64>, neg: Vec<f64>) -> PyResult<f64> {
    metrics::average_precision(&pos, &neg).map_err(py_err)
}

#[pyfunction]
fn ami(labels_a: Vec<usize>, labels_b: Vec<usize>) -> PyResult<f64> {
    metrics::ami(&labels_a, &labels_b).map_err(py_err)
}

/// k-means++ with restarts; returns `(labels, inertia)`.
#[pyfunction]
#[pyo3(signature = (x, k, seed=0, restarts=10, max_iter=300, tol=1e-6))]
fn kmeans(x: Vec<Vec<f64>>, k: usize, seed: u64, restarts: usize, max_iter: usize, tol: f64) -> PyResult<(Vec<usize>, f64)> {
    let opts = KMeansOptions { restarts, max_iter, tol };
    let res = metrics::kmeans(&to_array(x)?, k, &opts, seed).map_err(py_err)?;
    Ok((res.labels, res.inertia))
}

#[pymodule]
fn graphae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyEdgeSplit>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(split_edges, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(ami, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    Ok(())
}
