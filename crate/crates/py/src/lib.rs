//! Python module `msmp`: compile model descriptions, load graphs, train,
//! predict and generate synthetic datasets.

use std::path::PathBuf;

use msmp_core::dataset::{infer_schema, load_graph, load_graph_file, HeterogeneousGraph};
use msmp_core::diagnostics::{has_errors, Diagnostic};
use msmp_core::nn::ParameterStore;
use msmp_core::runtime::{CompiledModel, Prediction};
use msmp_core::schema::{export_msmp_dot, parse_model_description};
use msmp_core::training::{self, Metrics, TrainConfig};
use msmp_core::validator::{validate_dataset, validate_semantics};
use msmp_core::zoo::{self, Task, TopologyGenConfig};
use msmp_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

create_exception!(msmp, MsmpError, PyException, "Base class of msmp failures.");
create_exception!(msmp, ModelError, MsmpError, "The model description has error diagnostics.");
create_exception!(msmp, DataError, MsmpError, "A graph sample or dataset is malformed.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidModel(diags) => {
            let lines: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
            ModelError::new_err(lines.join("\n"))
        }
        e @ (Error::Graph { .. } | Error::Dataset(_) | Error::Sample { .. } | Error::EmptyNeighborhood { .. }) => {
            DataError::new_err(e.to_string())
        }
        Error::Config(m) => PyValueError::new_err(m),
        e => MsmpError::new_err(e.to_string()),
    }
}

fn diagnostic_dict<'py>(py: Python<'py>, d: &Diagnostic) -> PyResult<Bound<'py, PyDict>> {
    let dict = PyDict::new(py);
    dict.set_item("severity", d.severity.to_string())?;
    dict.set_item("code", d.code)?;
    dict.set_item("message", &d.message)?;
    dict.set_item("path", &d.path)?;
    dict.set_item("line", d.line)?;
    Ok(dict)
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let dict = PyDict::new(py);
    dict.set_item("loss", m.loss)?;
    dict.set_item("mre", m.mre)?;
    dict.set_item("accuracy", m.accuracy)?;
    dict.set_item("samples", m.samples)?;
    Ok(dict)
}

/// One input graph.
#[pyclass(module = "msmp", frozen)]
struct Graph {
    inner: HeterogeneousGraph,
}

#[pymethods]
impl Graph {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: load_graph(text).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_graph_file(&path).map_err(to_py)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.nodes().len()
    }

    #[getter]
    fn edge_count(&self) -> usize {
        self.inner.edges().len()
    }

    /// Node ids of one entity, in row order.
    fn ids(&self, entity: &str) -> Vec<String> {
        let mut ids: Vec<String> =
            self.inner.nodes().iter().filter(|n| n.entity == entity).map(|n| n.id.clone()).collect();
        ids.sort();
        ids
    }

    fn __repr__(&self) -> String {
        format!("Graph(nodes={}, edges={})", self.node_count(), self.edge_count())
    }
}

/// Named weight tensors.
#[pyclass(module = "msmp")]
struct Parameters {
    inner: ParameterStore,
}

#[pymethods]
impl Parameters {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let path = training::resolve_checkpoint(&path).map_err(to_py)?;
        Ok(Self { inner: ParameterStore::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().cloned().collect()
    }

    /// `(shape, flat values)` of one tensor.
    fn get(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self
            .inner
            .get(name)
            .ok_or_else(|| pyo3::exceptions::PyKeyError::new_err(name.to_string()))?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    #[getter]
    fn scalar_count(&self) -> usize {
        self.inner.scalar_count()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// A validated, compiled model description.
#[pyclass(module = "msmp", frozen)]
struct Model {
    inner: CompiledModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn from_yaml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: CompiledModel::from_yaml(text).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| MsmpError::new_err(format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text)
    }

    /// Warnings left after compilation.
    fn warnings<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let items = self.inner.warnings().iter().map(|d| diagnostic_dict(py, d)).collect::<PyResult<Vec<_>>>()?;
        PyList::new(py, items)
    }

    fn to_yaml(&self) -> String {
        self.inner.model().to_yaml()
    }

    fn to_dot(&self) -> String {
        export_msmp_dot(self.inner.model())
    }

    #[getter]
    fn output_label(&self) -> String {
        self.inner.model().readout.output_label.clone()
    }

    #[pyo3(signature = (seed = 0))]
    fn init_parameters(&self, seed: u64) -> Parameters {
        Parameters { inner: self.inner.init_parameters(seed) }
    }

    /// `{node id: value}` for per-node readouts, a float for global ones.
    fn predict<'py>(&self, py: Python<'py>, params: &Parameters, graph: &Graph) -> PyResult<Bound<'py, PyAny>> {
        self.inner.check_parameters(&params.inner).map_err(to_py)?;
        match self.inner.predict(&params.inner, &graph.inner).map_err(to_py)? {
            Prediction::PerNode(values) => {
                let dict = PyDict::new(py);
                for (id, v) in values {
                    dict.set_item(id, v)?;
                }
                Ok(dict.into_any())
            }
            Prediction::Global(v) => Ok(v.into_pyobject(py)?.into_any()),
        }
    }

    /// Loss, MRE and accuracy over a directory of graph files.
    fn evaluate<'py>(&self, py: Python<'py>, params: &Parameters, data: PathBuf) -> PyResult<Bound<'py, PyDict>> {
        self.inner.check_parameters(&params.inner).map_err(to_py)?;
        let m = py.detach(|| training::evaluate(&self.inner, &params.inner, &data)).map_err(to_py)?;
        metrics_dict(py, &m)
    }

    /// Trains on `<data>/train`; returns final parameters and the epoch log.
    #[pyo3(signature = (data, epochs = 20, learning_rate = 1e-3, group_size = 16, seed = 0, checkpoint_dir = None))]
    fn train<'py>(
        &self,
        py: Python<'py>,
        data: PathBuf,
        epochs: usize,
        learning_rate: f64,
        group_size: usize,
        seed: u64,
        checkpoint_dir: Option<PathBuf>,
    ) -> PyResult<(Parameters, Bound<'py, PyList>)> {
        let config = TrainConfig {
            epochs,
            learning_rate,
            group_size,
            seed,
            checkpoint_dir,
            ..TrainConfig::default()
        };
        let report = py.detach(|| training::train(&self.inner, &data, &config)).map_err(to_py)?;
        let log = report
            .log
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("epoch", e.epoch)?;
                d.set_item("train_loss", e.train_loss)?;
                d.set_item("val_loss", e.val_loss)?;
                d.set_item("val_mre", e.val_mre)?;
                d.set_item("val_accuracy", e.val_accuracy)?;
                d.set_item("wall_ms", e.wall_ms)?;
                Ok(d)
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok((Parameters { inner: report.params }, PyList::new(py, log)?))
    }
}

/// Every diagnostic for a model description, optionally checked against a
/// dataset directory.
#[pyfunction]
#[pyo3(signature = (yaml, data = None))]
fn validate<'py>(py: Python<'py>, yaml: &str, data: Option<PathBuf>) -> PyResult<Bound<'py, PyList>> {
    let diags = match parse_model_description(yaml) {
        Ok(model) => {
            let mut d = validate_semantics(&model);
            if let (Some(dir), false) = (data, has_errors(&d)) {
                d.extend(validate_dataset(&model, &infer_schema(&dir).map_err(to_py)?));
            }
            d
        }
        Err(d) => d,
    };
    let items = diags.iter().map(|d| diagnostic_dict(py, d)).collect::<PyResult<Vec<_>>>()?;
    PyList::new(py, items)
}

/// Writes `train/`, `validation/` and `manifest.json` under `out`.
#[pyfunction]
#[pyo3(signature = (task, out, count = 100, seed = 0, nodes = None, validation_nodes = None))]
fn generate(
    py: Python<'_>,
    task: &str,
    out: PathBuf,
    count: usize,
    seed: u64,
    nodes: Option<(usize, usize)>,
    validation_nodes: Option<(usize, usize)>,
) -> PyResult<(usize, usize)> {
    let task: Task = task.parse().map_err(|e: Error| PyValueError::new_err(e.to_string()))?;
    let mut config = TopologyGenConfig::new(task);
    config.count = count;
    config.seed = seed;
    if let Some(n) = nodes {
        config.nodes = n;
    }
    config.validation_nodes = validation_nodes;
    let summary = py.detach(|| zoo::generate(&config, &out)).map_err(to_py)?;
    Ok((summary.train, summary.validation))
}

/// YAML text of a shipped model: `routenet`, `gqnn` or `shortest_path`.
#[pyfunction]
fn shipped_model(name: &str) -> PyResult<&'static str> {
    zoo::shipped_models()
        .into_iter()
        .find(|(n, _)| n.trim_end_matches(".yaml") == name)
        .map(|(_, text)| text)
        .ok_or_else(|| PyValueError::new_err(format!("no shipped model '{name}'")))
}

#[pymodule]
pub fn msmp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("MsmpError", py.get_type::<MsmpError>())?;
    m.add("ModelError", py.get_type::<ModelError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add_class::<Model>()?;
    m.add_class::<Graph>()?;
    m.add_class::<Parameters>()?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(shipped_model, m)?)?;
    Ok(())
}
