//! Python bindings. Structured payloads cross the boundary as JSON and
//! arrive in Python as plain dicts and lists.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::de::DeserializeOwned;
use serde::Serialize;

use pslab_core::api::{
    self, ExperimentRequest, FitMapRequest, ForwardRequest, GridRequest, PatchscopeRequest, RunRequest, TokenizeRequest,
    TrainJob,
};
use pslab_core::fixtures::Fixtures;
use pslab_core::patchscope::PairOptions;
use pslab_core::zoo::{self, RougeVariant};
use pslab_core::{forward, generate, load_model, Error, ForwardOptions, GenerateOptions, ModelBundle, PatchPlan, Vector};

fn to_py_err(e: Error) -> PyErr {
    let body = api::ApiError::from(&e);
    match e {
        Error::Io { .. } | Error::MissingFixture(_) => PyIOError::new_err(body.message),
        Error::Solver(_) | Error::Diverged { .. } | Error::Cancelled => PyRuntimeError::new_err(body.message),
        _ => PyValueError::new_err(body.message),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let json = PyModule::import(py, "json")?;
    Ok(json.call_method1("loads", (text,))?.unbind())
}

/// Accepts a JSON string or any JSON-serialisable Python object.
fn from_py<T: DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = match value.extract::<String>() {
        Ok(s) => s,
        Err(_) => PyModule::import(py, "json")?.call_method1("dumps", (value,))?.extract()?,
    };
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("invalid request: {e}")))
}

/// A loaded model with direct access to its hidden states.
#[pyclass(frozen)]
struct Model {
    inner: Arc<ModelBundle>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(load_model(&path).map_err(to_py_err)?),
        })
    }

    #[getter]
    fn model_id(&self) -> String {
        self.inner.model_id().to_string()
    }

    #[getter]
    fn checksum(&self) -> u32 {
        self.inner.checksum()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model()
    }

    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.config())
    }

    /// `<bos>` followed by the prompt's token ids.
    fn encode(&self, text: &str) -> Vec<usize> {
        self.inner.encode_prompt(text)
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        self.inner.detokenize(&ids)
    }

    /// `states[l][i]`: the residual stream after block `l` at position `i`.
    fn hidden_states(&self, text: &str) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let ids = self.inner.encode_prompt(text);
        let trace = forward(&self.inner, &ids, &ForwardOptions::default()).map_err(to_py_err)?;
        Ok((0..=self.inner.n_layers())
            .map(|l| (0..ids.len()).map(|i| trace.state_vector(l, i).0).collect())
            .collect())
    }

    /// Next-token distribution after the whole prompt.
    fn next_token_probs(&self, text: &str) -> PyResult<Vec<f64>> {
        let ids = self.inner.encode_prompt(text);
        let trace = forward(&self.inner, &ids, &ForwardOptions::default()).map_err(to_py_err)?;
        Ok(trace.distribution(ids.len() - 1).probs.0)
    }

    /// Greedy continuation, optionally with `value` written at `(layer, position)`.
    #[pyo3(signature = (text, max_new, patch=None))]
    fn generate(&self, text: &str, max_new: usize, patch: Option<(usize, usize, Vec<f64>)>) -> PyResult<String> {
        let ids = self.inner.encode_prompt(text);
        let opts = match patch {
            Some((layer, position, value)) => GenerateOptions::with_plan(PatchPlan::empty().patch(layer, position, Vector(value))),
            None => GenerateOptions::default(),
        };
        let out = generate(&self.inner, &ids, max_new, &opts).map_err(to_py_err)?;
        Ok(self.inner.detokenize(&out.new_tokens))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(id={:?}, layers={}, d_model={}, checksum={:08x})",
            self.inner.model_id(),
            self.inner.n_layers(),
            self.inner.d_model(),
            self.inner.checksum()
        )
    }
}

/// Registry, mapping cache and fixture directory; the same operations the
/// command line and HTTP service expose.
#[pyclass(frozen)]
struct Lab {
    inner: api::Lab,
}

#[pymethods]
impl Lab {
    #[new]
    #[pyo3(signature = (model_dirs=Vec::new(), fixtures=None, seed=0))]
    fn new(model_dirs: Vec<PathBuf>, fixtures: Option<PathBuf>, seed: u64) -> PyResult<Self> {
        let inner = api::Lab::open(&model_dirs, fixtures.as_deref()).map_err(to_py_err)?;
        Ok(Self {
            inner: inner.with_default_seed(seed),
        })
    }

    fn models(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.models())
    }

    fn model(&self, model_id: &str) -> PyResult<Model> {
        let inner = self.inner.registry().get(model_id).map_err(to_py_err)?;
        Ok(Model { inner: Arc::clone(inner) })
    }

    fn tokenize(&self, py: Python<'_>, model: String, text: String) -> PyResult<Py<PyAny>> {
        let out = self.inner.tokenize(&TokenizeRequest { model, text }).map_err(to_py_err)?;
        to_py(py, &out)
    }

    #[pyo3(signature = (model, text, topk=5))]
    fn forward(&self, py: Python<'_>, model: String, text: String, topk: usize) -> PyResult<Py<PyAny>> {
        let out = self.inner.forward(&ForwardRequest { model, text, topk }).map_err(to_py_err)?;
        to_py(py, &out)
    }

    #[pyo3(signature = (model, prompt, max_new=0))]
    fn run(&self, py: Python<'_>, model: String, prompt: String, max_new: usize) -> PyResult<Py<PyAny>> {
        let out = self.inner.run(&RunRequest { model, prompt, max_new }).map_err(to_py_err)?;
        to_py(py, &out)
    }

    /// Runs a Patchscope configuration (dict or JSON string).
    fn patchscope(&self, py: Python<'_>, config: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let req: PatchscopeRequest = from_py(py, config)?;
        let out = self.inner.patchscope(&req, None).map_err(to_py_err)?;
        to_py(py, &out)
    }

    fn grid(&self, py: Python<'_>, spec: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let req: GridRequest = from_py(py, spec)?;
        let out = self.inner.grid(&req, None).map_err(to_py_err)?;
        to_py(py, &out)
    }

    #[pyo3(signature = (name, spec=None))]
    fn experiment(&self, py: Python<'_>, name: &str, spec: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
        let req: ExperimentRequest = match spec {
            Some(s) => from_py(py, s)?,
            None => ExperimentRequest::default(),
        };
        let out = self.inner.experiment(name, &req).map_err(to_py_err)?;
        to_py(py, &out)
    }

    #[pyo3(signature = (source_model, target_model, layer, target_layer, corpus, ridge=1e-6))]
    #[allow(clippy::too_many_arguments)]
    fn fit_map(
        &self,
        py: Python<'_>,
        source_model: String,
        target_model: String,
        layer: usize,
        target_layer: usize,
        corpus: Vec<String>,
        ridge: f64,
    ) -> PyResult<Py<PyAny>> {
        let req = FitMapRequest {
            source_model,
            target_model,
            layer,
            target_layer,
            corpus,
            pairs: PairOptions::default(),
            ridge,
        };
        let out = self.inner.fit_map(&req).map_err(to_py_err)?;
        to_py(py, &out)
    }
}

/// Builds the three fixture models in `dir` (or loads them if current) and
/// returns `{model_id: checksum}`.
#[pyfunction]
fn ensure_fixtures(dir: PathBuf) -> PyResult<Vec<(String, u32)>> {
    let fx = Fixtures::ensure(&dir).map_err(to_py_err)?;
    Ok(fx.models().iter().map(|m| (m.model_id().to_string(), m.checksum())).collect())
}

/// Trains a model on `lines` with a job description and writes it to `out`.
#[pyfunction]
fn train(py: Python<'_>, lines: Vec<String>, job: &Bound<'_, PyAny>, out: PathBuf) -> PyResult<Py<PyAny>> {
    let job: TrainJob = from_py(py, job)?;
    let summary = api::train_job(&lines, &job, &out).map_err(to_py_err)?;
    to_py(py, &summary)
}

#[pyfunction]
#[pyo3(signature = (candidate, reference, variant="rougeL"))]
fn rouge(candidate: &str, reference: &str, variant: &str) -> PyResult<(f64, f64, f64)> {
    let v = match variant {
        "rouge1" => RougeVariant::Rouge1,
        "rougeL" => RougeVariant::RougeL,
        other => return Err(PyValueError::new_err(format!("unknown variant {other:?}"))),
    };
    let s = zoo::rouge(candidate, reference, v);
    Ok((s.precision, s.recall, s.f1))
}

#[pymodule]
fn pslab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Lab>()?;
    m.add_function(wrap_pyfunction!(ensure_fixtures, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(rouge, m)?)?;
    m.add("EXPERIMENTS", zoo::EXPERIMENTS.to_vec())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
