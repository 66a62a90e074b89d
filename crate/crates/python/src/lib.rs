//! Python bindings. Structured results cross the boundary as plain
//! dicts and lists built from the engine's JSON serialization.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use sketchql::adaptation::{correction_signature, Feedback};
use sketchql::decomposer::{decompose as decompose_sql, recompose, reformat_to_cte as reformat};
use sketchql::model::ScriptedModel;
use sketchql::pipeline::{Engine as CoreEngine, PipelineConfig};
use sketchql::sample_data::sports_database;

create_exception!(sketchql_py, SketchqlError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    SketchqlError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

/// Decomposed query: named CTE bundles plus the final SELECT.
#[pyclass(frozen)]
struct QuerySketch(sketchql::decomposer::QuerySketch);

#[pymethods]
impl QuerySketch {
    #[getter]
    fn cte_names(&self) -> Vec<String> {
        self.0.cte_names().map(str::to_string).collect()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    #[staticmethod]
    fn from_dict(py: Python<'_>, d: &Bound<'_, PyDict>) -> PyResult<Self> {
        Ok(QuerySketch(from_py(py, d.as_any())?))
    }

    fn recompose(&self) -> PyResult<String> {
        recompose(&self.0).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.ctes.len()
    }

    fn __repr__(&self) -> String {
        format!("QuerySketch(ctes={:?})", self.cte_names())
    }
}

/// Rewrite a query so every uncorrelated derived table becomes a CTE.
#[pyfunction]
fn reformat_to_cte(sql: &str) -> PyResult<String> {
    reformat(sql).map_err(err)
}

/// Reformat then decompose.
#[pyfunction]
fn decompose(sql: &str) -> PyResult<QuerySketch> {
    let cte = reformat(sql).map_err(err)?;
    decompose_sql(&cte).map(QuerySketch).map_err(err)
}

/// Canonical text used to compare queries.
#[pyfunction]
fn normalize(sql: &str) -> PyResult<String> {
    sketchql::sql::normalize(sql).map_err(err)
}

/// Token-level pattern of a correction, or None when nothing changed.
#[pyfunction]
fn correction_pattern(original: &str, corrected: &str) -> Option<String> {
    correction_signature(original, corrected)
}

#[pyclass(frozen)]
struct Engine(Arc<CoreEngine>);

#[pymethods]
impl Engine {
    /// Open from a TOML configuration file.
    #[new]
    fn new(py: Python<'_>, config_path: PathBuf) -> PyResult<Self> {
        py.detach(|| {
            let config = PipelineConfig::load(&config_path)?;
            CoreEngine::open(config)
        })
        .map(|e| Engine(Arc::new(e)))
        .map_err(err)
    }

    /// Engine over the bundled sports sample data with a scripted model.
    #[staticmethod]
    fn with_sample_data(py: Python<'_>, knowledge_dir: PathBuf, script: PathBuf) -> PyResult<Self> {
        py.detach(|| -> Result<CoreEngine, String> {
            let model = ScriptedModel::from_file(&script).map_err(|e| e.to_string())?;
            let config = PipelineConfig {
                knowledge_dir,
                ..Default::default()
            };
            let db = sports_database().map_err(|e| e.to_string())?;
            CoreEngine::with_parts(config, Arc::new(model), db).map_err(|e| e.to_string())
        })
        .map(|e| Engine(Arc::new(e)))
        .map_err(err)
    }

    #[pyo3(signature = (logs=None, docs=None, schema=None))]
    fn preprocess<'py>(
        &self,
        py: Python<'py>,
        logs: Option<PathBuf>,
        docs: Option<PathBuf>,
        schema: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let engine = Arc::clone(&self.0);
        let report = py
            .detach(move || engine.run_preprocess(logs.as_deref(), docs.as_deref(), schema.as_deref()))
            .map_err(err)?;
        to_py(py, &report)
    }

    fn query<'py>(&self, py: Python<'py>, nl: String) -> PyResult<Bound<'py, PyAny>> {
        let engine = Arc::clone(&self.0);
        let response = py.detach(move || engine.run_query(&nl));
        to_py(py, &response)
    }

    /// `verdict` is "accept" or "reject".
    #[pyo3(signature = (request_id, verdict, corrected_sql=None))]
    fn feedback<'py>(
        &self,
        py: Python<'py>,
        request_id: String,
        verdict: &str,
        corrected_sql: Option<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let fb = match verdict {
            "accept" if corrected_sql.is_none() => Feedback::accept(request_id),
            "accept" => return Err(err("corrected_sql is only valid with reject")),
            "reject" => Feedback::reject(request_id, corrected_sql),
            other => return Err(err(format!("unknown verdict {other:?}"))),
        };
        let engine = Arc::clone(&self.0);
        let outcome = py.detach(move || engine.submit_feedback(&fb)).map_err(err)?;
        to_py(py, &outcome)
    }

    fn request<'py>(&self, py: Python<'py>, request_id: &str) -> PyResult<Bound<'py, PyAny>> {
        let record = self.0.request(request_id).map_err(err)?;
        to_py(py, &record)
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.summary())
    }

    #[getter]
    fn version(&self) -> u64 {
        self.0.summary().version
    }
}

#[pymodule]
fn sketchql_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SketchqlError", m.py().get_type::<SketchqlError>())?;
    m.add_class::<Engine>()?;
    m.add_class::<QuerySketch>()?;
    m.add_function(wrap_pyfunction!(reformat_to_cte, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(correction_pattern, m)?)?;
    Ok(())
}
