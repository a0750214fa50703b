//! Python bindings for the concept-injection engine: config parsing,
//! benchmark generation and persistence, full experiment runs, checkpoint
//! re-scoring, and report access.

use std::path::Path;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList, PyString};

use noinject_core::config::RunConfig;
use noinject_core::continual::{evaluate_checkpoint as core_eval_checkpoint, run_experiment};
use noinject_core::eval::MetricsReport;
use noinject_core::synthworld::{
    generate_benchmark, load_benchmark, save_benchmark, Benchmark as CoreBenchmark,
};
use noinject_core::util::BUILD_VERSION;
use noinject_core::Error;

fn to_py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Input(_) => PyValueError::new_err(msg),
        Error::Structural(_) | Error::Protocol(_) => PyRuntimeError::new_err(msg),
        Error::Numeric(_) => PyArithmeticError::new_err(msg),
        Error::Integrity(_) | Error::Io(_) => PyIOError::new_err(msg),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.into_any()
            } else if let Some(u) = n.as_u64() {
                u.into_pyobject(py)?.into_any()
            } else {
                n.as_f64()
                    .ok_or_else(|| PyValueError::new_err("unrepresentable number"))?
                    .into_pyobject(py)?
                    .into_any()
            }
        }
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, val) in map {
                dict.set_item(k, json_to_py(py, val)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialize_to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v)
        .map_err(|e| PyRuntimeError::new_err(format!("serialization failed: {e}")))?;
    json_to_py(py, &value)
}

/// A complete, validated run configuration (world, model, training, seeds).
#[pyclass(frozen, name = "Config")]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    /// Parse from TOML text; with no argument, the built-in defaults.
    #[new]
    #[pyo3(signature = (toml_text=None))]
    fn new(toml_text: Option<&str>) -> PyResult<Self> {
        let inner = match toml_text {
            Some(text) => RunConfig::from_toml_str(text).map_err(to_py_err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    /// Load and validate a TOML config file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(Path::new(path)).map_err(to_py_err)?,
        })
    }

    /// The path-free config echo embedded into artifacts, as a dict.
    fn echo<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let value = self.inner.echo().map_err(to_py_err)?;
        json_to_py(py, &value)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(schedule={:?}, common_size={}, epochs={}, rssd={}, kpd={})",
            self.inner.benchmark.schedule,
            self.inner.benchmark.common_size,
            self.inner.training.epochs,
            self.inner.training.rssd_enabled,
            self.inner.training.kpd_enabled,
        )
    }
}

/// The frozen synthetic benchmark: task sequence plus common pool.
#[pyclass(frozen, name = "Benchmark")]
struct Benchmark {
    inner: CoreBenchmark,
}

#[pymethods]
impl Benchmark {
    /// Generate deterministically from a config's world parameters and seeds.
    #[staticmethod]
    fn generate(config: &Config) -> PyResult<Self> {
        let c = &config.inner;
        c.validate().map_err(to_py_err)?;
        let inner = generate_benchmark(
            &c.benchmark,
            c.model.d_v,
            c.model.v_tok,
            c.model.max_tokens,
            c.seeds.benchmark,
            c.seeds.common_seed(),
        )
        .map_err(to_py_err)?;
        inner.validate().map_err(to_py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = load_benchmark(Path::new(path)).map_err(to_py_err)?;
        inner.validate().map_err(to_py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_benchmark(&self.inner, Path::new(path)).map_err(to_py_err)
    }

    #[getter]
    fn task_count(&self) -> usize {
        self.inner.tasks.len()
    }

    #[getter]
    fn novel_concepts(&self) -> usize {
        self.inner.total_novel_concepts()
    }

    #[getter]
    fn common_concepts(&self) -> usize {
        self.inner.common_pool.len()
    }

    /// Content checksum as a 16-digit hex string.
    fn checksum(&self) -> PyResult<String> {
        Ok(format!("{:016x}", self.inner.checksum().map_err(to_py_err)?))
    }

    /// All concept names: tasks in order, then the common pool.
    fn concept_names(&self) -> Vec<String> {
        self.inner.concepts().map(|c| c.name.clone()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Benchmark(tasks={}, novel={}, common={})",
            self.inner.tasks.len(),
            self.inner.total_novel_concepts(),
            self.inner.common_pool.len(),
        )
    }
}

/// Evaluation matrix plus provenance for one run state.
#[pyclass(frozen, name = "Report")]
struct Report {
    inner: MetricsReport,
}

#[pymethods]
impl Report {
    #[getter]
    fn stages_completed(&self) -> usize {
        self.inner.stages_completed
    }

    #[getter]
    fn audit_violations(&self) -> u64 {
        self.inner.audit_violations
    }

    #[getter]
    fn final_avg_top1(&self) -> Option<f64> {
        self.inner.final_avg_top1
    }

    #[getter]
    fn final_avg_mrr(&self) -> Option<f64> {
        self.inner.final_avg_mrr
    }

    #[getter]
    fn version(&self) -> String {
        self.inner.version.clone()
    }

    /// Evaluation cells as a list of dicts.
    fn cells<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize_to_py(py, &self.inner.cells)
    }

    /// The whole report as a dict (same shape as report.json).
    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize_to_py(py, &self.inner)
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn __repr__(&self) -> String {
        format!(
            "Report(stages={}, cells={}, final_avg_top1={:?})",
            self.inner.stages_completed,
            self.inner.cells.len(),
            self.inner.final_avg_top1,
        )
    }
}

/// Outcome of a full experiment: the report plus the pre-training summary.
#[pyclass(frozen, name = "RunResult")]
struct RunResult {
    #[pyo3(get)]
    report: Py<Report>,
    /// Dict with steps / top1 / target_reached, or None when pre-training
    /// was disabled.
    #[pyo3(get)]
    pretrain: Option<Py<PyDict>>,
}

/// Pre-train and run the full injection sequence; with `out_dir`, also
/// write the log, checkpoints and report files. Releases the GIL while
/// training.
#[pyfunction]
#[pyo3(signature = (config, benchmark, out_dir=None))]
fn run(
    py: Python<'_>,
    config: &Config,
    benchmark: &Benchmark,
    out_dir: Option<&str>,
) -> PyResult<RunResult> {
    let cfg = config.inner.clone();
    let bench = benchmark.inner.clone();
    let out = out_dir.map(std::path::PathBuf::from);
    let output = py
        .detach(move || run_experiment(&cfg, bench, out.as_deref()))
        .map_err(to_py_err)?;
    let pretrain = match output.pretrain {
        Some(p) => {
            let d = PyDict::new(py);
            d.set_item("steps", p.steps)?;
            d.set_item("top1", p.top1)?;
            d.set_item("target_reached", p.target_reached)?;
            Some(d.unbind())
        }
        None => None,
    };
    Ok(RunResult {
        report: Py::new(py, Report { inner: output.report })?,
        pretrain,
    })
}

/// Re-score a saved checkpoint against its benchmark.
#[pyfunction]
fn evaluate_checkpoint(py: Python<'_>, path: &str, benchmark: &Benchmark) -> PyResult<Report> {
    let bench = benchmark.inner.clone();
    let path = std::path::PathBuf::from(path);
    let inner = py
        .detach(move || core_eval_checkpoint(&path, bench))
        .map_err(to_py_err)?;
    Ok(Report { inner })
}

/// Trigram-hash token ids for a concept name (pad id 0 excluded by
/// construction for non-empty names).
#[pyfunction]
#[pyo3(signature = (name, v_tok=997, max_tokens=8))]
fn tokenize(name: &str, v_tok: usize, max_tokens: usize) -> PyResult<Vec<u32>> {
    Ok(noinject_core::textmodel::tokenizer::tokenize(name, v_tok, max_tokens)
        .map_err(to_py_err)?
        .ids)
}

#[pyfunction]
fn build_version() -> &'static str {
    BUILD_VERSION
}

#[pymodule]
fn noinject(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Benchmark>()?;
    m.add_class::<Report>()?;
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(build_version, m)?)?;
    m.add("__version__", BUILD_VERSION)?;
    Ok(())
}
