//! Python module `distill`: config handling, loss functions, registry
//! queries and experiment runs.

use std::path::PathBuf;

use distill_core::config::{join_tag, ExperimentConfig};
use distill_core::losses::{self, AtVariant, Reduction};
use distill_core::params::Params;
use distill_core::tensor::Tensor;
use distill_core::{load_experiment, run_experiment, Category, Error, Registry, RunOptions};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;

create_exception!(distill, ConfigError, PyValueError);

fn to_py(e: Error) -> PyErr {
    if e.is_config_error() {
        ConfigError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{what}: rows must have equal length")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec_f64(flat, vec![rows.len(), cols]).map_err(|e| to_py(e.into()))
}

fn scalar(t: distill_core::Result<Tensor>) -> PyResult<f64> {
    t.and_then(|t| Ok(t.to_scalar()?)).map_err(to_py)
}

/// Soft-target KD loss on logits given as lists of rows.
#[pyfunction]
#[pyo3(signature = (student, teacher, targets, temperature = 1.0, alpha = 0.5))]
fn kd_loss(
    student: Vec<Vec<f64>>,
    teacher: Vec<Vec<f64>>,
    targets: Vec<usize>,
    temperature: f64,
    alpha: f64,
) -> PyResult<f64> {
    let (s, t) = (matrix(&student, "student")?, matrix(&teacher, "teacher")?);
    scalar(losses::kd_loss(&s, &t, &targets, temperature, alpha, Reduction::Batchmean))
}

/// Factor-transfer loss between (N, D) factors.
#[pyfunction]
#[pyo3(signature = (student, teacher, p = 1.0))]
fn ft_loss(student: Vec<Vec<f64>>, teacher: Vec<Vec<f64>>, p: f64) -> PyResult<f64> {
    let (s, t) = (matrix(&student, "student")?, matrix(&teacher, "teacher")?);
    scalar(losses::ft_loss(&s, &t, p, false))
}

/// Attention-transfer loss over one pair of (N, HW) attention maps.
#[pyfunction]
#[pyo3(signature = (student, teacher, beta = 1000.0, p = 2.0, variant = "mse"))]
fn at_loss(student: Vec<Vec<f64>>, teacher: Vec<Vec<f64>>, beta: f64, p: f64, variant: &str) -> PyResult<f64> {
    let variant = match variant {
        "mse" => AtVariant::Mse,
        "norm_diff" => AtVariant::NormDiff,
        other => return Err(PyValueError::new_err(format!("unknown variant '{other}'"))),
    };
    let (s, t) = (matrix(&student, "student")?, matrix(&teacher, "teacher")?);
    scalar(losses::at_loss(variant, &[s], &[t], beta, p, false))
}

/// Concatenate scalars the way the `!join` tag does.
#[pyfunction]
fn join(parts: Vec<String>) -> PyResult<String> {
    let seq = parts.into_iter().map(serde_yaml::Value::String).collect::<Vec<_>>();
    join_tag(&seq).map_err(to_py)
}

/// Names registered under a category ("model", "loss", ...).
#[pyfunction]
fn registry_names(category: &str) -> PyResult<Vec<String>> {
    let c = Category::parse(category).ok_or_else(|| {
        let all: Vec<&str> = Category::ALL.iter().map(|c| c.as_str()).collect();
        PyValueError::new_err(format!("unknown category '{category}'; expected one of {}", all.join(", ")))
    })?;
    Ok(Registry::with_builtins().names(c))
}

/// Dotted submodule paths of a registered model; `params` is a YAML mapping.
#[pyfunction]
#[pyo3(signature = (name, params = "{}"))]
fn module_paths(name: &str, params: &str) -> PyResult<Vec<String>> {
    let value: serde_yaml::Value = serde_yaml::from_str(params).map_err(|e| ConfigError::new_err(e.to_string()))?;
    let params = Params::from_value(&value).map_err(to_py)?;
    let mut rng = rand::rngs::StdRng::seed_from_u64(0);
    let model = Registry::with_builtins().model(name, &params, &mut rng).map_err(to_py)?;
    Ok(distill_core::hooks::list_module_paths(model.as_ref()))
}

/// Validate a config and return its canonical YAML.
#[pyfunction]
fn resolve_config(text: &str) -> PyResult<String> {
    Ok(load_experiment(text, &Registry::with_builtins()).map_err(to_py)?.to_yaml())
}

/// A validated experiment.
#[pyclass]
struct Experiment {
    cfg: ExperimentConfig,
}

#[pymethods]
impl Experiment {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Experiment { cfg: load_experiment(text, &Registry::with_builtins()).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        let text =
            std::fs::read_to_string(&path).map_err(|e| PyRuntimeError::new_err(format!("{}: {e}", path.display())))?;
        Self::new(&text)
    }

    #[getter]
    fn num_stages(&self) -> usize {
        self.cfg.stages.len()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.cfg.warnings.clone()
    }

    fn resolved(&self) -> String {
        self.cfg.to_yaml()
    }

    /// Override the epoch count of every stage.
    fn set_epochs(&mut self, epochs: usize) -> PyResult<()> {
        if epochs == 0 {
            return Err(PyValueError::new_err("epochs must be positive"));
        }
        for s in &mut self.cfg.stages {
            s.num_epochs = epochs;
        }
        Ok(())
    }

    /// Train and test; returns the report as a dict.
    #[pyo3(signature = (seed = 42, log_path = None, base_dir = None, test_only = false))]
    fn run<'py>(
        &self,
        py: Python<'py>,
        seed: u64,
        log_path: Option<PathBuf>,
        base_dir: Option<PathBuf>,
        test_only: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let opts = RunOptions {
            seed,
            log_path,
            base_dir: base_dir.unwrap_or_else(|| PathBuf::from(".")),
            test_only,
            ..RunOptions::default()
        };
        let report = run_experiment(&self.cfg, &Registry::with_builtins(), &opts).map_err(to_py)?;
        let json = serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let loads = py.import("json")?.getattr("loads")?;
        let out = loads.call1((json,))?;
        let log = PyList::new(py, &report.log)?;
        out.cast::<PyDict>()?.set_item("log", log)?;
        Ok(out)
    }
}

#[pymodule]
fn distill(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ft_loss, m)?)?;
    m.add_function(wrap_pyfunction!(at_loss, m)?)?;
    m.add_function(wrap_pyfunction!(join, m)?)?;
    m.add_function(wrap_pyfunction!(registry_names, m)?)?;
    m.add_function(wrap_pyfunction!(module_paths, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_class::<Experiment>()?;
    Ok(())
}
