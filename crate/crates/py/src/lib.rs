//! Python module `tracelab`: schedules, the bridge posterior, the analytic
//! prior with `predict_x0`, the self-check suite and full distillation runs.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tracelab_core::bridge::{posterior_params, posterior_sample, BridgeEndpoints};
use tracelab_core::config::{Experiment, RunConfig};
use tracelab_core::distill::{predict_x0 as core_predict_x0, Method, RunRecord, RunStatus};
use tracelab_core::gmm::Condition;
use tracelab_core::io::{run_summary, write_run_record};
use tracelab_core::render::ViewTransform;
use tracelab_core::rng::{rng_for, stream};
use tracelab_core::schedule::{NoiseSchedule as CoreSchedule, ScheduleKind};
use tracelab_core::score::{AnalyticScore, Guided, ScoreModel};
use tracelab_core::verify::{run_verify, VerifyOptions};
use tracelab_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Domain(_) | Error::Config(_) | Error::Dimension { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn condition(class: Option<usize>) -> Condition {
    class.map_or(Condition::Unconditional, Condition::Class)
}

/// Variance-preserving noise schedule on `t ∈ [0, 1]`.
#[pyclass(name = "NoiseSchedule", module = "tracelab", frozen, from_py_object)]
#[derive(Clone)]
struct PySchedule {
    inner: CoreSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (kind = "linear", beta_min = 0.1, beta_max = 20.0))]
    fn new(kind: &str, beta_min: f64, beta_max: f64) -> PyResult<Self> {
        let kind = match kind {
            "linear" => ScheduleKind::Linear,
            "cosine" => ScheduleKind::Cosine,
            other => return Err(PyValueError::new_err(format!("unknown schedule kind {other:?}"))),
        };
        Ok(Self {
            inner: CoreSchedule::new(kind, beta_min, beta_max).map_err(py_err)?,
        })
    }

    fn beta(&self, t: f64) -> PyResult<f64> {
        self.inner.beta(t).map_err(py_err)
    }

    fn alpha_bar(&self, t: f64) -> PyResult<f64> {
        self.inner.alpha_bar(t).map_err(py_err)
    }

    fn sigma(&self, t: f64) -> PyResult<f64> {
        self.inner.sigma(t).map_err(py_err)
    }

    fn total_variance(&self) -> PyResult<f64> {
        self.inner.total_variance().map_err(py_err)
    }

    /// `(sigma2, sigma_bar2)`: rate integrated over `[0, t]` and `[t, 1]`.
    fn accumulated_variances(&self, t: f64) -> PyResult<(f64, f64)> {
        self.inner.accumulated_variances(t).map_err(py_err)
    }

    /// `(gamma, big_sigma)` of the bridge posterior at `t`.
    fn bridge_coefficients(&self, t: f64) -> PyResult<(f64, f64)> {
        self.inner.bridge_coefficients(t).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "NoiseSchedule(kind={:?}, beta_min={}, beta_max={})",
            format!("{:?}", self.inner.kind).to_lowercase(),
            self.inner.beta_min,
            self.inner.beta_max
        )
    }
}

fn schedule_or_default(s: Option<PySchedule>) -> CoreSchedule {
    s.map_or_else(CoreSchedule::default, |s| s.inner)
}

/// Posterior of the bridge between `x_target` (time 0) and `x_source`
/// (time 1): a dict with `mu`, `gamma`, `big_sigma` and `sigma_t`.
#[pyfunction]
#[pyo3(signature = (x_target, x_source, t, schedule = None))]
fn bridge_posterior<'py>(
    py: Python<'py>,
    x_target: Vec<f64>,
    x_source: Vec<f64>,
    t: f64,
    schedule: Option<PySchedule>,
) -> PyResult<Bound<'py, PyDict>> {
    let ends = BridgeEndpoints::new(x_target, x_source).map_err(py_err)?;
    let p = posterior_params(&ends, &schedule_or_default(schedule), t).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("mu", p.mu)?;
    d.set_item("gamma", p.gamma)?;
    d.set_item("big_sigma", p.big_sigma)?;
    d.set_item("sigma_t", p.sigma_t)?;
    Ok(d)
}

/// One posterior draw; returns `(x_t, z)` with `z` the standard-normal
/// vector behind it. Deterministic in `seed`.
#[pyfunction]
#[pyo3(signature = (x_target, x_source, t, seed, schedule = None))]
fn bridge_sample(
    x_target: Vec<f64>,
    x_source: Vec<f64>,
    t: f64,
    seed: u64,
    schedule: Option<PySchedule>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let ends = BridgeEndpoints::new(x_target, x_source).map_err(py_err)?;
    let mut rng = rng_for(seed, &[stream::BRIDGE]);
    let s = posterior_sample(&ends, &schedule_or_default(schedule), t, &mut rng).map_err(py_err)?;
    Ok((s.x_t, s.z))
}

/// A complete run configuration; unknown TOML keys are rejected.
#[pyclass(name = "RunConfig", module = "tracelab", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: RunConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_toml_str(text).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(py_err)
    }

    /// Hex digest of the canonical serialization.
    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(py_err)
    }

    /// Copy with the run seed and guidance weight replaced.
    fn with_run(&self, seed: u64, cfg_weight: f64) -> Self {
        Self {
            inner: self.inner.with_run(seed, cfg_weight),
        }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn cfg_weight(&self) -> f64 {
        self.inner.distill.cfg_weight
    }

    #[getter]
    fn total_iterations(&self) -> usize {
        self.inner.distill.total_iterations
    }

    #[getter]
    fn pretrain_schedule(&self) -> PySchedule {
        PySchedule {
            inner: self.inner.pretrain_schedule,
        }
    }

    #[getter]
    fn bridge_schedule(&self) -> PySchedule {
        PySchedule {
            inner: self.inner.bridge_schedule,
        }
    }
}

/// The closed-form Gaussian-mixture prior a configuration describes.
#[pyclass(name = "Prior", module = "tracelab", frozen)]
struct PyPrior {
    inner: AnalyticScore,
    schedule: CoreSchedule,
}

impl PyPrior {
    fn guided(&self, cfg_weight: Option<f64>) -> Box<dyn ScoreModel + '_> {
        match cfg_weight {
            Some(w) => Box::new(Guided::new(&self.inner, w)),
            None => Box::new(&self.inner),
        }
    }
}

#[pymethods]
impl PyPrior {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<PyRunConfig>) -> PyResult<Self> {
        let config = config.map_or_else(RunConfig::default, |c| c.inner);
        Ok(Self {
            inner: config.build_prior().map_err(py_err)?,
            schedule: config.pretrain_schedule,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// `∇ log p_t(x | class)`; `class=None` is the unconditional mixture.
    #[pyo3(signature = (x, t, class_ = None))]
    fn score(&self, x: Vec<f64>, t: f64, class_: Option<usize>) -> PyResult<Vec<f64>> {
        self.inner.score(&x, t, condition(class_)).map_err(py_err)
    }

    /// Noise prediction, guided when `cfg_weight` is given.
    #[pyo3(signature = (x, t, class_ = None, cfg_weight = None))]
    fn epsilon(&self, x: Vec<f64>, t: f64, class_: Option<usize>, cfg_weight: Option<f64>) -> PyResult<Vec<f64>> {
        self.guided(cfg_weight)
            .epsilon(&x, t, condition(class_), &ViewTransform::default())
            .map_err(py_err)
    }

    /// `n` clean draws, deterministic in `seed`.
    #[pyo3(signature = (n, seed, class_ = None))]
    fn sample(&self, n: usize, seed: u64, class_: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        let mut rng = rng_for(seed, &[stream::REFERENCE]);
        (0..n)
            .map(|_| self.inner.sample(condition(class_), &mut rng))
            .collect::<Result<_, _>>()
            .map_err(py_err)
    }

    /// Single-step denoised estimate of a clean rendering at `t_prime`;
    /// returns `(x0_pred, eps)`.
    #[pyo3(signature = (x, t_prime, class_ = None, cfg_weight = None))]
    fn predict_x0(
        &self,
        x: Vec<f64>,
        t_prime: f64,
        class_: Option<usize>,
        cfg_weight: Option<f64>,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let model = self.guided(cfg_weight);
        let p = core_predict_x0(
            &x,
            t_prime,
            condition(class_),
            &ViewTransform::default(),
            &model,
            &self.schedule,
        )
        .map_err(py_err)?;
        Ok((p.x0_pred, p.eps_pretrain))
    }
}

/// Result of one distillation run.
#[pyclass(name = "RunResult", module = "tracelab", frozen)]
struct PyRunResult {
    record: RunRecord,
}

#[pymethods]
impl PyRunResult {
    /// `"completed"` or `"aborted"`.
    #[getter]
    fn status(&self) -> &'static str {
        match self.record.status {
            RunStatus::Completed => "completed",
            RunStatus::Aborted { .. } => "aborted",
        }
    }

    #[getter]
    fn final_particles(&self) -> Vec<Vec<f64>> {
        self.record.final_particles.clone()
    }

    #[getter]
    fn sliced_w1(&self) -> Option<f64> {
        self.record.final_metrics.map(|m| m.sliced_w1)
    }

    #[getter]
    fn mmd_rbf(&self) -> Option<f64> {
        self.record.final_metrics.map(|m| m.mmd_rbf)
    }

    #[getter]
    fn adapter_fingerprint(&self) -> String {
        self.record.adapter_fingerprint.clone()
    }

    /// `(iter, sliced_w1)` at every evaluated iteration.
    fn metric_curve(&self) -> Vec<(usize, f64)> {
        self.record
            .iterations
            .iter()
            .filter_map(|r| r.sliced_w1.map(|v| (r.iter, v)))
            .collect()
    }

    /// The run log in the same JSON-lines form the command-line tool writes.
    fn to_jsonl(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        write_run_record(&mut buf, &self.record).map_err(py_err)?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn summary(&self) -> String {
        run_summary(&self.record)
    }
}

/// Runs one distillation with `method` in `{"sds", "trace"}`. The GIL is
/// released for the duration.
#[pyfunction]
#[pyo3(signature = (config = None, method = "trace"))]
fn run(py: Python<'_>, config: Option<PyRunConfig>, method: &str) -> PyResult<PyRunResult> {
    let method: Method = method.parse().map_err(py_err)?;
    let config = config.map_or_else(RunConfig::default, |c| c.inner);
    let record = py
        .detach(|| Experiment::new(config).and_then(|e| e.run(method)))
        .map_err(py_err)?;
    Ok(PyRunResult { record })
}

/// Runs the self-check suite. Returns a dict with `all_passed` and a list
/// of per-check dicts.
#[pyfunction]
#[pyo3(signature = (seed = 0, gamma_offset = 0.0))]
fn verify<'py>(py: Python<'py>, seed: u64, gamma_offset: f64) -> PyResult<Bound<'py, PyDict>> {
    let opts = VerifyOptions { seed, gamma_offset };
    let report = py.detach(|| run_verify(&opts)).map_err(py_err)?;
    let checks = report
        .checks
        .iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("name", &c.name)?;
            d.set_item("measured", c.measured)?;
            d.set_item("tolerance", c.tolerance)?;
            d.set_item("passed", c.passed)?;
            d.set_item("detail", &c.detail)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let d = PyDict::new(py);
    d.set_item("all_passed", report.all_passed)?;
    d.set_item("checks", checks)?;
    Ok(d)
}

#[pymodule]
fn tracelab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyPrior>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(bridge_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(bridge_sample, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
