//! Python bindings: `import cras_py`.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cras_core::allocator::{self, DualVariable, StageBudget};
use cras_core::cascade_sim::{self, LatencyModel, Strategy};
use cras_core::config::ExperimentConfig;
use cras_core::feedback_control;
use cras_core::pipeline;
use cras_core::revenue_model::{self, RevenueCurve};
use cras_core::{Error, Stage};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Parse { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_stage(s: &str) -> PyResult<Stage> {
    s.parse().map_err(PyValueError::new_err)
}

fn budget(compute_budget: f64, latency_cap: u32) -> PyResult<StageBudget> {
    StageBudget::new(Stage::Fine, compute_budget, latency_cap).map_err(py_err)
}

fn unit_models(r_coeffs: &[f64], b_offsets: Option<&[f64]>) -> PyResult<Vec<revenue_model::LogRevenueModel>> {
    if let Some(b) = b_offsets {
        if b.len() != r_coeffs.len() {
            return Err(py_err(Error::LengthMismatch {
                left: r_coeffs.len(),
                right: b.len(),
            }));
        }
    }
    r_coeffs
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let b = b_offsets.map_or(0.0, |b| b[i]);
            revenue_model::LogRevenueModel::new(i.to_string(), Stage::Fine, r, b).map_err(py_err)
        })
        .collect()
}

/// Fitted `R ln q + B` for one request or user.
#[pyclass(name = "LogRevenueModel", module = "cras_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLogRevenueModel(revenue_model::LogRevenueModel);

#[pymethods]
impl PyLogRevenueModel {
    #[new]
    #[pyo3(signature = (r_coeff, b_offset, request_key = "".to_string(), stage = "fine"))]
    fn new(r_coeff: f64, b_offset: f64, request_key: String, stage: &str) -> PyResult<Self> {
        revenue_model::LogRevenueModel::new(request_key, parse_stage(stage)?, r_coeff, b_offset)
            .map(Self)
            .map_err(py_err)
    }

    #[getter]
    fn r_coeff(&self) -> f64 {
        self.0.r_coeff
    }

    #[getter]
    fn b_offset(&self) -> f64 {
        self.0.b_offset
    }

    #[getter]
    fn request_key(&self) -> &str {
        &self.0.request_key
    }

    #[getter]
    fn stage(&self) -> &'static str {
        self.0.stage.as_str()
    }

    fn evaluate(&self, q: f64) -> PyResult<f64> {
        self.0.evaluate(q).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "LogRevenueModel(r_coeff={}, b_offset={}, request_key={:?}, stage={:?})",
            self.0.r_coeff,
            self.0.b_offset,
            self.0.request_key,
            self.0.stage.as_str()
        )
    }
}

/// Fits `R ln q + B` to revenue sampled at `q = 1..=len(revenue)`. The
/// samples are monotonized first.
#[pyfunction]
#[pyo3(signature = (revenue, request_key = "".to_string(), stage = "fine"))]
fn fit_log_model(revenue: Vec<f64>, request_key: String, stage: &str) -> PyResult<PyLogRevenueModel> {
    let curve = RevenueCurve::from_samples(request_key, parse_stage(stage)?, revenue).map_err(py_err)?;
    revenue_model::fit_log_model(&curve).map(PyLogRevenueModel).map_err(py_err)
}

#[pyfunction]
fn evaluate(r_coeff: f64, b_offset: f64, q: f64) -> PyResult<f64> {
    revenue_model::evaluate(r_coeff, b_offset, q).map_err(py_err)
}

/// MAE, MAPE, WMAPE, R2 and mean revenue of a model against a curve.
#[pyfunction]
fn fit_metrics<'py>(
    py: Python<'py>,
    revenue: Vec<f64>,
    model: &PyLogRevenueModel,
) -> PyResult<Bound<'py, PyDict>> {
    let curve = RevenueCurve::from_samples("", model.0.stage, revenue).map_err(py_err)?;
    let rep = revenue_model::fit_metrics(&curve, &model.0).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("mae", rep.mae)?;
    d.set_item("mape_pct", rep.mape_pct)?;
    d.set_item("wmape_pct", rep.wmape_pct)?;
    d.set_item("r2", rep.r2)?;
    d.set_item("mean_observed", rep.mean_observed)?;
    Ok(d)
}

#[pyfunction]
fn optimal_quota(r_coeff: f64, alpha: f64, latency_cap: u32) -> PyResult<f64> {
    allocator::optimal_quota(r_coeff, alpha, latency_cap).map_err(py_err)
}

/// Budget-binding dual variable. `tolerance` is absolute, in cost units.
#[pyfunction]
#[pyo3(signature = (r_coeffs, compute_budget, latency_cap, tolerance = None))]
fn solve_alpha(r_coeffs: Vec<f64>, compute_budget: f64, latency_cap: u32, tolerance: Option<f64>) -> PyResult<f64> {
    let b = budget(compute_budget, latency_cap)?;
    let a = match tolerance {
        Some(t) => allocator::solve_alpha(&r_coeffs, &b, t),
        None => allocator::solve_alpha_default(&r_coeffs, &b),
    };
    a.map(DualVariable::value).map_err(py_err)
}

/// Integer quotas for a budget. Solves for `alpha` unless one is given;
/// `repair` moves the rounded quotas onto the integer budget.
#[pyfunction]
#[pyo3(signature = (r_coeffs, compute_budget, latency_cap, alpha = None, repair = true))]
fn allocate(
    r_coeffs: Vec<f64>,
    compute_budget: f64,
    latency_cap: u32,
    alpha: Option<f64>,
    repair: bool,
) -> PyResult<Vec<u32>> {
    let b = budget(compute_budget, latency_cap)?;
    let models = unit_models(&r_coeffs, None)?;
    let a = match alpha {
        Some(a) => DualVariable::new(a).map_err(py_err)?,
        None => allocator::solve_alpha_default(&r_coeffs, &b).map_err(py_err)?,
    };
    let alloc = if repair {
        allocator::allocate_repaired(&models, &b, a)
    } else {
        allocator::allocate(&models, &b, a)
    };
    alloc.map(|a| a.quotas).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (r_coeffs, quotas, b_offsets = None))]
fn total_revenue(r_coeffs: Vec<f64>, quotas: Vec<u32>, b_offsets: Option<Vec<f64>>) -> PyResult<f64> {
    let models = unit_models(&r_coeffs, b_offsets.as_deref())?;
    allocator::total_revenue(&models, &quotas).map_err(py_err)
}

#[pyfunction]
fn brute_force_allocate(r_coeffs: Vec<f64>, compute_budget: f64, latency_cap: u32) -> PyResult<Vec<u32>> {
    let b = budget(compute_budget, latency_cap)?;
    let models = unit_models(&r_coeffs, None)?;
    allocator::brute_force_allocate(&models, &b)
        .map(|a| a.quotas)
        .map_err(py_err)
}

#[pyfunction]
fn baseline_allocate(n_requests: usize, fixed_quota: u32, compute_budget: f64, latency_cap: u32) -> PyResult<Vec<u32>> {
    let b = budget(compute_budget, latency_cap)?;
    allocator::baseline_allocate(n_requests, fixed_quota, &b)
        .map(|a| a.quotas)
        .map_err(py_err)
}

/// Position-form PID on the relative cost error.
#[pyclass(name = "PidController", module = "cras_py")]
struct PyPidController(feedback_control::PidController);

#[pymethods]
impl PyPidController {
    #[new]
    #[pyo3(signature = (kp, ki, kd, base_value, integral_clamp = None))]
    fn new(kp: f64, ki: f64, kd: f64, base_value: f64, integral_clamp: Option<f64>) -> PyResult<Self> {
        let gains = feedback_control::PidGains::new(kp, ki, kd).map_err(py_err)?;
        feedback_control::PidController::new(gains, base_value)
            .and_then(|c| c.with_integral_clamp(integral_clamp))
            .map(Self)
            .map_err(py_err)
    }

    /// Feeds one error sample and returns the control signal.
    fn step(&mut self, error: f64) -> PyResult<f64> {
        self.0.step(error).map_err(py_err)
    }

    fn reset(&mut self) {
        self.0.reset();
    }

    #[getter]
    fn error_sum(&self) -> f64 {
        self.0.error_sum()
    }

    #[getter]
    fn prev_error(&self) -> f64 {
        self.0.prev_error()
    }

    #[getter]
    fn base_value(&self) -> f64 {
        self.0.base_value()
    }

    #[getter]
    fn session_index(&self) -> u64 {
        self.0.session_index()
    }
}

#[pyfunction]
fn pid_error(reference: f64, measured: f64) -> f64 {
    feedback_control::pid_error(reference, measured)
}

#[pyfunction]
#[pyo3(signature = (base_value, control_signal, scaler = 1.0))]
fn actuate(base_value: f64, control_signal: f64, scaler: f64) -> PyResult<f64> {
    feedback_control::actuate(base_value, control_signal, scaler).map_err(py_err)
}

#[pyfunction]
fn compute_scalers(session_counts: Vec<u64>) -> PyResult<Vec<f64>> {
    feedback_control::compute_scalers(&session_counts)
        .map(|p| p.scalers)
        .map_err(py_err)
}

fn latency_model(base_ms: f64, per_stage_ms: [f64; 3], deadline_ms: f64) -> PyResult<LatencyModel> {
    LatencyModel::new(base_ms, per_stage_ms, deadline_ms).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (q1, q2, q3, base_ms = 5.0, per_stage_ms = [0.5, 2.0, 8.0]))]
fn latency(q1: u32, q2: u32, q3: u32, base_ms: f64, per_stage_ms: [f64; 3]) -> PyResult<f64> {
    let m = latency_model(base_ms, per_stage_ms, f64::MAX)?;
    Ok(cascade_sim::latency(&m, q1, q2, q3))
}

#[pyfunction]
#[pyo3(signature = (candidate_caps, base_ms = 5.0, per_stage_ms = [0.5, 2.0, 8.0], deadline_ms = 300.0))]
fn feasible_caps(
    candidate_caps: Vec<[u32; 3]>,
    base_ms: f64,
    per_stage_ms: [f64; 3],
    deadline_ms: f64,
) -> PyResult<Vec<[u32; 3]>> {
    let m = latency_model(base_ms, per_stage_ms, deadline_ms)?;
    Ok(cascade_sim::feasible_caps(&m, &candidate_caps))
}

fn load_config(config: Option<&str>, overrides: &[String]) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_json(config, overrides).map_err(py_err)
}

/// Runs a CLI command from a JSON config string and returns a JSON summary.
///
/// `command` is one of `gen-traffic`, `fit`, `run`, `compare`, `grid-search`.
/// `option` is the stage for `fit` (default `all`) or the strategy for `run`.
#[pyfunction]
#[pyo3(signature = (command, config = None, overrides = Vec::new(), option = None))]
fn run_command(
    py: Python<'_>,
    command: &str,
    config: Option<&str>,
    overrides: Vec<String>,
    option: Option<String>,
) -> PyResult<String> {
    let cfg = load_config(config, &overrides)?;
    let command = command.to_string();
    py.detach(move || -> PyResult<String> {
        let summary = match command.as_str() {
            "gen-traffic" => {
                let s = pipeline::cmd_gen_traffic(&cfg).map_err(py_err)?;
                serde_json::json!({ "path": s.path, "per_session": s.per_session })
            }
            "fit" => {
                let stages = match option.as_deref() {
                    None | Some("all") => Stage::ALL.to_vec(),
                    Some(s) => vec![parse_stage(s)?],
                };
                let fits = pipeline::cmd_fit(&cfg, &stages).map_err(py_err)?;
                serde_json::Value::Array(
                    fits.iter()
                        .map(|f| serde_json::json!({ "stage": f.stage, "models": f.models.len(), "pooled": f.pooled }))
                        .collect(),
                )
            }
            "run" => {
                let strategy: Strategy = match option.as_deref() {
                    Some(s) => s.parse().map_err(PyValueError::new_err)?,
                    None => cfg.strategy,
                };
                let r = pipeline::cmd_run(&cfg, strategy).map_err(py_err)?;
                serde_json::json!({
                    "strategy": strategy.to_string(),
                    "sessions": r.sessions.len(),
                    "total_revenue": r.total_revenue(),
                    "deadline_violations": r.deadline_violations(),
                })
            }
            "compare" => {
                let c = pipeline::cmd_compare(&cfg).map_err(py_err)?;
                serde_json::json!({ "rows": c.rows, "skipped": c.skipped })
            }
            "grid-search" => {
                let rows = pipeline::cmd_grid_search(&cfg).map_err(py_err)?;
                serde_json::to_value(rows).expect("rows serialize")
            }
            other => return Err(PyValueError::new_err(format!("unknown command {other:?}"))),
        };
        Ok(summary.to_string())
    })
}

#[pymodule]
fn cras_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLogRevenueModel>()?;
    m.add_class::<PyPidController>()?;
    m.add_function(wrap_pyfunction!(fit_log_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_quota, m)?)?;
    m.add_function(wrap_pyfunction!(solve_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(allocate, m)?)?;
    m.add_function(wrap_pyfunction!(total_revenue, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_allocate, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_allocate, m)?)?;
    m.add_function(wrap_pyfunction!(pid_error, m)?)?;
    m.add_function(wrap_pyfunction!(actuate, m)?)?;
    m.add_function(wrap_pyfunction!(compute_scalers, m)?)?;
    m.add_function(wrap_pyfunction!(latency, m)?)?;
    m.add_function(wrap_pyfunction!(feasible_caps, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
