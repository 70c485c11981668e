//! Experiment configuration: one JSON document plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cascade_sim::{
    ControlSettings, ExperimentSetup, LatencyModel, StageQuotas, Strategy, TrafficConfig,
};
use crate::error::{Error, Result};
use crate::feedback_control::{compute_scalers, PidGains, ScalerProfile};
use crate::stage::Stage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Per-stage gain overrides `[pre, coarse, fine]`.
    pub stage_gains: Option<[PidGains; 3]>,
    pub integral_clamp: Option<f64>,
    pub budget_buffer_pct: f64,
    pub initial_alpha: Option<[f64; 3]>,
    /// Apply the traffic-share scaler derived from `traffic.session_counts`.
    pub use_scalers: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        let g = PidGains::default();
        Self {
            kp: g.kp,
            ki: g.ki,
            kd: g.kd,
            stage_gains: None,
            integral_clamp: Some(5.0),
            budget_buffer_pct: 0.0,
            initial_alpha: None,
            use_scalers: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub n_noise_draws: u32,
    pub max_requests_per_user: usize,
    /// Fit only on requests from these sessions; all sessions when absent.
    pub sessions: Option<Vec<u32>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_noise_draws: 50,
            max_requests_per_user: 16,
            sessions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub stage: Stage,
    /// Candidate-set size per request at which both strategies are scored.
    pub cost_levels: Vec<u32>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Fine,
            cost_levels: vec![2, 3, 4, 6, 8, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub caps: Vec<StageQuotas>,
    /// Triple run with the fixed-quota baseline; increments are relative to it.
    pub baseline: StageQuotas,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            caps: vec![
                [60, 20, 6],
                [80, 30, 8],
                [100, 40, 12],
                [120, 30, 10],
                [100, 60, 10],
                [150, 60, 20],
            ],
            baseline: [60, 20, 6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/traffic.jsonl`.
    pub traffic_file: Option<PathBuf>,
    pub traffic: TrafficConfig,
    /// Per-session compute budget `[pre, coarse, fine]`. Defaults to
    /// `fixed_quotas` times the mean session size of `traffic`.
    pub budgets: Option<[f64; 3]>,
    pub caps: StageQuotas,
    /// Baseline quotas, also the quotas of non-varied stages during curve replay.
    pub fixed_quotas: StageQuotas,
    pub latency: LatencyModel,
    pub strategy: Strategy,
    pub control: ControlConfig,
    pub fit: FitConfig,
    pub compare: CompareConfig,
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("out"),
            traffic_file: None,
            budgets: None,
            traffic: TrafficConfig::default(),
            caps: [100, 40, 12],
            fixed_quotas: [60, 20, 6],
            latency: LatencyModel::default(),
            strategy: Strategy::Cras,
            control: ControlConfig::default(),
            fit: FitConfig::default(),
            compare: CompareConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Loads a config file, applies overrides, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::from_json(text.as_deref(), overrides)
    }

    /// Like [`load`](Self::load) with the config given as JSON text.
    pub fn from_json(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(ExperimentConfig::default()).expect("default serializes");
        if let Some(text) = text {
            let file: Value = serde_json::from_str(text).map_err(|e| Error::config("$", e.to_string()))?;
            merge(&mut value, file);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.traffic.validate()?;
        self.latency.validate()?;
        let budgets = self.budgets();
        for j in 0..3 {
            let b = budgets[j];
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::config(format!("budgets[{j}]"), "must be positive"));
            }
            if self.caps[j] < 1 {
                return Err(Error::config(format!("caps[{j}]"), "must be >= 1"));
            }
            if self.fixed_quotas[j] < 1 {
                return Err(Error::config(format!("fixed_quotas[{j}]"), "must be >= 1"));
            }
        }
        if self.latency.deadline_ms <= self.latency.base_ms {
            return Err(Error::config(
                "latency.deadline_ms",
                "deadline must exceed the base latency",
            ));
        }
        let c = &self.control;
        for (name, v) in [("control.kp", c.kp), ("control.ki", c.ki), ("control.kd", c.kd)] {
            if !v.is_finite() {
                return Err(Error::config(name, "gain must be finite"));
            }
        }
        if let Some(g) = &c.stage_gains {
            for (j, g) in g.iter().enumerate() {
                PidGains::new(g.kp, g.ki, g.kd)
                    .map_err(|e| Error::config(format!("control.stage_gains[{j}]"), e.to_string()))?;
            }
        }
        if let Some(clamp) = c.integral_clamp {
            if !(clamp > 0.0) {
                return Err(Error::config("control.integral_clamp", "must be positive"));
            }
        }
        if !(0.0..100.0).contains(&c.budget_buffer_pct) {
            return Err(Error::config("control.budget_buffer_pct", "must lie in [0, 100)"));
        }
        if let Some(a) = c.initial_alpha {
            if a.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::config("control.initial_alpha", "must be positive"));
            }
        }
        if self.fit.n_noise_draws < 1 {
            return Err(Error::config("fit.n_noise_draws", "must be >= 1"));
        }
        if self.fit.max_requests_per_user < 1 {
            return Err(Error::config("fit.max_requests_per_user", "must be >= 1"));
        }
        for (i, caps) in self.grid.caps.iter().enumerate() {
            if caps.contains(&0) {
                return Err(Error::config(format!("grid.caps[{i}]"), "caps must be >= 1"));
            }
        }
        if self.grid.baseline.contains(&0) {
            return Err(Error::config("grid.baseline", "caps must be >= 1"));
        }
        Ok(())
    }

    pub fn budgets(&self) -> [f64; 3] {
        self.budgets.unwrap_or_else(|| {
            let counts = &self.traffic.session_counts;
            let mean = counts.iter().sum::<u64>() as f64 / counts.len().max(1) as f64;
            self.fixed_quotas.map(|f| (f as f64 * mean).round())
        })
    }

    pub fn traffic_path(&self) -> PathBuf {
        self.traffic_file
            .clone()
            .unwrap_or_else(|| self.out_dir.join("traffic.jsonl"))
    }

    pub fn models_path(&self, stage: Stage) -> PathBuf {
        self.out_dir.join(format!("models_{stage}.jsonl"))
    }

    pub fn curves_path(&self, stage: Stage) -> PathBuf {
        self.out_dir.join(format!("curves_{stage}.jsonl"))
    }

    pub fn gains(&self) -> [PidGains; 3] {
        self.control.stage_gains.unwrap_or([PidGains {
            kp: self.control.kp,
            ki: self.control.ki,
            kd: self.control.kd,
        }; 3])
    }

    pub fn scalers(&self) -> Result<ScalerProfile> {
        if self.control.use_scalers {
            compute_scalers(&self.traffic.session_counts)
        } else {
            Ok(ScalerProfile::uniform(self.traffic.session_counts.len()))
        }
    }

    pub fn setup(&self, strategy: Strategy) -> Result<ExperimentSetup> {
        Ok(ExperimentSetup {
            strategy,
            budgets: self.budgets(),
            caps: self.caps,
            fixed_quotas: self.fixed_quotas,
            latency: self.latency,
            control: ControlSettings {
                gains: self.gains(),
                integral_clamp: self.control.integral_clamp,
                budget_buffer_pct: self.control.budget_buffer_pct,
                initial_alpha: self.control.initial_alpha,
            },
            scalers: self.scalers()?,
        })
    }
}

/// Overlays `patch` onto `base`: objects merge key by key, anything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted path (`control.kp`, `caps.2`) inside a JSON value. The value
/// text is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like KEY=VALUE"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(assignment, "empty override key"));
    }
    let new_value: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), new_value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(arr) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::config(key, format!("`{part}` is not an array index")))?;
                let len = arr.len();
                let slot = arr
                    .get_mut(idx)
                    .ok_or_else(|| Error::config(key, format!("index {idx} out of range (len {len})")))?;
                if last {
                    *slot = new_value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::config(key, format!("`{part}` is not inside an object or array"))),
        };
        if cur.is_null() && !last {
            *cur = Value::Object(Default::default());
        }
    }
    Ok(())
}
