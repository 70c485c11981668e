//! Closed-loop multi-session runs, cap grid search, and the matched-cost
//! strategy comparison.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cascade::{run_cascade, StageQuotas};
use super::latency::{feasible_caps, LatencyModel};
use super::traffic::SyntheticRequest;
use crate::allocator::{allocate_repaired, round_quota, solve_alpha_default, StageBudget};
use crate::error::{Error, Result};
use crate::feedback_control::{actuate, pid_error, PidController, PidGains, ScalerProfile};
use crate::revenue_model::{LogRevenueModel, RevenueCurve};
use crate::stage::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Cras,
    Baseline,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cras" => Ok(Strategy::Cras),
            "baseline" => Ok(Strategy::Baseline),
            other => Err(format!("unknown strategy `{other}` (expected cras or baseline)")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Cras => "cras",
            Strategy::Baseline => "baseline",
        })
    }
}

/// Fitted models keyed by `(stage, user_key)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelStore {
    models: BTreeMap<(Stage, String), LogRevenueModel>,
}

impl ModelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, model: LogRevenueModel) {
        self.models
            .insert((model.stage, model.request_key.clone()), model);
    }

    pub fn get(&self, stage: Stage, user_key: &str) -> Option<&LogRevenueModel> {
        self.models.get(&(stage, user_key.to_string()))
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.models.keys().any(|(s, _)| *s == stage)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LogRevenueModel> {
        self.models.values()
    }

    pub fn stage_models(&self, stage: Stage) -> impl Iterator<Item = &LogRevenueModel> {
        self.models
            .iter()
            .filter(move |((s, _), _)| *s == stage)
            .map(|(_, m)| m)
    }
}

impl FromIterator<LogRevenueModel> for ModelStore {
    fn from_iter<T: IntoIterator<Item = LogRevenueModel>>(iter: T) -> Self {
        let mut store = ModelStore::new();
        for m in iter {
            store.insert(m);
        }
        store
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSettings {
    pub gains: [PidGains; 3],
    pub integral_clamp: Option<f64>,
    /// Reference cost is `C · (1 - budget_buffer_pct / 100)`.
    pub budget_buffer_pct: f64,
    /// Base `α` per stage; derived from the first session when absent.
    pub initial_alpha: Option<[f64; 3]>,
}

impl Default for ControlSettings {
    fn default() -> Self {
        Self {
            gains: [PidGains::default(); 3],
            integral_clamp: Some(5.0),
            budget_buffer_pct: 0.0,
            initial_alpha: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSetup {
    pub strategy: Strategy,
    /// Per-session compute budget per stage.
    pub budgets: [f64; 3],
    pub caps: StageQuotas,
    /// Quotas used by the baseline.
    pub fixed_quotas: StageQuotas,
    pub latency: LatencyModel,
    pub control: ControlSettings,
    pub scalers: ScalerProfile,
}

impl ExperimentSetup {
    fn reference(&self, stage: usize) -> f64 {
        self.budgets[stage] * (1.0 - self.control.budget_buffer_pct / 100.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub realized_cost: u64,
    pub reference_cost: f64,
    /// `α` used for the session; `None` for the baseline.
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub session_index: usize,
    pub n_requests: usize,
    pub stages: [StageOutcome; 3],
    pub total_revenue: f64,
    pub deadline_violations: usize,
}

impl SessionResult {
    pub const CSV_HEADER: &'static str = "session_index,n_requests,\
cost_pre,reference_pre,alpha_pre,\
cost_coarse,reference_coarse,alpha_coarse,\
cost_fine,reference_fine,alpha_fine,\
total_revenue,deadline_violations";

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.session_index.to_string(), self.n_requests.to_string()];
        for s in &self.stages {
            cols.push(s.realized_cost.to_string());
            cols.push(s.reference_cost.to_string());
            cols.push(s.alpha.map(|a| a.to_string()).unwrap_or_default());
        }
        cols.push(self.total_revenue.to_string());
        cols.push(self.deadline_violations.to_string());
        cols.join(",")
    }
}

/// One session of one stage's control loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub session_index: usize,
    pub requests: usize,
    pub reference_cost: f64,
    pub measured_cost: u64,
    /// Relative error `(reference - measured) / reference` fed to the controller.
    pub error: f64,
    pub control_signal: f64,
    pub alpha: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str =
        "session_index,requests,reference_cost,measured_cost,error,control_signal,alpha";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.session_index,
            self.requests,
            self.reference_cost,
            self.measured_cost,
            self.error,
            self.control_signal,
            self.alpha
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentRun {
    pub sessions: Vec<SessionResult>,
    /// Control traces per stage; empty for the baseline.
    pub traces: [Vec<TraceRow>; 3],
}

impl ExperimentRun {
    pub fn total_revenue(&self) -> f64 {
        self.sessions.iter().map(|s| s.total_revenue).sum()
    }

    pub fn deadline_violations(&self) -> usize {
        self.sessions.iter().map(|s| s.deadline_violations).sum()
    }
}

fn cold_start_quota(budget: f64, n: usize, cap: u32) -> u32 {
    round_quota(budget / n.max(1) as f64, cap)
}

fn initial_alpha(
    requests: &[SyntheticRequest],
    stage: Stage,
    models: &ModelStore,
    reference: f64,
    cap: u32,
) -> f64 {
    let mut rs = Vec::with_capacity(requests.len());
    let mut cold = 0usize;
    for r in requests {
        match models.get(stage, &r.user_key) {
            Some(m) => rs.push(m.r_coeff),
            None => cold += 1,
        }
    }
    let max_r = rs.iter().copied().fold(0.0, f64::max);
    if rs.is_empty() || max_r == 0.0 {
        return 1.0;
    }
    let cold_cost = cold as f64 * cold_start_quota(reference, requests.len(), cap) as f64;
    let available = reference - cold_cost;
    match StageBudget::new(stage, available.max(f64::MIN_POSITIVE), cap)
        .and_then(|b| solve_alpha_default(&rs, &b))
    {
        Ok(a) => a.value(),
        Err(_) => max_r,
    }
}

/// Runs every session in order. Within a session, quotas come from the
/// stage's current `α` (or the fixed baseline), revenue from replaying the
/// cascade on each request's logged scores, and each stage's controller
/// then sets `α` for the next session.
pub fn run_experiment<I, S>(
    sessions: I,
    setup: &ExperimentSetup,
    models: Option<&ModelStore>,
) -> Result<ExperimentRun>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[SyntheticRequest]>,
{
    setup.latency.validate()?;
    for (j, (&b, &d)) in setup.budgets.iter().zip(&setup.caps).enumerate() {
        StageBudget::new(Stage::ALL[j], b, d)
            .map_err(|e| Error::config(format!("budgets[{j}]"), e.to_string()))?;
    }
    let store = match (setup.strategy, models) {
        (Strategy::Cras, None) => {
            return Err(Error::config("models", "cras strategy requires a fitted model store"))
        }
        (Strategy::Cras, Some(m)) => Some(m),
        (Strategy::Baseline, _) => {
            for (j, (&f, &d)) in setup.fixed_quotas.iter().zip(&setup.caps).enumerate() {
                if f < 1 || f > d {
                    return Err(Error::config(
                        format!("fixed_quotas[{j}]"),
                        format!("fixed quota {f} must lie in [1, {d}]"),
                    ));
                }
            }
            None
        }
    };

    let mut controllers: Option<[PidController; 3]> = None;
    let mut alphas = [1.0_f64; 3];
    let mut run = ExperimentRun::default();

    for (t, session) in sessions.into_iter().enumerate() {
        let requests = session.as_ref();
        let n = requests.len();

        if let (Some(store), None) = (store, controllers.as_ref()) {
            let mut built = Vec::with_capacity(3);
            for (j, stage) in Stage::ALL.into_iter().enumerate() {
                let base = match setup.control.initial_alpha {
                    Some(a) => a[j],
                    None => {
                        initial_alpha(requests, stage, store, setup.reference(j), setup.caps[j])
                            / setup.scalers.scaler(t)
                    }
                };
                let c = PidController::new(setup.control.gains[j], base)?
                    .with_integral_clamp(setup.control.integral_clamp)?;
                alphas[j] = actuate(base, 0.0, setup.scalers.scaler(t))?;
                built.push(c);
            }
            controllers = Some(built.try_into().expect("three stages"));
        }

        let quotas: Vec<StageQuotas> = match store {
            None => vec![setup.fixed_quotas; n],
            Some(store) => requests
                .iter()
                .map(|r| {
                    let mut q = [1u32; 3];
                    for (j, stage) in Stage::ALL.into_iter().enumerate() {
                        let cap = setup.caps[j];
                        q[j] = match store.get(stage, &r.user_key) {
                            Some(m) => round_quota(m.r_coeff / alphas[j], cap),
                            None => cold_start_quota(setup.reference(j), n, cap),
                        };
                    }
                    q
                })
                .collect(),
        };

        let outcomes: Vec<(f64, bool)> = requests
            .par_iter()
            .zip(quotas.par_iter())
            .map(|(r, &q)| {
                if setup.latency.meets_deadline(q) {
                    (run_cascade(&r.items, q), false)
                } else {
                    (0.0, true)
                }
            })
            .collect();
        let total_revenue: f64 = outcomes.iter().map(|o| o.0).sum();
        let deadline_violations = outcomes.iter().filter(|o| o.1).count();

        let mut costs = [0u64; 3];
        for q in &quotas {
            for j in 0..3 {
                costs[j] += q[j] as u64;
            }
        }

        let mut stages = [StageOutcome {
            realized_cost: 0,
            reference_cost: 0.0,
            alpha: None,
        }; 3];
        for j in 0..3 {
            stages[j] = StageOutcome {
                realized_cost: costs[j],
                reference_cost: setup.reference(j),
                alpha: store.map(|_| alphas[j]),
            };
        }

        if let Some(ctrls) = controllers.as_mut() {
            for (j, c) in ctrls.iter_mut().enumerate() {
                let reference = setup.reference(j);
                let alpha_used = alphas[j];
                let (e, u) = if n == 0 {
                    (0.0, 0.0)
                } else {
                    let e = pid_error(reference, costs[j] as f64) / reference;
                    (e, c.step(e)?)
                };
                if n > 0 {
                    alphas[j] = actuate(c.base_value(), u, setup.scalers.scaler(t + 1))?;
                }
                run.traces[j].push(TraceRow {
                    session_index: t,
                    requests: n,
                    reference_cost: reference,
                    measured_cost: costs[j],
                    error: e,
                    control_signal: u,
                    alpha: alpha_used,
                });
            }
        }

        run.sessions.push(SessionResult {
            session_index: t,
            n_requests: n,
            stages,
            total_revenue,
            deadline_violations,
        });
    }
    Ok(run)
}

/// One line of the cap grid-search table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub caps: StageQuotas,
    pub strategy: Strategy,
    pub revenue: f64,
    pub increment_pct: f64,
}

impl GridRow {
    pub const CSV_HEADER: &'static str = "D1,D2,D3,revenue,increment_pct";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.caps[0], self.caps[1], self.caps[2], self.revenue, self.increment_pct
        )
    }
}

/// Runs the fixed-quota baseline at `reference_caps` and CRAS at every other
/// latency-feasible triple of `grid`, ranked by total revenue (best first).
/// Increments are relative to the baseline row.
pub fn grid_search_caps(
    sessions: &[Vec<SyntheticRequest>],
    template: &ExperimentSetup,
    models: &ModelStore,
    grid: &[StageQuotas],
    reference_caps: StageQuotas,
) -> Result<Vec<GridRow>> {
    let feasible = feasible_caps(&template.latency, grid);
    if feasible.is_empty() {
        return Err(Error::NoFeasibleCaps);
    }
    if !template.latency.meets_deadline(reference_caps) {
        return Err(Error::config(
            "grid.baseline",
            format!("baseline caps {reference_caps:?} violate the deadline"),
        ));
    }
    let baseline_setup = ExperimentSetup {
        strategy: Strategy::Baseline,
        caps: reference_caps,
        fixed_quotas: reference_caps,
        ..template.clone()
    };
    let base_revenue = run_experiment(sessions, &baseline_setup, None)?.total_revenue();
    let increment = |rev: f64| {
        if base_revenue != 0.0 {
            100.0 * (rev - base_revenue) / base_revenue
        } else {
            0.0
        }
    };
    let mut rows = vec![GridRow {
        caps: reference_caps,
        strategy: Strategy::Baseline,
        revenue: base_revenue,
        increment_pct: 0.0,
    }];
    let mut seen = vec![reference_caps];
    for caps in feasible {
        if seen.contains(&caps) {
            continue;
        }
        seen.push(caps);
        let setup = ExperimentSetup {
            strategy: Strategy::Cras,
            caps,
            ..template.clone()
        };
        let revenue = run_experiment(sessions, &setup, Some(models))?.total_revenue();
        rows.push(GridRow {
            caps,
            strategy: Strategy::Cras,
            revenue,
            increment_pct: increment(revenue),
        });
    }
    rows.sort_by(|a, b| b.revenue.total_cmp(&a.revenue));
    Ok(rows)
}

/// Revenue of both strategies at one matched cost level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub cost_per_request: u32,
    pub revenue_baseline: f64,
    pub revenue_cras: f64,
    pub cost_baseline: u64,
    pub cost_cras: u64,
}

impl CompareRow {
    pub const CSV_HEADER: &'static str = "cost_per_request,revenue_baseline,revenue_cras";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{}",
            self.cost_per_request, self.revenue_baseline, self.revenue_cras
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    /// Levels above the cap, not evaluated.
    pub skipped: Vec<u32>,
}

/// Offline cost/revenue comparison on replayed curves.
///
/// At each per-request cost level `c`, the baseline gives every request `c`;
/// CRAS solves for `α` at budget `N·c` and repairs the integer quotas so the
/// total equals `N·c` exactly. Both are scored on the empirical curves.
pub fn compare_at_cost_levels(
    pairs: &[(RevenueCurve, LogRevenueModel)],
    stage: Stage,
    cap: u32,
    levels: &[u32],
) -> Result<Comparison> {
    if pairs.is_empty() {
        return Err(Error::Domain("comparison needs at least one curve".into()));
    }
    let n = pairs.len();
    let models: Vec<LogRevenueModel> = pairs.iter().map(|(_, m)| m.clone()).collect();
    let rs: Vec<f64> = models.iter().map(|m| m.r_coeff).collect();
    let score = |quotas: &[u32]| -> f64 {
        pairs
            .iter()
            .zip(quotas)
            .map(|((c, _), &q)| c.at(q).unwrap_or(0.0))
            .sum()
    };
    let mut out = Comparison::default();
    for &level in levels {
        if level < 1 || level > cap {
            out.skipped.push(level);
            continue;
        }
        let baseline = vec![level; n];
        let budget = StageBudget::new(stage, (n as u64 * level as u64) as f64, cap)?;
        let quotas = if rs.iter().all(|&r| r == 0.0) {
            baseline.clone()
        } else {
            let alpha = solve_alpha_default(&rs, &budget)?;
            let mut q = allocate_repaired(&models, &budget, alpha)?.quotas;
            fill_to_budget(&mut q, n as u64 * level as u64, cap);
            q
        };
        out.rows.push(CompareRow {
            cost_per_request: level,
            revenue_baseline: score(&baseline),
            revenue_cras: score(&quotas),
            cost_baseline: n as u64 * level as u64,
            cost_cras: quotas.iter().map(|&q| q as u64).sum(),
        });
    }
    Ok(out)
}

// Zero-slope requests gain nothing from extra units under the model; hand the
// leftover out in index order so both strategies spend the same compute.
fn fill_to_budget(quotas: &mut [u32], budget: u64, cap: u32) {
    let mut total: u64 = quotas.iter().map(|&q| q as u64).sum();
    for q in quotas.iter_mut() {
        if total >= budget {
            break;
        }
        let room = (cap - *q) as u64;
        let add = room.min(budget - total);
        *q += add as u32;
        total += add;
    }
}
