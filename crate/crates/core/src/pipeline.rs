//! Config-driven commands shared by the CLI and the Python bindings.

use std::path::PathBuf;

use crate::cascade_sim::{
    compare_at_cost_levels, generate_traffic, grid_search_caps, group_by_session, run_experiment,
    user_revenue_curves, Comparison, CompareRow, CurveSimConfig, ExperimentRun, GridRow, ModelStore,
    SessionResult, Strategy, SyntheticRequest, TraceRow,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::revenue_model::{fit_log_model, fit_metrics, pooled_fit_metrics, FitReport, LogRevenueModel, RevenueCurve};
use crate::stage::Stage;

/// Header mirroring the published fit-error table.
pub const FIT_TABLE_HEADER: &str = "MAE,MAPE(%),WMAPE(%),R2,Average Revenue";

#[derive(Debug, Clone)]
pub struct StageFit {
    pub stage: Stage,
    pub curves: Vec<RevenueCurve>,
    pub models: Vec<LogRevenueModel>,
    /// One report per curve, same order as `curves`.
    pub reports: Vec<FitReport>,
    pub pooled: FitReport,
}

impl ExperimentConfig {
    pub fn curve_sim(&self) -> CurveSimConfig {
        CurveSimConfig {
            default_quotas: self.fixed_quotas,
            caps: self.caps,
            noise: self.traffic.noise,
            n_noise_draws: self.fit.n_noise_draws,
            seed: self.seed,
        }
    }
}

/// Replays per-user curves for one stage and fits a log model to each.
pub fn fit_stage(requests: &[SyntheticRequest], stage: Stage, cfg: &ExperimentConfig) -> Result<StageFit> {
    let selected: Vec<SyntheticRequest>;
    let pool = match &cfg.fit.sessions {
        Some(sessions) => {
            selected = requests
                .iter()
                .filter(|r| sessions.contains(&r.session))
                .cloned()
                .collect();
            &selected[..]
        }
        None => requests,
    };
    if pool.is_empty() {
        return Err(Error::config("fit.sessions", "no requests to fit"));
    }
    let curves = user_revenue_curves(pool, stage, &cfg.curve_sim(), cfg.fit.max_requests_per_user)?;
    let models = curves.iter().map(fit_log_model).collect::<Result<Vec<_>>>()?;
    let reports = curves
        .iter()
        .zip(&models)
        .map(|(c, m)| fit_metrics(c, m))
        .collect::<Result<Vec<_>>>()?;
    let pooled = pooled_fit_metrics(curves.iter().zip(&models))?;
    Ok(StageFit {
        stage,
        curves,
        models,
        reports,
        pooled,
    })
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

pub struct TrafficSummary {
    pub path: PathBuf,
    pub per_session: Vec<usize>,
}

pub fn cmd_gen_traffic(cfg: &ExperimentConfig) -> Result<TrafficSummary> {
    ensure_out_dir(cfg)?;
    let requests = generate_traffic(cfg.seed, &cfg.traffic)?;
    let path = cfg.traffic_path();
    io::write_traffic(&path, &requests)?;
    let per_session = group_by_session(requests).iter().map(Vec::len).collect();
    Ok(TrafficSummary { path, per_session })
}

pub fn cmd_fit(cfg: &ExperimentConfig, stages: &[Stage]) -> Result<Vec<StageFit>> {
    ensure_out_dir(cfg)?;
    let requests = io::read_traffic(&cfg.traffic_path())?;
    let mut out = Vec::with_capacity(stages.len());
    for &stage in stages {
        let fit = fit_stage(&requests, stage, cfg)?;
        io::write_curves(&cfg.curves_path(stage), &fit.curves)?;
        io::write_models(&cfg.models_path(stage), &fit.models)?;
        io::write_csv(
            &cfg.out_dir.join(format!("fit_report_{stage}.csv")),
            FitReport::CSV_HEADER,
            [fit.pooled.csv_row()],
        )?;
        out.push(fit);
    }
    Ok(out)
}

/// Reads `models_<stage>.jsonl` for every stage.
pub fn load_model_store(cfg: &ExperimentConfig) -> Result<ModelStore> {
    let mut store = ModelStore::new();
    for stage in Stage::ALL {
        let path = cfg.models_path(stage);
        if !path.exists() {
            return Err(Error::config(
                "models",
                format!("missing model store {}; run `fit` first", path.display()),
            ));
        }
        for m in io::read_models(&path)? {
            store.insert(m);
        }
    }
    Ok(store)
}

pub fn cmd_run(cfg: &ExperimentConfig, strategy: Strategy) -> Result<ExperimentRun> {
    ensure_out_dir(cfg)?;
    let store = match strategy {
        Strategy::Cras => Some(load_model_store(cfg)?),
        Strategy::Baseline => None,
    };
    let sessions = group_by_session(io::read_traffic(&cfg.traffic_path())?);
    let run = run_experiment(&sessions, &cfg.setup(strategy)?, store.as_ref())?;
    io::write_csv(
        &cfg.out_dir.join(format!("sessions_{strategy}.csv")),
        SessionResult::CSV_HEADER,
        run.sessions.iter().map(SessionResult::csv_row),
    )?;
    if strategy == Strategy::Cras {
        for stage in Stage::ALL {
            io::write_csv(
                &cfg.out_dir.join(format!("trace_{stage}.csv")),
                TraceRow::CSV_HEADER,
                run.traces[stage.index()].iter().map(TraceRow::csv_row),
            )?;
        }
    }
    Ok(run)
}

pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<Comparison> {
    ensure_out_dir(cfg)?;
    let stage = cfg.compare.stage;
    let curves_path = cfg.curves_path(stage);
    let models_path = cfg.models_path(stage);
    for p in [&curves_path, &models_path] {
        if !p.exists() {
            return Err(Error::config(
                "models",
                format!("missing {}; run `fit` first", p.display()),
            ));
        }
    }
    let curves = io::read_curves(&curves_path)?;
    let models: ModelStore = io::read_models(&models_path)?.into_iter().collect();
    let pairs: Vec<(RevenueCurve, LogRevenueModel)> = curves
        .into_iter()
        .filter_map(|c| {
            let m = models.get(stage, c.request_key())?.clone();
            Some((c, m))
        })
        .collect();
    let cmp = compare_at_cost_levels(&pairs, stage, cfg.caps[stage.index()], &cfg.compare.cost_levels)?;
    io::write_csv(
        &cfg.out_dir.join(format!("compare_{stage}.csv")),
        CompareRow::CSV_HEADER,
        cmp.rows.iter().map(CompareRow::csv_row),
    )?;
    Ok(cmp)
}

pub fn cmd_grid_search(cfg: &ExperimentConfig) -> Result<Vec<GridRow>> {
    ensure_out_dir(cfg)?;
    if cfg.grid.caps.is_empty() {
        return Err(Error::config("grid.caps", "grid must not be empty"));
    }
    let store = load_model_store(cfg)?;
    let sessions = group_by_session(io::read_traffic(&cfg.traffic_path())?);
    let rows = grid_search_caps(
        &sessions,
        &cfg.setup(Strategy::Cras)?,
        &store,
        &cfg.grid.caps,
        cfg.grid.baseline,
    )?;
    io::write_csv(
        &cfg.out_dir.join("grid_search.csv"),
        GridRow::CSV_HEADER,
        rows.iter().map(GridRow::csv_row),
    )?;
    Ok(rows)
}
