//! Synthetic traffic, cascade replay, latency, and closed-loop experiments.

mod cascade;
mod experiment;
mod latency;
mod traffic;

pub use cascade::{
    accumulate_stage_curve, joint_revenue, run_cascade, simulate_revenue_curve,
    user_revenue_curves, CascadeRevenueParams, CurveSimConfig, StageQuotas,
};
pub use experiment::{
    compare_at_cost_levels, grid_search_caps, run_experiment, CompareRow, Comparison,
    ControlSettings, ExperimentRun, ExperimentSetup, GridRow, ModelStore, SessionResult,
    StageOutcome, Strategy, TraceRow,
};
pub use latency::{feasible_caps, latency, LatencyModel};
pub use traffic::{
    diurnal_profile, generate_traffic, group_by_session, Item, NoiseLevels, SyntheticRequest,
    TrafficConfig, TrafficGenerator, ValueDistribution,
};
