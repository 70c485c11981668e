//! Compute-budget allocation for cascaded ranking pipelines.
//!
//! Each stage of a pre/coarse/fine ranking cascade gets a per-request
//! candidate-set size chosen to maximize total revenue under a per-session
//! compute budget and a per-request latency cap:
//!
//! - [`revenue_model`] fits `R ln q + B` to replayed revenue curves.
//! - [`allocator`] turns fitted slopes into quotas `clamp(R / α, 1, D)` and
//!   solves for the budget-binding `α`.
//! - [`feedback_control`] paces `α` across sessions with a PID loop.
//! - [`cascade_sim`] generates synthetic traffic, replays the cascade, and
//!   runs closed-loop experiments.
//! - [`pipeline`] wires it together for the `cras` command-line tool.

pub mod allocator;
pub mod cascade_sim;
pub mod config;
pub mod error;
pub mod feedback_control;
pub mod io;
pub mod pipeline;
pub mod revenue_model;
pub mod stage;

pub use error::{Error, Result};
pub use stage::Stage;
