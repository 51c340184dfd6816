//! Scenario-driven simulation: scheduler, engine, canned experiments,
//! metrics output and the live UDP server.

pub mod canned;
pub mod engine;
pub mod live;
pub mod metrics;
pub mod scenario;
pub mod scheduler;
pub mod trace;

pub use engine::{build_server, run, run_report, run_with, RunOptions};
pub use metrics::{emit_metrics, MetricsReport, RunOutput};
pub use scenario::{load_scenario, Scenario, ScenarioError};
