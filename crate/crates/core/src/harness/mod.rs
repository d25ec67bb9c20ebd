//! Experiment and scenario drivers on top of the simulator.

pub mod checker;
pub mod forum;
pub mod scenario;

pub use checker::ConsistencyChecker;
pub use forum::{emit_csv, run_forum, ForumConfig, ForumReport};
pub use scenario::{run_scenario, Script};
