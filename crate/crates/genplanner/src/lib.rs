//! Service layer for genplanner: checkpoint files, the session-backed
//! planner, its HTTP routes and the command-line interface.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod payload;
pub mod planner;
pub mod service;

pub use artifacts::{GeneratorCheckpoint, Recipe};
pub use config::ServiceConfig;
pub use planner::Planner;
