//! Scenario-driven command harness for the `nbg` binary.

pub mod commands;
pub mod error;
pub mod scenario;
pub mod verify;

pub use error::{CliError, CliResult};
pub use scenario::Scenario;
