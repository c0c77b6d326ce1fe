//! Scenario files, runners and report writers behind the `fbsde-lab` binary.

pub mod builtins;
pub mod expr;
pub mod params;
pub mod report;
pub mod run;
pub mod scenario;
