//! Adversarial patch toolkit at desk scale: patch optimization via
//! Expectation over Transformation against toy detectors, fooling-event
//! evaluation, and supervised / statistical / localization defenses.

pub mod cli;
pub mod coco;
pub mod error;
pub mod detector;
pub mod fooling;
pub mod metrics;
pub mod nn;
pub mod defense_localization;
pub mod defense_statistical;
pub mod defense_supervised;
pub mod patch;
pub mod synth;
pub mod scenes;

pub use error::{Error, Result};

/// CLI entry point; returns the process exit code.
pub fn run_cli() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    cli::run(&args)
}
