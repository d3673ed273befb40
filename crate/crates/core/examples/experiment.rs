//! Trains a reference model on synthetic frames, streams a run with a dead
//! region appearing halfway through and prints the detection summary.
//!
//! `cargo run --release --example experiment [config.toml]`

use hydra_core::sim::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let report = run_experiment(&cfg)?;
    print!("{}", report.to_text());
    Ok(())
}
