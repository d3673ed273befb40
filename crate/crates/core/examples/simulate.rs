//! Writes a 40-frame stream with a hot spot and a flickering dead region,
//! then summarizes the ground-truth log.
//!
//! `cargo run --example simulate [out_dir]`

use std::collections::BTreeMap;
use std::path::PathBuf;

use hydra_core::sim::{generate_stream, read_ground_truth, FailureSchedule, StreamSpec, GROUND_TRUTH_FILE};

const SCHEDULE: &str = r#"
[[event]]
start = 10
end = 19
kind = "hot_spot"
region = { x = 2, y = 2, width = 6, height = 6 }

[[event]]
start = 25
end = 39
kind = "flicker"
period = 4
region = { x = 16, y = 16, width = 10, height = 10 }
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());
    let schedule = FailureSchedule::from_toml(SCHEDULE)?;
    let spec = StreamSpec::new("occupancy", 32, 32, 11);
    generate_stream(&spec, 40, &schedule, &out)?;

    let rows = read_ground_truth(&out.join(GROUND_TRUTH_FILE))?;
    let mut counts = BTreeMap::new();
    for r in &rows {
        *counts.entry(r.truth).or_insert(0) += 1;
    }
    println!("{} frames in {}", rows.len(), out.display());
    println!("first: {}", rows[0].file);
    println!("truth counts: {counts:?}");
    let strip: String = rows.iter().map(|r| r.truth.as_str().chars().next().unwrap()).collect();
    println!("timeline: {strip}");
    Ok(())
}
