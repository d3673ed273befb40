use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::*;
use crate::store::HistoryQuery;
use crate::time::TimeRange;

pub const BUCKETS: usize = 24;

/// Bucket boundaries in seconds: three per decade from 1 µs to 100 s.
pub fn bucket_edges() -> [f64; BUCKETS + 1] {
    std::array::from_fn(|i| 10f64.powf((i as f64 - 18.0) / 3.0))
}

/// Bucket `i` holds `[edge_i, edge_i+1)`; values outside the range land in
/// the first or last bucket.
pub fn bucket_index(seconds: f64) -> usize {
    bucket_edges()[1..BUCKETS].partition_point(|&e| e <= seconds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyHistogram {
    pub stage: String,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub window: TimeRange,
}

impl LatencyHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPoint {
    pub run_number: u64,
    pub mean_seconds: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeries {
    pub stage: String,
    /// Ascending run number.
    pub points: Vec<RunPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub window: TimeRange,
    pub inferences: usize,
    pub histograms: Vec<LatencyHistogram>,
    pub per_run: Vec<RunSeries>,
}

impl StatusReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("status from={} to={} inferences={}\n", self.window.from, self.window.to, self.inferences);
        for h in &self.histograms {
            out += &format!("histogram stage={} total={} counts={}\n", h.stage, h.total(), join(&h.counts));
        }
        for s in &self.per_run {
            for p in &s.points {
                out += &format!("run stage={} run={} mean_s={} count={}\n", s.stage, p.run_number, p.mean_seconds, p.count);
            }
        }
        out
    }
}

fn join(v: &[u64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Per-stage latency histograms and per-run mean stage times over the
/// RunHistory rows in the window. The four pipeline stages always appear,
/// followed by any other recorded stage in name order.
pub fn status_metrics(store: &dyn Store, window: TimeRange) -> Result<StatusReport> {
    if !window.is_valid() {
        return Err(AnalyticsError::InvalidWindow);
    }
    let rows = store.query_history(&HistoryQuery::window(window))?;
    let mut stages: Vec<String> = stage::PIPELINE.iter().map(|s| s.to_string()).collect();
    let mut extra: Vec<String> = rows
        .iter()
        .flat_map(|r| r.stage_timings.stages())
        .filter(|s| !stage::PIPELINE.contains(s))
        .map(str::to_string)
        .collect();
    extra.sort();
    extra.dedup();
    stages.extend(extra);

    let edges = bucket_edges().to_vec();
    let mut counts = vec![vec![0u64; BUCKETS]; stages.len()];
    let mut sums: Vec<BTreeMap<u64, (u128, u64)>> = vec![BTreeMap::new(); stages.len()];
    let mut runs: BTreeMap<ImageId, u64> = BTreeMap::new();
    for row in &rows {
        let run = match runs.get(&row.image_id) {
            Some(&r) => r,
            None => *runs.entry(row.image_id).or_insert(store.image(row.image_id)?.run_number),
        };
        for (name, d) in row.stage_timings.iter() {
            let s = stages.iter().position(|x| x == name).expect("stage collected above");
            counts[s][bucket_index(d.as_secs_f64())] += 1;
            let e = sums[s].entry(run).or_default();
            e.0 += d.as_nanos();
            e.1 += 1;
        }
    }
    let histograms = stages
        .iter()
        .zip(counts)
        .map(|(stage, counts)| LatencyHistogram { stage: stage.clone(), edges: edges.clone(), counts, window })
        .collect();
    let per_run = stages
        .iter()
        .zip(sums)
        .map(|(stage, by_run)| RunSeries {
            stage: stage.clone(),
            points: by_run
                .into_iter()
                .map(|(run_number, (nanos, count))| RunPoint {
                    run_number,
                    mean_seconds: nanos as f64 / count as f64 / 1e9,
                    count,
                })
                .collect(),
        })
        .collect();
    Ok(StatusReport { window, inferences: rows.len(), histograms, per_run })
}
