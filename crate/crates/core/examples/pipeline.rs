//! Runs the full pipeline (feeder, balancer, four predict workers, keeper)
//! over a simulated stream dropped into an input directory, then prints
//! the latency status and the anomaly digest.
//!
//! `cargo run --release --example pipeline`

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use hydra_core::analytics::{build_log_digest, status_metrics};
use hydra_core::ingest::{Feeder, FeederConfig};
use hydra_core::keeper::{AlarmHub, KeeperConfig};
use hydra_core::layout::ImageRoot;
use hydra_core::pipeline::{Pipeline, PipelineConfig};
use hydra_core::predict::artifact;
use hydra_core::predict::train::initialize;
use hydra_core::predict::ReferenceBackend;
use hydra_core::sim::{generate_stream, FailureSchedule, StreamSpec};
use hydra_core::store::{HistoryQuery, MemoryStore, Store};
use hydra_core::*;

const FRAMES: u64 = 24;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let root = ImageRoot::new(dir.path().join("images"));
    let store = Arc::new(MemoryStore::new());
    let (plot, labels) = store.register_plot_type(NewPlotType {
        name: "occupancy".into(),
        input_width: 16,
        input_height: 16,
        channels: 1,
        labels: vec![
            LabelSpec::new("Good", Rgb::GREEN, Severity::Good),
            LabelSpec::new("Bad", Rgb::RED, Severity::Bad),
        ],
        allowed_labelers: BTreeSet::new(),
    })?;
    // An untrained model is enough to exercise every stage.
    let order: Vec<LabelId> = labels.iter().map(|l| l.label_id).collect();
    let artifact_path = dir.path().join("occupancy.hydm");
    std::fs::write(&artifact_path, artifact::encode(&initialize(plot.plot_type_id, order.clone(), 1, 4, 9)))?;
    let model = store.insert_model(NewModel {
        plot_type_id: plot.plot_type_id,
        artifact_path,
        label_order: order,
        input_shape: InputShape::of(&plot),
        training_set_id: None,
        sampling_method: "none".into(),
        collect_percentage: 0.25,
        created_at: Timestamp(0),
    })?;
    store.set_active_model(model.model_id)?;

    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let alarms = Arc::new(AlarmHub::new());
    let keeper = KeeperConfig::new(root.clone(), dir.path().join("dead")).with_seed(1);
    let pipeline = Pipeline::start(store.clone(), Arc::new(ReferenceBackend), clock.clone(), alarms.clone(), PipelineConfig::new(4, keeper));
    let feeder = Feeder::open(
        FeederConfig {
            input_dir: dir.path().join("input"),
            reject_dir: dir.path().join("reject"),
            image_root: root,
            state_dir: dir.path().join("state"),
            poll_interval: Duration::from_millis(10),
        },
        store.clone(),
        clock.clone(),
    )?;
    let stop = Arc::new(AtomicBool::new(false));
    let feeder = pipeline.spawn_feeder(feeder, stop.clone());

    let staging = dir.path().join("staging");
    generate_stream(&StreamSpec::new("occupancy", 24, 24, 2), FRAMES, &FailureSchedule::default(), &staging)?;
    for entry in std::fs::read_dir(&staging)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            std::fs::rename(&path, dir.path().join("input").join(path.file_name().unwrap()))?;
        }
    }

    let started = Instant::now();
    while store.query_history(&HistoryQuery::default())?.len() < FRAMES as usize && started.elapsed() < Duration::from_secs(30) {
        std::thread::sleep(Duration::from_millis(20));
    }
    stop.store(true, Ordering::SeqCst);
    feeder.join().expect("feeder thread")?;
    let stats = pipeline.shutdown();
    println!("dispatched {} orders, recorded {}, alarms raised {}", stats.balancer.dispatched, stats.keeper.recorded, alarms.last_seq());

    let window = TimeRange::trailing(clock.now(), Duration::from_secs(600));
    print!("{}", status_metrics(store.as_ref(), window)?.to_text());
    let digest = build_log_digest(store.as_ref(), window)?;
    println!("digest: {} entries", digest.entries.len());
    for line in digest.to_text().lines().skip(1).take(3) {
        println!("  {line}");
    }
    Ok(())
}
