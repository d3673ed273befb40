mod common;

use std::sync::Arc;

use hydra_core::ingest::PROCESSED_LOG;
use hydra_core::layout::ImageRoot;
use hydra_core::store::{FileStore, MemoryStore, Store};

use common::site;

/// Polls until nothing new shows up twice in a row.
fn drain(feeder: &mut hydra_core::ingest::Feeder) -> Vec<hydra_core::ingest::InferenceOrder> {
    let mut out = Vec::new();
    let mut quiet = 0;
    while quiet < 2 {
        let batch = feeder.scan_and_emit().unwrap();
        quiet = if batch.is_empty() { quiet + 1 } else { 0 };
        out.extend(batch);
    }
    out
}

#[test]
fn three_files_three_orders_in_capture_order() {
    let store = Arc::new(MemoryStore::new());
    let s = site(store.as_ref());
    let names: Vec<String> = [2, 0, 1].iter().map(|&q| s.drop_frame(5, q)).collect();
    let mut feeder = s.feeder(store.clone());
    let orders = drain(&mut feeder);
    assert_eq!(orders.len(), 3);
    let seqs: Vec<u64> = orders.iter().map(|o| store.image(o.image_id).unwrap().sequence).collect();
    assert_eq!(seqs, [0, 1, 2]);
    for o in &orders {
        assert_eq!(o.order_id.0, o.image_id.0);
        assert_eq!((o.payload.width(), o.payload.height()), (8, 8));
        assert!(o.stage_timings.get("feeder").is_some());
    }
    for name in &names {
        assert!(!s.path("input").join(name).exists());
        assert!(s.root().resolve(&ImageRoot::image_path("occupancy", 5, name)).exists());
    }
}

#[test]
fn restart_does_not_emit_twice() {
    let store_dir = tempfile::tempdir().unwrap();
    FileStore::init(store_dir.path()).unwrap();
    let store: Arc<dyn Store> = Arc::new(FileStore::open(store_dir.path()).unwrap());
    let s = site(store.as_ref());
    let first = s.drop_frame(1, 0);
    {
        let mut feeder = s.feeder(store.clone());
        assert_eq!(drain(&mut feeder).len(), 1);
    }
    let log = std::fs::read_to_string(s.path("state").join(PROCESSED_LOG)).unwrap();
    assert_eq!(log.lines().collect::<Vec<_>>(), [first.as_str()]);

    // The same file shows up again after a restart, next to a new one.
    let stored = s.root().resolve(&ImageRoot::image_path("occupancy", 1, &first));
    std::fs::copy(&stored, s.path("input").join(&first)).unwrap();
    s.drop_frame(1, 1);
    drop(store);
    let store: Arc<dyn Store> = Arc::new(FileStore::open(store_dir.path()).unwrap());
    let mut feeder = s.feeder(store.clone());
    let orders = drain(&mut feeder);
    assert_eq!(orders.len(), 1);
    assert_eq!(store.image(orders[0].image_id).unwrap().sequence, 1);
    assert!(s.path("reject").join(&first).exists());
}

#[test]
fn malformed_file_is_quarantined() {
    let store = Arc::new(MemoryStore::new());
    let s = site(store.as_ref());
    s.drop_frame(3, 0);
    s.drop_frame(3, 1);
    common::write(&s.path("input").join("occupancy_r3_sX_t1.pgm"), b"P5\n1 1\n255\n\0");
    common::write(&s.path("input").join("occupancy_r3_s9_t9.pgm"), b"not an image");
    common::write(&s.path("input").join("elsewhere_r3_s9_t9.pgm"), b"P5\n1 1\n255\n\0");
    let mut feeder = s.feeder(store.clone());
    assert_eq!(drain(&mut feeder).len(), 2);
    for bad in ["occupancy_r3_sX_t1.pgm", "occupancy_r3_s9_t9.pgm", "elsewhere_r3_s9_t9.pgm"] {
        assert!(s.path("reject").join(bad).exists(), "{bad} not rejected");
        let reason = std::fs::read_to_string(s.path("reject").join(format!("{bad}.reason"))).unwrap();
        assert!(!reason.trim().is_empty());
    }
    assert_eq!(std::fs::read_dir(s.path("input")).unwrap().count(), 0);
}

#[test]
fn growing_file_waits_until_stable() {
    let store = Arc::new(MemoryStore::new());
    let s = site(store.as_ref());
    let name = s.drop_frame(4, 0);
    let mut feeder = s.feeder(store.clone());
    assert!(feeder.scan_and_emit().unwrap().is_empty());
    // still being written: size changes between polls
    let path = s.path("input").join(&name);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(feeder.scan_and_emit().unwrap().is_empty());
    std::fs::write(&path, &bytes).unwrap();
    assert!(feeder.scan_and_emit().unwrap().is_empty());
    assert_eq!(feeder.scan_and_emit().unwrap().len(), 1);
}

#[test]
fn plot_type_without_active_model_rejects() {
    let store = Arc::new(MemoryStore::new());
    let s = site(store.as_ref());
    store
        .register_plot_type(hydra_core::NewPlotType {
            name: "timing".into(),
            input_width: 8,
            input_height: 8,
            channels: 1,
            labels: vec![
                hydra_core::LabelSpec::new("Good", hydra_core::Rgb::GREEN, hydra_core::Severity::Good),
                hydra_core::LabelSpec::new("Late", hydra_core::Rgb::RED, hydra_core::Severity::Bad),
            ],
            allowed_labelers: Default::default(),
        })
        .unwrap();
    let name = "timing_r1_s0_t0.pgm";
    common::write(&s.path("input").join(name), b"P5\n1 1\n255\n\0");
    let mut feeder = s.feeder(store.clone());
    assert!(drain(&mut feeder).is_empty());
    let reason = std::fs::read_to_string(s.path("reject").join(format!("{name}.reason"))).unwrap();
    assert!(reason.contains("no active model"), "{reason}");
}
