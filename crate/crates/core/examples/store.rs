//! Registers a plot type, images and labels in a journaled store, reopens
//! it and reads everything back.
//!
//! `cargo run --example store`

use std::collections::BTreeSet;
use std::path::PathBuf;

use hydra_core::store::{FileStore, Store};
use hydra_core::*;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let db = dir.path().join("db");
    FileStore::init(&db)?;

    let images = {
        let store = FileStore::open(&db)?;
        let (plot, labels) = store.register_plot_type(NewPlotType {
            name: "occupancy".into(),
            input_width: 24,
            input_height: 24,
            channels: 1,
            labels: vec![
                LabelSpec::new("Good", Rgb::GREEN, Severity::Good),
                LabelSpec::new("Dead", Rgb::RED, Severity::Bad),
            ],
            allowed_labelers: BTreeSet::from(["shifter".to_string()]),
        })?;
        let mut ids = Vec::new();
        for seq in 0..4u64 {
            let img = store.register_image(NewImage {
                plot_type_id: plot.plot_type_id,
                run_number: 7,
                sequence: seq,
                capture_time: Timestamp(1_700_000_000_000 + seq as i64 * 1000),
                storage_path: PathBuf::from(format!("occupancy/r7/frame{seq}.pgm")),
                width: 32,
                height: 32,
            })?;
            ids.push(img.image_id);
        }
        let (good, dead) = (labels[0].label_id, labels[1].label_id);
        store.assign_label(ids[0], good, "shifter", Timestamp(1))?;
        store.assign_label(ids[1], dead, "shifter", Timestamp(2))?;
        store.assign_label(ids[1], good, "shifter", Timestamp(3))?;
        if let Err(e) = store.assign_label(ids[2], dead, "visitor", Timestamp(4)) {
            println!("refused: {e}");
        }
        ids
    };

    let store = FileStore::open(&db)?;
    let plot = store.plot_type_by_name("occupancy")?.expect("registered above");
    println!("reopened: plot type {} ({}) with {} labels", plot.plot_type_id, plot.name, store.labels(plot.plot_type_id)?.len());
    for (image, assignment) in store.query_labeled(plot.plot_type_id, None, None)? {
        let label = store.label(assignment.label_id)?;
        println!("  image {} seq {} -> {} by {}", image.image_id, image.sequence, label.name, assignment.labeler);
    }
    let history = store.label_history(images[1])?;
    println!("image {} history: {} assignments, superseded {:?}", images[1], history.len(), history.iter().map(|a| a.superseded).collect::<Vec<_>>());
    println!("journal: {} lines", std::fs::read_to_string(db.join(hydra_core::store::JOURNAL_FILE))?.lines().count());
    Ok(())
}
