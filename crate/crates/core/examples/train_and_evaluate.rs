//! Trains a reference model on labeled synthetic frames, picks per-label
//! thresholds on a held-out set and prints the confusion matrix and the
//! training images the model still disagrees with.
//!
//! `cargo run --release --example train_and_evaluate`

use std::collections::BTreeSet;

use hydra_core::analytics::{build_ecm, select_default_thresholds, training_diff, Evaluator};
use hydra_core::image::Format;
use hydra_core::layout::ImageRoot;
use hydra_core::predict::train::{train_reference, TrainParams};
use hydra_core::predict::ReferenceBackend;
use hydra_core::sim::{Effect, Region, StreamSpec, Truth};
use hydra_core::store::{MemoryStore, Store};
use hydra_core::*;

/// Writes frame `i` of `spec` under the image root, registers and labels it.
fn labeled(store: &MemoryStore, root: &ImageRoot, plot: &PlotType, spec: &StreamSpec, i: u64, label: &LabelDef) -> ImageId {
    let effects: Vec<Effect> = match label.name.as_str() {
        "Dead" => vec![Effect {
            truth: Truth::Dead,
            region: Region { x: (i as u32 * 5) % 20, y: (i as u32 * 11) % 20, width: 10, height: 10 },
        }],
        _ => vec![],
    };
    let file = spec.file_name(i);
    let rel = ImageRoot::image_path(&plot.name, spec.run_number, &file);
    let path = root.resolve(&rel);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(&path, spec.frame(i, &effects).encode(Format::Pgm).unwrap()).unwrap();
    let image = store
        .register_image(NewImage {
            plot_type_id: plot.plot_type_id,
            run_number: spec.run_number,
            sequence: i,
            capture_time: Timestamp(spec.start_ms + i as i64 * spec.interval_ms),
            storage_path: rel,
            width: spec.width,
            height: spec.height,
        })
        .unwrap();
    store.assign_label(image.image_id, label.label_id, "sim", Timestamp(0)).unwrap();
    image.image_id
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let root = ImageRoot::new(dir.path().join("images"));
    let store = MemoryStore::new();
    let (plot, labels) = store.register_plot_type(NewPlotType {
        name: "occupancy".into(),
        input_width: 24,
        input_height: 24,
        channels: 1,
        labels: vec![
            LabelSpec::new("Good", Rgb::GREEN, Severity::Good),
            LabelSpec::new("Dead", Rgb::RED, Severity::Bad),
        ],
        allowed_labelers: BTreeSet::from(["sim".to_string()]),
    })?;

    let mut train_spec = StreamSpec::new("occupancy", 32, 32, 5);
    train_spec.run_number = 1;
    let mut members = Vec::new();
    for i in 0..80u64 {
        let label = &labels[(i % 2) as usize];
        members.push((labeled(&store, &root, &plot, &train_spec, i, label), label.label_id));
    }
    let set = store.create_training_set(plot.plot_type_id, members, "alternating", Timestamp(0))?;
    let params = TrainParams { epochs: 300, seed: 4, ..TrainParams::default() };
    let trained = train_reference(&store, &root, &dir.path().join("models"), set.training_set_id, params, 0.1, Timestamp(0))?;
    let model = trained.record.model_id;
    println!(
        "model {model}: loss {:.4} -> {:.4}, training accuracy {:.3}",
        trained.losses[0],
        trained.losses.last().unwrap(),
        trained.training_accuracy
    );

    let mut held_out_spec = StreamSpec::new("occupancy", 32, 32, 6);
    held_out_spec.run_number = 2;
    let held_out: Vec<(ImageId, LabelId)> = (0..40u64)
        .map(|i| {
            let label = &labels[(i % 2) as usize];
            (labeled(&store, &root, &plot, &held_out_spec, i, label), label.label_id)
        })
        .collect();

    let eval = Evaluator { store: &store, backend: &ReferenceBackend, image_root: &root };
    print!("{}", select_default_thresholds(&eval, model, &held_out)?.to_text());
    print!("{}", build_ecm(&eval, model, &held_out)?.to_text());
    let training = eval.with_current_labels(&set.members.iter().map(|m| m.0).collect::<Vec<_>>())?;
    let diff = training_diff(&eval, model, &training)?;
    println!("training images the model disagrees with: {} of {}", diff.disagreements.len(), diff.evaluated);
    Ok(())
}
