#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use hydra_core::image::{Format, Image};
use hydra_core::ingest::{Feeder, FeederConfig};
use hydra_core::layout::ImageRoot;
use hydra_core::predict::artifact;
use hydra_core::predict::train::initialize;
use hydra_core::store::Store;
use hydra_core::*;

pub struct Site {
    pub dir: tempfile::TempDir,
    pub plot: PlotType,
    pub labels: Vec<LabelDef>,
    pub model: ModelRecord,
}

impl Site {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn root(&self) -> ImageRoot {
        ImageRoot::new(self.path("images"))
    }

    pub fn feeder_config(&self) -> FeederConfig {
        FeederConfig {
            input_dir: self.path("input"),
            reject_dir: self.path("reject"),
            image_root: self.root(),
            state_dir: self.path("state"),
            poll_interval: Duration::from_millis(5),
        }
    }

    pub fn feeder(&self, store: Arc<dyn Store>) -> Feeder {
        Feeder::open(self.feeder_config(), store, Arc::new(SystemClock)).unwrap()
    }

    /// Drops a noisy 12x10 frame named by the convention into the input dir.
    pub fn drop_frame(&self, run: u64, seq: u64) -> String {
        let name = format!("{}_r{run}_s{seq}_t{}.pgm", self.plot.name, 1_700_000_000_000 + seq * 1000);
        let data = (0..120).map(|i| ((i * 7 + seq as usize * 13) % 256) as f32 / 255.0).collect();
        let img = Image::new(12, 10, 1, data).unwrap();
        write(&self.path("input").join(&name), &img.encode(Format::Pgm).unwrap());
        name
    }
}

pub fn write(path: &Path, bytes: &[u8]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, bytes).unwrap();
}

/// A plot type with Good/Bad labels and an active random-weight model.
pub fn site(store: &dyn Store) -> Site {
    let dir = tempfile::tempdir().unwrap();
    let (plot, labels) = store
        .register_plot_type(NewPlotType {
            name: "occupancy".into(),
            input_width: 8,
            input_height: 8,
            channels: 1,
            labels: vec![
                LabelSpec::new("Good", Rgb::GREEN, Severity::Good),
                LabelSpec::new("Bad", Rgb::RED, Severity::Bad),
            ],
            allowed_labelers: BTreeSet::new(),
        })
        .unwrap();
    let order: Vec<LabelId> = labels.iter().map(|l| l.label_id).collect();
    let path = dir.path().join("models/occupancy-1.hydm");
    write(&path, &artifact::encode(&initialize(plot.plot_type_id, order.clone(), 1, 3, 1)));
    let model = store
        .insert_model(NewModel {
            plot_type_id: plot.plot_type_id,
            artifact_path: path,
            label_order: order,
            input_shape: InputShape::of(&plot),
            training_set_id: None,
            sampling_method: "all".into(),
            collect_percentage: 0.5,
            created_at: Timestamp(0),
        })
        .unwrap();
    store.set_active_model(model.model_id).unwrap();
    Site { dir, plot, labels, model }
}

pub fn new_model(s: &Site) -> NewModel {
    NewModel {
        plot_type_id: s.plot.plot_type_id,
        artifact_path: s.model.artifact_path.clone(),
        label_order: s.model.label_order.clone(),
        input_shape: s.model.input_shape,
        training_set_id: None,
        sampling_method: "all".into(),
        collect_percentage: 0.0,
        created_at: Timestamp(1),
    }
}
