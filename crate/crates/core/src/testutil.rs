//! Shared fixtures for unit tests.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::domain::*;
use crate::predict::{GradCamMap, Report};
use crate::store::{MemoryStore, Store, DEFAULT_RETENTION};
use crate::time::{ManualClock, Timestamp};

pub(crate) const T0: Timestamp = Timestamp(1_700_000_000_000);

pub(crate) struct Bench {
    pub store: Arc<MemoryStore>,
    pub clock: Arc<ManualClock>,
    pub plot: PlotType,
    /// Good, Dead (Bad), Hot (Bad)
    pub labels: Vec<LabelDef>,
    pub model: ModelRecord,
    pub images: Vec<ImageRecord>,
    pub dir: tempfile::TempDir,
}

pub(crate) fn bench(images: usize, collect_percentage: f64) -> Bench {
    let clock = Arc::new(ManualClock::new(T0));
    let store = Arc::new(MemoryStore::with_clock(clock.clone(), DEFAULT_RETENTION));
    let (plot, labels) = store
        .register_plot_type(NewPlotType {
            name: "occupancy".into(),
            input_width: 8,
            input_height: 8,
            channels: 1,
            labels: vec![
                LabelSpec::new("Good", Rgb::GREEN, Severity::Good),
                LabelSpec::new("Dead", Rgb::RED, Severity::Bad),
                LabelSpec::new("Hot", Rgb::AMBER, Severity::Bad),
            ],
            allowed_labelers: ["alice".to_string()].into_iter().collect::<BTreeSet<_>>(),
        })
        .unwrap();
    let images = (0..images as u64)
        .map(|i| {
            store
                .register_image(NewImage {
                    plot_type_id: plot.plot_type_id,
                    run_number: 100 + i / 10,
                    sequence: i,
                    capture_time: Timestamp(T0.0 + i as i64 * 1000),
                    storage_path: format!("occupancy/r{}/f{i}.pgm", 100 + i / 10).into(),
                    width: 8,
                    height: 8,
                })
                .unwrap()
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let model = store
        .insert_model(NewModel {
            plot_type_id: plot.plot_type_id,
            artifact_path: dir.path().join("unused.hydm"),
            label_order: labels.iter().map(|l| l.label_id).collect(),
            input_shape: InputShape::of(&plot),
            training_set_id: None,
            sampling_method: "all".into(),
            collect_percentage,
            created_at: T0,
        })
        .unwrap();
    store.set_active_model(model.model_id).unwrap();
    Bench { store, clock, plot, labels, model, images, dir }
}

impl Bench {
    pub fn report(&self, image: usize, weights: [f64; 3], at: Timestamp) -> Report {
        let top = argmax(&weights).unwrap();
        let severity = self.labels[top].severity;
        let mut stage_timings = StageTimings::new();
        stage_timings.push(stage::FEEDER, std::time::Duration::from_micros(40));
        stage_timings.push(stage::BALANCER, std::time::Duration::from_micros(2));
        stage_timings.push(stage::PREDICT, std::time::Duration::from_micros(900));
        let id = self.images[image].image_id;
        Report {
            order_id: OrderId(id.0),
            image_id: id,
            plot_type_id: self.plot.plot_type_id,
            model_id: self.model.model_id,
            label_order: self.model.label_order.clone(),
            output_weights: weights.to_vec(),
            classification: self.model.label_order[top],
            gradcam: (severity == Severity::Bad).then(|| GradCamMap {
                width: 8,
                height: 8,
                values: (0..64).map(|i| i as f64 / 63.0).collect(),
            }),
            stage_timings,
            inferred_at: at,
        }
    }

    pub fn set_thresholds(&self, t: [f64; 3]) {
        let pairs: Vec<_> = self.model.label_order.iter().copied().zip(t).collect();
        self.store.set_thresholds(self.model.model_id, &pairs).unwrap();
    }
}
