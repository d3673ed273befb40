//! Predict workers: buffer orders, run the plot type's active model and
//! emit reports.

pub mod artifact;
pub mod classifier;
pub mod gradcam;
pub mod train;

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use crossbeam_channel::{bounded, Receiver, Sender};
use thiserror::Error;
use tracing::warn;

use crate::domain::*;
use crate::ingest::InferenceOrder;
use crate::store::{Store, StoreError};
use crate::time::{Clock, Timestamp};

pub use classifier::{
    softmax, BackendError, Classifier, ClassifierBackend, FeatureMap, Inference, ReferenceBackend, ReferenceClassifier,
};
pub use gradcam::{gradcam, GradCamMap};

pub const DEFAULT_BUFFER: usize = 256;
pub const DEAD_LETTER_FILE: &str = "predict-dead-letter.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub order_id: OrderId,
    pub image_id: ImageId,
    pub plot_type_id: PlotTypeId,
    pub model_id: ModelId,
    /// Layout of `output_weights`.
    pub label_order: Vec<LabelId>,
    pub output_weights: Vec<f64>,
    pub classification: LabelId,
    /// Present exactly when the classification has Bad severity.
    pub gradcam: Option<GradCamMap>,
    pub stage_timings: StageTimings,
    pub inferred_at: Timestamp,
}

impl Report {
    pub fn classification_weight(&self) -> f64 {
        self.label_order
            .iter()
            .position(|&l| l == self.classification)
            .map_or(0.0, |i| self.output_weights[i])
    }
}

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("no active model for plot type {0}")]
    NoActiveModel(PlotTypeId),
    #[error("order payload {got} does not match model input {expected}")]
    ShapeMismatch { expected: InputShape, got: InputShape },
    #[error("classifier backend: {0}")]
    BackendFailure(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<BackendError> for PredictError {
    fn from(e: BackendError) -> Self {
        PredictError::BackendFailure(e.to_string())
    }
}

impl From<gradcam::ShapeMismatch> for PredictError {
    fn from(e: gradcam::ShapeMismatch) -> Self {
        PredictError::BackendFailure(e.to_string())
    }
}

/// Producer side of a worker's FIFO buffer.
#[derive(Debug, Clone)]
pub struct BufferSender(Sender<InferenceOrder>);

impl BufferSender {
    /// Blocks while the buffer is full. Returns the order if the worker is gone.
    pub fn enqueue(&self, order: InferenceOrder) -> Result<(), InferenceOrder> {
        self.0.send(order).map_err(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Consumer side of a worker's FIFO buffer.
#[derive(Debug)]
pub struct OrderBuffer(Receiver<InferenceOrder>);

impl OrderBuffer {
    /// Blocks until an order arrives; `None` once every sender is dropped
    /// and the buffer is drained.
    pub fn next(&self) -> Option<InferenceOrder> {
        self.0.recv().ok()
    }

    pub fn try_next(&self) -> Option<InferenceOrder> {
        self.0.try_recv().ok()
    }
}

pub fn order_buffer(capacity: usize) -> (BufferSender, OrderBuffer) {
    let (tx, rx) = bounded(capacity);
    (BufferSender(tx), OrderBuffer(rx))
}

struct LoadedModel {
    classifier: Arc<dyn Classifier>,
    severities: Vec<Severity>,
}

pub struct PredictWorker {
    store: Arc<dyn Store>,
    backend: Arc<dyn ClassifierBackend>,
    clock: Arc<dyn Clock>,
    models: HashMap<ModelId, LoadedModel>,
    dead_letter_dir: Option<PathBuf>,
}

impl PredictWorker {
    pub fn new(store: Arc<dyn Store>, backend: Arc<dyn ClassifierBackend>, clock: Arc<dyn Clock>) -> Self {
        PredictWorker { store, backend, clock, models: HashMap::new(), dead_letter_dir: None }
    }

    /// Orders that cannot be processed are appended to
    /// `<dir>/predict-dead-letter.jsonl`.
    pub fn with_dead_letter(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dead_letter_dir = Some(dir.into());
        self
    }

    fn load(&mut self, model: &ModelRecord) -> Result<&LoadedModel, PredictError> {
        if !self.models.contains_key(&model.model_id) {
            let classifier = self.backend.load(&model.artifact_path)?;
            if classifier.label_order() != model.label_order.as_slice() {
                return Err(PredictError::BackendFailure(format!(
                    "artifact label order {:?} disagrees with model {}",
                    classifier.label_order(),
                    model.model_id
                )));
            }
            let severities = model
                .label_order
                .iter()
                .map(|&l| self.store.label(l).map(|d| d.severity))
                .collect::<Result<_, _>>()?;
            self.models.insert(model.model_id, LoadedModel { classifier, severities });
        }
        Ok(&self.models[&model.model_id])
    }

    pub fn infer(&mut self, order: &InferenceOrder) -> Result<Report, PredictError> {
        let started = Instant::now();
        let model = self
            .store
            .active_model(order.plot_type_id)?
            .ok_or(PredictError::NoActiveModel(order.plot_type_id))?;
        let got = InputShape {
            width: order.payload.width(),
            height: order.payload.height(),
            channels: order.payload.channels(),
        };
        if got != model.input_shape {
            return Err(PredictError::ShapeMismatch { expected: model.input_shape, got });
        }
        let loaded = self.load(&model)?;
        let inference = loaded.classifier.infer(&order.payload)?;
        if inference.logits.len() != model.label_order.len() {
            return Err(PredictError::BackendFailure(format!(
                "{} logits for {} labels",
                inference.logits.len(),
                model.label_order.len()
            )));
        }
        let output_weights = softmax(&inference.logits);
        let top = argmax(&output_weights).expect("non-empty label order");
        let gradcam = if loaded.severities[top] == Severity::Bad {
            let grads = loaded.classifier.class_gradients(&inference, top)?;
            Some(gradcam(&inference.feature_maps, &grads, got.width as usize, got.height as usize)?)
        } else {
            None
        };
        let mut stage_timings = order.stage_timings.clone();
        stage_timings.push(stage::PREDICT, started.elapsed());
        Ok(Report {
            order_id: order.order_id,
            image_id: order.image_id,
            plot_type_id: order.plot_type_id,
            model_id: model.model_id,
            classification: model.label_order[top],
            label_order: model.label_order,
            output_weights,
            gradcam,
            stage_timings,
            inferred_at: self.clock.now(),
        })
    }

    fn dead_letter(&self, order: &InferenceOrder, error: &PredictError) {
        warn!(order = %order.order_id, %error, "dropping order");
        let Some(dir) = &self.dead_letter_dir else { return };
        let line = serde_json::json!({
            "order_id": order.order_id,
            "image_id": order.image_id,
            "plot_type_id": order.plot_type_id,
            "payload_shape": [order.payload.width(), order.payload.height(), order.payload.channels()],
            "reason": error.to_string(),
            "at": self.clock.now(),
        });
        let written = std::fs::create_dir_all(dir).and_then(|_| {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(DEAD_LETTER_FILE))?;
            writeln!(f, "{line}")
        });
        if let Err(e) = written {
            warn!(error = %e, "could not write predict dead letter");
        }
    }

    /// Processes orders strictly in arrival order until the buffer closes or
    /// the report channel is dropped.
    pub fn run(&mut self, buffer: &OrderBuffer, reports: &Sender<Report>) {
        while let Some(order) = buffer.next() {
            match self.infer(&order) {
                Ok(report) => {
                    if reports.send(report).is_err() {
                        return;
                    }
                }
                Err(e) => self.dead_letter(&order, &e),
            }
        }
    }
}
