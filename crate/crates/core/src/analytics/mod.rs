//! Read-only analyses over the store: confusion matrices, threshold
//! selection, training disagreements, latency status and the daily digest.
//!
//! Every result has a `to_text` rendering: one record per line,
//! space-separated `key=value` fields, floats printed in shortest
//! round-trip form. The format is stable and documented in
//! `docs/analytics-output.md`.

mod diff;
mod digest;
mod ecm;
mod status;
mod thresholds;

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::domain::*;
use crate::image::{Image, ImageError};
use crate::ingest::prepare_payload;
use crate::layout::ImageRoot;
use crate::predict::{softmax, BackendError, Classifier, ClassifierBackend};
use crate::store::{Store, StoreError};

pub use diff::{training_diff, training_diff_from, Disagreement, TrainingDiff};
pub use digest::{build_log_digest, DigestEntry, LogDigest, DEFAULT_DIGEST_WINDOW};
pub use ecm::{build_ecm, EcmCell, EnhancedConfusionMatrix};
pub use status::{bucket_edges, bucket_index, status_metrics, LatencyHistogram, RunSeries, StatusReport, BUCKETS};
pub use thresholds::{
    effective_f1, select_default_thresholds, select_thresholds, ThresholdChoice, ThresholdSelection,
};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("image {0} has no current label")]
    UnlabeledImage(ImageId),
    #[error("model {0} does not exist")]
    NoModel(ModelId),
    #[error("evaluation set is empty")]
    EmptyEvaluationSet,
    #[error("label {0} is not in the model's label order")]
    ForeignLabel(LabelId),
    #[error("time window start is after its end")]
    InvalidWindow,
    #[error("image {image}: {source}")]
    Image { image: ImageId, source: ImageError },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for AnalyticsError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownModel(id) => AnalyticsError::NoModel(id),
            StoreError::InvalidWindow => AnalyticsError::InvalidWindow,
            other => AnalyticsError::Store(other),
        }
    }
}

pub type Result<T, E = AnalyticsError> = std::result::Result<T, E>;

/// One evaluated image: its true label and the model's output weights, both
/// in the model's label order.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub image_id: ImageId,
    pub truth: usize,
    pub weights: Vec<f64>,
}

impl Scored {
    pub fn predicted(&self) -> usize {
        argmax(&self.weights).expect("non-empty weights")
    }
}

/// Everything a model needs to be run offline.
pub struct Evaluator<'a> {
    pub store: &'a dyn Store,
    pub backend: &'a dyn ClassifierBackend,
    pub image_root: &'a ImageRoot,
}

impl Evaluator<'_> {
    /// Current label of every image of the plot type, oldest capture first.
    pub fn labeled_set(&self, plot_type_id: PlotTypeId) -> Result<Vec<(ImageId, LabelId)>> {
        Ok(self
            .store
            .query_labeled(plot_type_id, None, None)?
            .into_iter()
            .map(|(img, a)| (img.image_id, a.label_id))
            .collect())
    }

    /// Pairs every image with its current label, failing on unlabeled ones.
    pub fn with_current_labels(&self, images: &[ImageId]) -> Result<Vec<(ImageId, LabelId)>> {
        images
            .iter()
            .map(|&id| match self.store.current_label(id)? {
                Some(a) => Ok((id, a.label_id)),
                None => Err(AnalyticsError::UnlabeledImage(id)),
            })
            .collect()
    }

    /// Runs the model over the set in order.
    pub fn score(&self, model_id: ModelId, set: &[(ImageId, LabelId)]) -> Result<(ModelRecord, Vec<Scored>)> {
        let model = self.store.model(model_id)?;
        let classifier: Arc<dyn Classifier> = self.backend.load(&model.artifact_path)?;
        let scored = set
            .par_iter()
            .map(|&(image_id, truth)| {
                let truth = model
                    .label_order
                    .iter()
                    .position(|&l| l == truth)
                    .ok_or(AnalyticsError::ForeignLabel(truth))?;
                let record = self.store.image(image_id)?;
                let payload = Image::load(&self.image_root.resolve(&record.storage_path))
                    .and_then(|img| prepare_payload(&img, model.input_shape))
                    .map_err(|source| AnalyticsError::Image { image: image_id, source })?;
                let weights = softmax(&classifier.infer(&payload)?.logits);
                Ok(Scored { image_id, truth, weights })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((model, scored))
    }
}

/// Label names in the model's label order.
fn label_names(store: &dyn Store, order: &[LabelId]) -> Result<Vec<String>> {
    order.iter().map(|&l| Ok(store.label(l)?.name)).collect()
}

fn floats(v: &[f64]) -> String {
    if v.is_empty() {
        return "-".into();
    }
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests;
