//! Persistence for every entity in [`crate::domain`].
//!
//! [`Store`] is the single interface the pipeline stages, analytics and the
//! HTTP service talk to. Two implementations ship: [`MemoryStore`] for tests
//! and embedded use, and [`FileStore`], which journals every mutation to disk
//! so that several processes can share one database directory.

mod file;
mod memory;

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::*;
use crate::time::{TimeRange, Timestamp};

pub use file::{FileStore, JOURNAL_FILE, SCHEMA_FILE, SCHEMA_VERSION};
pub use memory::MemoryStore;

/// Default length of the RunTime live view.
pub const DEFAULT_RETENTION: Duration = Duration::from_secs(300);

/// Sum-to-one tolerance for stored output weights.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("plot type name {0:?} already registered")]
    DuplicateName(String),
    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),
    #[error("invalid plot type: {0}")]
    InvalidPlotType(String),
    #[error("unknown plot type {0}")]
    UnknownPlotType(PlotTypeId),
    #[error("unknown label {0}")]
    UnknownLabel(LabelId),
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error("unknown model {0}")]
    UnknownModel(ModelId),
    #[error("unknown inference {0}")]
    UnknownInference(InferenceId),
    #[error("unknown training set {0}")]
    UnknownTrainingSet(TrainingSetId),
    #[error("image (plot type {plot_type_id}, run {run_number}, sequence {sequence}) already registered")]
    DuplicateImage {
        plot_type_id: PlotTypeId,
        run_number: u64,
        sequence: u64,
    },
    #[error("malformed output weights: {0}")]
    MalformedWeights(String),
    #[error("user {user:?} may not label plot type {plot_type_id}")]
    PermissionDenied { user: String, plot_type_id: PlotTypeId },
    #[error("label {label_id} does not belong to plot type {plot_type_id}")]
    LabelPlotTypeMismatch { label_id: LabelId, plot_type_id: PlotTypeId },
    #[error("limit must be at least 1")]
    InvalidLimit,
    #[error("time window start is after its end")]
    InvalidWindow,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("threshold {0} for label {1} outside [0, 1]")]
    InvalidThreshold(f64, LabelId),
    #[error("invalid training set: {0}")]
    InvalidTrainingSet(String),
    #[error("storage I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt journal at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

impl StoreError {
    /// Whether retrying the same call could succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, StoreError::Io(_))
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Filter for RunHistory scans. Unset fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryQuery {
    pub plot_type_id: Option<PlotTypeId>,
    pub image_id: Option<ImageId>,
    pub model_id: Option<ModelId>,
    pub window: Option<TimeRange>,
}

impl HistoryQuery {
    pub fn window(window: TimeRange) -> Self {
        HistoryQuery { window: Some(window), ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightPoint {
    pub at: Timestamp,
    pub weight: f64,
}

/// The recorded output weights of one label over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSeries {
    pub label_id: LabelId,
    pub label_name: String,
    pub points: Vec<WeightPoint>,
}

pub trait Store: Send + Sync {
    /// Registers a plot type and its labels in one atomic step.
    fn register_plot_type(&self, new: NewPlotType) -> Result<(PlotType, Vec<LabelDef>)>;
    fn grant_labeler(&self, plot_type_id: PlotTypeId, user: &str) -> Result<()>;
    fn plot_types(&self) -> Result<Vec<PlotType>>;
    fn plot_type(&self, id: PlotTypeId) -> Result<PlotType>;
    fn plot_type_by_name(&self, name: &str) -> Result<Option<PlotType>>;
    /// Labels of a plot type in registration order.
    fn labels(&self, plot_type_id: PlotTypeId) -> Result<Vec<LabelDef>>;
    fn label(&self, id: LabelId) -> Result<LabelDef>;

    fn register_image(&self, new: NewImage) -> Result<ImageRecord>;
    fn image(&self, id: ImageId) -> Result<ImageRecord>;
    fn image_by_key(&self, plot_type_id: PlotTypeId, run_number: u64, sequence: u64) -> Result<Option<ImageRecord>>;

    /// Makes `label_id` the current label of the image, superseding any
    /// previous assignment.
    fn assign_label(&self, image_id: ImageId, label_id: LabelId, labeler: &str, at: Timestamp) -> Result<LabelAssignment>;
    fn current_label(&self, image_id: ImageId) -> Result<Option<LabelAssignment>>;
    /// Every assignment for the image, oldest first.
    fn label_history(&self, image_id: ImageId) -> Result<Vec<LabelAssignment>>;
    /// Collected images without a current label, oldest capture first.
    fn query_unlabeled(&self, plot_type_id: PlotTypeId, limit: usize, window: Option<TimeRange>) -> Result<Vec<ImageRecord>>;
    /// Labeled images with their current assignment, oldest capture first.
    fn query_labeled(
        &self,
        plot_type_id: PlotTypeId,
        label: Option<LabelId>,
        window: Option<TimeRange>,
    ) -> Result<Vec<(ImageRecord, LabelAssignment)>>;

    /// Inserts an inactive model. Thresholds start at 0.5 for every label.
    fn insert_model(&self, new: NewModel) -> Result<ModelRecord>;
    fn model(&self, id: ModelId) -> Result<ModelRecord>;
    fn models(&self, plot_type_id: PlotTypeId) -> Result<Vec<ModelRecord>>;
    fn active_model(&self, plot_type_id: PlotTypeId) -> Result<Option<ModelRecord>>;
    /// Atomically makes `model_id` the only active model of its plot type and
    /// returns the previously active one.
    fn set_active_model(&self, model_id: ModelId) -> Result<Option<ModelId>>;
    fn set_thresholds(&self, model_id: ModelId, thresholds: &[(LabelId, f64)]) -> Result<Vec<ThresholdConfig>>;
    /// One row per label, in the model's label order.
    fn thresholds(&self, model_id: ModelId) -> Result<Vec<ThresholdConfig>>;

    fn create_training_set(
        &self,
        plot_type_id: PlotTypeId,
        members: Vec<(ImageId, LabelId)>,
        sampling_method: &str,
        at: Timestamp,
    ) -> Result<TrainingSet>;
    fn training_set(&self, id: TrainingSetId) -> Result<TrainingSet>;

    /// Appends an immutable RunHistory row.
    fn record_inference(&self, draft: InferenceDraft) -> Result<InferenceId>;
    fn inference(&self, id: InferenceId) -> Result<RunHistoryEntry>;
    /// Matching RunHistory rows ordered by (inferred_at, inference_id).
    fn query_history(&self, query: &HistoryQuery) -> Result<Vec<RunHistoryEntry>>;

    /// Adds an entry to the live view. Returns false when the entry is
    /// already outside the retention window.
    fn upsert_runtime(&self, entry: RunTimeEntry) -> Result<bool>;
    /// Live entries inside the retention window, newest first.
    fn live_entries(&self, plot_type_id: Option<PlotTypeId>) -> Result<Vec<RunTimeEntry>>;
    fn retention(&self) -> Duration;

    /// One series per label of the plot type, built from every RunHistory
    /// row in the window regardless of which model produced it.
    fn query_weight_series(&self, plot_type_id: PlotTypeId, window: TimeRange) -> Result<Vec<WeightSeries>> {
        if !window.is_valid() {
            return Err(StoreError::InvalidWindow);
        }
        let labels = self.labels(plot_type_id)?;
        let rows = self.query_history(&HistoryQuery {
            plot_type_id: Some(plot_type_id),
            window: Some(window),
            ..Default::default()
        })?;
        let mut orders: BTreeMap<ModelId, Vec<LabelId>> = BTreeMap::new();
        let mut series: Vec<WeightSeries> = labels
            .iter()
            .map(|l| WeightSeries { label_id: l.label_id, label_name: l.name.clone(), points: Vec::new() })
            .collect();
        for row in rows {
            let order = match orders.entry(row.model_id) {
                Entry::Occupied(e) => e.into_mut(),
                Entry::Vacant(e) => e.insert(self.model(row.model_id)?.label_order),
            };
            for (label_id, &weight) in order.iter().zip(&row.output_weights) {
                if let Some(s) = series.iter_mut().find(|s| s.label_id == *label_id) {
                    s.points.push(WeightPoint { at: row.inferred_at, weight });
                }
            }
        }
        Ok(series)
    }

    /// Current label of every image, failing on the first unlabeled one.
    fn labels_for(&self, images: &[ImageId]) -> Result<Vec<Option<LabelId>>> {
        images
            .iter()
            .map(|&id| Ok(self.current_label(id)?.map(|a| a.label_id)))
            .collect()
    }
}

/// Checks the label-set rules shared by both store implementations.
pub(crate) fn validate_new_plot_type(new: &NewPlotType) -> Result<()> {
    if new.name.is_empty() || new.name.contains(['/', '\\']) || new.name.contains('\0') {
        return Err(StoreError::InvalidPlotType(format!("bad name {:?}", new.name)));
    }
    if new.input_width < 8 || new.input_height < 8 {
        return Err(StoreError::InvalidPlotType(format!(
            "input shape {}x{} below the 8x8 minimum",
            new.input_width, new.input_height
        )));
    }
    if new.channels != 1 && new.channels != 3 {
        return Err(StoreError::InvalidPlotType(format!("channels must be 1 or 3, got {}", new.channels)));
    }
    if new.labels.len() < 2 {
        return Err(StoreError::InvalidLabelSet("at least two labels required".into()));
    }
    let good = new.labels.iter().filter(|l| l.severity == Severity::Good).count();
    if good != 1 {
        return Err(StoreError::InvalidLabelSet(format!("exactly one Good label required, found {good}")));
    }
    if !new.labels.iter().any(|l| l.severity == Severity::Bad) {
        return Err(StoreError::InvalidLabelSet("at least one Bad label required".into()));
    }
    for (i, l) in new.labels.iter().enumerate() {
        if l.name.is_empty() {
            return Err(StoreError::InvalidLabelSet("empty label name".into()));
        }
        if new.labels[..i].iter().any(|o| o.name == l.name) {
            return Err(StoreError::InvalidLabelSet(format!("duplicate label name {:?}", l.name)));
        }
    }
    Ok(())
}

pub(crate) fn validate_weights(weights: &[f64], expected_len: usize) -> Result<usize> {
    if weights.len() != expected_len {
        return Err(StoreError::MalformedWeights(format!(
            "expected {expected_len} weights, got {}",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(StoreError::MalformedWeights(format!("weight {w} outside [0, 1]")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(StoreError::MalformedWeights(format!("weights sum to {sum}")));
    }
    argmax(weights).ok_or_else(|| StoreError::MalformedWeights("empty weight vector".into()))
}
