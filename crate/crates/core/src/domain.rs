//! Persistent entities shared by every stage of the pipeline.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::time::Timestamp;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(PlotTypeId);
id_type!(LabelId);
id_type!(ImageId);
id_type!(ModelId);
id_type!(InferenceId);
id_type!(TrainingSetId);
id_type!(
    /// Identifies one inference order end to end. The feeder derives it from
    /// the image id, so there is exactly one order per registered image.
    OrderId
);

pub type UserId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Severity {
    Good,
    Bad,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgb(pub u8, pub u8, pub u8);

impl Rgb {
    pub const GREEN: Rgb = Rgb(0x2e, 0xa0, 0x43);
    pub const RED: Rgb = Rgb(0xd7, 0x3a, 0x49);
    pub const AMBER: Rgb = Rgb(0xe3, 0xb3, 0x41);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotType {
    pub plot_type_id: PlotTypeId,
    pub name: String,
    pub input_width: u32,
    pub input_height: u32,
    pub channels: u8,
    pub allowed_labelers: BTreeSet<UserId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDef {
    pub label_id: LabelId,
    pub plot_type_id: PlotTypeId,
    pub name: String,
    pub color: Rgb,
    pub severity: Severity,
}

/// A label as supplied to plot type registration, before ids exist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub name: String,
    pub color: Rgb,
    pub severity: Severity,
}

impl LabelSpec {
    pub fn new(name: impl Into<String>, color: Rgb, severity: Severity) -> Self {
        LabelSpec { name: name.into(), color, severity }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewPlotType {
    pub name: String,
    pub input_width: u32,
    pub input_height: u32,
    pub channels: u8,
    pub labels: Vec<LabelSpec>,
    pub allowed_labelers: BTreeSet<UserId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub plot_type_id: PlotTypeId,
    pub run_number: u64,
    pub sequence: u64,
    pub capture_time: Timestamp,
    /// Relative to the configured image root.
    pub storage_path: PathBuf,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewImage {
    pub plot_type_id: PlotTypeId,
    pub run_number: u64,
    pub sequence: u64,
    pub capture_time: Timestamp,
    pub storage_path: PathBuf,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub image_id: ImageId,
    pub label_id: LabelId,
    pub labeler: UserId,
    pub assigned_at: Timestamp,
    pub superseded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
}

impl InputShape {
    pub fn of(plot_type: &PlotType) -> Self {
        InputShape {
            width: plot_type.input_width,
            height: plot_type.input_height,
            channels: plot_type.channels,
        }
    }
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: ModelId,
    pub plot_type_id: PlotTypeId,
    pub artifact_path: PathBuf,
    /// Layout of the output-weight vector.
    pub label_order: Vec<LabelId>,
    pub input_shape: InputShape,
    pub active: bool,
    pub training_set_id: Option<TrainingSetId>,
    pub sampling_method: String,
    /// Probability that the keeper retains a confirmed-Good image.
    pub collect_percentage: f64,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewModel {
    pub plot_type_id: PlotTypeId,
    pub artifact_path: PathBuf,
    pub label_order: Vec<LabelId>,
    pub input_shape: InputShape,
    pub training_set_id: Option<TrainingSetId>,
    pub sampling_method: String,
    pub collect_percentage: f64,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub model_id: ModelId,
    pub label_id: LabelId,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub training_set_id: TrainingSetId,
    pub plot_type_id: PlotTypeId,
    pub members: Vec<(ImageId, LabelId)>,
    pub sampling_method: String,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CollectReason {
    BadClass,
    Unconfirmed,
    RandomSample,
    None,
}

pub mod stage {
    pub const FEEDER: &str = "feeder";
    pub const BALANCER: &str = "balancer";
    pub const PREDICT: &str = "predict";
    pub const KEEPER: &str = "keeper";

    pub const PIPELINE: [&str; 4] = [FEEDER, BALANCER, PREDICT, KEEPER];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub nanos: u64,
}

/// Per-stage processing times, in the order the stages appended them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageTimings(pub Vec<StageTiming>);

impl StageTimings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, stage: &str, elapsed: Duration) {
        self.0.push(StageTiming {
            stage: stage.to_string(),
            nanos: elapsed.as_nanos().min(u64::MAX as u128) as u64,
        });
    }

    pub fn get(&self, stage: &str) -> Option<Duration> {
        self.0.iter().find(|t| t.stage == stage).map(|t| Duration::from_nanos(t.nanos))
    }

    pub fn stages(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|t| t.stage.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Duration)> {
        self.0.iter().map(|t| (t.stage.as_str(), Duration::from_nanos(t.nanos)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A RunHistory row before the store assigns its id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceDraft {
    pub order_id: OrderId,
    pub image_id: ImageId,
    pub model_id: ModelId,
    pub output_weights: Vec<f64>,
    pub classification: LabelId,
    pub confirmed: bool,
    pub collected: bool,
    pub collect_reason: CollectReason,
    pub stage_timings: StageTimings,
    pub inferred_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistoryEntry {
    pub inference_id: InferenceId,
    pub order_id: OrderId,
    pub image_id: ImageId,
    pub model_id: ModelId,
    pub output_weights: Vec<f64>,
    pub classification: LabelId,
    pub confirmed: bool,
    pub collected: bool,
    pub collect_reason: CollectReason,
    pub stage_timings: StageTimings,
    pub inferred_at: Timestamp,
}

impl InferenceDraft {
    pub fn into_entry(self, inference_id: InferenceId) -> RunHistoryEntry {
        RunHistoryEntry {
            inference_id,
            order_id: self.order_id,
            image_id: self.image_id,
            model_id: self.model_id,
            output_weights: self.output_weights,
            classification: self.classification,
            confirmed: self.confirmed,
            collected: self.collected,
            collect_reason: self.collect_reason,
            stage_timings: self.stage_timings,
            inferred_at: self.inferred_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunTimeEntry {
    pub inference_id: InferenceId,
    pub image_id: ImageId,
    pub plot_type_id: PlotTypeId,
    /// Relative to the image root.
    pub image_path: PathBuf,
    /// Relative to the image root; present only for Bad classifications.
    pub gradcam_path: Option<PathBuf>,
    pub classification: LabelId,
    pub confirmed: bool,
    pub inferred_at: Timestamp,
}

/// Index of the largest weight, smallest index on exact ties.
pub fn argmax(weights: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &w) in weights.iter().enumerate() {
        match best {
            Some((_, b)) if w <= b => {}
            _ => best = Some((i, w)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5]), Some(0));
        assert_eq!(argmax(&[0.1, 0.3, 0.3, 0.3]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn stage_timings_keep_append_order() {
        let mut t = StageTimings::new();
        t.push(stage::FEEDER, Duration::from_micros(5));
        t.push(stage::BALANCER, Duration::from_nanos(900));
        assert_eq!(t.stages().collect::<Vec<_>>(), vec!["feeder", "balancer"]);
        assert_eq!(t.get("balancer"), Some(Duration::from_nanos(900)));
    }
}
