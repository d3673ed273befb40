use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;

use super::*;
use crate::time::{Clock, SystemClock};

/// In-process store. Every call takes one lock, so writes to the store are
/// serialized and readers only ever see committed state.
pub struct MemoryStore {
    inner: RwLock<Inner>,
    clock: Arc<dyn Clock>,
    retention: Duration,
}

#[derive(Default)]
struct Inner {
    plot_types: BTreeMap<PlotTypeId, PlotType>,
    labels: BTreeMap<LabelId, LabelDef>,
    images: BTreeMap<ImageId, ImageRecord>,
    image_keys: HashMap<(PlotTypeId, u64, u64), ImageId>,
    assignments: HashMap<ImageId, Vec<LabelAssignment>>,
    models: BTreeMap<ModelId, ModelRecord>,
    thresholds: HashMap<ModelId, Vec<ThresholdConfig>>,
    training_sets: BTreeMap<TrainingSetId, TrainingSet>,
    history: Vec<RunHistoryEntry>,
    collected: HashSet<ImageId>,
    runtime: BTreeMap<InferenceId, RunTimeEntry>,
    next_id: u64,
}

impl Inner {
    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn plot_type(&self, id: PlotTypeId) -> Result<&PlotType> {
        self.plot_types.get(&id).ok_or(StoreError::UnknownPlotType(id))
    }

    fn image(&self, id: ImageId) -> Result<&ImageRecord> {
        self.images.get(&id).ok_or(StoreError::UnknownImage(id))
    }

    fn model(&self, id: ModelId) -> Result<&ModelRecord> {
        self.models.get(&id).ok_or(StoreError::UnknownModel(id))
    }

    fn current_label(&self, image: ImageId) -> Option<&LabelAssignment> {
        self.assignments.get(&image).and_then(|v| v.last()).filter(|a| !a.superseded)
    }
}

impl Default for MemoryStore {
    fn default() -> Self {
        Self::new()
    }
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::with_clock(Arc::new(SystemClock), DEFAULT_RETENTION)
    }

    pub fn with_clock(clock: Arc<dyn Clock>, retention: Duration) -> Self {
        MemoryStore { inner: RwLock::new(Inner::default()), clock, retention }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn cutoff(&self) -> Timestamp {
        self.clock.now().saturating_sub(self.retention)
    }
}

fn sort_by_capture(images: &mut [ImageRecord]) {
    images.sort_by_key(|i| (i.capture_time, i.image_id));
}

impl Store for MemoryStore {
    fn register_plot_type(&self, new: NewPlotType) -> Result<(PlotType, Vec<LabelDef>)> {
        validate_new_plot_type(&new)?;
        let mut inner = self.inner.write();
        if inner.plot_types.values().any(|p| p.name == new.name) {
            return Err(StoreError::DuplicateName(new.name));
        }
        let plot_type_id = PlotTypeId(inner.fresh_id());
        let plot_type = PlotType {
            plot_type_id,
            name: new.name,
            input_width: new.input_width,
            input_height: new.input_height,
            channels: new.channels,
            allowed_labelers: new.allowed_labelers,
        };
        let mut labels = Vec::with_capacity(new.labels.len());
        for spec in new.labels {
            let label = LabelDef {
                label_id: LabelId(inner.fresh_id()),
                plot_type_id,
                name: spec.name,
                color: spec.color,
                severity: spec.severity,
            };
            inner.labels.insert(label.label_id, label.clone());
            labels.push(label);
        }
        inner.plot_types.insert(plot_type_id, plot_type.clone());
        Ok((plot_type, labels))
    }

    fn grant_labeler(&self, plot_type_id: PlotTypeId, user: &str) -> Result<()> {
        let mut inner = self.inner.write();
        let pt = inner.plot_types.get_mut(&plot_type_id).ok_or(StoreError::UnknownPlotType(plot_type_id))?;
        pt.allowed_labelers.insert(user.to_string());
        Ok(())
    }

    fn plot_types(&self) -> Result<Vec<PlotType>> {
        Ok(self.inner.read().plot_types.values().cloned().collect())
    }

    fn plot_type(&self, id: PlotTypeId) -> Result<PlotType> {
        self.inner.read().plot_type(id).cloned()
    }

    fn plot_type_by_name(&self, name: &str) -> Result<Option<PlotType>> {
        Ok(self.inner.read().plot_types.values().find(|p| p.name == name).cloned())
    }

    fn labels(&self, plot_type_id: PlotTypeId) -> Result<Vec<LabelDef>> {
        let inner = self.inner.read();
        inner.plot_type(plot_type_id)?;
        Ok(inner.labels.values().filter(|l| l.plot_type_id == plot_type_id).cloned().collect())
    }

    fn label(&self, id: LabelId) -> Result<LabelDef> {
        self.inner.read().labels.get(&id).cloned().ok_or(StoreError::UnknownLabel(id))
    }

    fn register_image(&self, new: NewImage) -> Result<ImageRecord> {
        let mut inner = self.inner.write();
        inner.plot_type(new.plot_type_id)?;
        if new.storage_path.is_absolute()
            || new.storage_path.components().any(|c| matches!(c, std::path::Component::ParentDir))
        {
            return Err(StoreError::InvalidPlotType(format!(
                "storage path {} escapes the image root",
                new.storage_path.display()
            )));
        }
        let key = (new.plot_type_id, new.run_number, new.sequence);
        if inner.image_keys.contains_key(&key) {
            return Err(StoreError::DuplicateImage {
                plot_type_id: new.plot_type_id,
                run_number: new.run_number,
                sequence: new.sequence,
            });
        }
        let record = ImageRecord {
            image_id: ImageId(inner.fresh_id()),
            plot_type_id: new.plot_type_id,
            run_number: new.run_number,
            sequence: new.sequence,
            capture_time: new.capture_time,
            storage_path: new.storage_path,
            width: new.width,
            height: new.height,
        };
        inner.image_keys.insert(key, record.image_id);
        inner.images.insert(record.image_id, record.clone());
        Ok(record)
    }

    fn image(&self, id: ImageId) -> Result<ImageRecord> {
        self.inner.read().image(id).cloned()
    }

    fn image_by_key(&self, plot_type_id: PlotTypeId, run_number: u64, sequence: u64) -> Result<Option<ImageRecord>> {
        let inner = self.inner.read();
        Ok(inner
            .image_keys
            .get(&(plot_type_id, run_number, sequence))
            .and_then(|id| inner.images.get(id))
            .cloned())
    }

    fn assign_label(&self, image_id: ImageId, label_id: LabelId, labeler: &str, at: Timestamp) -> Result<LabelAssignment> {
        let mut inner = self.inner.write();
        let plot_type_id = inner.image(image_id)?.plot_type_id;
        let label = inner.labels.get(&label_id).ok_or(StoreError::UnknownLabel(label_id))?;
        if label.plot_type_id != plot_type_id {
            return Err(StoreError::LabelPlotTypeMismatch { label_id, plot_type_id });
        }
        if !inner.plot_type(plot_type_id)?.allowed_labelers.contains(labeler) {
            return Err(StoreError::PermissionDenied { user: labeler.to_string(), plot_type_id });
        }
        let history = inner.assignments.entry(image_id).or_default();
        // Keep the history ordered by time even if a caller's clock lags.
        let at = history.last().map_or(at, |prev| at.max(prev.assigned_at));
        for prev in history.iter_mut() {
            prev.superseded = true;
        }
        let assignment = LabelAssignment {
            image_id,
            label_id,
            labeler: labeler.to_string(),
            assigned_at: at,
            superseded: false,
        };
        history.push(assignment.clone());
        Ok(assignment)
    }

    fn current_label(&self, image_id: ImageId) -> Result<Option<LabelAssignment>> {
        let inner = self.inner.read();
        inner.image(image_id)?;
        Ok(inner.current_label(image_id).cloned())
    }

    fn label_history(&self, image_id: ImageId) -> Result<Vec<LabelAssignment>> {
        let inner = self.inner.read();
        inner.image(image_id)?;
        Ok(inner.assignments.get(&image_id).cloned().unwrap_or_default())
    }

    fn query_unlabeled(&self, plot_type_id: PlotTypeId, limit: usize, window: Option<TimeRange>) -> Result<Vec<ImageRecord>> {
        if limit == 0 {
            return Err(StoreError::InvalidLimit);
        }
        if window.is_some_and(|w| !w.is_valid()) {
            return Err(StoreError::InvalidWindow);
        }
        let inner = self.inner.read();
        inner.plot_type(plot_type_id)?;
        let mut found: Vec<ImageRecord> = inner
            .collected
            .iter()
            .filter_map(|id| inner.images.get(id))
            .filter(|i| i.plot_type_id == plot_type_id)
            .filter(|i| window.is_none_or(|w| w.contains(i.capture_time)))
            .filter(|i| inner.current_label(i.image_id).is_none())
            .cloned()
            .collect();
        sort_by_capture(&mut found);
        found.truncate(limit);
        Ok(found)
    }

    fn query_labeled(
        &self,
        plot_type_id: PlotTypeId,
        label: Option<LabelId>,
        window: Option<TimeRange>,
    ) -> Result<Vec<(ImageRecord, LabelAssignment)>> {
        if window.is_some_and(|w| !w.is_valid()) {
            return Err(StoreError::InvalidWindow);
        }
        let inner = self.inner.read();
        inner.plot_type(plot_type_id)?;
        let mut found: Vec<(ImageRecord, LabelAssignment)> = inner
            .images
            .values()
            .filter(|i| i.plot_type_id == plot_type_id)
            .filter(|i| window.is_none_or(|w| w.contains(i.capture_time)))
            .filter_map(|i| inner.current_label(i.image_id).map(|a| (i.clone(), a.clone())))
            .filter(|(_, a)| label.is_none_or(|l| a.label_id == l))
            .collect();
        found.sort_by_key(|(i, _)| (i.capture_time, i.image_id));
        Ok(found)
    }

    fn insert_model(&self, new: NewModel) -> Result<ModelRecord> {
        let mut inner = self.inner.write();
        inner.plot_type(new.plot_type_id)?;
        let mut expected: Vec<LabelId> = inner
            .labels
            .values()
            .filter(|l| l.plot_type_id == new.plot_type_id)
            .map(|l| l.label_id)
            .collect();
        let mut given = new.label_order.clone();
        expected.sort();
        given.sort();
        if expected != given {
            return Err(StoreError::InvalidModel("label order is not a permutation of the plot type's labels".into()));
        }
        if !(0.0..=1.0).contains(&new.collect_percentage) {
            return Err(StoreError::InvalidModel(format!(
                "collect percentage {} outside [0, 1]",
                new.collect_percentage
            )));
        }
        if let Some(ts) = new.training_set_id {
            if !inner.training_sets.contains_key(&ts) {
                return Err(StoreError::UnknownTrainingSet(ts));
            }
        }
        let model_id = ModelId(inner.fresh_id());
        let record = ModelRecord {
            model_id,
            plot_type_id: new.plot_type_id,
            artifact_path: new.artifact_path,
            label_order: new.label_order,
            input_shape: new.input_shape,
            active: false,
            training_set_id: new.training_set_id,
            sampling_method: new.sampling_method,
            collect_percentage: new.collect_percentage,
            created_at: new.created_at,
        };
        let thresholds = record
            .label_order
            .iter()
            .map(|&label_id| ThresholdConfig { model_id, label_id, threshold: 0.5 })
            .collect();
        inner.thresholds.insert(model_id, thresholds);
        inner.models.insert(model_id, record.clone());
        Ok(record)
    }

    fn model(&self, id: ModelId) -> Result<ModelRecord> {
        self.inner.read().model(id).cloned()
    }

    fn models(&self, plot_type_id: PlotTypeId) -> Result<Vec<ModelRecord>> {
        let inner = self.inner.read();
        inner.plot_type(plot_type_id)?;
        Ok(inner.models.values().filter(|m| m.plot_type_id == plot_type_id).cloned().collect())
    }

    fn active_model(&self, plot_type_id: PlotTypeId) -> Result<Option<ModelRecord>> {
        let inner = self.inner.read();
        inner.plot_type(plot_type_id)?;
        Ok(inner.models.values().find(|m| m.plot_type_id == plot_type_id && m.active).cloned())
    }

    fn set_active_model(&self, model_id: ModelId) -> Result<Option<ModelId>> {
        let mut inner = self.inner.write();
        let plot_type_id = inner.model(model_id)?.plot_type_id;
        let mut previous = None;
        for m in inner.models.values_mut().filter(|m| m.plot_type_id == plot_type_id) {
            if m.active {
                previous = Some(m.model_id);
            }
            m.active = m.model_id == model_id;
        }
        Ok(previous)
    }

    fn set_thresholds(&self, model_id: ModelId, thresholds: &[(LabelId, f64)]) -> Result<Vec<ThresholdConfig>> {
        let mut inner = self.inner.write();
        let order = inner.model(model_id)?.label_order.clone();
        for &(label_id, t) in thresholds {
            if !order.contains(&label_id) {
                return Err(StoreError::UnknownLabel(label_id));
            }
            if !(0.0..=1.0).contains(&t) {
                return Err(StoreError::InvalidThreshold(t, label_id));
            }
        }
        let rows = inner.thresholds.entry(model_id).or_default();
        for &(label_id, t) in thresholds {
            if let Some(row) = rows.iter_mut().find(|r| r.label_id == label_id) {
                row.threshold = t;
            }
        }
        Ok(rows.clone())
    }

    fn thresholds(&self, model_id: ModelId) -> Result<Vec<ThresholdConfig>> {
        let inner = self.inner.read();
        inner.model(model_id)?;
        Ok(inner.thresholds.get(&model_id).cloned().unwrap_or_default())
    }

    fn create_training_set(
        &self,
        plot_type_id: PlotTypeId,
        members: Vec<(ImageId, LabelId)>,
        sampling_method: &str,
        at: Timestamp,
    ) -> Result<TrainingSet> {
        let mut inner = self.inner.write();
        inner.plot_type(plot_type_id)?;
        for &(image_id, label_id) in &members {
            let image = inner.image(image_id)?;
            if image.plot_type_id != plot_type_id {
                return Err(StoreError::InvalidTrainingSet(format!(
                    "image {image_id} belongs to plot type {}",
                    image.plot_type_id
                )));
            }
            match inner.current_label(image_id) {
                Some(a) if a.label_id == label_id => {}
                _ => {
                    return Err(StoreError::InvalidTrainingSet(format!(
                        "image {image_id} is not currently labeled {label_id}"
                    )))
                }
            }
        }
        let set = TrainingSet {
            training_set_id: TrainingSetId(inner.fresh_id()),
            plot_type_id,
            members,
            sampling_method: sampling_method.to_string(),
            created_at: at,
        };
        inner.training_sets.insert(set.training_set_id, set.clone());
        Ok(set)
    }

    fn training_set(&self, id: TrainingSetId) -> Result<TrainingSet> {
        self.inner.read().training_sets.get(&id).cloned().ok_or(StoreError::UnknownTrainingSet(id))
    }

    fn record_inference(&self, draft: InferenceDraft) -> Result<InferenceId> {
        let mut inner = self.inner.write();
        inner.image(draft.image_id)?;
        let model = inner.model(draft.model_id)?;
        let top = validate_weights(&draft.output_weights, model.label_order.len())?;
        if model.label_order[top] != draft.classification {
            return Err(StoreError::MalformedWeights(format!(
                "classification {} is not the argmax label {}",
                draft.classification, model.label_order[top]
            )));
        }
        if draft.collected != (draft.collect_reason != CollectReason::None) {
            return Err(StoreError::MalformedWeights("collected flag disagrees with collect reason".into()));
        }
        let id = InferenceId(inner.history.len() as u64 + 1);
        if draft.collected {
            inner.collected.insert(draft.image_id);
        }
        inner.history.push(draft.into_entry(id));
        Ok(id)
    }

    fn inference(&self, id: InferenceId) -> Result<RunHistoryEntry> {
        let inner = self.inner.read();
        id.0.checked_sub(1)
            .and_then(|i| inner.history.get(i as usize))
            .cloned()
            .ok_or(StoreError::UnknownInference(id))
    }

    fn query_history(&self, query: &HistoryQuery) -> Result<Vec<RunHistoryEntry>> {
        if query.window.is_some_and(|w| !w.is_valid()) {
            return Err(StoreError::InvalidWindow);
        }
        let inner = self.inner.read();
        if let Some(pt) = query.plot_type_id {
            inner.plot_type(pt)?;
        }
        let mut rows: Vec<RunHistoryEntry> = inner
            .history
            .iter()
            .filter(|r| query.image_id.is_none_or(|i| r.image_id == i))
            .filter(|r| query.model_id.is_none_or(|m| r.model_id == m))
            .filter(|r| query.window.is_none_or(|w| w.contains(r.inferred_at)))
            .filter(|r| {
                query
                    .plot_type_id
                    .is_none_or(|pt| inner.images.get(&r.image_id).is_some_and(|i| i.plot_type_id == pt))
            })
            .cloned()
            .collect();
        rows.sort_by_key(|r| (r.inferred_at, r.inference_id));
        Ok(rows)
    }

    fn upsert_runtime(&self, entry: RunTimeEntry) -> Result<bool> {
        let cutoff = self.cutoff();
        let mut inner = self.inner.write();
        inner.runtime.retain(|_, e| e.inferred_at >= cutoff);
        if entry.inferred_at < cutoff {
            return Ok(false);
        }
        inner.runtime.insert(entry.inference_id, entry);
        Ok(true)
    }

    fn live_entries(&self, plot_type_id: Option<PlotTypeId>) -> Result<Vec<RunTimeEntry>> {
        let cutoff = self.cutoff();
        let inner = self.inner.read();
        if let Some(pt) = plot_type_id {
            inner.plot_type(pt)?;
        }
        let mut live: Vec<RunTimeEntry> = inner
            .runtime
            .values()
            .filter(|e| e.inferred_at >= cutoff)
            .filter(|e| plot_type_id.is_none_or(|pt| e.plot_type_id == pt))
            .cloned()
            .collect();
        live.sort_by_key(|e| std::cmp::Reverse((e.inferred_at, e.inference_id)));
        Ok(live)
    }

    fn retention(&self) -> Duration {
        self.retention
    }
}
