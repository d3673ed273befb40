use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::*;
use crate::time::{Clock, SystemClock};

pub const SCHEMA_FILE: &str = "schema.json";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const SCHEMA_VERSION: u32 = 1;

/// One journal line. Replaying the journal in order against an empty
/// [`MemoryStore`] reproduces the database.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Mutation {
    RegisterPlotType(NewPlotType),
    GrantLabeler { plot_type_id: PlotTypeId, user: String },
    RegisterImage(NewImage),
    AssignLabel { image_id: ImageId, label_id: LabelId, labeler: String, at: Timestamp },
    InsertModel(NewModel),
    SetActiveModel { model_id: ModelId },
    SetThresholds { model_id: ModelId, thresholds: Vec<(LabelId, f64)> },
    CreateTrainingSet { plot_type_id: PlotTypeId, members: Vec<(ImageId, LabelId)>, sampling_method: String, at: Timestamp },
    RecordInference(InferenceDraft),
    UpsertRuntime(RunTimeEntry),
}

enum Outcome {
    PlotType(PlotType, Vec<LabelDef>),
    Unit,
    Image(ImageRecord),
    Assignment(LabelAssignment),
    Model(ModelRecord),
    Previous(Option<ModelId>),
    Thresholds(Vec<ThresholdConfig>),
    TrainingSet(TrainingSet),
    Inference(InferenceId),
    Accepted(bool),
}

fn apply(mem: &MemoryStore, m: &Mutation) -> Result<Outcome> {
    Ok(match m {
        Mutation::RegisterPlotType(new) => {
            let (p, l) = mem.register_plot_type(new.clone())?;
            Outcome::PlotType(p, l)
        }
        Mutation::GrantLabeler { plot_type_id, user } => {
            mem.grant_labeler(*plot_type_id, user)?;
            Outcome::Unit
        }
        Mutation::RegisterImage(new) => Outcome::Image(mem.register_image(new.clone())?),
        Mutation::AssignLabel { image_id, label_id, labeler, at } => {
            Outcome::Assignment(mem.assign_label(*image_id, *label_id, labeler, *at)?)
        }
        Mutation::InsertModel(new) => Outcome::Model(mem.insert_model(new.clone())?),
        Mutation::SetActiveModel { model_id } => Outcome::Previous(mem.set_active_model(*model_id)?),
        Mutation::SetThresholds { model_id, thresholds } => {
            Outcome::Thresholds(mem.set_thresholds(*model_id, thresholds)?)
        }
        Mutation::CreateTrainingSet { plot_type_id, members, sampling_method, at } => Outcome::TrainingSet(
            mem.create_training_set(*plot_type_id, members.clone(), sampling_method, *at)?,
        ),
        Mutation::RecordInference(draft) => Outcome::Inference(mem.record_inference(draft.clone())?),
        Mutation::UpsertRuntime(entry) => Outcome::Accepted(mem.upsert_runtime(entry.clone())?),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemaMarker {
    format: String,
    version: u32,
    tables: Vec<String>,
}

struct Journal {
    file: File,
    offset: u64,
    lines: usize,
}

/// A database directory holding a schema marker and an append-only mutation
/// journal. Every call first catches up on lines appended by other handles
/// (possibly in other processes), under an advisory file lock, so several
/// processes can share one directory.
pub struct FileStore {
    dir: PathBuf,
    mem: MemoryStore,
    journal: Mutex<Journal>,
}

impl FileStore {
    /// Creates the database directory, schema marker and empty journal.
    /// Idempotent on an existing database of the same version.
    pub fn init(dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let schema_path = dir.join(SCHEMA_FILE);
        if schema_path.exists() {
            check_schema(&schema_path)?;
        } else {
            let marker = SchemaMarker {
                format: "hydra-journal".into(),
                version: SCHEMA_VERSION,
                tables: [
                    "plot_types",
                    "labels",
                    "images",
                    "label_assignments",
                    "models",
                    "thresholds",
                    "training_sets",
                    "run_history",
                    "run_time",
                ]
                .map(String::from)
                .to_vec(),
            };
            let text = serde_json::to_string_pretty(&marker).expect("schema marker serializes");
            fs::write(&schema_path, text + "\n")?;
        }
        OpenOptions::new().create(true).append(true).open(dir.join(JOURNAL_FILE))?;
        Ok(())
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Self::open_with_clock(dir, Arc::new(SystemClock), DEFAULT_RETENTION)
    }

    pub fn open_with_clock(dir: impl AsRef<Path>, clock: Arc<dyn Clock>, retention: Duration) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        check_schema(&dir.join(SCHEMA_FILE))?;
        let file = OpenOptions::new().read(true).append(true).open(dir.join(JOURNAL_FILE))?;
        let store = FileStore {
            dir,
            mem: MemoryStore::with_clock(clock, retention),
            journal: Mutex::new(Journal { file, offset: 0, lines: 0 }),
        };
        {
            let mut j = store.journal.lock();
            j.file.lock_shared()?;
            let caught = store.catch_up(&mut j);
            j.file.unlock()?;
            caught?;
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn catch_up(&self, j: &mut Journal) -> Result<()> {
        let len = j.file.metadata()?.len();
        if len <= j.offset {
            return Ok(());
        }
        j.file.seek(SeekFrom::Start(j.offset))?;
        let mut buf = Vec::with_capacity((len - j.offset) as usize);
        (&mut j.file).take(len - j.offset).read_to_end(&mut buf)?;
        let mut consumed = 0usize;
        // A line without its newline is still being written; leave it.
        while let Some(end) = buf[consumed..].iter().position(|&b| b == b'\n') {
            let line = &buf[consumed..consumed + end];
            j.lines += 1;
            let corrupt = |reason: String| StoreError::Corrupt { line: j.lines, reason };
            let m: Mutation = serde_json::from_slice(line).map_err(|e| corrupt(e.to_string()))?;
            apply(&self.mem, &m).map_err(|e| corrupt(e.to_string()))?;
            consumed += end + 1;
        }
        j.offset += consumed as u64;
        Ok(())
    }

    fn commit(&self, m: Mutation) -> Result<Outcome> {
        let mut j = self.journal.lock();
        j.file.lock()?;
        let result = self.commit_locked(&mut j, &m);
        j.file.unlock()?;
        result
    }

    fn commit_locked(&self, j: &mut Journal, m: &Mutation) -> Result<Outcome> {
        self.catch_up(j)?;
        let outcome = apply(&self.mem, m)?;
        if matches!(outcome, Outcome::Accepted(false)) {
            return Ok(outcome);
        }
        let mut line = serde_json::to_vec(m).expect("mutations serialize");
        line.push(b'\n');
        j.file.write_all(&line)?;
        j.file.flush()?;
        j.offset += line.len() as u64;
        j.lines += 1;
        Ok(outcome)
    }

    fn read(&self) -> Result<&MemoryStore> {
        let mut j = self.journal.lock();
        if j.file.metadata()?.len() > j.offset {
            j.file.lock_shared()?;
            let caught = self.catch_up(&mut j);
            j.file.unlock()?;
            caught?;
        }
        Ok(&self.mem)
    }
}

fn check_schema(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let marker: SchemaMarker =
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt { line: 0, reason: format!("schema marker: {e}") })?;
    if marker.version != SCHEMA_VERSION {
        return Err(StoreError::Corrupt {
            line: 0,
            reason: format!("schema version {} unsupported (expected {SCHEMA_VERSION})", marker.version),
        });
    }
    Ok(())
}

macro_rules! expect_outcome {
    ($e:expr, $pat:pat => $out:expr) => {
        match $e? {
            $pat => Ok($out),
            _ => unreachable!("mutation produced a mismatched outcome"),
        }
    };
}

impl Store for FileStore {
    fn register_plot_type(&self, new: NewPlotType) -> Result<(PlotType, Vec<LabelDef>)> {
        validate_new_plot_type(&new)?;
        expect_outcome!(self.commit(Mutation::RegisterPlotType(new)), Outcome::PlotType(p, l) => (p, l))
    }

    fn grant_labeler(&self, plot_type_id: PlotTypeId, user: &str) -> Result<()> {
        expect_outcome!(
            self.commit(Mutation::GrantLabeler { plot_type_id, user: user.to_string() }),
            Outcome::Unit => ()
        )
    }

    fn plot_types(&self) -> Result<Vec<PlotType>> {
        self.read()?.plot_types()
    }

    fn plot_type(&self, id: PlotTypeId) -> Result<PlotType> {
        self.read()?.plot_type(id)
    }

    fn plot_type_by_name(&self, name: &str) -> Result<Option<PlotType>> {
        self.read()?.plot_type_by_name(name)
    }

    fn labels(&self, plot_type_id: PlotTypeId) -> Result<Vec<LabelDef>> {
        self.read()?.labels(plot_type_id)
    }

    fn label(&self, id: LabelId) -> Result<LabelDef> {
        self.read()?.label(id)
    }

    fn register_image(&self, new: NewImage) -> Result<ImageRecord> {
        expect_outcome!(self.commit(Mutation::RegisterImage(new)), Outcome::Image(i) => i)
    }

    fn image(&self, id: ImageId) -> Result<ImageRecord> {
        self.read()?.image(id)
    }

    fn image_by_key(&self, plot_type_id: PlotTypeId, run_number: u64, sequence: u64) -> Result<Option<ImageRecord>> {
        self.read()?.image_by_key(plot_type_id, run_number, sequence)
    }

    fn assign_label(&self, image_id: ImageId, label_id: LabelId, labeler: &str, at: Timestamp) -> Result<LabelAssignment> {
        expect_outcome!(
            self.commit(Mutation::AssignLabel { image_id, label_id, labeler: labeler.to_string(), at }),
            Outcome::Assignment(a) => a
        )
    }

    fn current_label(&self, image_id: ImageId) -> Result<Option<LabelAssignment>> {
        self.read()?.current_label(image_id)
    }

    fn label_history(&self, image_id: ImageId) -> Result<Vec<LabelAssignment>> {
        self.read()?.label_history(image_id)
    }

    fn query_unlabeled(&self, plot_type_id: PlotTypeId, limit: usize, window: Option<TimeRange>) -> Result<Vec<ImageRecord>> {
        self.read()?.query_unlabeled(plot_type_id, limit, window)
    }

    fn query_labeled(
        &self,
        plot_type_id: PlotTypeId,
        label: Option<LabelId>,
        window: Option<TimeRange>,
    ) -> Result<Vec<(ImageRecord, LabelAssignment)>> {
        self.read()?.query_labeled(plot_type_id, label, window)
    }

    fn insert_model(&self, new: NewModel) -> Result<ModelRecord> {
        expect_outcome!(self.commit(Mutation::InsertModel(new)), Outcome::Model(m) => m)
    }

    fn model(&self, id: ModelId) -> Result<ModelRecord> {
        self.read()?.model(id)
    }

    fn models(&self, plot_type_id: PlotTypeId) -> Result<Vec<ModelRecord>> {
        self.read()?.models(plot_type_id)
    }

    fn active_model(&self, plot_type_id: PlotTypeId) -> Result<Option<ModelRecord>> {
        self.read()?.active_model(plot_type_id)
    }

    fn set_active_model(&self, model_id: ModelId) -> Result<Option<ModelId>> {
        expect_outcome!(self.commit(Mutation::SetActiveModel { model_id }), Outcome::Previous(p) => p)
    }

    fn set_thresholds(&self, model_id: ModelId, thresholds: &[(LabelId, f64)]) -> Result<Vec<ThresholdConfig>> {
        expect_outcome!(
            self.commit(Mutation::SetThresholds { model_id, thresholds: thresholds.to_vec() }),
            Outcome::Thresholds(t) => t
        )
    }

    fn thresholds(&self, model_id: ModelId) -> Result<Vec<ThresholdConfig>> {
        self.read()?.thresholds(model_id)
    }

    fn create_training_set(
        &self,
        plot_type_id: PlotTypeId,
        members: Vec<(ImageId, LabelId)>,
        sampling_method: &str,
        at: Timestamp,
    ) -> Result<TrainingSet> {
        expect_outcome!(
            self.commit(Mutation::CreateTrainingSet {
                plot_type_id,
                members,
                sampling_method: sampling_method.to_string(),
                at,
            }),
            Outcome::TrainingSet(t) => t
        )
    }

    fn training_set(&self, id: TrainingSetId) -> Result<TrainingSet> {
        self.read()?.training_set(id)
    }

    fn record_inference(&self, draft: InferenceDraft) -> Result<InferenceId> {
        expect_outcome!(self.commit(Mutation::RecordInference(draft)), Outcome::Inference(id) => id)
    }

    fn inference(&self, id: InferenceId) -> Result<RunHistoryEntry> {
        self.read()?.inference(id)
    }

    fn query_history(&self, query: &HistoryQuery) -> Result<Vec<RunHistoryEntry>> {
        self.read()?.query_history(query)
    }

    fn upsert_runtime(&self, entry: RunTimeEntry) -> Result<bool> {
        expect_outcome!(self.commit(Mutation::UpsertRuntime(entry)), Outcome::Accepted(a) => a)
    }

    fn live_entries(&self, plot_type_id: Option<PlotTypeId>) -> Result<Vec<RunTimeEntry>> {
        self.read()?.live_entries(plot_type_id)
    }

    fn retention(&self) -> Duration {
        self.mem.retention()
    }
}
