use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use super::generate::{generate_stream, StreamSpec};
use super::schedule::{Effect, FailureEvent, FailureSchedule, Region, Truth};
use super::SimError;
use crate::analytics::{select_default_thresholds, Evaluator};
use crate::domain::*;
use crate::image::Format;
use crate::ingest::{Feeder, FeederConfig};
use crate::keeper::{AlarmHub, KeeperConfig};
use crate::layout::ImageRoot;
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::predict::train::{train_reference, TrainParams};
use crate::predict::ReferenceBackend;
use crate::store::{FileStore, HistoryQuery, MemoryStore, Store, DEFAULT_RETENTION};
use crate::time::{Clock, SystemClock, Timestamp};

pub const LABELER: &str = "sim";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_width: u32,
    pub input_height: u32,
    pub epochs: usize,
    pub learning_rate: f64,
    pub kernels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { input_width: 24, input_height: 24, epochs: 300, learning_rate: 0.5, kernels: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub good: usize,
    pub bad: usize,
    pub validation_good: usize,
    pub validation_bad: usize,
    /// Side of the square dead region placed at a random spot in each Bad
    /// training frame.
    pub region_size: u32,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { good: 100, bad: 100, validation_good: 50, validation_bad: 50, region_size: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub frames: u64,
    pub run_number: u64,
    pub interval_ms: i64,
    /// Frames handed to the input directory per second; unlimited if unset.
    pub rate_hz: Option<f64>,
    pub collect_percentage: f64,
    #[serde(rename = "event")]
    pub events: Vec<FailureEvent>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            frames: 300,
            run_number: 2,
            interval_ms: 1000,
            rate_hz: None,
            collect_percentage: 0.1,
            events: vec![FailureEvent {
                start: 150,
                end: 299,
                kind: super::FailureKind::DeadRegion,
                region: Region { x: 11, y: 11, width: 10, height: 10 },
                period: None,
            }],
        }
    }
}

/// Experiment configuration, read from TOML. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub workers: usize,
    pub plot_type: String,
    pub frame_width: u32,
    pub frame_height: u32,
    /// Working directory for images, state and artifacts. A temporary
    /// directory is used and removed afterwards when unset.
    pub work_dir: Option<PathBuf>,
    /// Keep the store as a journal under `work_dir/store` instead of memory.
    pub persist_store: bool,
    pub poll_ms: u64,
    pub timeout_s: u64,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub stream: StreamConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            workers: 4,
            plot_type: "occupancy".into(),
            frame_width: 32,
            frame_height: 32,
            work_dir: None,
            persist_store: false,
            poll_ms: 10,
            timeout_s: 120,
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            stream: StreamConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn schedule(&self) -> Result<FailureSchedule, SimError> {
        FailureSchedule::new(self.stream.events.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub label: String,
    pub threshold: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub frame: u64,
    pub image_id: ImageId,
    pub truth: Truth,
    pub classification: String,
    pub confirmed: bool,
    pub collect_reason: CollectReason,
}

impl PartialOrd for CollectReason {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CollectReason {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectionStats {
    pub bad_class: usize,
    pub unconfirmed: usize,
    pub random_sample: usize,
    pub not_collected: usize,
    /// Random samples over confirmed non-Bad inferences.
    pub random_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub count: usize,
    pub mean_s: f64,
    pub median_s: f64,
    pub p95_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub workers: usize,
    pub training_frames: usize,
    pub training_accuracy: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub thresholds: Vec<ThresholdRow>,
    pub frames: u64,
    pub recorded: usize,
    pub onset: Option<u64>,
    pub first_confirmed_bad: Option<u64>,
    /// Frames from onset to the first confirmed-Bad inference.
    pub detection_latency_frames: Option<i64>,
    pub confirmed_bad_before_onset: usize,
    /// Confirmed-Bad inferences on frames whose truth is Good.
    pub false_positives: usize,
    pub labels: Vec<String>,
    /// `[truth][classification]` over `labels`.
    pub confusion: Vec<Vec<usize>>,
    pub collection: CollectionStats,
    pub stage_latency: Vec<StageSummary>,
    pub balancer_median_dispatch_ns: Option<u64>,
    pub predict_dead_letters: usize,
    pub elapsed_s: f64,
    /// One row per recorded frame, in frame order.
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentReport {
    pub fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        let mut out = format!("experiment seed={} workers={} elapsed_s={:.3}\n", self.seed, self.workers, self.elapsed_s);
        out += &format!(
            "training frames={} accuracy={} initial_loss={} final_loss={}\n",
            self.training_frames, self.training_accuracy, self.initial_loss, self.final_loss
        );
        for t in &self.thresholds {
            out += &format!("threshold label={} value={} f1={}\n", t.label, t.threshold, t.f1);
        }
        out += &format!(
            "detection frames={} recorded={} onset={} first_confirmed_bad={} latency_frames={} before_onset={} false_positives={}\n",
            self.frames,
            self.recorded,
            opt(self.onset.map(|v| v.to_string())),
            opt(self.first_confirmed_bad.map(|v| v.to_string())),
            opt(self.detection_latency_frames.map(|v| v.to_string())),
            self.confirmed_bad_before_onset,
            self.false_positives
        );
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, n) in row.iter().enumerate() {
                out += &format!("confusion truth={} predicted={} count={}\n", self.labels[t], self.labels[p], n);
            }
        }
        let c = &self.collection;
        out += &format!(
            "collection bad_class={} unconfirmed={} random_sample={} none={} random_rate={}\n",
            c.bad_class, c.unconfirmed, c.random_sample, c.not_collected, c.random_rate
        );
        for s in &self.stage_latency {
            out += &format!(
                "stage name={} count={} mean_s={} median_s={} p95_s={}\n",
                s.stage, s.count, s.mean_s, s.median_s, s.p95_s
            );
        }
        out += &format!(
            "balancer median_dispatch_ns={} predict_dead_letters={}\n",
            opt(self.balancer_median_dispatch_ns.map(|v| v.to_string())),
            self.predict_dead_letters
        );
        out
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io { path: path.to_path_buf(), source }
}

/// Writes frames straight under the image root, registers and labels them.
fn labeled_frames(
    store: &dyn Store,
    root: &ImageRoot,
    plot: &PlotType,
    spec: &StreamSpec,
    frames: &[(Vec<Effect>, LabelId)],
) -> Result<Vec<(ImageId, LabelId)>, SimError> {
    frames
        .iter()
        .enumerate()
        .map(|(i, (effects, label))| {
            let i = i as u64;
            let file = spec.file_name(i);
            let rel = ImageRoot::image_path(&plot.name, spec.run_number, &file);
            let path = root.resolve(&rel);
            std::fs::create_dir_all(path.parent().expect("nested path")).map_err(io(&path))?;
            std::fs::write(&path, spec.frame(i, effects).encode(Format::Pgm)?).map_err(io(&path))?;
            let record = store.register_image(NewImage {
                plot_type_id: plot.plot_type_id,
                run_number: spec.run_number,
                sequence: i,
                capture_time: Timestamp(spec.start_ms + i as i64 * spec.interval_ms),
                storage_path: rel,
                width: spec.width,
                height: spec.height,
            })?;
            store.assign_label(record.image_id, *label, LABELER, record.capture_time)?;
            Ok((record.image_id, *label))
        })
        .collect()
}

/// `good` clean frames then `bad` frames with a dead square at a random spot.
fn training_mix(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng, good: usize, bad: usize, labels: [LabelId; 2]) -> Vec<(Vec<Effect>, LabelId)> {
    let size = cfg.training.region_size.min(cfg.frame_width).min(cfg.frame_height);
    let mut out: Vec<(Vec<Effect>, LabelId)> = (0..good).map(|_| (Vec::new(), labels[0])).collect();
    for _ in 0..bad {
        let region = Region {
            x: rng.random_range(0..=cfg.frame_width - size),
            y: rng.random_range(0..=cfg.frame_height - size),
            width: size,
            height: size,
        };
        out.push((vec![Effect { truth: Truth::Dead, region }], labels[1]));
    }
    out
}

fn summarize(stage: &str, mut secs: Vec<f64>) -> StageSummary {
    secs.sort_by(f64::total_cmp);
    let n = secs.len();
    let pick = |q: f64| if n == 0 { 0.0 } else { secs[((q * (n - 1) as f64).round() as usize).min(n - 1)] };
    StageSummary {
        stage: stage.to_string(),
        count: n,
        mean_s: if n == 0 { 0.0 } else { secs.iter().sum::<f64>() / n as f64 },
        median_s: pick(0.5),
        p95_s: pick(0.95),
    }
}

/// Trains a reference model on generated labeled frames, selects thresholds
/// on a held-out set, then streams frames through feeder, balancer, workers
/// and keeper and compares the recorded inferences with ground truth.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, SimError> {
    let started = Instant::now();
    let schedule = cfg.schedule()?;
    if cfg.workers == 0 {
        return Err(SimError::Config("at least one worker is required".into()));
    }
    if cfg.training.good == 0 || cfg.training.bad == 0 {
        return Err(SimError::Config("training needs Good and Bad frames".into()));
    }
    let _tmp;
    let work = match &cfg.work_dir {
        Some(dir) => dir.clone(),
        None => {
            let t = tempfile::tempdir().map_err(io(Path::new("temporary directory")))?;
            let p = t.path().to_path_buf();
            _tmp = t;
            p
        }
    };
    let dirs = ["images", "input", "reject", "state", "staging", "models", "dead"].map(|d| work.join(d));
    for d in &dirs {
        std::fs::create_dir_all(d).map_err(io(d))?;
    }
    let [images, input, reject, state, staging, models, dead] = dirs;
    let root = ImageRoot::new(&images);

    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let store: Arc<dyn Store> = if cfg.persist_store {
        let dir = work.join("store");
        FileStore::init(&dir)?;
        Arc::new(FileStore::open_with_clock(&dir, clock.clone(), DEFAULT_RETENTION)?)
    } else {
        Arc::new(MemoryStore::with_clock(clock.clone(), DEFAULT_RETENTION))
    };

    let (plot, labels) = store.register_plot_type(NewPlotType {
        name: cfg.plot_type.clone(),
        input_width: cfg.model.input_width,
        input_height: cfg.model.input_height,
        channels: 1,
        labels: Truth::ALL
            .iter()
            .map(|t| {
                let (color, severity) = match t {
                    Truth::Good => (Rgb::GREEN, Severity::Good),
                    Truth::Dead => (Rgb::RED, Severity::Bad),
                    Truth::Hot => (Rgb::AMBER, Severity::Bad),
                };
                LabelSpec::new(t.as_str(), color, severity)
            })
            .collect(),
        allowed_labelers: [LABELER.to_string()].into(),
    })?;
    let label_of = |t: Truth| labels[Truth::ALL.iter().position(|&x| x == t).expect("all truths")].label_id;
    let good_bad = [label_of(Truth::Good), label_of(Truth::Dead)];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spec = |run: u64| StreamSpec {
        run_number: run,
        ..StreamSpec::new(&cfg.plot_type, cfg.frame_width, cfg.frame_height, cfg.seed)
    };
    let train_frames = training_mix(cfg, &mut rng, cfg.training.good, cfg.training.bad, good_bad);
    let train_set = labeled_frames(store.as_ref(), &root, &plot, &spec(0), &train_frames)?;
    let val_frames = training_mix(cfg, &mut rng, cfg.training.validation_good, cfg.training.validation_bad, good_bad);
    let val_set = labeled_frames(store.as_ref(), &root, &plot, &spec(1), &val_frames)?;

    let ts = store.create_training_set(plot.plot_type_id, train_set.clone(), "generated", clock.now())?;
    let params = TrainParams {
        epochs: cfg.model.epochs,
        learning_rate: cfg.model.learning_rate,
        seed: cfg.seed,
        num_kernels: cfg.model.kernels,
    };
    let trained = train_reference(
        store.as_ref(),
        &root,
        &models,
        ts.training_set_id,
        params,
        cfg.stream.collect_percentage,
        clock.now(),
    )?;
    info!(accuracy = trained.training_accuracy, "reference model trained");
    let model_id = trained.record.model_id;
    store.set_active_model(model_id)?;
    let backend = Arc::new(ReferenceBackend);
    let eval = Evaluator { store: store.as_ref(), backend: backend.as_ref(), image_root: &root };
    let selection = select_default_thresholds(&eval, model_id, if val_set.is_empty() { &train_set } else { &val_set })?;

    let keeper = KeeperConfig::new(root.clone(), &dead).with_seed(cfg.seed);
    let pipeline = Pipeline::start(store.clone(), backend.clone(), clock.clone(), Arc::new(AlarmHub::new()), PipelineConfig::new(cfg.workers, keeper));
    let feeder = Feeder::open(
        FeederConfig {
            input_dir: input.clone(),
            reject_dir: reject.clone(),
            image_root: root.clone(),
            state_dir: state,
            poll_interval: Duration::from_millis(cfg.poll_ms),
        },
        store.clone(),
        clock.clone(),
    )?;
    let stop = Arc::new(AtomicBool::new(false));
    let feeder = pipeline.spawn_feeder(feeder, stop.clone());

    let stream_spec = StreamSpec { interval_ms: cfg.stream.interval_ms, ..spec(cfg.stream.run_number) };
    let truth = generate_stream(&stream_spec, cfg.stream.frames, &schedule, &staging)?;
    let pace = cfg.stream.rate_hz.filter(|r| *r > 0.0).map(|r| Duration::from_secs_f64(1.0 / r));
    for row in &truth {
        let (from, to) = (staging.join(&row.file), input.join(&row.file));
        std::fs::rename(&from, &to).map_err(io(&from))?;
        if let Some(p) = pace {
            std::thread::sleep(p);
        }
    }

    let expected = cfg.stream.frames as usize;
    let by_model = HistoryQuery { model_id: Some(model_id), ..Default::default() };
    let deadline = Instant::now() + Duration::from_secs(cfg.timeout_s);
    let mut recorded = 0;
    while Instant::now() < deadline {
        let rejected = std::fs::read_dir(&reject).map_err(io(&reject))?.count();
        recorded = store.query_history(&by_model)?.len();
        if recorded + rejected >= expected || feeder.is_finished() {
            break;
        }
        std::thread::sleep(Duration::from_millis(cfg.poll_ms.max(1)));
    }
    stop.store(true, Ordering::Relaxed);
    let feeder_result = feeder.join().map_err(|_| SimError::Stage("feeder"))?;
    let stats = pipeline.shutdown();
    feeder_result?;
    let history = store.query_history(&by_model)?;
    if history.len() < expected {
        return Err(SimError::Timeout { recorded: recorded.max(history.len()), expected });
    }

    // Join RunHistory with ground truth through the image sequence number.
    let truth_by_seq: HashMap<u64, Truth> = truth.iter().map(|r| (r.sequence, r.truth)).collect();
    let label_names: HashMap<LabelId, &LabelDef> = labels.iter().map(|l| (l.label_id, l)).collect();
    let mut rows = Vec::with_capacity(history.len());
    let mut stage_secs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for h in &history {
        let img = store.image(h.image_id)?;
        let Some(&t) = truth_by_seq.get(&img.sequence).filter(|_| img.run_number == cfg.stream.run_number) else {
            continue;
        };
        rows.push(ExperimentRow {
            frame: img.sequence,
            image_id: h.image_id,
            truth: t,
            classification: label_names[&h.classification].name.clone(),
            confirmed: h.confirmed,
            collect_reason: h.collect_reason,
        });
        for (stage, d) in h.stage_timings.iter() {
            stage_secs.entry(stage.to_string()).or_default().push(d.as_secs_f64());
        }
    }
    rows.sort_by_key(|r| r.frame);

    let is_bad = |name: &str| labels.iter().any(|l| l.name == name && l.severity == Severity::Bad);
    let onset = schedule.onset();
    let confirmed_bad: Vec<&ExperimentRow> = rows.iter().filter(|r| r.confirmed && is_bad(&r.classification)).collect();
    let first_confirmed_bad = confirmed_bad.iter().map(|r| r.frame).find(|&f| onset.is_none_or(|o| f >= o));
    let names: Vec<String> = Truth::ALL.iter().map(|t| t.as_str().to_string()).collect();
    let mut confusion = vec![vec![0; names.len()]; names.len()];
    for r in &rows {
        let p = names.iter().position(|n| *n == r.classification).expect("sim labels");
        confusion[r.truth as usize][p] += 1;
    }
    let count = |reason| rows.iter().filter(|r| r.collect_reason == reason).count();
    let eligible = rows.iter().filter(|r| r.confirmed && !is_bad(&r.classification)).count();
    let collection = CollectionStats {
        bad_class: count(CollectReason::BadClass),
        unconfirmed: count(CollectReason::Unconfirmed),
        random_sample: count(CollectReason::RandomSample),
        not_collected: count(CollectReason::None),
        random_rate: if eligible == 0 { 0.0 } else { count(CollectReason::RandomSample) as f64 / eligible as f64 },
    };
    let mut stage_latency: Vec<StageSummary> = stage::PIPELINE
        .iter()
        .map(|s| summarize(s, stage_secs.remove(*s).unwrap_or_default()))
        .collect();
    stage_latency.extend(stage_secs.into_iter().map(|(s, v)| summarize(&s, v)));
    let predict_dead_letters = std::fs::read_to_string(dead.join(crate::predict::DEAD_LETTER_FILE))
        .map(|t| t.lines().count())
        .unwrap_or(0);

    Ok(ExperimentReport {
        seed: cfg.seed,
        workers: cfg.workers,
        training_frames: train_set.len(),
        training_accuracy: trained.training_accuracy,
        initial_loss: trained.losses[0],
        final_loss: *trained.losses.last().expect("at least the initial loss"),
        thresholds: selection
            .choices
            .iter()
            .zip(&selection.label_names)
            .map(|(c, n)| ThresholdRow { label: n.clone(), threshold: c.threshold, f1: c.f1 })
            .collect(),
        frames: cfg.stream.frames,
        recorded: rows.len(),
        onset,
        first_confirmed_bad,
        detection_latency_frames: first_confirmed_bad.zip(onset).map(|(f, o)| f as i64 - o as i64),
        confirmed_bad_before_onset: confirmed_bad.iter().filter(|r| onset.is_some_and(|o| r.frame < o)).count(),
        false_positives: confirmed_bad.iter().filter(|r| r.truth == Truth::Good).count(),
        labels: names,
        confusion,
        collection,
        stage_latency,
        balancer_median_dispatch_ns: stats.balancer.median_dispatch_nanos(),
        predict_dead_letters,
        elapsed_s: started.elapsed().as_secs_f64(),
        rows,
    })
}
