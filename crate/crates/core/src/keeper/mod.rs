//! The keeper: confirms classifications, persists inferences, decides what
//! to collect for labeling and raises alarms.

use std::collections::{HashSet, VecDeque};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{error, warn};

use crate::domain::*;
use crate::image::Format;
use crate::layout::ImageRoot;
use crate::predict::Report;
use crate::store::{Store, StoreError};
use crate::time::{Clock, Timestamp};
use crate::wire;

#[derive(Debug, Error)]
pub enum KeeperError {
    #[error("no threshold for label {0}")]
    MissingThreshold(LabelId),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl KeeperError {
    fn is_transient(&self) -> bool {
        match self {
            KeeperError::Store(e) => e.is_transient(),
            KeeperError::Io { .. } => true,
            KeeperError::MissingThreshold(_) => false,
        }
    }
}

/// Confirmed iff the classification's weight is strictly above its threshold.
pub fn confirm(report: &Report, thresholds: &[ThresholdConfig]) -> Result<bool, KeeperError> {
    let threshold = thresholds
        .iter()
        .find(|t| t.label_id == report.classification)
        .ok_or(KeeperError::MissingThreshold(report.classification))?;
    Ok(report.classification_weight() > threshold.threshold)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectionPolicy {
    pub collect_percentage: f64,
    pub rng_seed: u64,
}

impl CollectionPolicy {
    /// Uniform draw in `[0, 1)` for one order. Each order id selects its own
    /// stream of a seeded ChaCha generator, so the draw depends only on the
    /// seed and the order, never on arrival order.
    pub fn draw(&self, order_id: OrderId) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(order_id.0);
        rng.random()
    }

    pub fn decide(&self, order_id: OrderId, severity: Severity, confirmed: bool) -> (bool, CollectReason) {
        decide_collection(severity, confirmed, self.collect_percentage, || self.draw(order_id))
    }
}

/// Precedence: BadClass, then Unconfirmed, then RandomSample. The draw is
/// only taken when it can matter.
pub fn decide_collection(
    severity: Severity,
    confirmed: bool,
    collect_percentage: f64,
    draw: impl FnOnce() -> f64,
) -> (bool, CollectReason) {
    let reason = if severity == Severity::Bad {
        CollectReason::BadClass
    } else if !confirmed {
        CollectReason::Unconfirmed
    } else if draw() < collect_percentage {
        CollectReason::RandomSample
    } else {
        CollectReason::None
    };
    (reason != CollectReason::None, reason)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlarmKind {
    ConfirmedBad,
    Unconfirmed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmEvent {
    /// Position in the hub's stream, starting at 1.
    pub seq: u64,
    pub inference_id: InferenceId,
    pub plot_type_id: PlotTypeId,
    pub kind: AlarmKind,
    pub raised_at: Timestamp,
}

pub fn alarm_kind(severity: Severity, confirmed: bool) -> Option<AlarmKind> {
    match (severity, confirmed) {
        (_, false) => Some(AlarmKind::Unconfirmed),
        (Severity::Bad, true) => Some(AlarmKind::ConfirmedBad),
        _ => None,
    }
}

pub const ALARM_HISTORY: usize = 1024;

struct AlarmState {
    recent: VecDeque<AlarmEvent>,
    next_seq: u64,
    subscribers: Vec<Sender<AlarmEvent>>,
}

/// In-process alarm stream. Consumers either subscribe to a channel or
/// poll by sequence number against a bounded history.
pub struct AlarmHub {
    state: Mutex<AlarmState>,
    raised: Condvar,
}

impl Default for AlarmHub {
    fn default() -> Self {
        AlarmHub {
            state: Mutex::new(AlarmState { recent: VecDeque::new(), next_seq: 1, subscribers: Vec::new() }),
            raised: Condvar::new(),
        }
    }
}

impl AlarmHub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, inference_id: InferenceId, plot_type_id: PlotTypeId, kind: AlarmKind, raised_at: Timestamp) -> AlarmEvent {
        let mut s = self.state.lock();
        let event = AlarmEvent { seq: s.next_seq, inference_id, plot_type_id, kind, raised_at };
        s.next_seq += 1;
        if s.recent.len() == ALARM_HISTORY {
            s.recent.pop_front();
        }
        s.recent.push_back(event.clone());
        s.subscribers.retain(|tx| tx.send(event.clone()).is_ok());
        drop(s);
        self.raised.notify_all();
        event
    }

    pub fn subscribe(&self) -> Receiver<AlarmEvent> {
        let (tx, rx) = crossbeam_channel::unbounded();
        self.state.lock().subscribers.push(tx);
        rx
    }

    /// Sequence number of the newest event, 0 if none.
    pub fn last_seq(&self) -> u64 {
        self.state.lock().next_seq - 1
    }

    /// Retained events with `seq > after`, oldest first.
    pub fn since(&self, after: u64) -> Vec<AlarmEvent> {
        self.state.lock().recent.iter().filter(|e| e.seq > after).cloned().collect()
    }

    /// Like [`since`](Self::since) but waits up to `timeout` for something
    /// to arrive when nothing newer is retained.
    pub fn wait_since(&self, after: u64, timeout: Duration) -> Vec<AlarmEvent> {
        let deadline = Instant::now() + timeout;
        let mut s = self.state.lock();
        while s.next_seq - 1 <= after {
            if self.raised.wait_until(&mut s, deadline).timed_out() {
                break;
            }
        }
        s.recent.iter().filter(|e| e.seq > after).cloned().collect()
    }
}

#[derive(Debug, Clone)]
pub struct KeeperConfig {
    pub image_root: ImageRoot,
    pub dead_letter_dir: PathBuf,
    pub collect_seed: u64,
    /// Attempts per persistence step, including the first.
    pub attempts: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
}

impl KeeperConfig {
    pub fn new(image_root: ImageRoot, dead_letter_dir: impl Into<PathBuf>) -> Self {
        KeeperConfig {
            image_root,
            dead_letter_dir: dead_letter_dir.into(),
            collect_seed: rand::random(),
            attempts: 4,
            backoff: Duration::from_millis(10),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.collect_seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Handled {
    Recorded { entry: RunHistoryEntry, alarm: Option<AlarmEvent> },
    /// A report for this order was already recorded.
    Duplicate(OrderId),
    /// Persisting failed; the report was written to this file.
    DeadLettered(PathBuf),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeeperStats {
    pub recorded: u64,
    pub duplicates: u64,
    pub dead_lettered: u64,
}

pub struct Keeper {
    store: Arc<dyn Store>,
    clock: Arc<dyn Clock>,
    alarms: Arc<AlarmHub>,
    config: KeeperConfig,
    seen: HashSet<OrderId>,
}

impl Keeper {
    pub fn new(store: Arc<dyn Store>, clock: Arc<dyn Clock>, alarms: Arc<AlarmHub>, config: KeeperConfig) -> Self {
        Keeper { store, clock, alarms, config, seen: HashSet::new() }
    }

    pub fn alarms(&self) -> &Arc<AlarmHub> {
        &self.alarms
    }

    fn retry<T>(&self, mut op: impl FnMut() -> Result<T, KeeperError>) -> Result<T, KeeperError> {
        let mut delay = self.config.backoff;
        let mut attempt = 1;
        loop {
            match op() {
                Err(e) if e.is_transient() && attempt < self.config.attempts => {
                    warn!(error = %e, attempt, "keeper persistence failed, retrying");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    pub fn handle_report(&mut self, report: Report) -> Handled {
        if self.seen.contains(&report.order_id) {
            warn!(order = %report.order_id, "duplicate report ignored");
            return Handled::Duplicate(report.order_id);
        }
        let started = Instant::now();
        let decided = self.retry(|| {
            let thresholds = self.store.thresholds(report.model_id)?;
            let severity = self.store.label(report.classification)?.severity;
            let model = self.store.model(report.model_id)?;
            let confirmed = confirm(&report, &thresholds)?;
            let policy = CollectionPolicy { collect_percentage: model.collect_percentage, rng_seed: self.config.collect_seed };
            Ok((severity, confirmed, policy.decide(report.order_id, severity, confirmed)))
        });
        let (severity, confirmed, (collected, collect_reason)) = match decided {
            Ok(d) => d,
            Err(e) => return self.dead_letter(&report, &e),
        };
        let mut stage_timings = report.stage_timings.clone();
        stage_timings.push(stage::KEEPER, started.elapsed());
        let draft = InferenceDraft {
            order_id: report.order_id,
            image_id: report.image_id,
            model_id: report.model_id,
            output_weights: report.output_weights.clone(),
            classification: report.classification,
            confirmed,
            collected,
            collect_reason,
            stage_timings,
            inferred_at: report.inferred_at,
        };
        let inference_id = match self.retry(|| Ok(self.store.record_inference(draft.clone())?)) {
            Ok(id) => id,
            Err(e) => return self.dead_letter(&report, &e),
        };
        self.seen.insert(report.order_id);
        let entry = draft.into_entry(inference_id);

        // The history row is in; the live view is best effort from here.
        let live = self.retry(|| {
            let gradcam_path = match &report.gradcam {
                Some(cam) => {
                    let rel = ImageRoot::heatmap_path(inference_id);
                    let path = self.config.image_root.resolve(&rel);
                    let bytes = cam.to_image().encode(Format::Pgm).expect("PGM encoding is infallible");
                    if let Some(dir) = path.parent() {
                        std::fs::create_dir_all(dir).map_err(|source| KeeperError::Io { path: dir.to_path_buf(), source })?;
                    }
                    std::fs::write(&path, bytes).map_err(|source| KeeperError::Io { path, source })?;
                    Some(rel)
                }
                None => None,
            };
            let image = self.store.image(report.image_id)?;
            self.store.upsert_runtime(RunTimeEntry {
                inference_id,
                image_id: report.image_id,
                plot_type_id: report.plot_type_id,
                image_path: image.storage_path,
                gradcam_path,
                classification: report.classification,
                confirmed,
                inferred_at: report.inferred_at,
            })?;
            Ok(())
        });
        if let Err(e) = live {
            error!(inference = %inference_id, error = %e, "live view not updated");
        }

        let alarm = alarm_kind(severity, confirmed)
            .map(|kind| self.alarms.publish(inference_id, report.plot_type_id, kind, self.clock.now()));
        Handled::Recorded { entry, alarm }
    }

    fn dead_letter(&self, report: &Report, cause: &KeeperError) -> Handled {
        error!(order = %report.order_id, error = %cause, "dead-lettering report");
        let dir = &self.config.dead_letter_dir;
        let path = dir.join(format!("report-{}.bin", report.order_id));
        let written = std::fs::create_dir_all(dir)
            .and_then(|_| std::fs::write(&path, wire::encode_report(report)))
            .and_then(|_| std::fs::write(path.with_extension("reason"), format!("{cause}\n")));
        if let Err(e) = written {
            error!(path = %path.display(), error = %e, "dead letter write failed, report lost");
        }
        Handled::DeadLettered(path)
    }

    /// Consumes reports until every sender is dropped.
    pub fn run(&mut self, reports: &Receiver<Report>) -> KeeperStats {
        let mut stats = KeeperStats::default();
        for report in reports {
            match self.handle_report(report) {
                Handled::Recorded { .. } => stats.recorded += 1,
                Handled::Duplicate(_) => stats.duplicates += 1,
                Handled::DeadLettered(_) => stats.dead_lettered += 1,
            }
        }
        stats
    }
}
