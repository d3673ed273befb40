//! The feeder: turns files dropped into an input directory into inference
//! orders.
//!
//! File names follow `<plot_type>_r<run>_s<seq>_t<ms>.<ext>` with `ext` one
//! of `png`, `ppm`, `pgm`. A file is picked up once its size is unchanged
//! across two consecutive polls. Accepted files are registered, moved under
//! the image root and resized to the active model's input shape; everything
//! else is moved to the reject directory next to a `.reason` note. Names of
//! accepted files are appended to `processed.log` in the state directory so
//! a restart never emits the same file twice.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::Sender;
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::domain::*;
use crate::image::{Format, Image, ImageError};
use crate::layout::ImageRoot;
use crate::store::{Store, StoreError};
use crate::time::{Clock, Timestamp};

pub const PROCESSED_LOG: &str = "processed.log";
pub const DEFAULT_POLL: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOrder {
    pub order_id: OrderId,
    pub image_id: ImageId,
    pub plot_type_id: PlotTypeId,
    pub payload: Image,
    pub stage_timings: StageTimings,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FileNameFields {
    pub plot_type_name: String,
    pub run_number: u64,
    pub sequence: u64,
    pub capture_time_ms: i64,
    pub format: Format,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed image file name {name:?}: {reason}")]
pub struct MalformedName {
    pub name: String,
    pub reason: &'static str,
}

impl fmt::Display for FileNameFields {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ext = match self.format {
            Format::Png => "png",
            Format::Ppm => "ppm",
            Format::Pgm => "pgm",
        };
        write!(
            f,
            "{}_r{}_s{}_t{}.{ext}",
            self.plot_type_name, self.run_number, self.sequence, self.capture_time_ms
        )
    }
}

impl FileNameFields {
    pub fn format_name(&self) -> String {
        self.to_string()
    }
}

fn digits<T: std::str::FromStr>(s: &str) -> Option<T> {
    let canonical = !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'));
    if canonical {
        s.parse().ok()
    } else {
        None
    }
}

pub fn parse_filename(name: &str) -> Result<FileNameFields, MalformedName> {
    let bad = |reason| MalformedName { name: name.to_string(), reason };
    let (stem, ext) = name.rsplit_once('.').ok_or_else(|| bad("missing extension"))?;
    let format = Format::from_extension(ext).ok_or_else(|| bad("unknown extension"))?;
    let mut fields = stem.rsplitn(4, '_');
    let (Some(t), Some(s), Some(r), Some(plot)) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
        return Err(bad("wrong field count"));
    };
    if plot.is_empty() || plot.contains(['/', '\\', '\0']) {
        return Err(bad("bad plot type name"));
    }
    fn num(field: &str, prefix: char) -> Option<&str> {
        field.strip_prefix(prefix)
    }
    let run_number = num(r, 'r').and_then(digits).ok_or_else(|| bad("bad run field"))?;
    let sequence = num(s, 's').and_then(digits).ok_or_else(|| bad("bad sequence field"))?;
    let capture_time_ms = num(t, 't').and_then(digits::<i64>).ok_or_else(|| bad("bad time field"))?;
    Ok(FileNameFields { plot_type_name: plot.to_string(), run_number, sequence, capture_time_ms, format })
}

/// Loads, channel-converts and resizes an image to a model input shape.
pub fn prepare_payload(image: &Image, shape: InputShape) -> Result<Image, ImageError> {
    image.to_channels(shape.channels).resize_bilinear(shape.width, shape.height)
}

#[derive(Debug, Error)]
pub enum FeederError {
    #[error("feeder I/O on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Why one file was rejected.
#[derive(Debug, Error)]
enum Rejection {
    #[error(transparent)]
    Name(#[from] MalformedName),
    #[error("unknown plot type {0:?}")]
    UnknownPlotType(String),
    #[error("no active model for plot type {0:?}")]
    NoActiveModel(String),
    #[error("already processed")]
    Duplicate,
    #[error("undecodable image: {0}")]
    Decode(#[from] ImageError),
    #[error("store refused image: {0}")]
    Store(StoreError),
}

#[derive(Debug, Clone)]
pub struct FeederConfig {
    pub input_dir: PathBuf,
    pub reject_dir: PathBuf,
    pub image_root: ImageRoot,
    pub state_dir: PathBuf,
    pub poll_interval: Duration,
}

pub struct Feeder {
    config: FeederConfig,
    store: Arc<dyn Store>,
    clock: Arc<dyn Clock>,
    processed: HashSet<String>,
    processed_log: File,
    observed: HashMap<String, u64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeederError + '_ {
    move |source| FeederError::Io { path: path.to_path_buf(), source }
}

impl Feeder {
    pub fn open(config: FeederConfig, store: Arc<dyn Store>, clock: Arc<dyn Clock>) -> Result<Self, FeederError> {
        for dir in [&config.input_dir, &config.reject_dir, &config.state_dir, &config.image_root.path().to_path_buf()] {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let log_path = config.state_dir.join(PROCESSED_LOG);
        let mut processed = HashSet::new();
        if log_path.exists() {
            let file = File::open(&log_path).map_err(io_err(&log_path))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(io_err(&log_path))?;
                if !line.is_empty() {
                    processed.insert(line);
                }
            }
        }
        let processed_log =
            OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
        Ok(Feeder { config, store, clock, processed, processed_log, observed: HashMap::new() })
    }

    pub fn config(&self) -> &FeederConfig {
        &self.config
    }

    /// One poll of the input directory. Returns the orders for every file
    /// that became stable since the previous poll, ordered by capture time
    /// and then sequence.
    pub fn scan_and_emit(&mut self) -> Result<Vec<InferenceOrder>, FeederError> {
        let input = self.config.input_dir.clone();
        let mut present = HashMap::new();
        for entry in fs::read_dir(&input).map_err(io_err(&input))? {
            let entry = entry.map_err(io_err(&input))?;
            let Ok(meta) = entry.metadata() else { continue };
            let Some(name) = entry.file_name().to_str().map(str::to_string) else { continue };
            if !meta.is_file() || name.starts_with('.') {
                continue;
            }
            present.insert(name, meta.len());
        }

        let mut stable = Vec::new();
        for (name, &size) in &present {
            if self.observed.get(name) == Some(&size) {
                stable.push(name.clone());
            }
        }
        self.observed = present;

        let mut ready = Vec::new();
        for name in stable {
            self.observed.remove(&name);
            match parse_filename(&name) {
                Ok(fields) => ready.push((fields, name)),
                Err(e) => self.reject(&name, &e.into()),
            }
        }
        ready.sort_by(|(a, an), (b, bn)| {
            (a.capture_time_ms, a.sequence, an).cmp(&(b.capture_time_ms, b.sequence, bn))
        });

        let mut orders = Vec::with_capacity(ready.len());
        for (fields, name) in ready {
            match self.ingest(&fields, &name) {
                Ok(order) => orders.push(order),
                Err(Rejection::Store(e)) if e.is_transient() => {
                    warn!(file = %name, error = %e, "store unavailable, will retry");
                }
                Err(e) => self.reject(&name, &e),
            }
        }
        Ok(orders)
    }

    fn ingest(&mut self, fields: &FileNameFields, name: &str) -> Result<InferenceOrder, Rejection> {
        let started = Instant::now();
        if self.processed.contains(name) {
            return Err(Rejection::Duplicate);
        }
        let plot_type = self
            .store
            .plot_type_by_name(&fields.plot_type_name)
            .map_err(Rejection::Store)?
            .ok_or_else(|| Rejection::UnknownPlotType(fields.plot_type_name.clone()))?;
        let model = self
            .store
            .active_model(plot_type.plot_type_id)
            .map_err(Rejection::Store)?
            .ok_or_else(|| Rejection::NoActiveModel(plot_type.name.clone()))?;
        let source = self.config.input_dir.join(name);
        let image = Image::load(&source)?;
        let payload = prepare_payload(&image, model.input_shape)?;

        let storage_path = ImageRoot::image_path(&plot_type.name, fields.run_number, name);
        let record = self
            .store
            .register_image(NewImage {
                plot_type_id: plot_type.plot_type_id,
                run_number: fields.run_number,
                sequence: fields.sequence,
                capture_time: Timestamp(fields.capture_time_ms),
                storage_path: storage_path.clone(),
                width: image.width(),
                height: image.height(),
            })
            .map_err(|e| match e {
                StoreError::DuplicateImage { .. } => Rejection::Duplicate,
                other => Rejection::Store(other),
            })?;

        let dest = self.config.image_root.resolve(&storage_path);
        if let Err(e) = move_file(&source, &dest) {
            // The record exists; leave the input so an operator can recover it.
            warn!(file = %name, error = %e, "could not move image under the image root");
        }
        self.mark_processed(name);

        let mut stage_timings = StageTimings::new();
        stage_timings.push(stage::FEEDER, started.elapsed());
        debug!(file = %name, image = %record.image_id, "order emitted");
        Ok(InferenceOrder {
            order_id: OrderId(record.image_id.0),
            image_id: record.image_id,
            plot_type_id: plot_type.plot_type_id,
            payload,
            stage_timings,
            created_at: self.clock.now(),
        })
    }

    fn mark_processed(&mut self, name: &str) {
        self.processed.insert(name.to_string());
        if let Err(e) = writeln!(self.processed_log, "{name}").and_then(|_| self.processed_log.flush()) {
            warn!(file = %name, error = %e, "could not persist processed-set entry");
        }
    }

    fn reject(&mut self, name: &str, why: &Rejection) {
        warn!(file = %name, reason = %why, "rejecting input file");
        let source = self.config.input_dir.join(name);
        let mut dest = self.config.reject_dir.join(name);
        let mut n = 1;
        while dest.exists() {
            dest = self.config.reject_dir.join(format!("{name}.{n}"));
            n += 1;
        }
        if let Err(e) = move_file(&source, &dest) {
            warn!(file = %name, error = %e, "could not quarantine rejected file");
            return;
        }
        let mut note = dest.into_os_string();
        note.push(".reason");
        let _ = fs::write(PathBuf::from(note), format!("{why}\n"));
    }

    /// Polls until `stop` is set, sending every order downstream. Blocks only
    /// when the downstream queue is full.
    pub fn run(&mut self, out: &Sender<InferenceOrder>, stop: &AtomicBool) -> Result<(), FeederError> {
        info!(input = %self.config.input_dir.display(), "feeder watching");
        while !stop.load(Ordering::Relaxed) {
            for order in self.scan_and_emit()? {
                if out.send(order).is_err() {
                    return Ok(());
                }
            }
            std::thread::sleep(self.config.poll_interval);
        }
        Ok(())
    }
}

fn move_file(from: &Path, to: &Path) -> std::io::Result<()> {
    if let Some(parent) = to.parent() {
        fs::create_dir_all(parent)?;
    }
    if fs::rename(from, to).is_err() {
        fs::copy(from, to)?;
        fs::remove_file(from)?;
    }
    Ok(())
}
