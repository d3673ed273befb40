use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::schedule::{Effect, FailureSchedule, Truth};
use super::SimError;
use crate::image::{Format, Image};
use crate::ingest::FileNameFields;

pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const NOISE_SIGMA: f64 = 0.05;
const FLOOR: f64 = 0.3;
const PEAK: f64 = 0.6;

/// Where and how a stream's frames are drawn and named.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub plot_type: String,
    pub width: u32,
    pub height: u32,
    pub run_number: u64,
    /// Capture time of frame 0.
    pub start_ms: i64,
    pub interval_ms: i64,
    pub seed: u64,
}

impl StreamSpec {
    pub fn new(plot_type: impl Into<String>, width: u32, height: u32, seed: u64) -> Self {
        StreamSpec {
            plot_type: plot_type.into(),
            width,
            height,
            run_number: 1,
            start_ms: 1_700_000_000_000,
            interval_ms: 1000,
            seed,
        }
    }

    pub fn file_name(&self, index: u64) -> String {
        FileNameFields {
            plot_type_name: self.plot_type.clone(),
            run_number: self.run_number,
            sequence: index,
            capture_time_ms: self.start_ms + index as i64 * self.interval_ms,
            format: Format::Pgm,
        }
        .format_name()
    }

    /// A Good frame: a centred Gaussian bump over a floor plus per-pixel
    /// noise, clamped to `[0, 1]`. Each (seed, run, index) has its own
    /// random stream.
    pub fn base_frame(&self, index: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.run_number << 32) ^ index);
        let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
        let (w, h) = (self.width as f64, self.height as f64);
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let s = 0.3 * w.min(h);
        let mut data = Vec::with_capacity((self.width * self.height) as usize);
        for y in 0..self.height {
            for x in 0..self.width {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = FLOOR + PEAK * (-d2 / (2.0 * s * s)).exp() + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        Image::new(self.width, self.height, 1, data).expect("buffer matches shape")
    }

    pub fn frame(&self, index: u64, effects: &[Effect]) -> Image {
        let mut img = self.base_frame(index);
        for e in effects {
            let v = match e.truth {
                Truth::Dead => 0.0,
                Truth::Hot => 1.0,
                Truth::Good => continue,
            };
            for y in e.region.y..(e.region.y + e.region.height).min(self.height) {
                for x in e.region.x..(e.region.x + e.region.width).min(self.width) {
                    img.set(x, y, 0, v);
                }
            }
        }
        img
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub index: u64,
    pub file: String,
    #[serde(rename = "run")]
    pub run_number: u64,
    pub sequence: u64,
    pub capture_time_ms: i64,
    pub truth: Truth,
}

/// Writes `n_frames` PGM frames named by the file convention into `out`
/// along with `ground_truth.csv`.
pub fn generate_stream(spec: &StreamSpec, n_frames: u64, schedule: &FailureSchedule, out: &Path) -> Result<Vec<GroundTruthRow>, SimError> {
    if n_frames == 0 {
        return Err(SimError::Config("at least one frame is required".into()));
    }
    schedule.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SimError::Io { path, source }
    };
    std::fs::create_dir_all(out).map_err(io(out))?;
    let mut rows = Vec::with_capacity(n_frames as usize);
    for index in 0..n_frames {
        let effects = schedule.effects(index);
        let file = spec.file_name(index);
        let bytes = spec.frame(index, &effects).encode(Format::Pgm)?;
        let path = out.join(&file);
        std::fs::write(&path, bytes).map_err(io(&path))?;
        rows.push(GroundTruthRow {
            index,
            file,
            run_number: spec.run_number,
            sequence: index,
            capture_time_ms: spec.start_ms + index as i64 * spec.interval_ms,
            truth: effects.last().map_or(Truth::Good, |e| e.truth),
        });
    }
    let csv_path = out.join(GROUND_TRUTH_FILE);
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    for r in &rows {
        csv.serialize(r).map_err(|e| csv_error(&csv_path, e))?;
    }
    csv.flush().map_err(io(&csv_path))?;
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> SimError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => SimError::Io { path: path.to_path_buf(), source },
        other => SimError::Config(format!("{}: {other:?}", path.display())),
    }
}

/// Reads a ground-truth log written by [`generate_stream`].
pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthRow>, SimError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}
