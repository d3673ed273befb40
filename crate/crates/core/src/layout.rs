//! Where files live under the image root.

use std::path::{Path, PathBuf};

use crate::domain::InferenceId;

/// Root directory for stored images and heatmaps. Every storage path kept in
/// the database is relative to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRoot(PathBuf);

impl ImageRoot {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        ImageRoot(path.into())
    }

    pub fn path(&self) -> &Path {
        &self.0
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.0.join(relative)
    }

    /// `<plot_type>/r<run>/<file_name>`
    pub fn image_path(plot_type: &str, run_number: u64, file_name: &str) -> PathBuf {
        PathBuf::from(plot_type).join(format!("r{run_number}")).join(file_name)
    }

    /// `heatmaps/<inference_id>.pgm`
    pub fn heatmap_path(inference_id: InferenceId) -> PathBuf {
        PathBuf::from("heatmaps").join(format!("{inference_id}.pgm"))
    }
}
