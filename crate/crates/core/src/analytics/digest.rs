use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::*;
use crate::store::HistoryQuery;
use crate::time::{TimeRange, Timestamp};

pub const DEFAULT_DIGEST_WINDOW: Duration = Duration::from_secs(24 * 3600);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigestEntry {
    pub inference_id: InferenceId,
    pub image_id: ImageId,
    pub plot_type_id: PlotTypeId,
    pub classification: LabelId,
    pub label_name: String,
    pub severity: Severity,
    pub confirmed: bool,
    pub inferred_at: Timestamp,
    /// Relative to the image root.
    pub image_path: PathBuf,
    /// Relative to the image root; present for Bad classifications.
    pub heatmap_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogDigest {
    pub window: TimeRange,
    /// Newest first.
    pub entries: Vec<DigestEntry>,
}

impl LogDigest {
    pub fn to_text(&self) -> String {
        let mut out = format!("log from={} to={} entries={}\n", self.window.from, self.window.to, self.entries.len());
        for e in &self.entries {
            out += &format!(
                "entry inference={} image={} plot_type={} at={} label={} severity={:?} confirmed={} image_path={} heatmap={}\n",
                e.inference_id,
                e.image_id,
                e.plot_type_id,
                e.inferred_at,
                e.label_name,
                e.severity,
                e.confirmed,
                e.image_path.display(),
                e.heatmap_path.as_ref().map_or("-".to_string(), |p| p.display().to_string()),
            );
        }
        out
    }
}

/// The confirmed-Bad and all unconfirmed inferences in the window, newest
/// first.
pub fn build_log_digest(store: &dyn Store, window: TimeRange) -> Result<LogDigest> {
    if !window.is_valid() {
        return Err(AnalyticsError::InvalidWindow);
    }
    let mut labels: HashMap<LabelId, LabelDef> = HashMap::new();
    let mut entries = Vec::new();
    for row in store.query_history(&HistoryQuery::window(window))? {
        let label = match labels.entry(row.classification) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(store.label(row.classification)?),
        };
        if row.confirmed && label.severity != Severity::Bad {
            continue;
        }
        let image = store.image(row.image_id)?;
        entries.push(DigestEntry {
            inference_id: row.inference_id,
            image_id: row.image_id,
            plot_type_id: image.plot_type_id,
            classification: row.classification,
            label_name: label.name.clone(),
            severity: label.severity,
            confirmed: row.confirmed,
            inferred_at: row.inferred_at,
            image_path: image.storage_path,
            heatmap_path: (label.severity == Severity::Bad).then(|| ImageRoot::heatmap_path(row.inference_id)),
        });
    }
    entries.reverse();
    Ok(LogDigest { window, entries })
}
