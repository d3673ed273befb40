use serde::{Deserialize, Serialize};

use super::*;

/// Threshold-aware F1 for one label. A prediction counts as the label only
/// when it is the argmax and its weight is strictly above `threshold`;
/// every other image whose true label it is counts as a false negative.
/// Zero when there is nothing to count.
pub fn effective_f1(samples: &[Scored], label: usize, threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for s in samples {
        let hit = s.predicted() == label && s.weights[label] > threshold;
        match (hit, s.truth == label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub label_id: LabelId,
    pub threshold: f64,
    pub f1: f64,
    /// Number of thresholds tried.
    pub candidates: usize,
}

/// Picks, per label, the candidate threshold with the highest effective F1,
/// lowest threshold on ties. Candidates are 0 and every weight the label
/// received as argmax; F1 only changes at those points.
pub fn select_thresholds(labels: &[LabelId], samples: &[Scored]) -> Result<Vec<ThresholdChoice>> {
    if samples.is_empty() {
        return Err(AnalyticsError::EmptyEvaluationSet);
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(l, &label_id)| {
            let mut candidates: Vec<f64> = std::iter::once(0.0)
                .chain(samples.iter().filter(|s| s.predicted() == l).map(|s| s.weights[l]))
                .collect();
            candidates.sort_by(f64::total_cmp);
            candidates.dedup();
            let mut best = (candidates[0], effective_f1(samples, l, candidates[0]));
            for &t in &candidates[1..] {
                let f = effective_f1(samples, l, t);
                if f > best.1 {
                    best = (t, f);
                }
            }
            ThresholdChoice { label_id, threshold: best.0, f1: best.1, candidates: candidates.len() }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSelection {
    pub model_id: ModelId,
    pub label_names: Vec<String>,
    pub choices: Vec<ThresholdChoice>,
    pub evaluated: usize,
}

impl ThresholdSelection {
    pub fn to_text(&self) -> String {
        let mut out = format!("thresholds model={} evaluated={}\n", self.model_id, self.evaluated);
        for (c, name) in self.choices.iter().zip(&self.label_names) {
            out += &format!(
                "threshold label={} name={} value={} f1={} candidates={}\n",
                c.label_id, name, c.threshold, c.f1, c.candidates
            );
        }
        out
    }
}

/// Scores the evaluation set, selects per-label thresholds and stores them
/// as the model's configuration.
pub fn select_default_thresholds(
    eval: &Evaluator<'_>,
    model_id: ModelId,
    set: &[(ImageId, LabelId)],
) -> Result<ThresholdSelection> {
    if set.is_empty() {
        return Err(AnalyticsError::EmptyEvaluationSet);
    }
    let (model, scored) = eval.score(model_id, set)?;
    let choices = select_thresholds(&model.label_order, &scored)?;
    let pairs: Vec<(LabelId, f64)> = choices.iter().map(|c| (c.label_id, c.threshold)).collect();
    eval.store.set_thresholds(model_id, &pairs)?;
    Ok(ThresholdSelection {
        model_id,
        label_names: label_names(eval.store, &model.label_order)?,
        choices,
        evaluated: scored.len(),
    })
}
