use serde::{Deserialize, Serialize};

use super::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub image_id: ImageId,
    pub human_label: LabelId,
    pub model_label: LabelId,
    pub model_weights: Vec<f64>,
}

impl Disagreement {
    pub fn model_weight(&self, order: &[LabelId]) -> f64 {
        order.iter().position(|&l| l == self.model_label).map_or(0.0, |i| self.model_weights[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDiff {
    pub model_id: ModelId,
    pub label_order: Vec<LabelId>,
    pub label_names: Vec<String>,
    pub evaluated: usize,
    /// Most confident disagreement first.
    pub disagreements: Vec<Disagreement>,
}

impl TrainingDiff {
    pub fn to_text(&self) -> String {
        let name = |l: LabelId| {
            let i = self.label_order.iter().position(|&x| x == l).expect("label in order");
            self.label_names[i].as_str()
        };
        let mut out = format!(
            "diff model={} evaluated={} disagreements={}\n",
            self.model_id,
            self.evaluated,
            self.disagreements.len()
        );
        for d in &self.disagreements {
            out += &format!(
                "disagreement image={} human={} model={} weight={} weights={}\n",
                d.image_id,
                name(d.human_label),
                name(d.model_label),
                d.model_weight(&self.label_order),
                floats(&d.model_weights)
            );
        }
        out
    }
}

/// Images where the argmax differs from the human label, sorted by
/// descending weight of the model's choice, then by image id.
pub fn training_diff_from(model_id: ModelId, label_order: &[LabelId], label_names: Vec<String>, scored: &[Scored]) -> TrainingDiff {
    let mut disagreements: Vec<(f64, Disagreement)> = scored
        .iter()
        .filter(|s| s.predicted() != s.truth)
        .map(|s| {
            let p = s.predicted();
            (
                s.weights[p],
                Disagreement {
                    image_id: s.image_id,
                    human_label: label_order[s.truth],
                    model_label: label_order[p],
                    model_weights: s.weights.clone(),
                },
            )
        })
        .collect();
    disagreements.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.image_id.cmp(&b.1.image_id)));
    TrainingDiff {
        model_id,
        label_order: label_order.to_vec(),
        label_names,
        evaluated: scored.len(),
        disagreements: disagreements.into_iter().map(|(_, d)| d).collect(),
    }
}

pub fn training_diff(eval: &Evaluator<'_>, model_id: ModelId, set: &[(ImageId, LabelId)]) -> Result<TrainingDiff> {
    let (model, scored) = eval.score(model_id, set)?;
    let names = label_names(eval.store, &model.label_order)?;
    Ok(training_diff_from(model_id, &model.label_order, names, &scored))
}
