use serde::{Deserialize, Serialize};

use super::*;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EcmCell {
    pub count: usize,
    /// Weight the model gave its predicted label, one per image in the cell.
    pub weight_samples: Vec<f64>,
}

/// Confusion counts indexed `[true][predicted]`, each cell carrying the
/// weights behind its predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancedConfusionMatrix {
    pub model_id: ModelId,
    pub labels: Vec<LabelId>,
    pub label_names: Vec<String>,
    pub cells: Vec<Vec<EcmCell>>,
}

impl EnhancedConfusionMatrix {
    /// Tallies already scored images.
    pub fn from_scored(model_id: ModelId, labels: Vec<LabelId>, label_names: Vec<String>, scored: &[Scored]) -> Self {
        let n = labels.len();
        let mut cells = vec![vec![EcmCell::default(); n]; n];
        for s in scored {
            let p = s.predicted();
            let cell = &mut cells[s.truth][p];
            cell.count += 1;
            cell.weight_samples.push(s.weights[p]);
        }
        EnhancedConfusionMatrix { model_id, labels, label_names, cells }
    }

    pub fn total(&self) -> usize {
        self.cells.iter().flatten().map(|c| c.count).sum()
    }

    pub fn row_total(&self, truth: usize) -> usize {
        self.cells[truth].iter().map(|c| c.count).sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("ecm model={} labels={} total={}\n", self.model_id, self.labels.len(), self.total());
        for (i, (id, name)) in self.labels.iter().zip(&self.label_names).enumerate() {
            out += &format!("label index={i} id={id} name={name}\n");
        }
        for (t, row) in self.cells.iter().enumerate() {
            for (p, cell) in row.iter().enumerate() {
                out += &format!(
                    "cell true={} predicted={} count={} weights={}\n",
                    self.label_names[t],
                    self.label_names[p],
                    cell.count,
                    floats(&cell.weight_samples)
                );
            }
        }
        out
    }
}

/// Runs the model over the evaluation set and tallies (true, argmax) with
/// the argmax weight.
pub fn build_ecm(eval: &Evaluator<'_>, model_id: ModelId, set: &[(ImageId, LabelId)]) -> Result<EnhancedConfusionMatrix> {
    let (model, scored) = eval.score(model_id, set)?;
    let names = label_names(eval.store, &model.label_order)?;
    Ok(EnhancedConfusionMatrix::from_scored(model_id, model.label_order, names, &scored))
}
