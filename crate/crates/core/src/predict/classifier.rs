//! The classifier interface and the built-in convolutional reference model.

use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::domain::{LabelId, PlotTypeId};
use crate::image::Image;

use super::artifact;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("cannot read model artifact {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad model artifact: {0}")]
    Artifact(String),
    #[error("input does not fit the model: {0}")]
    Input(String),
}

/// One spatial activation map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "feature map buffer does not match its shape");
        FeatureMap { width, height, values }
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        FeatureMap { width, height, values: vec![v; width * height] }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Raw result of one forward pass.
#[derive(Debug, Clone)]
pub struct Inference {
    pub logits: Vec<f64>,
    /// Post-activation maps of the last convolutional layer.
    pub feature_maps: Vec<FeatureMap>,
}

/// A loaded model. Handles are immutable once loaded.
pub trait Classifier: Send + Sync {
    fn label_order(&self) -> &[LabelId];
    fn infer(&self, input: &Image) -> Result<Inference, BackendError>;
    /// `d logit[class] / d feature_map[k]` for every map of `inference`.
    fn class_gradients(&self, inference: &Inference, class: usize) -> Result<Vec<FeatureMap>, BackendError>;
}

pub trait ClassifierBackend: Send + Sync {
    fn load(&self, artifact: &Path) -> Result<Arc<dyn Classifier>, BackendError>;
}

/// Loads `HYDM` artifacts into [`ReferenceClassifier`]s.
#[derive(Debug, Default, Clone, Copy)]
pub struct ReferenceBackend;

impl ClassifierBackend for ReferenceBackend {
    fn load(&self, path: &Path) -> Result<Arc<dyn Classifier>, BackendError> {
        let bytes = std::fs::read(path).map_err(|source| BackendError::Io { path: path.display().to_string(), source })?;
        Ok(Arc::new(artifact::decode(&bytes)?))
    }
}

/// Numerically stable softmax (the maximum logit is subtracted first).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// One 3×3 valid-mode convolution layer with ReLU, global average pooling
/// and a linear layer:
///
/// ```text
/// z_k = b_k + w_k ⋆ x        a_k = max(z_k, 0)        p_k = mean(a_k)
/// logits = W p + c
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceClassifier {
    pub plot_type_id: PlotTypeId,
    pub label_order: Vec<LabelId>,
    pub channels: usize,
    pub num_kernels: usize,
    /// `[k][c][dy][dx]`
    pub kernels: Vec<f64>,
    pub conv_bias: Vec<f64>,
    /// `[label][k]`
    pub linear: Vec<f64>,
    pub linear_bias: Vec<f64>,
}

/// Input converted to `f64`, channels interleaved.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl From<&Image> for Tensor {
    fn from(img: &Image) -> Self {
        Tensor {
            width: img.width() as usize,
            height: img.height() as usize,
            channels: img.channels() as usize,
            data: img.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Forward-pass intermediates kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Activations {
    pub out_width: usize,
    pub out_height: usize,
    /// `[k][y][x]`, pre-activation.
    pub pre: Vec<f64>,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Gradients laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub kernels: Vec<f64>,
    pub conv_bias: Vec<f64>,
    pub linear: Vec<f64>,
    pub linear_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(m: &ReferenceClassifier) -> Self {
        Gradients {
            kernels: vec![0.0; m.kernels.len()],
            conv_bias: vec![0.0; m.conv_bias.len()],
            linear: vec![0.0; m.linear.len()],
            linear_bias: vec![0.0; m.linear_bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in [
            (&mut self.kernels, &other.kernels),
            (&mut self.conv_bias, &other.conv_bias),
            (&mut self.linear, &other.linear),
            (&mut self.linear_bias, &other.linear_bias),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        [&self.kernels[..], &self.conv_bias, &self.linear, &self.linear_bias].concat()
    }
}

impl ReferenceClassifier {
    pub fn num_classes(&self) -> usize {
        self.label_order.len()
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.conv_bias.len() + self.linear.len() + self.linear_bias.len()
    }

    pub fn params(&self) -> Vec<f64> {
        [&self.kernels[..], &self.conv_bias, &self.linear, &self.linear_bias].concat()
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut rest = flat;
        for dst in [&mut self.kernels, &mut self.conv_bias, &mut self.linear, &mut self.linear_bias] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(), BackendError> {
        if x.channels != self.channels {
            return Err(BackendError::Input(format!("expected {} channels, got {}", self.channels, x.channels)));
        }
        if x.width < KERNEL || x.height < KERNEL {
            return Err(BackendError::Input(format!("input {}x{} smaller than the kernel", x.width, x.height)));
        }
        Ok(())
    }

    /// Forward pass. When `masked_sums` is given it also accumulates, for
    /// every kernel tap, the sum of inputs under positions where the
    /// pre-activation is positive, plus the count of such positions: all a
    /// backward pass needs from the input.
    fn forward_impl(&self, x: &Tensor, mut masked_sums: Option<(&mut [f64], &mut [f64])>) -> Activations {
        let (w, c) = (x.width, x.channels);
        let (ow, oh) = (x.width - KERNEL + 1, x.height - KERNEL + 1);
        let k_stride = c * TAPS;
        let mut pre = vec![0.0; self.num_kernels * ow * oh];
        let mut pooled = vec![0.0; self.num_kernels];
        let mut patch = vec![0.0; k_stride];
        for y in 0..oh {
            for xx in 0..ow {
                // Gather the patch once as [c][dy][dx].
                for dy in 0..KERNEL {
                    for dx in 0..KERNEL {
                        let base = ((y + dy) * w + xx + dx) * c;
                        for ch in 0..c {
                            patch[ch * TAPS + dy * KERNEL + dx] = x.data[base + ch];
                        }
                    }
                }
                for k in 0..self.num_kernels {
                    let kernel = &self.kernels[k * k_stride..(k + 1) * k_stride];
                    let z = self.conv_bias[k] + kernel.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>();
                    pre[(k * oh + y) * ow + xx] = z;
                    if z > 0.0 {
                        pooled[k] += z;
                        if let Some((sums, counts)) = masked_sums.as_mut() {
                            let s = &mut sums[k * k_stride..(k + 1) * k_stride];
                            s.iter_mut().zip(&patch).for_each(|(acc, v)| *acc += v);
                            counts[k] += 1.0;
                        }
                    }
                }
            }
        }
        let area = (ow * oh) as f64;
        pooled.iter_mut().for_each(|p| *p /= area);
        let logits = (0..self.num_classes())
            .map(|l| {
                self.linear_bias[l]
                    + self.linear[l * self.num_kernels..(l + 1) * self.num_kernels]
                        .iter()
                        .zip(&pooled)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        Activations { out_width: ow, out_height: oh, pre, pooled, logits }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Activations, BackendError> {
        self.check_input(x)?;
        Ok(self.forward_impl(x, None))
    }

    /// Cross-entropy of one sample and its parameter gradients.
    pub fn loss_and_gradients(&self, x: &Tensor, target: usize) -> Result<(f64, Gradients), BackendError> {
        self.check_input(x)?;
        let k_stride = x.channels * TAPS;
        let mut sums = vec![0.0; self.num_kernels * k_stride];
        let mut counts = vec![0.0; self.num_kernels];
        let act = self.forward_impl(x, Some((&mut sums, &mut counts)));
        let probs = softmax(&act.logits);
        let loss = -probs[target].max(f64::MIN_POSITIVE).ln();

        let mut g = Gradients::zeros_like(self);
        let dlogits: Vec<f64> =
            probs.iter().enumerate().map(|(l, &p)| p - if l == target { 1.0 } else { 0.0 }).collect();
        let mut dpooled = vec![0.0; self.num_kernels];
        for (l, &dl) in dlogits.iter().enumerate() {
            g.linear_bias[l] = dl;
            for (k, dp) in dpooled.iter_mut().enumerate() {
                g.linear[l * self.num_kernels + k] = dl * act.pooled[k];
                *dp += dl * self.linear[l * self.num_kernels + k];
            }
        }
        let area = (act.out_width * act.out_height) as f64;
        for k in 0..self.num_kernels {
            let scale = dpooled[k] / area;
            g.conv_bias[k] = scale * counts[k];
            for (dst, s) in g.kernels[k * k_stride..(k + 1) * k_stride].iter_mut().zip(&sums[k * k_stride..]) {
                *dst = scale * s;
            }
        }
        Ok((loss, g))
    }

    /// Mean cross-entropy over a batch.
    pub fn loss(&self, batch: &[(Tensor, usize)]) -> f64 {
        batch
            .iter()
            .map(|(x, t)| {
                let act = self.forward_impl(x, None);
                -softmax(&act.logits)[*t].max(f64::MIN_POSITIVE).ln()
            })
            .sum::<f64>()
            / batch.len().max(1) as f64
    }

    fn feature_maps(&self, act: &Activations) -> Vec<FeatureMap> {
        let n = act.out_width * act.out_height;
        (0..self.num_kernels)
            .map(|k| {
                let values = act.pre[k * n..(k + 1) * n].iter().map(|&z| z.max(0.0)).collect();
                FeatureMap::new(act.out_width, act.out_height, values)
            })
            .collect()
    }

    /// Class score as a function of the post-ReLU maps. Exposed so the
    /// feature-map gradients can be checked numerically.
    pub fn score_from_maps(&self, maps: &[FeatureMap], class: usize) -> f64 {
        self.linear_bias[class]
            + maps
                .iter()
                .enumerate()
                .map(|(k, m)| self.linear[class * self.num_kernels + k] * m.mean())
                .sum::<f64>()
    }
}

impl Classifier for ReferenceClassifier {
    fn label_order(&self) -> &[LabelId] {
        &self.label_order
    }

    fn infer(&self, input: &Image) -> Result<Inference, BackendError> {
        let act = self.forward(&Tensor::from(input))?;
        let feature_maps = self.feature_maps(&act);
        Ok(Inference { logits: act.logits, feature_maps })
    }

    fn class_gradients(&self, inference: &Inference, class: usize) -> Result<Vec<FeatureMap>, BackendError> {
        if class >= self.num_classes() {
            return Err(BackendError::Input(format!("class {class} out of range")));
        }
        // The score is linear in each map's mean, so every position of map k
        // carries the same gradient.
        Ok(inference
            .feature_maps
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let g = self.linear[class * self.num_kernels + k] / m.values.len() as f64;
                FeatureMap::filled(m.width, m.height, g)
            })
            .collect())
    }
}
