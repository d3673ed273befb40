//! Full-batch gradient descent for the reference classifier.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::domain::*;
use crate::image::ImageError;
use crate::ingest::prepare_payload;
use crate::layout::ImageRoot;
use crate::store::{Store, StoreError};
use crate::time::Timestamp;

use super::artifact;
use super::classifier::{BackendError, Gradients, ReferenceClassifier, Tensor, KERNEL};

pub const DEFAULT_KERNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub num_kernels: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams { epochs: 500, learning_rate: 0.5, seed: 0, num_kernels: DEFAULT_KERNELS }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("training image {image}: {source}")]
    Image { image: ImageId, source: ImageError },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("writing artifact {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Seeded He-style initialization.
pub fn initialize(
    plot_type_id: PlotTypeId,
    label_order: Vec<LabelId>,
    channels: usize,
    num_kernels: usize,
    seed: u64,
) -> ReferenceClassifier {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fan_in = (channels * KERNEL * KERNEL) as f64;
    let conv = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
    let lin = Normal::new(0.0, (1.0 / num_kernels as f64).sqrt()).expect("valid std");
    let labels = label_order.len();
    ReferenceClassifier {
        plot_type_id,
        label_order,
        channels,
        num_kernels,
        kernels: (0..num_kernels * channels * KERNEL * KERNEL).map(|_| conv.sample(&mut rng)).collect(),
        conv_bias: vec![0.0; num_kernels],
        linear: (0..labels * num_kernels).map(|_| lin.sample(&mut rng)).collect(),
        linear_bias: vec![0.0; labels],
    }
}

/// Mean loss and mean gradient over the batch. Per-sample work runs in
/// parallel; the reduction is sequential so results are bit-reproducible.
pub fn batch_gradients(model: &ReferenceClassifier, batch: &[(Tensor, usize)]) -> Result<(f64, Gradients), BackendError> {
    let per_sample: Vec<(f64, Gradients)> =
        batch.par_iter().map(|(x, t)| model.loss_and_gradients(x, *t)).collect::<Result<_, _>>()?;
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        total.add_assign(g);
    }
    let n = batch.len() as f64;
    for v in [&mut total.kernels, &mut total.conv_bias, &mut total.linear, &mut total.linear_bias] {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok((loss / n, total))
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub model: ReferenceClassifier,
    /// Loss before the first step, then after every epoch.
    pub losses: Vec<f64>,
}

pub fn fit(mut model: ReferenceClassifier, batch: &[(Tensor, usize)], epochs: usize, learning_rate: f64) -> Result<Fit, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut losses = Vec::with_capacity(epochs + 1);
    for _ in 0..epochs {
        let (loss, g) = batch_gradients(&model, batch)?;
        losses.push(loss);
        for (p, d) in [
            (&mut model.kernels, &g.kernels),
            (&mut model.conv_bias, &g.conv_bias),
            (&mut model.linear, &g.linear),
            (&mut model.linear_bias, &g.linear_bias),
        ] {
            p.iter_mut().zip(d).for_each(|(p, d)| *p -= learning_rate * d);
        }
    }
    losses.push(model.loss(batch));
    Ok(Fit { model, losses })
}

/// Fraction of the batch whose argmax equals the target.
pub fn accuracy(model: &ReferenceClassifier, batch: &[(Tensor, usize)]) -> f64 {
    let correct = batch
        .par_iter()
        .filter(|(x, t)| model.forward(x).ok().and_then(|a| argmax(&a.logits)) == Some(*t))
        .count();
    correct as f64 / batch.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub record: ModelRecord,
    pub losses: Vec<f64>,
    pub training_accuracy: f64,
}

/// Loads a training set as tensors resized to the plot type's input shape,
/// with targets indexed into `label_order`.
pub fn load_batch(
    store: &dyn Store,
    image_root: &ImageRoot,
    members: &[(ImageId, LabelId)],
    shape: InputShape,
    label_order: &[LabelId],
) -> Result<Vec<(Tensor, usize)>, TrainError> {
    members
        .iter()
        .map(|&(image_id, label_id)| {
            let record = store.image(image_id)?;
            let image = crate::image::Image::load(&image_root.resolve(&record.storage_path))
                .and_then(|img| prepare_payload(&img, shape))
                .map_err(|source| TrainError::Image { image: image_id, source })?;
            let target = label_order
                .iter()
                .position(|&l| l == label_id)
                .ok_or(StoreError::UnknownLabel(label_id))?;
            Ok((Tensor::from(&image), target))
        })
        .collect()
}

/// Trains a reference model on a stored training set, writes its artifact
/// into `artifact_dir` and records it (inactive) in the store.
pub fn train_reference(
    store: &dyn Store,
    image_root: &ImageRoot,
    artifact_dir: &Path,
    training_set_id: TrainingSetId,
    params: TrainParams,
    collect_percentage: f64,
    now: Timestamp,
) -> Result<TrainedModel, TrainError> {
    let set = store.training_set(training_set_id)?;
    if set.members.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let plot_type = store.plot_type(set.plot_type_id)?;
    let label_order: Vec<LabelId> = store.labels(plot_type.plot_type_id)?.iter().map(|l| l.label_id).collect();
    let shape = InputShape::of(&plot_type);
    let batch = load_batch(store, image_root, &set.members, shape, &label_order)?;
    let init = initialize(plot_type.plot_type_id, label_order.clone(), shape.channels as usize, params.num_kernels, params.seed);
    let fit = fit(init, &batch, params.epochs, params.learning_rate)?;
    let training_accuracy = accuracy(&fit.model, &batch);

    std::fs::create_dir_all(artifact_dir).map_err(|source| TrainError::Io { path: artifact_dir.to_path_buf(), source })?;
    let artifact_path = unused_path(artifact_dir, &plot_type.name);
    std::fs::write(&artifact_path, artifact::encode(&fit.model))
        .map_err(|source| TrainError::Io { path: artifact_path.clone(), source })?;
    let record = store.insert_model(NewModel {
        plot_type_id: plot_type.plot_type_id,
        artifact_path,
        label_order,
        input_shape: shape,
        training_set_id: Some(training_set_id),
        sampling_method: set.sampling_method.clone(),
        collect_percentage,
        created_at: now,
    })?;
    Ok(TrainedModel { record, losses: fit.losses, training_accuracy })
}

fn unused_path(dir: &Path, plot_type: &str) -> PathBuf {
    let dir = std::fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf());
    (1..)
        .map(|n| dir.join(format!("{plot_type}-{n}.hydm")))
        .find(|p| !p.exists())
        .expect("unbounded search")
}
