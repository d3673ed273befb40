//! Gradient-weighted class activation maps.

use thiserror::Error;

use super::classifier::FeatureMap;
use crate::image::resize_grid;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("gradCAM shape mismatch: {0}")]
pub struct ShapeMismatch(pub String);

/// Heatmap over the model input, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCamMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl GradCamMap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_image(&self) -> crate::image::Image {
        let data = self.values.iter().map(|&v| v as f32).collect();
        crate::image::Image::new(self.width as u32, self.height as u32, 1, data).expect("heatmap buffer matches shape")
    }
}

/// `ReLU(Σ_k α_k A^k)` at feature-map resolution, where `α_k` is the spatial
/// mean of the class-score gradient on map `k`.
pub fn raw_cam(maps: &[FeatureMap], gradients: &[FeatureMap]) -> Result<FeatureMap, ShapeMismatch> {
    if maps.is_empty() {
        return Err(ShapeMismatch("no feature maps".into()));
    }
    if maps.len() != gradients.len() {
        return Err(ShapeMismatch(format!("{} maps but {} gradients", maps.len(), gradients.len())));
    }
    let (w, h) = (maps[0].width, maps[0].height);
    for (m, g) in maps.iter().zip(gradients) {
        if (m.width, m.height) != (w, h) || (g.width, g.height) != (w, h) {
            return Err(ShapeMismatch(format!(
                "map {}x{} / gradient {}x{} vs {w}x{h}",
                m.width, m.height, g.width, g.height
            )));
        }
    }
    let mut cam = vec![0.0; w * h];
    for (m, g) in maps.iter().zip(gradients) {
        let alpha = g.mean();
        for (c, a) in cam.iter_mut().zip(&m.values) {
            *c += alpha * a;
        }
    }
    cam.iter_mut().for_each(|c| *c = c.max(0.0));
    Ok(FeatureMap::new(w, h, cam))
}

/// Full gradCAM: the raw map bilinearly upsampled (corner-aligned) to the
/// input shape, then divided by its maximum. An identically zero map stays
/// zero.
pub fn gradcam(
    maps: &[FeatureMap],
    gradients: &[FeatureMap],
    input_width: usize,
    input_height: usize,
) -> Result<GradCamMap, ShapeMismatch> {
    if input_width == 0 || input_height == 0 {
        return Err(ShapeMismatch("empty output shape".into()));
    }
    let raw = raw_cam(maps, gradients)?;
    let mut values = resize_grid(&raw.values, raw.width, raw.height, input_width, input_height);
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(GradCamMap { width: input_width, height: input_height, values })
}
