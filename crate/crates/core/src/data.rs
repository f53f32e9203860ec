//! Image batches, in-memory datasets, the synthetic stripe dataset and the
//! training-time augmentations.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SevitError};

/// A batch of images in `[0, 1]` pixel space, shape `(batch, channels, H, W)`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pixels: Tensor,
    labels: Option<Vec<u32>>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, labels: Option<Vec<u32>>) -> Result<Self> {
        let dims = pixels.dims();
        if dims.len() != 4 {
            return Err(SevitError::shape("(batch, channels, H, W)", format!("{dims:?}")));
        }
        if let Some(labels) = &labels {
            if labels.len() != dims[0] {
                return Err(SevitError::shape(
                    format!("{} labels", dims[0]),
                    format!("{} labels", labels.len()),
                ));
            }
        }
        let flat = pixels.flatten_all()?.to_dtype(candle_core::DType::F64)?;
        let lo = flat.min(0)?.to_scalar::<f64>()?;
        let hi = flat.max(0)?.to_scalar::<f64>()?;
        if dims[0] > 0 && (lo < 0.0 || hi > 1.0 || !lo.is_finite() || !hi.is_finite()) {
            return Err(SevitError::InvalidArgument(format!(
                "pixel values must lie in [0, 1], found range [{lo}, {hi}]"
            )));
        }
        Ok(Self { pixels, labels })
    }

    pub fn from_vec(
        values: Vec<f32>,
        shape: (usize, usize, usize, usize),
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        let pixels = Tensor::from_vec(values, shape, &Device::Cpu)?;
        Self::new(pixels, labels)
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub(crate) fn require_labels(&self, op: &'static str) -> Result<&[u32]> {
        self.labels().ok_or(SevitError::MissingLabels(op))
    }

    pub fn len(&self) -> usize {
        self.pixels.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same labels, different pixels. Used for attack outputs.
    pub fn with_pixels(&self, pixels: Tensor) -> Result<Self> {
        if pixels.dims() != self.pixels.dims() {
            return Err(SevitError::shape(
                format!("{:?}", self.pixels.dims()),
                format!("{:?}", pixels.dims()),
            ));
        }
        Self::new(pixels, self.labels.clone())
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self
            .pixels
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?)
    }
}

/// Labeled images held in memory, channel-major per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub ids: Vec<String>,
    pub labels: Vec<u32>,
    pub pixels: Vec<f32>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        image_size: usize,
        num_classes: usize,
        ids: Vec<String>,
        labels: Vec<u32>,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        let per = channels * image_size * image_size;
        if ids.len() != labels.len() || pixels.len() != labels.len() * per {
            return Err(SevitError::shape(
                format!("{} samples of {per} values", labels.len()),
                format!("{} ids, {} values", ids.len(), pixels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(SevitError::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            channels,
            image_size,
            num_classes,
            ids,
            labels,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        let mut values = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            values.extend_from_slice(self.sample(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        ImageBatch::from_vec(
            values,
            (indices.len(), self.channels, self.image_size, self.image_size),
            Some(labels),
        )
    }

    /// Consecutive batches in dataset order.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Result<ImageBatch>> + '_ {
        let n = self.len();
        let batch_size = batch_size.max(1);
        (0..n).step_by(batch_size).map(move |start| {
            let end = (start + batch_size).min(n);
            self.batch(&(start..end).collect::<Vec<_>>())
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            pixels.extend_from_slice(self.sample(i));
        }
        Self {
            channels: self.channels,
            image_size: self.image_size,
            num_classes: self.num_classes,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            pixels,
        }
    }

    /// Dataset holding the given batch, reusing this dataset's ids.
    pub fn replace_pixels(&self, pixels: Vec<f32>) -> Result<Self> {
        Self::new(
            self.channels,
            self.image_size,
            self.num_classes,
            self.ids.clone(),
            self.labels.clone(),
            pixels,
        )
    }
}

/// Generator settings for the oriented-stripe toy dataset.
///
/// Each image is split into square cells (matching the backbone patch size by
/// default). Every cell carries a sinusoidal grating whose orientation encodes
/// the class and whose phase is drawn independently per cell, plus Gaussian
/// pixel noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Grating amplitude around the 0.5 background.
    pub signal: f64,
    pub noise: f64,
    /// Angular frequency of the grating in radians per pixel.
    pub frequency: f64,
    pub cell_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            num_classes: 2,
            samples_per_class: 500,
            signal: 0.1,
            noise: 0.2,
            frequency: 2.4,
            cell_size: 8,
        }
    }
}

pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    let SyntheticConfig {
        image_size,
        channels,
        num_classes,
        samples_per_class,
        signal,
        noise,
        frequency,
        cell_size,
    } = *config;
    if image_size == 0 || channels == 0 || num_classes < 2 || cell_size == 0 {
        return Err(SevitError::Config(
            "synthetic data needs a positive image size, channel count and cell size and at least 2 classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = samples_per_class * num_classes;
    let mut labels: Vec<u32> = (0..total).map(|i| (i / samples_per_class.max(1)) as u32).collect();
    {
        use rand::seq::SliceRandom;
        labels.shuffle(&mut rng);
    }
    let cells = image_size.div_ceil(cell_size);
    let per = channels * image_size * image_size;
    let mut pixels = Vec::with_capacity(total * per);
    let mut phases = vec![0.0f64; cells * cells];
    for &label in &labels {
        let angle = std::f64::consts::PI * label as f64 / num_classes as f64;
        let (sin_a, cos_a) = angle.sin_cos();
        for phase in phases.iter_mut() {
            *phase = rng.random::<f64>() * std::f64::consts::TAU;
        }
        for _ in 0..channels {
            for r in 0..image_size {
                for c in 0..image_size {
                    let phase = phases[(r / cell_size) * cells + c / cell_size];
                    let wave = (frequency * (c as f64 * cos_a + r as f64 * sin_a) + phase).sin();
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    let v = 0.5 + signal * wave + noise * eps;
                    pixels.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let ids = (0..total).map(|i| format!("synth_{i:05}")).collect();
    Dataset::new(channels, image_size, num_classes, ids, labels, pixels)
}

/// Geometric and photometric augmentations applied during backbone training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    pub max_translation_px: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            max_rotation_deg: 5.0,
            max_translation_px: 2.0,
            brightness: 0.05,
            contrast: 0.05,
        }
    }
}

impl AugmentConfig {
    /// Augments one channel-major sample in place.
    pub fn apply(&self, sample: &mut [f32], channels: usize, size: usize, rng: &mut ChaCha8Rng) {
        if !self.enabled {
            return;
        }
        let angle = (rng.random::<f64>() * 2.0 - 1.0) * self.max_rotation_deg.to_radians();
        let tx = (rng.random::<f64>() * 2.0 - 1.0) * self.max_translation_px;
        let ty = (rng.random::<f64>() * 2.0 - 1.0) * self.max_translation_px;
        let brightness = (rng.random::<f64>() * 2.0 - 1.0) * self.brightness;
        let contrast = 1.0 + (rng.random::<f64>() * 2.0 - 1.0) * self.contrast;
        let (sin_a, cos_a) = angle.sin_cos();
        let centre = (size as f64 - 1.0) / 2.0;
        let plane = size * size;
        let mut warped = vec![0.0f32; plane];
        for ch in 0..channels {
            let src = &sample[ch * plane..(ch + 1) * plane];
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            for r in 0..size {
                for c in 0..size {
                    // inverse map of rotate-then-translate
                    let x = c as f64 - centre - tx;
                    let y = r as f64 - centre - ty;
                    let sx = cos_a * x + sin_a * y + centre;
                    let sy = -sin_a * x + cos_a * y + centre;
                    let v = bilinear(src, size, sx, sy);
                    let v = (v - mean) * contrast + mean + brightness;
                    warped[r * size + c] = v.clamp(0.0, 1.0) as f32;
                }
            }
            sample[ch * plane..(ch + 1) * plane].copy_from_slice(&warped);
        }
    }
}

fn bilinear(plane: &[f32], size: usize, x: f64, y: f64) -> f64 {
    let max = (size - 1) as f64;
    let x = x.clamp(0.0, max);
    let y = y.clamp(0.0, max);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(size - 1);
    let y1 = (y0 + 1).min(size - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let at = |r: usize, c: usize| plane[r * size + c] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_rejects_out_of_range_pixels() {
        let err = ImageBatch::from_vec(vec![0.5, 1.5, 0.0, 0.2], (1, 1, 2, 2), None).unwrap_err();
        assert!(matches!(err, SevitError::InvalidArgument(_)));
    }

    #[test]
    fn batch_rejects_label_count_mismatch() {
        let err = ImageBatch::from_vec(vec![0.5; 8], (2, 1, 2, 2), Some(vec![0])).unwrap_err();
        assert!(matches!(err, SevitError::Shape { .. }));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let cfg = SyntheticConfig {
            samples_per_class: 20,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg, 3).unwrap();
        let b = generate_synthetic(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 20);
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        let c = generate_synthetic(&cfg, 4).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn zero_signal_images_carry_no_class_structure() {
        let cfg = SyntheticConfig {
            samples_per_class: 5,
            signal: 0.0,
            noise: 0.0,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg, 0).unwrap();
        assert!(data.pixels.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sample: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        let before = sample.clone();
        AugmentConfig::default().apply(&mut sample, 1, 4, &mut rng);
        assert_eq!(sample, before);
    }

    #[test]
    fn augmentation_keeps_pixels_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AugmentConfig {
            enabled: true,
            brightness: 0.5,
            ..Default::default()
        };
        let mut sample: Vec<f32> = (0..64).map(|i| (i % 7) as f32 / 6.0).collect();
        cfg.apply(&mut sample, 1, 8, &mut rng);
        assert!(sample.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
