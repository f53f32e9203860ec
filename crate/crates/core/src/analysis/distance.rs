use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{Dataset, ImageBatch};
use crate::error::{Result, SevitError};

/// How the `N` per-patch distances of one block collapse to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchAggregation {
    #[default]
    Mean,
    Max,
}

/// Mean clean-vs-adversarial token distance after every block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceProfile {
    /// Euclidean distance of class tokens, index `i` is block `i + 1`.
    pub class_token: Vec<f64>,
    /// Per-patch Euclidean distances, aggregated over patches.
    pub patch_token: Vec<f64>,
    pub aggregation: PatchAggregation,
    pub samples: usize,
}

impl DistanceProfile {
    pub fn depth(&self) -> usize {
        self.class_token.len()
    }

    fn merge(&mut self, other: &DistanceProfile) {
        let total = (self.samples + other.samples) as f64;
        let (a, b) = (self.samples as f64 / total, other.samples as f64 / total);
        for (x, y) in self.class_token.iter_mut().zip(&other.class_token) {
            *x = a * *x + b * y;
        }
        for (x, y) in self.patch_token.iter_mut().zip(&other.patch_token) {
            *x = a * *x + b * y;
        }
        self.samples += other.samples;
    }
}

/// Row-wise L2 norm over the last axis.
fn norms(diff: &Tensor) -> Result<Tensor> {
    Ok(diff.sqr()?.sum(candle_core::D::Minus1)?.sqrt()?)
}

pub fn token_distance_profile(
    backbone: &Backbone,
    clean: &ImageBatch,
    adversarial: &ImageBatch,
    aggregation: PatchAggregation,
) -> Result<DistanceProfile> {
    if clean.pixels().dims() != adversarial.pixels().dims() {
        return Err(SevitError::InvalidArgument(format!(
            "unpaired batches: clean {:?} vs adversarial {:?}",
            clean.pixels().dims(),
            adversarial.pixels().dims()
        )));
    }
    if let (Some(a), Some(b)) = (clean.labels(), adversarial.labels()) {
        if a != b {
            return Err(SevitError::InvalidArgument("unpaired batches: labels differ".into()));
        }
    }
    if clean.is_empty() {
        return Err(SevitError::EmptyDataset);
    }
    let t_clean = backbone.forward_with_taps(clean)?;
    let t_adv = backbone.forward_with_taps(adversarial)?;
    let mut class_token = Vec::with_capacity(t_clean.depth());
    let mut patch_token = Vec::with_capacity(t_clean.depth());
    for (block, (ca, aa)) in t_clean.class_tokens.iter().zip(&t_adv.class_tokens).enumerate() {
        let class_d = norms(&(aa - ca)?)?.to_dtype(DType::F64)?;
        class_token.push(class_d.mean_all()?.to_scalar::<f64>()?);
        let per_patch = norms(&(&t_adv.patch_tokens[block] - &t_clean.patch_tokens[block])?)?;
        let per_sample = match aggregation {
            PatchAggregation::Mean => per_patch.mean(1)?,
            PatchAggregation::Max => per_patch.max(1)?,
        };
        patch_token.push(per_sample.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?);
    }
    Ok(DistanceProfile {
        class_token,
        patch_token,
        aggregation,
        samples: clean.len(),
    })
}

/// Profile over paired datasets, processed in batches.
pub fn token_distance_profile_dataset(
    backbone: &Backbone,
    clean: &Dataset,
    adversarial: &Dataset,
    aggregation: PatchAggregation,
    batch_size: usize,
) -> Result<DistanceProfile> {
    if clean.ids != adversarial.ids || clean.labels != adversarial.labels {
        return Err(SevitError::InvalidArgument(
            "unpaired datasets: sample ids or labels differ".into(),
        ));
    }
    let mut profile: Option<DistanceProfile> = None;
    for (a, b) in clean.batches(batch_size).zip(adversarial.batches(batch_size)) {
        let part = token_distance_profile(backbone, &a?, &b?, aggregation)?;
        match profile.as_mut() {
            Some(p) => p.merge(&part),
            None => profile = Some(part),
        }
    }
    profile.ok_or(SevitError::EmptyDataset)
}
