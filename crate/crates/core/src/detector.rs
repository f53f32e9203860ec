//! Adversarial-input detection from disagreement between ensemble members.
//!
//! The score of a sample is the Frobenius norm of the matrix of pairwise KL
//! divergences between the heads' distributions `q_1..q_m` and the final
//! classifier's `p`. Inputs scoring above τ are flagged.

use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::ensemble::{MemberOutputs, SevitModel};
use crate::error::{Result, SevitError};

const NORMALIZATION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub tau: f64,
    /// Added to every probability before renormalizing.
    pub smoothing_eps: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            tau: 0.0,
            smoothing_eps: 1e-8,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) {
            return Err(SevitError::Config(format!("tau must be non-negative, got {}", self.tau)));
        }
        if !(self.smoothing_eps > 0.0 && self.smoothing_eps <= 1e-3) {
            return Err(SevitError::Config(format!(
                "smoothing_eps {} outside (0, 1e-3]",
                self.smoothing_eps
            )));
        }
        Ok(())
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(SevitError::InvalidArgument(format!("not a probability distribution: {p:?}")));
    }
    Ok(())
}

/// `(p_i + ε) / (1 + K·ε)`.
pub fn smooth(p: &[f64], eps: f64) -> Vec<f64> {
    let z = 1.0 + eps * p.len() as f64;
    p.iter().map(|v| (v + eps) / z).collect()
}

/// `Σ p_i ln(p_i / q_i)` in nats, with `0 · ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(SevitError::shape(format!("{} classes", p.len()), format!("{} classes", q.len())));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            total += a * (a / b).ln();
        }
    }
    Ok(total.max(0.0))
}

/// Pairwise KL divergences between `m + 1` member distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct KlMatrix {
    /// `entries[i][j] = D_KL(d_i ‖ d_j)`, members in ensemble order with the final classifier last.
    pub entries: Vec<Vec<f64>>,
}

impl KlMatrix {
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().flatten().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Full matrix over smoothed distributions. The final classifier's row holds
/// `D_KL(p ‖ q_j)`, completing the matrix.
pub fn kl_matrix(distributions: &[Vec<f64>], smoothing_eps: f64) -> Result<KlMatrix> {
    if distributions.len() < 2 {
        return Err(SevitError::InvalidArgument(format!(
            "a KL matrix needs at least 2 distributions, got {}",
            distributions.len()
        )));
    }
    let smoothed: Vec<Vec<f64>> = distributions.iter().map(|d| smooth(d, smoothing_eps)).collect();
    let n = smoothed.len();
    let mut entries = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                entries[i][j] = kl_divergence(&smoothed[i], &smoothed[j])?;
            }
        }
    }
    Ok(KlMatrix { entries })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub score: f64,
    pub is_adversarial: bool,
}

/// `‖A‖_F` for every sample of precomputed member outputs (all heads take part).
pub fn detection_scores(outputs: &MemberOutputs, smoothing_eps: f64) -> Result<Vec<f64>> {
    if outputs.num_heads() == 0 {
        return Err(SevitError::DegenerateEnsemble);
    }
    (0..outputs.num_samples())
        .map(|s| Ok(kl_matrix(&outputs.sample_distributions(s), smoothing_eps)?.frobenius_norm()))
        .collect()
}

pub fn detect(model: &SevitModel, batch: &ImageBatch, config: &DetectorConfig) -> Result<Vec<Detection>> {
    config.validate()?;
    let scores = detection_scores(&model.members(batch)?, config.smoothing_eps)?;
    Ok(scores
        .into_iter()
        .map(|score| Detection {
            score,
            is_adversarial: score > config.tau,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Samples scoring at least this much are called adversarial.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// From `(0, 0)` at threshold `+∞` to `(1, 1)`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC with adversarial samples as the positive class; AUC by the trapezoidal rule.
pub fn roc_curve(scores_clean: &[f64], scores_adv: &[f64]) -> Result<Roc> {
    if scores_clean.is_empty() || scores_adv.is_empty() {
        return Err(SevitError::InvalidArgument(format!(
            "ROC needs clean and adversarial scores, got {} and {}",
            scores_clean.len(),
            scores_adv.len()
        )));
    }
    if scores_clean.iter().chain(scores_adv).any(|s| s.is_nan()) {
        return Err(SevitError::InvalidArgument("NaN detection score".into()));
    }
    let mut pooled: Vec<(f64, bool)> = scores_clean
        .iter()
        .map(|&s| (s, false))
        .chain(scores_adv.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nc, na) = (scores_clean.len() as f64, scores_adv.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < pooled.len() {
        let threshold = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == threshold {
            if pooled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / nc,
            tpr: tp as f64 / na,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(Roc { points, auc })
}

/// Adversarial scores of the samples that fooled the vanilla classifier.
pub fn fooled_only(scores_adv: &[f64], fooled: &[bool]) -> Result<Vec<f64>> {
    if scores_adv.len() != fooled.len() {
        return Err(SevitError::shape(
            format!("{} flags", scores_adv.len()),
            format!("{} flags", fooled.len()),
        ));
    }
    Ok(scores_adv.iter().zip(fooled).filter(|(_, &f)| f).map(|(&s, _)| s).collect())
}

/// τ at the `1 − target_fpr` quantile of clean scores, linearly interpolated
/// between order statistics (`h = (n − 1)·q`).
pub fn calibrate_tau(clean_scores: &[f64], target_fpr: f64) -> Result<f64> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(SevitError::InvalidArgument(format!("target_fpr {target_fpr} outside (0, 1)")));
    }
    let n = clean_scores.len();
    if n < 2 || (n as f64) * target_fpr < 1.0 {
        return Err(SevitError::InvalidArgument(format!(
            "{n} clean scores are too few to resolve a false-positive rate of {target_fpr}"
        )));
    }
    if clean_scores.iter().any(|s| !s.is_finite()) {
        return Err(SevitError::InvalidArgument("non-finite clean score".into()));
    }
    let mut sorted = clean_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (n - 1) as f64 * (1.0 - target_fpr);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}
