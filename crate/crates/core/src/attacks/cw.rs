use candle_core::{DType, Tensor, Var, D};

use super::{AttackTarget, Flat};
use crate::data::ImageBatch;
use crate::error::{Result, SevitError};

#[derive(Debug, Clone)]
pub struct CwOutput {
    /// Minimum-distortion successful iterate, or the clean sample when none succeeded.
    pub adversarial: ImageBatch,
    pub l2_distortion: Vec<f64>,
    pub success: Vec<bool>,
    /// Samples dropped after their loss became non-finite.
    pub aborted: Vec<bool>,
}

const LEARNING_RATE: f64 = 0.01;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const TANH_SHRINK: f64 = 1.0 - 1e-6;

/// Carlini–Wagner L2 with a fixed constant: minimizes
/// `‖x′ − x‖₂² + c · max(Z_y − max_{i≠y} Z_i, 0)` over `x′ = (tanh w + 1) / 2`
/// with Adam. Optimization stops early once the total loss stops falling.
pub fn cw_l2(target: &dyn AttackTarget, batch: &ImageBatch, cw_const: f64, cw_steps: usize) -> Result<CwOutput> {
    let labels = batch.require_labels("cw_l2")?.to_vec();
    if !(cw_const.is_finite() && cw_const > 0.0) {
        return Err(SevitError::InvalidArgument(format!("cw_const must be positive, got {cw_const}")));
    }
    let clean = Flat::from_batch(batch)?;
    let (n, d) = (clean.batch, clean.per_sample);
    let mut best_dist = vec![f64::INFINITY; n];
    let mut best = clean.values.clone();
    let mut aborted = vec![false; n];
    if cw_steps > 0 && n > 0 {
        let x_clean = batch.pixels().clone();
        let mut w = clean.with_values(
            clean
                .values
                .iter()
                .map(|&v| ((2.0 * v - 1.0) * TANH_SHRINK).atanh())
                .collect(),
        );
        let probe = target.logits(&x_clean)?;
        let num_classes = probe.dim(1)?;
        let one_hot: Vec<f64> = labels
            .iter()
            .flat_map(|&y| (0..num_classes).map(move |k| if k as u32 == y { 1.0 } else { 0.0 }))
            .collect();
        let one_hot = Tensor::from_vec(one_hot, (n, num_classes), x_clean.device())?.to_dtype(probe.dtype())?;
        let mut m = vec![0.0; w.values.len()];
        let mut v = vec![0.0; w.values.len()];
        let check_every = (cw_steps / 10).max(1);
        let mut previous = f64::INFINITY;
        for step in 0..cw_steps {
            let var = Var::from_tensor(&w.tensor()?)?;
            let adv = ((var.as_tensor().tanh()? + 1.0)? * 0.5)?;
            let logits = target.logits(&adv)?;
            let true_logit = (&logits * &one_hot)?.sum(1)?;
            let other = (&logits - (&one_hot * 1e9)?)?.max(D::Minus1)?;
            let margin = (true_logit - other)?;
            let dist = (&adv - &x_clean)?.sqr()?.flatten_from(1)?.sum(1)?;
            let loss = (&dist + (margin.relu()? * cw_const)?.to_dtype(dist.dtype())?)?;
            let grads = loss.sum_all()?.backward()?;
            let grad = grads
                .get(var.as_tensor())
                .ok_or_else(|| SevitError::InvalidArgument("target output does not depend on its input".into()))?
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            let loss_v = loss.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let margin_v = margin.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let dist_v = dist.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let adv_v = adv.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;

            let t = (step + 1) as i32;
            let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
            let mut total = 0.0;
            for s in 0..n {
                if aborted[s] {
                    continue;
                }
                if !loss_v[s].is_finite() {
                    log::warn!("cw_l2: sample {s} aborted at step {step}, loss {}", loss_v[s]);
                    aborted[s] = true;
                    continue;
                }
                total += loss_v[s];
                if margin_v[s] < 0.0 && dist_v[s] < best_dist[s] {
                    best_dist[s] = dist_v[s];
                    best[s * d..(s + 1) * d].copy_from_slice(&adv_v[s * d..(s + 1) * d]);
                }
                for i in s * d..(s + 1) * d {
                    let g = grad[i];
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                    w.values[i] -= LEARNING_RATE * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
            if step % check_every == 0 {
                if total > previous * 0.9999 {
                    log::debug!("cw_l2: loss stalled, stopping after {} steps", step + 1);
                    break;
                }
                previous = total;
            }
        }
    }
    let success: Vec<bool> = best_dist.iter().map(|d| d.is_finite()).collect();
    let adversarial = clean.with_values(best).into_batch(batch)?;
    let adv = Flat::from_batch(&adversarial)?;
    let l2_distortion = (0..n)
        .map(|s| {
            adv.sample(s)
                .iter()
                .zip(clean.sample(s))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(CwOutput {
        adversarial,
        l2_distortion,
        success,
        aborted,
    })
}
