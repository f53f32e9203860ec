use rand::Rng;

use super::{ball_bounds, evaluate_ce, project_into, seeded_rng, sign, AttackTarget, Flat};
use crate::data::ImageBatch;
use crate::error::{Result, SevitError};
use crate::nn;

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(SevitError::InvalidArgument(format!("epsilon must be non-negative, got {epsilon}")));
    }
    Ok(())
}

/// Signed-gradient ascent steps from `start`, each projected onto the ε-ball and `[0, 1]`.
fn iterate(
    target: &dyn AttackTarget,
    batch: &ImageBatch,
    start: Option<Vec<f64>>,
    epsilon: f64,
    steps: usize,
    step_size: f64,
) -> Result<ImageBatch> {
    let labels = nn::labels_tensor(batch.require_labels("linf attack")?)?;
    check_epsilon(epsilon)?;
    let clean = Flat::from_batch(batch)?;
    if epsilon == 0.0 || clean.batch == 0 {
        return Ok(batch.clone());
    }
    let (lo, hi) = ball_bounds(&clean.values, epsilon);
    let mut x = clean.with_values(start.unwrap_or_else(|| clean.values.clone()));
    for _ in 0..steps {
        let eval = evaluate_ce(target, &x, &labels)?;
        for (v, g) in x.values.iter_mut().zip(&eval.grad) {
            *v += step_size * sign(*g);
        }
        project_into(&mut x.values, &lo, &hi);
    }
    x.into_batch(batch)
}

/// One signed-gradient step of size ε: `clip(x + ε·sign(∇ₓ CE(f(x), y)))`.
pub fn fgsm(target: &dyn AttackTarget, batch: &ImageBatch, epsilon: f64) -> Result<ImageBatch> {
    iterate(target, batch, None, epsilon, 1, epsilon)
}

/// Iterated FGSM with step `step_size`, projected after every step. No random start.
pub fn bim(target: &dyn AttackTarget, batch: &ImageBatch, epsilon: f64, steps: usize, step_size: f64) -> Result<ImageBatch> {
    if steps == 0 || !(step_size > 0.0) {
        return Err(SevitError::InvalidArgument(format!(
            "BIM needs steps >= 1 and a positive step size, got {steps} and {step_size}"
        )));
    }
    iterate(target, batch, None, epsilon, steps, step_size)
}

fn uniform_start(clean: &Flat, epsilon: f64, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed);
    clean
        .values
        .iter()
        .map(|&v| (v + rng.random_range(-epsilon..=epsilon)).clamp(0.0, 1.0))
        .collect()
}

/// BIM from a uniformly random point of the ε-ball (when `random_start`).
pub fn pgd(
    target: &dyn AttackTarget,
    batch: &ImageBatch,
    epsilon: f64,
    steps: usize,
    step_size: f64,
    random_start: bool,
    seed: u64,
) -> Result<ImageBatch> {
    if steps == 0 || !(step_size > 0.0) {
        return Err(SevitError::InvalidArgument(format!(
            "PGD needs steps >= 1 and a positive step size, got {steps} and {step_size}"
        )));
    }
    check_epsilon(epsilon)?;
    let start = if random_start && epsilon > 0.0 {
        Some(uniform_start(&Flat::from_batch(batch)?, epsilon, seed))
    } else {
        None
    };
    iterate(target, batch, start, epsilon, steps, step_size)
}

#[derive(Debug, Clone)]
pub struct ApgdOutput {
    /// Highest-loss iterate of every sample.
    pub adversarial: ImageBatch,
    /// Cross-entropy at the returned iterate.
    pub best_loss: Vec<f64>,
    /// `step_sizes[k][s]`: step size used by sample `s` at iteration `k`.
    pub step_sizes: Vec<Vec<f64>>,
    /// Iterations after which the halving condition was checked.
    pub checkpoints: Vec<usize>,
    /// Largest `|x′ − x|` over the batch after each iteration.
    pub max_linf: Vec<f64>,
}

const APGD_MOMENTUM: f64 = 0.75;
const APGD_RHO: f64 = 0.75;

/// Step-size-free PGD with momentum. The step starts at 2ε and is halved for
/// a sample at a checkpoint when its loss rose in fewer than ρ of the steps
/// since the last checkpoint, or when neither its step size nor its best loss
/// changed since then; it then restarts from its best iterate. Checkpoints
/// start at 22% of the budget and their spacing shrinks by 3% of the budget
/// down to a minimum of 6%.
pub fn auto_pgd(target: &dyn AttackTarget, batch: &ImageBatch, epsilon: f64, steps: usize, seed: u64) -> Result<ApgdOutput> {
    if steps < 2 {
        return Err(SevitError::InvalidArgument(format!("AutoPGD needs at least 2 steps, got {steps}")));
    }
    let labels = nn::labels_tensor(batch.require_labels("auto_pgd")?)?;
    check_epsilon(epsilon)?;
    let clean = Flat::from_batch(batch)?;
    let (n, d) = (clean.batch, clean.per_sample);
    let (lo, hi) = ball_bounds(&clean.values, epsilon);

    let mut x = clean.with_values(if epsilon > 0.0 {
        uniform_start(&clean, epsilon, seed)
    } else {
        clean.values.clone()
    });
    let first = evaluate_ce(target, &x, &labels)?;
    let mut grad = first.grad;
    let mut best_loss = first.losses.clone();
    let mut best_x = x.values.clone();
    let mut best_grad = grad.clone();
    let mut prev_x = x.values.clone();
    // loss_history[0] is the starting point, loss_history[k + 1] follows iteration k
    let mut loss_history = vec![first.losses];

    let mut eta = vec![2.0 * epsilon; n];
    let min_interval = ((0.06 * steps as f64) as usize).max(1);
    let shrink = ((0.03 * steps as f64) as usize).max(1);
    let mut interval = ((0.22 * steps as f64) as usize).max(1);
    let mut since_check = 0;
    let mut best_at_check = best_loss.clone();
    let mut halved_at_check = vec![true; n];

    let mut step_sizes = Vec::with_capacity(steps);
    let mut checkpoints = Vec::new();
    let mut max_linf = Vec::with_capacity(steps);
    for k in 0..steps {
        let momentum = if k == 0 { 1.0 } else { APGD_MOMENTUM };
        let mut next = x.values.clone();
        for s in 0..n {
            let range = s * d..(s + 1) * d;
            for i in range {
                let cur = x.values[i];
                let z = (cur + eta[s] * sign(grad[i])).max(lo[i]).min(hi[i]);
                let v = cur + momentum * (z - cur) + (1.0 - momentum) * (cur - prev_x[i]);
                next[i] = v.max(lo[i]).min(hi[i]);
            }
        }
        step_sizes.push(eta.clone());
        prev_x = std::mem::replace(&mut x.values, next);
        max_linf.push(
            x.values
                .iter()
                .zip(&clean.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );

        let eval = evaluate_ce(target, &x, &labels)?;
        grad = eval.grad;
        for s in 0..n {
            if eval.losses[s] > best_loss[s] {
                best_loss[s] = eval.losses[s];
                best_x[s * d..(s + 1) * d].copy_from_slice(&x.values[s * d..(s + 1) * d]);
                best_grad[s * d..(s + 1) * d].copy_from_slice(&grad[s * d..(s + 1) * d]);
            }
        }
        loss_history.push(eval.losses);

        since_check += 1;
        if since_check == interval {
            checkpoints.push(k);
            let latest = loss_history.len() - 1;
            for s in 0..n {
                let increases = (0..interval)
                    .filter(|&j| latest >= j + 1 && loss_history[latest - j][s] > loss_history[latest - j - 1][s])
                    .count();
                let oscillating = (increases as f64) <= interval as f64 * APGD_RHO;
                let stalled = !halved_at_check[s] && best_at_check[s] >= best_loss[s];
                let halve = oscillating || stalled;
                halved_at_check[s] = halve;
                best_at_check[s] = best_loss[s];
                if halve {
                    eta[s] /= 2.0;
                    let range = s * d..(s + 1) * d;
                    x.values[range.clone()].copy_from_slice(&best_x[range.clone()]);
                    grad[range.clone()].copy_from_slice(&best_grad[range]);
                }
            }
            interval = interval.saturating_sub(shrink).max(min_interval);
            since_check = 0;
        }
    }
    Ok(ApgdOutput {
        adversarial: clean.with_values(best_x).into_batch(batch)?,
        best_loss,
        step_sizes,
        checkpoints,
        max_linf,
    })
}
