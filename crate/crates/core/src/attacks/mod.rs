//! Gray-box adversarial examples against the vanilla ViT classifier.
//!
//! Every attack sees the model only through [`AttackTarget`], which yields
//! final-head logits for `[0, 1]` pixels. Intermediate heads cannot be
//! reached from here; [`GrayBoxTarget`] wraps a bare [`Backbone`].

mod cw;
mod linf;

pub use cw::{cw_l2, CwOutput};
pub use linf::{auto_pgd, bim, fgsm, pgd, ApgdOutput};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{Dataset, ImageBatch};
use crate::error::{Result, SevitError};
use crate::nn;

/// Differentiable classifier seen by an attack.
pub trait AttackTarget {
    /// Logits `(batch, K)` for pixels `(batch, C, H, W)` in `[0, 1]`.
    fn logits(&self, pixels: &Tensor) -> Result<Tensor>;
}

/// The fine-tuned ViT `f` and nothing else.
#[derive(Debug, Clone, Copy)]
pub struct GrayBoxTarget<'a> {
    backbone: &'a Backbone,
}

impl<'a> GrayBoxTarget<'a> {
    pub fn new(backbone: &'a Backbone) -> Self {
        Self { backbone }
    }
}

impl AttackTarget for GrayBoxTarget<'_> {
    fn logits(&self, pixels: &Tensor) -> Result<Tensor> {
        self.backbone.logits(pixels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackFamily {
    Fgsm,
    Bim,
    Pgd,
    AutoPgd,
    Cw,
}

impl AttackFamily {
    pub const ALL: [AttackFamily; 5] = [Self::Fgsm, Self::Bim, Self::Pgd, Self::AutoPgd, Self::Cw];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fgsm => "fgsm",
            Self::Bim => "bim",
            Self::Pgd => "pgd",
            Self::AutoPgd => "auto-pgd",
            Self::Cw => "cw",
        }
    }

    pub fn norm(self) -> Norm {
        match self {
            Self::Cw => Norm::L2,
            _ => Norm::Linf,
        }
    }
}

impl std::fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackFamily {
    type Err = SevitError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s.to_ascii_lowercase())
            .ok_or_else(|| SevitError::Config(format!("unknown attack family {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub norm: Norm,
    /// L∞ budget; ignored by C&W.
    pub epsilon: f64,
    pub steps: usize,
    /// Per-step size α for BIM and PGD; `None` means `ε / 4`.
    pub step_size: Option<f64>,
    pub cw_const: f64,
    pub cw_steps: usize,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            family: AttackFamily::Pgd,
            norm: Norm::Linf,
            epsilon: 0.03,
            steps: 10,
            step_size: None,
            cw_const: 2.0,
            cw_steps: 4000,
            random_start: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn new(family: AttackFamily, epsilon: f64) -> Self {
        Self {
            family,
            norm: family.norm(),
            epsilon,
            random_start: matches!(family, AttackFamily::Pgd | AttackFamily::AutoPgd),
            ..Default::default()
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self::new(AttackFamily::Fgsm, epsilon)
    }

    pub fn bim(epsilon: f64) -> Self {
        Self::new(AttackFamily::Bim, epsilon)
    }

    pub fn pgd(epsilon: f64) -> Self {
        Self::new(AttackFamily::Pgd, epsilon)
    }

    pub fn auto_pgd(epsilon: f64) -> Self {
        Self::new(AttackFamily::AutoPgd, epsilon)
    }

    pub fn cw() -> Self {
        Self::new(AttackFamily::Cw, 0.0)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    /// Short identifier such as `pgd-eps0.03` or `cw`.
    pub fn label(&self) -> String {
        match self.family {
            AttackFamily::Cw => "cw".to_string(),
            f => format!("{}-eps{}", f.name(), self.epsilon),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.norm != self.family.norm() {
            return Err(SevitError::Config(format!(
                "{} is an {:?} attack, but the config says {:?}",
                self.family,
                self.family.norm(),
                self.norm
            )));
        }
        match self.family {
            AttackFamily::Cw => {
                if !(self.cw_const.is_finite() && self.cw_const > 0.0) {
                    return Err(SevitError::Config(format!("cw_const must be positive, got {}", self.cw_const)));
                }
            }
            family => {
                if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
                    return Err(SevitError::Config(format!("epsilon {} outside (0, 1]", self.epsilon)));
                }
                let min_steps = if family == AttackFamily::AutoPgd { 2 } else { 1 };
                if family != AttackFamily::Fgsm && self.steps < min_steps {
                    return Err(SevitError::Config(format!("{family} needs at least {min_steps} steps")));
                }
                if matches!(family, AttackFamily::Bim | AttackFamily::Pgd) && !(self.step_size() > 0.0) {
                    return Err(SevitError::Config(format!("step size {} must be positive", self.step_size())));
                }
            }
        }
        Ok(())
    }
}

/// Adversarial batch plus per-sample bookkeeping.
#[derive(Debug, Clone)]
pub struct AttackOutput {
    pub adversarial: ImageBatch,
    /// The target misclassifies the adversarial sample.
    pub success: Vec<bool>,
    pub l2_distortion: Vec<f64>,
    pub linf_distortion: Vec<f64>,
}

/// Runs the configured attack on one labeled batch.
pub fn run_attack(target: &dyn AttackTarget, batch: &ImageBatch, config: &AttackConfig) -> Result<AttackOutput> {
    config.validate()?;
    let eps = config.epsilon;
    let adversarial = match config.family {
        AttackFamily::Fgsm => fgsm(target, batch, eps)?,
        AttackFamily::Bim => bim(target, batch, eps, config.steps, config.step_size())?,
        AttackFamily::Pgd => pgd(
            target,
            batch,
            eps,
            config.steps,
            config.step_size(),
            config.random_start,
            config.seed,
        )?,
        AttackFamily::AutoPgd => auto_pgd(target, batch, eps, config.steps, config.seed)?.adversarial,
        AttackFamily::Cw => cw_l2(target, batch, config.cw_const, config.cw_steps)?.adversarial,
    };
    summarize(target, batch, adversarial)
}

fn summarize(target: &dyn AttackTarget, clean: &ImageBatch, adversarial: ImageBatch) -> Result<AttackOutput> {
    let labels = clean.require_labels("attack")?;
    let preds = predict(target, adversarial.pixels())?;
    let success = preds.iter().zip(labels).map(|(p, l)| p != l).collect();
    let x = Flat::from_batch(clean)?;
    let adv = Flat::from_batch(&adversarial)?;
    let (l2_distortion, linf_distortion) = (0..x.batch)
        .map(|s| {
            let (a, b) = (x.sample(s), adv.sample(s));
            let diff = a.iter().zip(b).map(|(p, q)| (q - p).abs());
            let (sq, mx) = diff.fold((0.0, 0.0f64), |(sq, mx), d| (sq + d * d, mx.max(d)));
            (sq.sqrt(), mx)
        })
        .unzip();
    Ok(AttackOutput {
        adversarial,
        success,
        l2_distortion,
        linf_distortion,
    })
}

/// Attacked copy of a whole dataset plus per-sample records.
#[derive(Debug, Clone)]
pub struct AdversarialSet {
    pub config: AttackConfig,
    pub data: Dataset,
    pub success: Vec<bool>,
    pub l2_distortion: Vec<f64>,
    pub linf_distortion: Vec<f64>,
}

impl AdversarialSet {
    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }
}

/// Attacks `data` in consecutive batches. Batch `i` uses seed `config.seed + i`,
/// so results depend on the batch size but not on anything else.
pub fn attack_dataset(
    target: &dyn AttackTarget,
    data: &Dataset,
    config: &AttackConfig,
    batch_size: usize,
) -> Result<AdversarialSet> {
    config.validate()?;
    if batch_size == 0 {
        return Err(SevitError::InvalidArgument("batch size must be positive".into()));
    }
    let mut pixels = Vec::with_capacity(data.pixels.len());
    let (mut success, mut l2, mut linf) = (Vec::new(), Vec::new(), Vec::new());
    for (i, batch) in data.batches(batch_size).enumerate() {
        let cfg = config.with_seed(config.seed.wrapping_add(i as u64));
        let out = run_attack(target, &batch?, &cfg)?;
        pixels.extend(out.adversarial.to_vec()?);
        success.extend(out.success);
        l2.extend(out.l2_distortion);
        linf.extend(out.linf_distortion);
    }
    log::info!(
        "{}: {}/{} samples fool the target",
        config.label(),
        success.iter().filter(|&&s| s).count(),
        success.len()
    );
    Ok(AdversarialSet {
        config: *config,
        data: data.replace_pixels(pixels)?,
        success,
        l2_distortion: l2,
        linf_distortion: linf,
    })
}

pub fn predict(target: &dyn AttackTarget, pixels: &Tensor) -> Result<Vec<u32>> {
    Ok(target.logits(pixels)?.argmax(D::Minus1)?.to_vec1::<u32>()?)
}

/// Gradient of the summed cross-entropy `Σ CE(f(x), y)` with respect to the pixels.
pub fn input_gradient(target: &dyn AttackTarget, batch: &ImageBatch) -> Result<Tensor> {
    let labels = nn::labels_tensor(batch.require_labels("input_gradient")?)?;
    let x = Var::from_tensor(batch.pixels())?;
    let losses = nn::cross_entropy_per_sample(&target.logits(x.as_tensor())?, &labels)?;
    let grads = losses.sum_all()?.backward()?;
    grads
        .get(x.as_tensor())
        .cloned()
        .ok_or_else(|| SevitError::InvalidArgument("target output does not depend on its input".into()))
}

/// Clamps `adv` to the L∞ ball of radius `epsilon` around `clean`, then to `[0, 1]`.
pub fn project_linf(adv: &Tensor, clean: &Tensor, epsilon: f64) -> Result<Tensor> {
    if adv.dims() != clean.dims() {
        return Err(SevitError::shape(format!("{:?}", clean.dims()), format!("{:?}", adv.dims())));
    }
    let lo = clean.affine(1.0, -epsilon)?;
    let hi = clean.affine(1.0, epsilon)?;
    clip_box(&adv.maximum(&lo)?.minimum(&hi)?)
}

pub fn clip_box(x: &Tensor) -> Result<Tensor> {
    Ok(x.clamp(0.0, 1.0)?)
}

/// Pixels as a flat `f64` buffer, which is where all attack arithmetic
/// happens. The model only ever sees tensors in the batch's own dtype.
#[derive(Debug, Clone)]
pub(crate) struct Flat {
    pub values: Vec<f64>,
    pub batch: usize,
    pub per_sample: usize,
    shape: Vec<usize>,
    dtype: DType,
}

impl Flat {
    pub fn from_batch(batch: &ImageBatch) -> Result<Self> {
        let pixels = batch.pixels();
        let shape = pixels.dims().to_vec();
        let n = shape[0];
        let values = pixels.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Self {
            per_sample: if n == 0 { 0 } else { values.len() / n },
            batch: n,
            values,
            shape,
            dtype: pixels.dtype(),
        })
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            values,
            ..self.clone()
        }
    }

    pub fn sample(&self, s: usize) -> &[f64] {
        &self.values[s * self.per_sample..(s + 1) * self.per_sample]
    }

    pub fn tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, self.shape.as_slice(), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    pub fn into_batch(self, like: &ImageBatch) -> Result<ImageBatch> {
        like.with_pixels(self.tensor()?)
    }
}

/// Per-sample losses, gradient and predictions at one point.
pub(crate) struct Evaluation {
    pub losses: Vec<f64>,
    pub grad: Vec<f64>,
}

pub(crate) fn evaluate_ce(target: &dyn AttackTarget, x: &Flat, labels: &Tensor) -> Result<Evaluation> {
    let var = Var::from_tensor(&x.tensor()?)?;
    let logits = target.logits(var.as_tensor())?;
    let losses = nn::cross_entropy_per_sample(&logits, labels)?;
    let grads = losses.sum_all()?.backward()?;
    let grad = match grads.get(var.as_tensor()) {
        Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; x.values.len()],
    };
    Ok(Evaluation {
        losses: losses.to_dtype(DType::F64)?.to_vec1::<f64>()?,
        grad,
    })
}

/// Per-pixel bounds of the ε-ball intersected with `[0, 1]`.
pub(crate) fn ball_bounds(x: &[f64], epsilon: f64) -> (Vec<f64>, Vec<f64>) {
    x.iter()
        .map(|&v| ((v - epsilon).max(0.0), (v + epsilon).min(1.0)))
        .unzip()
}

pub(crate) fn project_into(values: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in values.iter_mut().zip(lo).zip(hi) {
        *v = v.max(l).min(h);
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::ensemble::{FusionStrategy, HeadConfig, IntermediateHead, SevitModel};

    /// `logits = W · flatten(x) + b`.
    struct LinearTarget {
        weight: Tensor,
        bias: Tensor,
    }

    impl LinearTarget {
        fn new(weight: Vec<f32>, bias: Vec<f32>) -> Self {
            let k = bias.len();
            let p = weight.len() / k;
            Self {
                weight: Tensor::from_vec(weight, (k, p), &Device::Cpu).unwrap(),
                bias: Tensor::from_vec(bias, k, &Device::Cpu).unwrap(),
            }
        }
    }

    impl AttackTarget for LinearTarget {
        fn logits(&self, pixels: &Tensor) -> Result<Tensor> {
            let xs = pixels.flatten_from(1)?;
            Ok(xs.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
        }
    }

    fn tiny_backbone() -> Backbone {
        Backbone::new(
            BackboneConfig {
                image_size: 8,
                patch_size: 4,
                embed_dim: 8,
                depth: 3,
                num_heads: 2,
                ..Default::default()
            },
            5,
        )
        .unwrap()
    }

    fn random_batch(n: usize, size: usize, seed: u64) -> ImageBatch {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        let values = (0..n * size * size).map(|_| rng.random::<f32>()).collect();
        let labels = (0..n).map(|i| (i % 2) as u32).collect();
        ImageBatch::from_vec(values, (n, 1, size, size), Some(labels)).unwrap()
    }

    fn pixels(b: &ImageBatch) -> Vec<f32> {
        b.to_vec().unwrap()
    }

    #[test]
    fn projection_examples() {
        let clean = Tensor::new(&[0.5f32, 0.5, 0.95, 0.02], &Device::Cpu).unwrap();
        let adv = Tensor::new(&[0.9f32, 0.45, 1.0, 0.0], &Device::Cpu).unwrap();
        let out = project_linf(&adv, &clean, 0.1).unwrap().to_vec1::<f32>().unwrap();
        assert!((out[0] - 0.6).abs() < 1e-6);
        assert_eq!(out[1], 0.45);
        assert_eq!(out[2], 1.0);
        assert_eq!(out[3], 0.0);
        let twice = project_linf(&Tensor::new(out.as_slice(), &Device::Cpu).unwrap(), &clean, 0.1).unwrap();
        assert_eq!(twice.to_vec1::<f32>().unwrap(), out);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::pgd(0.03).validate().is_ok());
        assert!(AttackConfig::pgd(0.0).validate().is_err());
        assert!(AttackConfig::pgd(1.5).validate().is_err());
        assert!(AttackConfig::cw().validate().is_ok());
        let mut apgd = AttackConfig::auto_pgd(0.01);
        apgd.steps = 1;
        assert!(apgd.validate().is_err());
        let mut mixed = AttackConfig::fgsm(0.01);
        mixed.norm = Norm::L2;
        assert!(mixed.validate().is_err());
        assert_eq!("auto-pgd".parse::<AttackFamily>().unwrap(), AttackFamily::AutoPgd);
        assert!("deepfool".parse::<AttackFamily>().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = AttackConfig::auto_pgd(0.01).with_seed(7);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<AttackConfig>(&json).unwrap(), cfg);
        assert_eq!(cfg.label(), "auto-pgd-eps0.01");
    }

    #[test]
    fn zero_epsilon_returns_the_input() {
        let backbone = tiny_backbone();
        let target = GrayBoxTarget::new(&backbone);
        let batch = random_batch(4, 8, 1);
        assert_eq!(pixels(&fgsm(&target, &batch, 0.0).unwrap()), pixels(&batch));
        assert_eq!(pixels(&bim(&target, &batch, 0.0, 5, 0.01).unwrap()), pixels(&batch));
        assert_eq!(pixels(&pgd(&target, &batch, 0.0, 5, 0.01, true, 3).unwrap()), pixels(&batch));
    }

    #[test]
    fn positive_gradient_raises_the_pixel_by_epsilon() {
        // class 1 logit grows with the pixel, so CE for label 0 does too
        let target = LinearTarget::new(vec![0.0, 1.0], vec![0.0, 0.0]);
        let batch = ImageBatch::from_vec(vec![0.5], (1, 1, 1, 1), Some(vec![0])).unwrap();
        let out = pixels(&fgsm(&target, &batch, 0.03).unwrap());
        assert_eq!(out[0], (0.5f64 + 0.03) as f32);
    }

    #[test]
    fn missing_labels_are_rejected() {
        let backbone = tiny_backbone();
        let target = GrayBoxTarget::new(&backbone);
        let batch = ImageBatch::from_vec(vec![0.5; 64], (1, 1, 8, 8), None).unwrap();
        assert!(matches!(fgsm(&target, &batch, 0.01), Err(SevitError::MissingLabels(_))));
        assert!(matches!(cw_l2(&target, &batch, 2.0, 10), Err(SevitError::MissingLabels(_))));
    }

    #[test]
    fn schedule_collapses() {
        let backbone = tiny_backbone();
        let target = GrayBoxTarget::new(&backbone);
        let batch = random_batch(6, 8, 2);
        let eps = 0.03;
        assert_eq!(
            pixels(&bim(&target, &batch, eps, 1, eps).unwrap()),
            pixels(&fgsm(&target, &batch, eps).unwrap())
        );
        assert_eq!(
            pixels(&pgd(&target, &batch, eps, 7, eps / 4.0, false, 11).unwrap()),
            pixels(&bim(&target, &batch, eps, 7, eps / 4.0).unwrap())
        );
    }

    #[test]
    fn seeded_attacks_are_deterministic() {
        let backbone = tiny_backbone();
        let target = GrayBoxTarget::new(&backbone);
        let batch = random_batch(4, 8, 3);
        let a = pgd(&target, &batch, 0.03, 4, 0.01, true, 9).unwrap();
        let b = pgd(&target, &batch, 0.03, 4, 0.01, true, 9).unwrap();
        let c = pgd(&target, &batch, 0.03, 4, 0.01, true, 10).unwrap();
        assert_eq!(pixels(&a), pixels(&b));
        assert_ne!(pixels(&a), pixels(&c));
        let x = auto_pgd(&target, &batch, 0.03, 5, 4).unwrap();
        let y = auto_pgd(&target, &batch, 0.03, 5, 4).unwrap();
        assert_eq!(pixels(&x.adversarial), pixels(&y.adversarial));
    }

    #[test]
    fn apgd_step_sizes_never_grow_and_iterates_stay_in_the_ball() {
        let backbone = tiny_backbone();
        let target = GrayBoxTarget::new(&backbone);
        let batch = random_batch(8, 8, 4);
        let eps = 0.01;
        let out = auto_pgd(&target, &batch, eps, 20, 0).unwrap();
        assert_eq!(out.step_sizes.len(), 20);
        assert!(!out.checkpoints.is_empty());
        assert_eq!(out.step_sizes[0], vec![2.0 * eps; 8]);
        for pair in out.step_sizes.windows(2) {
            for (a, b) in pair[0].iter().zip(&pair[1]) {
                assert!(b <= a);
            }
        }
        assert!(out.max_linf.iter().all(|&m| m <= eps + 1e-12));
    }

    #[test]
    fn cw_without_steps_returns_the_input() {
        let backbone = tiny_backbone();
        let target = GrayBoxTarget::new(&backbone);
        let batch = random_batch(3, 8, 5);
        let out = cw_l2(&target, &batch, 2.0, 0).unwrap();
        assert_eq!(pixels(&out.adversarial), pixels(&batch));
        assert_eq!(out.l2_distortion, vec![0.0; 3]);
        assert_eq!(out.success, vec![false; 3]);
    }

    #[test]
    fn attacks_ignore_the_intermediate_heads() {
        let backbone = tiny_backbone();
        let cfg = backbone.config().clone();
        let head_cfg = HeadConfig {
            hidden: vec![8, 8, 8],
            ..Default::default()
        };
        let heads = (1..3)
            .map(|b| IntermediateHead::new(b, &cfg, &head_cfg, b as u64).unwrap())
            .collect();
        let model = SevitModel::new(backbone, heads, FusionStrategy::default()).unwrap();
        let batch = random_batch(4, 8, 6);
        let suite = [
            AttackConfig::fgsm(0.03),
            AttackConfig::bim(0.03),
            AttackConfig::pgd(0.03),
            AttackConfig::auto_pgd(0.03),
            AttackConfig { cw_steps: 20, ..AttackConfig::cw() },
        ];
        let run = |model: &SevitModel| -> Vec<Vec<f32>> {
            let target = GrayBoxTarget::new(model.backbone());
            suite
                .iter()
                .map(|c| pixels(&run_attack(&target, &batch, c).unwrap().adversarial))
                .collect()
        };
        let before = run(&model);
        for head in model.heads() {
            head.poison_for_test();
        }
        let probs = model.members(&batch).unwrap().head_probs;
        assert!(probs[0][0][0].is_nan());
        assert_eq!(run(&model), before);
    }
}
