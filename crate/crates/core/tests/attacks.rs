use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sevit_core::attacks::{
    self, cw_l2, fgsm, input_gradient, run_attack, AttackConfig, AttackFamily, AttackTarget, GrayBoxTarget,
};
use sevit_core::backbone::{Backbone, BackboneConfig};
use sevit_core::data::ImageBatch;

struct LinearTarget {
    weight: Tensor,
    bias: Tensor,
}

impl AttackTarget for LinearTarget {
    fn logits(&self, pixels: &Tensor) -> sevit_core::Result<Tensor> {
        let xs = pixels.flatten_from(1)?.to_dtype(DType::F64)?;
        Ok(xs.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

fn small_backbone(seed: u64) -> Backbone {
    Backbone::new(
        BackboneConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

fn uniform_batch(rng: &mut ChaCha8Rng, n: usize, size: usize, lo: f64, hi: f64, dtype: DType) -> Tensor {
    let values: Vec<f64> = (0..n * size * size).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(values, (n, 1, size, size), &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

fn as_f64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn linf_outputs_stay_in_the_ball_and_the_box(seed in any::<u64>()) {
        let backbone = small_backbone(seed % 7);
        let target = GrayBoxTarget::new(&backbone);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // mass at the box edges exercises the clipping
        let values: Vec<f32> = (0..12 * 64)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random::<f32>(),
            })
            .collect();
        let labels = (0..12).map(|_| rng.random_range(0..2)).collect();
        let batch = ImageBatch::from_vec(values, (12, 1, 8, 8), Some(labels)).unwrap();
        let clean = as_f64(batch.pixels());
        for eps in [0.003, 0.01, 0.03] {
            for family in [AttackFamily::Fgsm, AttackFamily::Bim, AttackFamily::Pgd, AttackFamily::AutoPgd] {
                let cfg = AttackConfig::new(family, eps).with_seed(seed);
                let out = run_attack(&target, &batch, &cfg).unwrap();
                let adv = as_f64(out.adversarial.pixels());
                for (a, c) in adv.iter().zip(&clean) {
                    prop_assert!((a - c).abs() <= eps + 1e-7, "{family} eps {eps}: {a} vs {c}");
                    prop_assert!((0.0..=1.0).contains(a));
                }
            }
        }
    }
}

fn ce_oracle(target: &dyn AttackTarget, pixels: &[f64], shape: (usize, usize, usize, usize), labels: &[u32]) -> f64 {
    let t = Tensor::from_slice(pixels, shape, &Device::Cpu).unwrap();
    let logits: Vec<Vec<f64>> = target.logits(&t).unwrap().to_dtype(DType::F64).unwrap().to_vec2().unwrap();
    logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            lse - row[y as usize]
        })
        .sum()
}

#[test]
fn input_gradient_matches_central_differences() {
    let cfg = BackboneConfig {
        image_size: 4,
        patch_size: 2,
        embed_dim: 4,
        depth: 2,
        num_heads: 1,
        mlp_ratio: 2,
        ..Default::default()
    };
    let backbone = Backbone::with_dtype(cfg, 3, DType::F64).unwrap();
    assert!(backbone.num_parameters() <= 1000);
    let target = GrayBoxTarget::new(&backbone);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pixels = uniform_batch(&mut rng, 3, 4, 0.2, 0.8, DType::F64);
    let labels = vec![0, 1, 1];
    let batch = ImageBatch::new(pixels.clone(), Some(labels.clone())).unwrap();
    let analytic = as_f64(&input_gradient(&target, &batch).unwrap());
    let x = as_f64(&pixels);
    let h = 1e-5;
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let (mut up, mut down) = (x.clone(), x.clone());
            up[i] += h;
            down[i] -= h;
            (ce_oracle(&target, &up, (3, 1, 4, 4), &labels) - ce_oracle(&target, &down, (3, 1, 4, 4), &labels)) / (2.0 * h)
        })
        .collect();
    let err: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    assert!(err / norm < 1e-3, "relative error {}", err / norm);

    let eps = 0.01;
    let adv = as_f64(fgsm(&target, &batch, eps).unwrap().pixels());
    for i in 0..x.len() {
        if numeric[i].abs() > 1e-6 {
            assert!((adv[i] - x[i] - eps * numeric[i].signum()).abs() < 1e-12);
        }
    }
}

#[test]
fn cw_on_a_linear_model_reaches_the_hyperplane_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 16;
    let weight: Vec<f64> = (0..2 * dim).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let bias = vec![0.1, -0.1];
    let target = LinearTarget {
        weight: Tensor::from_vec(weight.clone(), (2, dim), &Device::Cpu).unwrap(),
        bias: Tensor::from_vec(bias.clone(), 2, &Device::Cpu).unwrap(),
    };
    let n = 12;
    let pixels = uniform_batch(&mut rng, n, 4, 0.3, 0.7, DType::F32);
    let preds = attacks::predict(&target, &pixels).unwrap();
    let batch = ImageBatch::new(pixels.clone(), Some(preds.clone())).unwrap();
    let out = cw_l2(&target, &batch, 2.0, 4000).unwrap();
    let x = as_f64(&pixels);
    let diff: Vec<f64> = (0..dim).map(|i| weight[i] - weight[dim + i]).collect();
    let diff_norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let adv_preds = attacks::predict(&target, out.adversarial.pixels()).unwrap();
    for s in 0..n {
        let xs = &x[s * dim..(s + 1) * dim];
        let margin = diff.iter().zip(xs).map(|(d, v)| d * v).sum::<f64>() + bias[0] - bias[1];
        let distance = margin.abs() / diff_norm;
        assert!(out.success[s], "sample {s} not fooled");
        assert_ne!(adv_preds[s], preds[s]);
        let rel = (out.l2_distortion[s] - distance).abs() / distance;
        assert!(rel < 0.10, "sample {s}: distortion {} vs analytic {distance}", out.l2_distortion[s]);
    }
}

#[test]
fn cw_fools_a_small_vit_with_finite_distortion() {
    let backbone = small_backbone(2);
    let target = GrayBoxTarget::new(&backbone);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pixels = uniform_batch(&mut rng, 8, 8, 0.0, 1.0, DType::F32);
    let labels = attacks::predict(&target, &pixels).unwrap();
    let batch = ImageBatch::new(pixels, Some(labels)).unwrap();
    let cfg = AttackConfig { cw_steps: 200, ..AttackConfig::cw() };
    let out = run_attack(&target, &batch, &cfg).unwrap();
    assert!(out.success.iter().any(|&s| s));
    assert!(out.l2_distortion.iter().all(|d| d.is_finite()));
    let adv = as_f64(out.adversarial.pixels());
    assert!(adv.iter().all(|v| (0.0..=1.0).contains(v)));
}
