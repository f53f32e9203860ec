use proptest::prelude::*;
use sevit_core::backbone::{Backbone, BackboneConfig};
use sevit_core::data::{generate_synthetic, SyntheticConfig};
use sevit_core::detector::{detect, kl_divergence, kl_matrix, roc_curve, smooth, DetectorConfig};
use sevit_core::ensemble::{FusionStrategy, HeadConfig, IntermediateHead, SevitModel};

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("all zero", |raw| {
        let total: f64 = raw.iter().sum();
        (total > 1e-6).then(|| raw.iter().map(|v| v / total).collect())
    })
}

fn members(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(distribution(k), 2..7)
}

/// Per-pair divergence written out independently of the library.
fn oracle_kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let k = p.len() as f64;
    let mut sum = 0.0;
    for i in 0..p.len() {
        let a = (p[i] + eps) / (1.0 + k * eps);
        let b = (q[i] + eps) / (1.0 + k * eps);
        sum += a * (a.ln() - b.ln());
    }
    sum
}

fn mann_whitney(clean: &[f64], adv: &[f64]) -> f64 {
    let mut wins = 0.0;
    for a in adv {
        for c in clean {
            wins += if a > c {
                1.0
            } else if a == c {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (adv.len() * clean.len()) as f64
}

proptest! {
    #[test]
    fn kl_is_non_negative_and_zero_only_on_equal_inputs(p in distribution(4), q in distribution(4)) {
        let (ps, qs) = (smooth(&p, 1e-8), smooth(&q, 1e-8));
        let d = kl_divergence(&ps, &qs).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(kl_divergence(&ps, &ps).unwrap(), 0.0);
        if p.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-3) {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn matrix_entries_match_pairwise_oracle(ds in members(3)) {
        let m = kl_matrix(&ds, 1e-8).unwrap();
        prop_assert_eq!(m.size(), ds.len());
        let mut sq = 0.0;
        for i in 0..ds.len() {
            prop_assert_eq!(m.entries[i][i], 0.0);
            for j in 0..ds.len() {
                let expected = if i == j { 0.0 } else { oracle_kl(&ds[i], &ds[j], 1e-8).max(0.0) };
                prop_assert!((m.entries[i][j] - expected).abs() < 1e-9);
                prop_assert!(m.entries[i][j] >= 0.0);
                sq += expected * expected;
            }
        }
        prop_assert!((m.frobenius_norm() - sq.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn norm_is_invariant_under_class_relabeling(ds in members(4), perm in Just(vec![2usize, 0, 3, 1]).prop_shuffle()) {
        let relabeled: Vec<Vec<f64>> = ds.iter().map(|d| perm.iter().map(|&i| d[i]).collect()).collect();
        let a = kl_matrix(&ds, 1e-8).unwrap().frobenius_norm();
        let b = kl_matrix(&relabeled, 1e-8).unwrap().frobenius_norm();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn auc_equals_pair_counting(
        clean in prop::collection::vec(0u8..20, 1..25),
        adv in prop::collection::vec(0u8..20, 1..25),
    ) {
        // small integer scores force plenty of ties
        let clean: Vec<f64> = clean.into_iter().map(f64::from).collect();
        let adv: Vec<f64> = adv.into_iter().map(f64::from).collect();
        let roc = roc_curve(&clean, &adv).unwrap();
        prop_assert!((roc.auc - mann_whitney(&clean, &adv)).abs() < 1e-12);
    }
}

#[test]
fn pulling_one_member_away_never_lowers_the_score() {
    let consensus = vec![0.6, 0.3, 0.1];
    let away = [0.0, 0.0, 1.0];
    let mut last = 0.0;
    for step in 0..=20 {
        let t = step as f64 / 20.0;
        let moved: Vec<f64> = consensus.iter().zip(&away).map(|(c, a)| (1.0 - t) * c + t * a).collect();
        let norm = kl_matrix(&[consensus.clone(), consensus.clone(), moved, consensus.clone()], 1e-8)
            .unwrap()
            .frobenius_norm();
        assert!(norm >= last, "norm fell from {last} to {norm} at t={t}");
        last = norm;
    }
}

#[test]
fn detect_flags_by_strict_threshold() {
    let cfg = BackboneConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 8,
        depth: 3,
        num_heads: 2,
        ..Default::default()
    };
    let backbone = Backbone::new(cfg.clone(), 1).unwrap();
    let head_cfg = HeadConfig {
        hidden: vec![8, 8, 8],
        ..Default::default()
    };
    let heads = vec![
        IntermediateHead::new(1, &cfg, &head_cfg, 1).unwrap(),
        IntermediateHead::new(2, &cfg, &head_cfg, 2).unwrap(),
    ];
    let model = SevitModel::new(backbone, heads, FusionStrategy::default()).unwrap();
    let data = generate_synthetic(
        &SyntheticConfig {
            image_size: 16,
            samples_per_class: 3,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let batch = data.batch(&(0..data.len()).collect::<Vec<_>>()).unwrap();
    let at_zero = detect(&model, &batch, &DetectorConfig::default()).unwrap();
    assert!(at_zero.iter().all(|d| d.score > 0.0 && d.is_adversarial));
    let median = {
        let mut s: Vec<f64> = at_zero.iter().map(|d| d.score).collect();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };
    let cut = detect(&model, &batch, &DetectorConfig { tau: median, ..Default::default() }).unwrap();
    for (a, b) in at_zero.iter().zip(&cut) {
        assert_eq!(a.score, b.score);
        assert_eq!(b.is_adversarial, b.score > median);
    }
}
