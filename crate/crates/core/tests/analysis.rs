use candle_core::DType;
use sevit_core::analysis::{token_distance_profile, token_distance_profile_dataset, PatchAggregation};
use sevit_core::attacks::{pgd, GrayBoxTarget};
use sevit_core::backbone::{Backbone, BackboneConfig};
use sevit_core::data::{generate_synthetic, SyntheticConfig};

fn setup() -> (Backbone, sevit_core::data::Dataset) {
    let backbone = Backbone::new(
        BackboneConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            depth: 3,
            num_heads: 2,
            ..Default::default()
        },
        4,
    )
    .unwrap();
    let data = generate_synthetic(
        &SyntheticConfig {
            image_size: 16,
            samples_per_class: 5,
            ..Default::default()
        },
        3,
    )
    .unwrap();
    (backbone, data)
}

fn rows(t: &candle_core::Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y)).sqrt()
}

#[test]
fn identical_batches_give_a_zero_profile() {
    let (backbone, data) = setup();
    let batch = data.batch(&[0, 1, 2, 3]).unwrap();
    let profile = token_distance_profile(&backbone, &batch, &batch, PatchAggregation::Mean).unwrap();
    assert_eq!(profile.depth(), 3);
    assert!(profile.class_token.iter().chain(&profile.patch_token).all(|&d| d == 0.0));
}

#[test]
fn profile_matches_per_sample_recomputation() {
    let (backbone, data) = setup();
    let clean = data.batch(&(0..data.len()).collect::<Vec<_>>()).unwrap();
    let adv = pgd(&GrayBoxTarget::new(&backbone), &clean, 0.03, 5, 0.0075, true, 1).unwrap();
    let tc = backbone.forward_with_taps(&clean).unwrap();
    let ta = backbone.forward_with_taps(&adv).unwrap();
    for agg in [PatchAggregation::Mean, PatchAggregation::Max] {
        let profile = token_distance_profile(&backbone, &clean, &adv, agg).unwrap();
        for block in 0..3 {
            let (cc, ca) = (rows(&tc.class_tokens[block]), rows(&ta.class_tokens[block]));
            let expected_class = (0..cc.len()).map(|s| euclid(&cc[s], &ca[s])).sum::<f64>() / cc.len() as f64;
            assert!((profile.class_token[block] - expected_class).abs() < 1e-5);
            let pc: Vec<Vec<Vec<f64>>> = tc.patch_tokens[block].to_dtype(DType::F64).unwrap().to_vec3().unwrap();
            let pa: Vec<Vec<Vec<f64>>> = ta.patch_tokens[block].to_dtype(DType::F64).unwrap().to_vec3().unwrap();
            let mut total = 0.0;
            for s in 0..pc.len() {
                let d: Vec<f64> = (0..pc[s].len()).map(|j| euclid(&pc[s][j], &pa[s][j])).collect();
                total += match agg {
                    PatchAggregation::Mean => d.iter().sum::<f64>() / d.len() as f64,
                    PatchAggregation::Max => d.iter().cloned().fold(0.0, f64::max),
                };
            }
            assert!((profile.patch_token[block] - total / pc.len() as f64).abs() < 1e-5);
        }
    }
}

#[test]
fn batched_profile_equals_single_pass() {
    let (backbone, data) = setup();
    let clean = data.batch(&(0..data.len()).collect::<Vec<_>>()).unwrap();
    let adv = pgd(&GrayBoxTarget::new(&backbone), &clean, 0.03, 3, 0.01, false, 0).unwrap();
    let adv_data = data.replace_pixels(adv.to_vec().unwrap()).unwrap();
    let whole = token_distance_profile(&backbone, &clean, &adv, PatchAggregation::Mean).unwrap();
    let parts = token_distance_profile_dataset(&backbone, &data, &adv_data, PatchAggregation::Mean, 3).unwrap();
    for (a, b) in whole.class_token.iter().zip(&parts.class_token) {
        assert!((a - b).abs() < 1e-5);
    }
    assert_eq!(parts.samples, data.len());
}

#[test]
fn unpaired_inputs_are_rejected() {
    let (backbone, data) = setup();
    let a = data.batch(&[0, 1]).unwrap();
    let b = data.batch(&[0, 1, 2]).unwrap();
    assert!(token_distance_profile(&backbone, &a, &b, PatchAggregation::Mean).is_err());
    let shuffled = data.subset(&(0..data.len()).rev().collect::<Vec<_>>());
    assert!(token_distance_profile_dataset(&backbone, &data, &shuffled, PatchAggregation::Mean, 4).is_err());
}
