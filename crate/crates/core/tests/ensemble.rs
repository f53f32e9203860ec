use proptest::prelude::*;
use sevit_core::backbone::{Backbone, BackboneConfig};
use sevit_core::data::{generate_synthetic, Dataset, SyntheticConfig};
use sevit_core::ensemble::{
    load_bundle, majority_vote, save_bundle, sevit_predict, train_heads, FusionKind, FusionStrategy, Fuser,
    HeadConfig, IntermediateHead, SevitModel, TieBreak,
};
use sevit_core::nn::OptimizerConfig;
use sevit_core::SevitError;

fn backbone_config() -> BackboneConfig {
    BackboneConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 16,
        depth: 4,
        num_heads: 2,
        ..Default::default()
    }
}

fn data(per_class: usize, seed: u64) -> Dataset {
    generate_synthetic(
        &SyntheticConfig {
            image_size: 16,
            samples_per_class: per_class,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

fn head_config() -> HeadConfig {
    HeadConfig {
        hidden: vec![32, 16, 8],
        optimizer: OptimizerConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn trains_heads_and_round_trips_bundle() {
    let backbone = Backbone::new(backbone_config(), 0).unwrap();
    let train = data(16, 1);
    let val = data(4, 2);
    let trained = train_heads(&backbone, &train, Some(&val), &[1, 2, 3], &head_config(), 5).unwrap();
    assert_eq!(trained.heads.len(), 3);
    for report in &trained.reports {
        assert_eq!(report.epoch_losses.len(), 2);
        assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
        let acc = report.validation_accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    let model = SevitModel::new(backbone, trained.heads, FusionStrategy::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_bundle(&model, dir.path()).unwrap();
    assert_eq!(manifest.heads.len(), 3);
    let loaded = load_bundle(dir.path()).unwrap();
    let batch = val.batch(&(0..val.len()).collect::<Vec<_>>()).unwrap();
    assert_eq!(model.members(&batch).unwrap(), loaded.members(&batch).unwrap());

    let mut fuser = Fuser::new(model.fusion());
    let preds = sevit_predict(&model, &batch, &mut fuser).unwrap();
    for p in &preds {
        assert_eq!(p.member_labels.len(), 4);
        assert_eq!(p.participating_members, vec![0, 1, 2, 3]);
        assert_eq!(
            p.fused_label,
            majority_vote(&p.member_labels, TieBreak::FinalClassifier, p.member_labels[3]).unwrap()
        );
    }
}

#[test]
fn head_training_is_seeded() {
    let backbone = Backbone::new(backbone_config(), 0).unwrap();
    let train = data(8, 1);
    let a = train_heads(&backbone, &train, None, &[2], &head_config(), 9).unwrap();
    let b = train_heads(&backbone, &train, None, &[2], &head_config(), 9).unwrap();
    assert_eq!(a.reports, b.reports);
}

#[test]
fn rejects_bad_head_layouts() {
    let backbone = Backbone::new(backbone_config(), 0).unwrap();
    let train = data(4, 1);
    for blocks in [vec![0], vec![4], vec![1, 1]] {
        assert!(matches!(
            train_heads(&backbone, &train, None, &blocks, &head_config(), 0),
            Err(SevitError::Config(_))
        ));
    }
    assert!(matches!(
        SevitModel::new(Backbone::new(backbone_config(), 0).unwrap(), vec![], FusionStrategy::default()),
        Err(SevitError::DegenerateEnsemble)
    ));
    let other = BackboneConfig {
        embed_dim: 8,
        ..backbone_config()
    };
    let mismatched = IntermediateHead::new(1, &other, &head_config(), 0).unwrap();
    assert!(SevitModel::new(backbone, vec![mismatched], FusionStrategy::default()).is_err());
    let fusion = FusionStrategy {
        kind: FusionKind::RandomSubset { c: 3 },
        ..Default::default()
    };
    let heads = (1..3)
        .map(|b| IntermediateHead::new(b, &backbone_config(), &head_config(), 0).unwrap())
        .collect();
    assert!(SevitModel::new(Backbone::new(backbone_config(), 0).unwrap(), heads, fusion).is_err());
}

fn brute_force_vote(labels: &[u32], final_label: u32) -> u32 {
    let mut best: Vec<u32> = Vec::new();
    let mut best_count = 0;
    for candidate in 0..=*labels.iter().max().unwrap() {
        let count = labels.iter().filter(|&&l| l == candidate).count();
        if count > best_count {
            best = vec![candidate];
            best_count = count;
        } else if count == best_count && count > 0 {
            best.push(candidate);
        }
    }
    if best.contains(&final_label) {
        final_label
    } else {
        best[0]
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn majority_vote_matches_brute_force(labels in prop::collection::vec(0u32..5, 1..12)) {
        let final_label = *labels.last().unwrap();
        prop_assert_eq!(
            majority_vote(&labels, TieBreak::FinalClassifier, final_label).unwrap(),
            brute_force_vote(&labels, final_label)
        );
    }
}
