use serde::{Deserialize, Serialize};

use crate::error::{Result, SevitError};

/// How an exact tie for the most votes is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// Take the final ViT classifier's label when it is among the tied
    /// labels, otherwise the smallest tied class id.
    #[default]
    FinalClassifier,
    /// Take the tied label voted by the earliest member in `labels`, i.e. the
    /// lowest-block head.
    LowestBlock,
}

/// Modal label of `labels` (members in ensemble order).
pub fn majority_vote(labels: &[u32], tie_break: TieBreak, final_label: u32) -> Result<u32> {
    if labels.is_empty() {
        return Err(SevitError::InvalidArgument("majority vote over no labels".into()));
    }
    let num_classes = *labels.iter().max().unwrap() as usize + 1;
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let top = *counts.iter().max().unwrap();
    let tied = |l: u32| counts.get(l as usize) == Some(&top);
    Ok(match tie_break {
        TieBreak::FinalClassifier if tied(final_label) => final_label,
        TieBreak::FinalClassifier => (0..num_classes as u32).find(|&l| tied(l)).unwrap(),
        TieBreak::LowestBlock => *labels.iter().find(|&&l| tied(l)).unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plain_majorities() {
        assert_eq!(majority_vote(&[0, 0, 1], TieBreak::FinalClassifier, 1).unwrap(), 0);
        assert_eq!(majority_vote(&[0, 1, 2, 2], TieBreak::FinalClassifier, 0).unwrap(), 2);
    }

    #[test]
    fn ties_follow_the_rule() {
        assert_eq!(majority_vote(&[0, 1], TieBreak::FinalClassifier, 1).unwrap(), 1);
        assert_eq!(majority_vote(&[1, 0], TieBreak::LowestBlock, 0).unwrap(), 1);
        // final classifier outside the tie: smallest tied class
        assert_eq!(majority_vote(&[2, 1, 1, 2, 0], TieBreak::FinalClassifier, 0).unwrap(), 1);
    }

    #[test]
    fn empty_vote_is_an_error() {
        assert!(majority_vote(&[], TieBreak::FinalClassifier, 0).is_err());
    }

    proptest! {
        #[test]
        fn final_classifier_rule_is_permutation_invariant(
            labels in prop::collection::vec(0u32..4, 1..9),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let final_label = *labels.last().unwrap();
            let mut shuffled = labels.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                majority_vote(&labels, TieBreak::FinalClassifier, final_label).unwrap(),
                majority_vote(&shuffled, TieBreak::FinalClassifier, final_label).unwrap()
            );
        }

        #[test]
        fn agreeing_member_never_changes_the_winner(
            labels in prop::collection::vec(0u32..4, 1..9),
            rule in prop::sample::select(vec![TieBreak::FinalClassifier, TieBreak::LowestBlock]),
        ) {
            let final_label = *labels.last().unwrap();
            let winner = majority_vote(&labels, rule, final_label).unwrap();
            let mut extended = labels.clone();
            extended.insert(0, winner);
            prop_assert_eq!(majority_vote(&extended, rule, final_label).unwrap(), winner);
        }
    }
}
