//! Intermediate classifiers on per-block patch tokens and their fusion with
//! the final ViT head.
//!
//! Member order is fixed throughout: heads sorted by block index, then the
//! final classifier last.

mod bundle;
mod head;
mod vote;

pub use bundle::{load_bundle, save_bundle, BundleManifest, HeadEntry, BUNDLE_MANIFEST};
pub use head::{train_heads, HeadConfig, HeadInput, HeadReport, IntermediateHead, TrainedHeads};
pub use vote::{majority_vote, TieBreak};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{Dataset, ImageBatch};
use crate::error::{Result, SevitError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FusionKind {
    /// Vote over all `m` heads plus the final classifier.
    MajorityAll,
    /// Vote over `c` heads drawn uniformly without replacement plus the final classifier.
    RandomSubset { c: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionStrategy {
    pub kind: FusionKind,
    pub tie_break: TieBreak,
    pub seed: u64,
}

impl Default for FusionStrategy {
    fn default() -> Self {
        Self {
            kind: FusionKind::MajorityAll,
            tie_break: TieBreak::FinalClassifier,
            seed: 0,
        }
    }
}

impl FusionStrategy {
    pub fn validate(&self, num_heads: usize) -> Result<()> {
        if let FusionKind::RandomSubset { c } = self.kind {
            if c == 0 || c > num_heads {
                return Err(SevitError::Config(format!(
                    "random subset size c={c} must lie in 1..={num_heads}"
                )));
            }
        }
        Ok(())
    }
}

/// Every member's output distribution for a set of samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemberOutputs {
    /// Block index of each head, ascending.
    pub blocks: Vec<usize>,
    /// `head_probs[h][s]` is head `h`'s distribution for sample `s`.
    pub head_probs: Vec<Vec<Vec<f64>>>,
    /// Final classifier distribution per sample.
    pub final_probs: Vec<Vec<f64>>,
}

impl MemberOutputs {
    pub fn num_samples(&self) -> usize {
        self.final_probs.len()
    }

    pub fn num_heads(&self) -> usize {
        self.blocks.len()
    }

    pub fn head_label(&self, head: usize, sample: usize) -> u32 {
        argmax(&self.head_probs[head][sample])
    }

    pub fn final_label(&self, sample: usize) -> u32 {
        argmax(&self.final_probs[sample])
    }

    pub fn final_labels(&self) -> Vec<u32> {
        (0..self.num_samples()).map(|s| self.final_label(s)).collect()
    }

    /// Labels of the chosen heads followed by the final classifier's label.
    pub fn vote_labels(&self, heads: &[usize], sample: usize) -> Vec<u32> {
        heads
            .iter()
            .map(|&h| self.head_label(h, sample))
            .chain(std::iter::once(self.final_label(sample)))
            .collect()
    }

    /// Distributions `q_1..q_m, p` for one sample, in member order.
    pub fn sample_distributions(&self, sample: usize) -> Vec<Vec<f64>> {
        self.head_probs
            .iter()
            .map(|h| h[sample].clone())
            .chain(std::iter::once(self.final_probs[sample].clone()))
            .collect()
    }

    /// Majority vote over `heads` and the final classifier, one label per sample.
    pub fn fuse(&self, heads: &[usize], tie_break: TieBreak) -> Result<Vec<u32>> {
        (0..self.num_samples())
            .map(|s| majority_vote(&self.vote_labels(heads, s), tie_break, self.final_label(s)))
            .collect()
    }

    pub fn append(&mut self, other: MemberOutputs) -> Result<()> {
        if self.final_probs.is_empty() && self.head_probs.is_empty() {
            *self = other;
            return Ok(());
        }
        if self.blocks != other.blocks {
            return Err(SevitError::InvalidArgument("member outputs come from different ensembles".into()));
        }
        for (mine, theirs) in self.head_probs.iter_mut().zip(other.head_probs) {
            mine.extend(theirs);
        }
        self.final_probs.extend(other.final_probs);
        Ok(())
    }
}

/// Index of the largest entry; the first one wins on exact ties.
pub fn argmax(values: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    /// `ŷ_1..ŷ_m, ŷ` for all members, participating or not.
    pub member_labels: Vec<u32>,
    /// `q_1..q_m, p`.
    pub member_probs: Vec<Vec<f64>>,
    pub fused_label: u32,
    /// Indices into the member lists; the final classifier is index `m`.
    pub participating_members: Vec<usize>,
}

/// Backbone plus intermediate heads on blocks `1..=m`.
#[derive(Debug)]
pub struct SevitModel {
    backbone: Backbone,
    heads: Vec<IntermediateHead>,
    fusion: FusionStrategy,
}

impl SevitModel {
    pub fn new(backbone: Backbone, heads: Vec<IntermediateHead>, fusion: FusionStrategy) -> Result<Self> {
        if heads.is_empty() {
            return Err(SevitError::DegenerateEnsemble);
        }
        Self::with_heads(backbone, heads, fusion)
    }

    /// Like [`SevitModel::new`] but also accepts zero heads, which reduces the
    /// ensemble to the vanilla classifier.
    pub fn allowing_degenerate(backbone: Backbone, heads: Vec<IntermediateHead>, fusion: FusionStrategy) -> Result<Self> {
        Self::with_heads(backbone, heads, fusion)
    }

    fn with_heads(backbone: Backbone, mut heads: Vec<IntermediateHead>, fusion: FusionStrategy) -> Result<Self> {
        heads.sort_by_key(|h| h.block_index());
        let depth = backbone.config().depth;
        for pair in heads.windows(2) {
            if pair[0].block_index() == pair[1].block_index() {
                return Err(SevitError::Config(format!(
                    "two heads on block {}",
                    pair[0].block_index()
                )));
            }
        }
        for head in &heads {
            head.check_compatible(backbone.config())?;
        }
        if heads.len() >= depth {
            return Err(SevitError::Config(format!(
                "{} heads on a {depth}-block backbone; at most {} allowed",
                heads.len(),
                depth - 1
            )));
        }
        fusion.validate(heads.len())?;
        Ok(Self {
            backbone,
            heads,
            fusion,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn heads(&self) -> &[IntermediateHead] {
        &self.heads
    }

    pub fn fusion(&self) -> FusionStrategy {
        self.fusion
    }

    /// Number of intermediate heads `m`.
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn into_parts(self) -> (Backbone, Vec<IntermediateHead>, FusionStrategy) {
        (self.backbone, self.heads, self.fusion)
    }

    pub fn members(&self, batch: &ImageBatch) -> Result<MemberOutputs> {
        let trace = self.backbone.forward_with_taps(batch)?;
        let head_probs = self
            .heads
            .iter()
            .map(|head| {
                let tokens = &trace.patch_tokens[head.block_index() - 1];
                head.probs(tokens)
            })
            .collect::<Result<_>>()?;
        Ok(MemberOutputs {
            blocks: self.heads.iter().map(|h| h.block_index()).collect(),
            head_probs,
            final_probs: trace.probs_rows()?,
        })
    }

    pub fn members_for(&self, data: &Dataset, batch_size: usize) -> Result<MemberOutputs> {
        let mut out = MemberOutputs::default();
        for batch in data.batches(batch_size) {
            out.append(self.members(&batch?)?)?;
        }
        Ok(out)
    }
}

/// Applies a fusion strategy and owns the subset generator. Subsets are
/// redrawn once per call to [`Fuser::fuse`].
#[derive(Debug, Clone)]
pub struct Fuser {
    strategy: FusionStrategy,
    rng: ChaCha8Rng,
    draws: Vec<Vec<usize>>,
}

impl Fuser {
    pub fn new(strategy: FusionStrategy) -> Self {
        Self {
            strategy,
            rng: ChaCha8Rng::seed_from_u64(strategy.seed),
            draws: Vec::new(),
        }
    }

    pub fn strategy(&self) -> FusionStrategy {
        self.strategy
    }

    /// Head subsets drawn so far, one per fused batch.
    pub fn draws(&self) -> &[Vec<usize>] {
        &self.draws
    }

    fn next_subset(&mut self, m: usize) -> Result<Vec<usize>> {
        self.strategy.validate(m)?;
        Ok(match self.strategy.kind {
            FusionKind::MajorityAll => (0..m).collect(),
            FusionKind::RandomSubset { c } => {
                let mut picked = rand::seq::index::sample(&mut self.rng, m, c).into_vec();
                picked.sort_unstable();
                self.draws.push(picked.clone());
                picked
            }
        })
    }

    pub fn fuse(&mut self, outputs: &MemberOutputs) -> Result<Vec<EnsemblePrediction>> {
        let m = outputs.num_heads();
        if m == 0 {
            return Err(SevitError::DegenerateEnsemble);
        }
        let subset = self.next_subset(m)?;
        let mut participating = subset.clone();
        participating.push(m);
        (0..outputs.num_samples())
            .map(|s| {
                let member_labels = (0..m)
                    .map(|h| outputs.head_label(h, s))
                    .chain(std::iter::once(outputs.final_label(s)))
                    .collect();
                let fused_label = majority_vote(
                    &outputs.vote_labels(&subset, s),
                    self.strategy.tie_break,
                    outputs.final_label(s),
                )?;
                Ok(EnsemblePrediction {
                    member_labels,
                    member_probs: outputs.sample_distributions(s),
                    fused_label,
                    participating_members: participating.clone(),
                })
            })
            .collect()
    }
}

/// Full SEViT prediction for one batch.
pub fn sevit_predict(model: &SevitModel, batch: &ImageBatch, fuser: &mut Fuser) -> Result<Vec<EnsemblePrediction>> {
    fuser.fuse(&model.members(batch)?)
}
