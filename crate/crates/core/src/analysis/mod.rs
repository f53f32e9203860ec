//! Accuracy tables, ensemble-size sweeps, random-subset trials and token-distance profiles.
//!
//! Everything here works from [`Condition`]s: member outputs of the model on
//! the clean test set or on one attacked copy of it. Gray-box attacks never
//! read the heads, so a single adversarial set per attack serves every
//! ensemble configuration.

mod distance;

pub use distance::{token_distance_profile, token_distance_profile_dataset, DistanceProfile, PatchAggregation};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attacks::{attack_dataset, AdversarialSet, AttackConfig, AttackFamily, GrayBoxTarget};
use crate::data::Dataset;
use crate::detector::{detection_scores, fooled_only, roc_curve, Roc};
use crate::ensemble::{FusionKind, FusionStrategy, Fuser, MemberOutputs, SevitModel, TieBreak};
use crate::error::{Result, SevitError};

/// Counts of (true label, predicted label) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(predictions: &[u32], labels: &[u32]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(SevitError::shape(
                format!("{} predictions", labels.len()),
                format!("{} predictions", predictions.len()),
            ));
        }
        let k = predictions.iter().chain(labels).max().map_or(0, |&m| m as usize + 1);
        let mut counts = vec![vec![0; k]; k];
        for (&p, &y) in predictions.iter().zip(labels) {
            counts[y as usize][p as usize] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Percentage in `[0, 100]`.
    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(SevitError::EmptyDataset),
            n => Ok(100.0 * self.correct() as f64 / n as f64),
        }
    }
}

/// Percentage of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64> {
    Confusion::new(predictions, labels)?.accuracy()
}

/// Member outputs of a model on one evaluation set.
#[derive(Debug, Clone)]
pub struct Condition {
    /// `clean` or an attack label such as `pgd-eps0.03`.
    pub name: String,
    pub attack: Option<AttackConfig>,
    pub ids: Vec<String>,
    pub labels: Vec<u32>,
    pub outputs: MemberOutputs,
}

impl Condition {
    pub fn clean(model: &SevitModel, data: &Dataset, batch_size: usize) -> Result<Self> {
        Ok(Self {
            name: "clean".into(),
            attack: None,
            ids: data.ids.clone(),
            labels: data.labels.clone(),
            outputs: model.members_for(data, batch_size)?,
        })
    }

    pub fn attacked(model: &SevitModel, set: &AdversarialSet, batch_size: usize) -> Result<Self> {
        Ok(Self {
            name: set.config.label(),
            attack: Some(set.config),
            ids: set.data.ids.clone(),
            labels: set.data.labels.clone(),
            outputs: model.members_for(&set.data, batch_size)?,
        })
    }

    /// Samples the vanilla classifier gets wrong.
    pub fn fooled_vanilla(&self) -> Vec<bool> {
        self.outputs
            .final_labels()
            .iter()
            .zip(&self.labels)
            .map(|(p, y)| p != y)
            .collect()
    }

    pub fn vanilla_accuracy(&self) -> Result<f64> {
        accuracy(&self.outputs.final_labels(), &self.labels)
    }

    /// Majority vote over the first `heads` heads plus the final classifier.
    pub fn vote_accuracy(&self, heads: usize, tie_break: TieBreak) -> Result<f64> {
        if heads > self.outputs.num_heads() {
            return Err(SevitError::InvalidArgument(format!(
                "asked for {heads} heads, model has {}",
                self.outputs.num_heads()
            )));
        }
        let chosen: Vec<usize> = (0..heads).collect();
        accuracy(&self.outputs.fuse(&chosen, tie_break)?, &self.labels)
    }

    pub fn head_accuracy(&self, head: usize) -> Result<f64> {
        let preds: Vec<u32> = (0..self.outputs.num_samples())
            .map(|s| self.outputs.head_label(head, s))
            .collect();
        accuracy(&preds, &self.labels)
    }
}

/// Attacks `clean` with every config and evaluates the model on the clean set
/// and all attacked copies. The clean condition comes first.
pub fn build_conditions(
    model: &SevitModel,
    clean: &Dataset,
    suite: &[AttackConfig],
    batch_size: usize,
) -> Result<(Vec<Condition>, Vec<AdversarialSet>)> {
    let target = GrayBoxTarget::new(model.backbone());
    let mut conditions = vec![Condition::clean(model, clean, batch_size)?];
    let mut sets = Vec::with_capacity(suite.len());
    for config in suite {
        let set = attack_dataset(&target, clean, config, batch_size)?;
        conditions.push(Condition::attacked(model, &set, batch_size)?);
        sets.push(set);
    }
    Ok((conditions, sets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `vanilla`, `sevit`, `sevit-m{m}` or `sevit-random-c{c}`.
    pub classifier: String,
    /// Heads available to the vote.
    pub heads: usize,
    /// Heads drawn per trial, for random subsets.
    pub subset: Option<usize>,
    pub condition: String,
    pub attack_family: Option<AttackFamily>,
    pub epsilon: Option<f64>,
    /// Percentage, averaged over trials when there are several.
    pub accuracy: f64,
    pub trials: usize,
    pub seeds: Vec<u64>,
}

impl ReportRow {
    fn new(classifier: String, heads: usize, condition: &Condition, accuracy: f64) -> Self {
        let attack = condition.attack;
        Self {
            classifier,
            heads,
            subset: None,
            condition: condition.name.clone(),
            attack_family: attack.map(|a| a.family),
            epsilon: attack.filter(|a| a.family != AttackFamily::Cw).map(|a| a.epsilon),
            accuracy,
            trials: 1,
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<ReportRow>,
}

impl RobustnessReport {
    pub fn accuracy(&self, classifier: &str, condition: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.classifier == classifier && r.condition == condition)
            .map(|r| r.accuracy)
    }

    pub fn extend(&mut self, other: RobustnessReport) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("classifier,heads,subset,condition,attack_family,epsilon,accuracy,trials,seeds\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.4},{},{}",
                r.classifier,
                r.heads,
                r.subset.map(|c| c.to_string()).unwrap_or_default(),
                r.condition,
                r.attack_family.map(|f| f.name()).unwrap_or(""),
                r.epsilon.map(|e| e.to_string()).unwrap_or_default(),
                r.accuracy,
                r.trials,
                seeds.join(" ")
            );
        }
        out
    }

    /// Classifiers as rows, conditions as columns.
    pub fn to_table(&self) -> String {
        let mut classifiers: Vec<&str> = Vec::new();
        let mut conditions: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !classifiers.contains(&r.classifier.as_str()) {
                classifiers.push(&r.classifier);
            }
            if !conditions.contains(&r.condition.as_str()) {
                conditions.push(&r.condition);
            }
        }
        let first = classifiers.iter().map(|c| c.len()).max().unwrap_or(0).max("classifier".len());
        let widths: Vec<usize> = conditions.iter().map(|c| c.len().max(7)).collect();
        let mut out = format!("{:<first$}", "classifier");
        for (c, w) in conditions.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for cls in &classifiers {
            let _ = write!(out, "{cls:<first$}");
            for (cond, w) in conditions.iter().zip(&widths) {
                match self.accuracy(cls, cond) {
                    Some(a) => {
                        let _ = write!(out, "  {a:>w$.2}");
                    }
                    None => {
                        let _ = write!(out, "  {:>w$}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Vanilla and full-majority SEViT accuracy on every condition.
pub fn robustness_report(conditions: &[Condition], tie_break: TieBreak) -> Result<RobustnessReport> {
    let mut rows = Vec::with_capacity(2 * conditions.len());
    for cond in conditions {
        let m = cond.outputs.num_heads();
        rows.push(ReportRow::new("vanilla".into(), 0, cond, cond.vanilla_accuracy()?));
        rows.push(ReportRow::new("sevit".into(), m, cond, cond.vote_accuracy(m, tie_break)?));
    }
    Ok(RobustnessReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub block_index: usize,
    pub accuracy: f64,
}

/// Accuracy of every head on one condition, usually the clean test set.
pub fn head_accuracy_sweep(condition: &Condition) -> Result<Vec<HeadAccuracy>> {
    (0..condition.outputs.num_heads())
        .map(|h| {
            Ok(HeadAccuracy {
                block_index: condition.outputs.blocks[h],
                accuracy: condition.head_accuracy(h)?,
            })
        })
        .collect()
}

/// Majority vote over the lowest `m` heads for each `m` in `m_range`; `m = 0`
/// is the vanilla classifier. One row per `(m, condition)`.
pub fn voting_size_sweep(conditions: &[Condition], m_range: &[usize], tie_break: TieBreak) -> Result<RobustnessReport> {
    let mut rows = Vec::with_capacity(m_range.len() * conditions.len());
    for &m in m_range {
        for cond in conditions {
            rows.push(ReportRow::new(format!("sevit-m{m}"), m, cond, cond.vote_accuracy(m, tie_break)?));
        }
    }
    Ok(RobustnessReport { rows })
}

/// Voting over `c` randomly drawn heads plus the final classifier, one draw
/// per seed. A trial uses the same draw on every condition.
pub fn random_subset_trials(
    conditions: &[Condition],
    c_values: &[usize],
    seeds: &[u64],
    tie_break: TieBreak,
) -> Result<RobustnessReport> {
    if seeds.is_empty() {
        return Err(SevitError::InvalidArgument("random subset trials need at least one seed".into()));
    }
    let mut rows = Vec::new();
    for &c in c_values {
        for cond in conditions {
            let mut total = 0.0;
            for &seed in seeds {
                let mut fuser = Fuser::new(FusionStrategy {
                    kind: FusionKind::RandomSubset { c },
                    tie_break,
                    seed,
                });
                let fused: Vec<u32> = fuser.fuse(&cond.outputs)?.iter().map(|p| p.fused_label).collect();
                total += accuracy(&fused, &cond.labels)?;
            }
            let mut row = ReportRow::new(format!("sevit-random-c{c}"), cond.outputs.num_heads(), cond, total / seeds.len() as f64);
            row.subset = Some(c);
            row.trials = seeds.len();
            row.seeds = seeds.to_vec();
            rows.push(row);
        }
    }
    Ok(RobustnessReport { rows })
}

/// Scores of both conditions, plus the vanilla-fooled flags of the adversarial one.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionScores {
    pub clean: Vec<f64>,
    pub adversarial: Vec<f64>,
    pub fooled_vanilla: Vec<bool>,
}

impl DetectionScores {
    pub fn new(clean: &Condition, adversarial: &Condition, smoothing_eps: f64) -> Result<Self> {
        Ok(Self {
            clean: detection_scores(&clean.outputs, smoothing_eps)?,
            adversarial: detection_scores(&adversarial.outputs, smoothing_eps)?,
            fooled_vanilla: adversarial.fooled_vanilla(),
        })
    }

    pub fn roc(&self) -> Result<Roc> {
        roc_curve(&self.clean, &self.adversarial)
    }

    /// ROC against only the adversarial samples that fooled the vanilla classifier.
    pub fn roc_fooled(&self) -> Result<Roc> {
        roc_curve(&self.clean, &fooled_only(&self.adversarial, &self.fooled_vanilla)?)
    }
}
