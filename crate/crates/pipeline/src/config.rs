use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sevit_core::analysis::PatchAggregation;
use sevit_core::attacks::AttackConfig;
use sevit_core::backbone::{BackboneConfig, BackboneTrainConfig};
use sevit_core::data::SyntheticConfig;
use sevit_core::detector::DetectorConfig;
use sevit_core::ensemble::{FusionStrategy, HeadConfig};

/// How ingested images are split and labeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Train, validation and test fractions. `[0.8, 0.0, 0.2]` gives a
    /// train/test split without validation.
    pub fractions: [f64; 3],
    /// Maps a class directory name to the class it is merged into.
    pub relabel: BTreeMap<String, String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            fractions: [0.8, 0.1, 0.1],
            relabel: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Blocks that get a head; empty means every block before the last.
    pub blocks: Vec<usize>,
    pub fusion: FusionStrategy,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            blocks: Vec::new(),
            fusion: FusionStrategy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub batch_size: usize,
    /// Clean false-positive rate used to calibrate the detection threshold.
    pub target_fpr: f64,
    /// Subset sizes for random-subset trials; empty means `1..=m`.
    pub subset_sizes: Vec<usize>,
    pub trial_seeds: Vec<u64>,
    pub patch_aggregation: PatchAggregation,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            batch_size: 250,
            target_fpr: 0.05,
            subset_sizes: Vec::new(),
            trial_seeds: vec![0, 1, 2, 3, 4],
            patch_aggregation: PatchAggregation::Mean,
        }
    }
}

/// Everything a run depends on besides the dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub backbone: BackboneConfig,
    pub backbone_train: BackboneTrainConfig,
    pub heads: HeadConfig,
    pub ensemble: EnsembleConfig,
    pub attacks: Vec<AttackConfig>,
    pub detector: DetectorConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let attacks = [0.003, 0.01, 0.03]
            .into_iter()
            .flat_map(|eps| [AttackConfig::fgsm(eps), AttackConfig::pgd(eps)])
            .collect();
        Self {
            seed: 0,
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            backbone: BackboneConfig {
                depth: 6,
                ..Default::default()
            },
            backbone_train: BackboneTrainConfig::default(),
            heads: HeadConfig::default(),
            ensemble: EnsembleConfig::default(),
            attacks,
            detector: DetectorConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

/// Component seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub split: u64,
    pub synthetic: u64,
    pub backbone_init: u64,
    pub backbone_train: u64,
    pub heads: u64,
    pub fusion: u64,
    pub attacks: u64,
}

impl Seeds {
    pub fn from_master(seed: u64) -> Self {
        Self {
            split: seed,
            synthetic: seed,
            backbone_init: seed,
            backbone_train: seed.wrapping_add(1),
            heads: seed.wrapping_add(2),
            fusion: seed.wrapping_add(3),
            attacks: seed.wrapping_add(1000),
        }
    }
}

impl RunConfig {
    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.seed)
    }

    /// Writes the derived seeds into the nested configs, fixes each attack's
    /// norm to its family and validates everything.
    pub fn resolve(mut self) -> Result<Self> {
        let seeds = self.seeds();
        self.backbone_train.optimizer.seed = seeds.backbone_train;
        self.heads.optimizer.seed = seeds.heads;
        self.ensemble.fusion.seed = seeds.fusion;
        for (i, attack) in self.attacks.iter_mut().enumerate() {
            attack.norm = attack.family.norm();
            attack.seed = seeds.attacks.wrapping_add(1000 * i as u64);
        }
        if self.ensemble.blocks.is_empty() {
            self.ensemble.blocks = (1..self.backbone.depth).collect();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.backbone_train.optimizer.validate()?;
        self.heads.validate()?;
        self.ensemble.fusion.validate(self.ensemble.blocks.len())?;
        self.detector.validate()?;
        let f = self.data.fractions;
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bail!("data.fractions must be non-negative and sum to 1, got {f:?}");
        }
        if f[0] == 0.0 || f[2] == 0.0 {
            bail!("data.fractions needs non-empty train and test splits, got {f:?}");
        }
        let mut labels = Vec::new();
        for attack in &self.attacks {
            attack.validate()?;
            let label = attack.label();
            if labels.contains(&label) {
                bail!("attack {label} is listed twice");
            }
            labels.push(label);
        }
        if self.evaluation.batch_size == 0 {
            bail!("evaluation.batch_size must be positive");
        }
        if !(self.evaluation.target_fpr > 0.0 && self.evaluation.target_fpr < 1.0) {
            bail!("evaluation.target_fpr must lie in (0, 1)");
        }
        if self.evaluation.trial_seeds.is_empty() {
            bail!("evaluation.trial_seeds must not be empty");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(format!("{digest:x}")[..16].to_string())
    }

    /// Heads sizes swept by random-subset trials.
    pub fn subset_sizes(&self) -> Vec<usize> {
        if self.evaluation.subset_sizes.is_empty() {
            (1..=self.ensemble.blocks.len()).collect()
        } else {
            self.evaluation.subset_sizes.clone()
        }
    }
}

/// Builds a config from `base` (the defaults when absent), an optional TOML
/// file and `key=value` overrides with dotted keys (array elements by index,
/// e.g. `attacks.0.epsilon`).
pub fn load_config(
    base: Option<RunConfig>,
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut value = toml::Value::try_from(base.unwrap_or_default())?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: toml::Value = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut value, file);
    }
    for item in overrides {
        apply_override(&mut value, item)?;
    }
    let mut config: RunConfig = value.try_into().context("invalid configuration")?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.resolve()
}

/// Tables merge key by key; everything else, arrays included, is replaced.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

pub fn apply_override(root: &mut toml::Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .with_context(|| format!("override `{item}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), parse_scalar(raw.trim()));
                    return Ok(());
                }
                t.entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()))
            }
            toml::Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .with_context(|| format!("`{part}` in `{key}` must be an array index"))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .with_context(|| format!("index {idx} in `{key}` is out of range (length {len})"))?;
                if last {
                    *slot = parse_scalar(raw.trim());
                    return Ok(());
                }
                slot
            }
            _ => bail!("`{key}` does not name a config table"),
        };
    }
    bail!("empty override key in `{item}`")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let config = RunConfig::default().resolve().unwrap();
        let text = config.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
        assert_eq!(config.ensemble.blocks, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn overrides_reach_nested_and_indexed_keys() {
        let config = load_config(
            None,
            None,
            &[
                "backbone.depth=4".into(),
                "attacks.1.epsilon=0.02".into(),
                "ensemble.fusion.tie_break=\"final-classifier\"".into(),
            ],
            Some(9),
        )
        .unwrap();
        assert_eq!(config.backbone.depth, 4);
        assert_eq!(config.ensemble.blocks, vec![1, 2, 3]);
        assert_eq!(config.attacks[1].epsilon, 0.02);
        assert_eq!(config.seed, 9);
        assert_eq!(config.heads.optimizer.seed, 11);
    }

    #[test]
    fn hash_tracks_content() {
        let a = load_config(None, None, &[], None).unwrap();
        let b = load_config(None, None, &["evaluation.target_fpr=0.1".into()], None).unwrap();
        assert_eq!(a.hash().unwrap(), load_config(None, None, &[], None).unwrap().hash().unwrap());
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(load_config(None, None, &["data.fractions=[0.5, 0.5, 0.5]".into()], None).is_err());
        assert!(load_config(None, None, &["no_such_key=1".into()], None).is_err());
        assert!(load_config(None, None, &["attacks.9.epsilon=0.1".into()], None).is_err());
        assert!(load_config(None, None, &["attacks.0.epsilon=2.0".into()], None).is_err());
    }
}
