use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sevit_core::analysis::{
    head_accuracy_sweep, random_subset_trials, robustness_report, token_distance_profile_dataset, voting_size_sweep,
    Condition,
};
use sevit_core::attacks::{attack_dataset, AdversarialSet, AttackConfig, GrayBoxTarget};
use sevit_core::backbone::{train_backbone, Backbone};
use sevit_core::data::Dataset;
use sevit_core::detector::{calibrate_tau, detection_scores, fooled_only, roc_curve, Roc};
use sevit_core::ensemble::{load_bundle, save_bundle, train_heads, SevitModel};

use crate::config::RunConfig;
use crate::dataset::{ingest_dataset, load_split, DatasetManifest, Split};
use crate::report;

pub const CONFIG_FILE: &str = "config.toml";
pub const RECORD_FILE: &str = "record.json";
pub const DATASET_FILE: &str = "dataset.json";
const BACKBONE_CKPT: &str = "checkpoints/backbone.ckpt";
const ENSEMBLE_DIR: &str = "checkpoints/ensemble";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    TrainBackbone,
    TrainHeads,
    Attack,
    Evaluate,
    Detect,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::TrainBackbone,
        Stage::TrainHeads,
        Stage::Attack,
        Stage::Evaluate,
        Stage::Detect,
        Stage::Analyze,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainBackbone => "train-backbone",
            Stage::TrainHeads => "train-heads",
            Stage::Attack => "attack",
            Stage::Evaluate => "evaluate",
            Stage::Detect => "detect",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }

    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::TrainBackbone => &[Stage::Ingest],
            Stage::TrainHeads => &[Stage::TrainBackbone],
            Stage::Attack => &[Stage::TrainBackbone],
            Stage::Evaluate | Stage::Detect | Stage::Analyze => &[Stage::TrainHeads, Stage::Attack],
            Stage::Report => &[Stage::Evaluate, Stage::Detect, Stage::Analyze],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .with_context(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Digest of every upstream stage (and the dataset root for ingest) at run time.
    pub inputs: BTreeMap<String, String>,
    /// Output files relative to the run directory.
    pub outputs: Vec<String>,
    /// SHA-256 over the output paths and contents.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("moving {} into place", path.display()))?;
    Ok(())
}

/// One run directory: `config.toml`, `record.json`, `dataset.json` and the
/// `checkpoints/`, `adversarial/`, `reports/` and `plots/` subdirectories.
pub struct Run {
    dir: PathBuf,
    config: RunConfig,
    record: RunRecord,
    hash: String,
}

/// Per-invocation stage inputs that do not belong in the config.
#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    pub dataset_root: Option<PathBuf>,
    pub force: bool,
}

impl Run {
    /// Config stored in an existing run directory, if any.
    pub fn stored_config(runs_root: &Path, run_id: &str) -> Result<Option<RunConfig>> {
        let path = runs_root.join(run_id).join(CONFIG_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        Ok(Some(toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
    }

    /// Opens or creates `runs_root/run_id`. A config that differs from the
    /// stored one is refused unless `force` is set.
    pub fn open(runs_root: &Path, run_id: &str, config: RunConfig, force: bool) -> Result<Self> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            bail!("invalid run id `{run_id}`");
        }
        let dir = runs_root.join(run_id);
        let stored = dir.join(CONFIG_FILE);
        if let Some(old) = Self::stored_config(runs_root, run_id)? {
            if config.hash()? != old.hash()? && !force {
                bail!("run `{run_id}` was created with a different config; use a new --run-id or pass --force to replace it");
            }
        }
        let hash = config.hash()?;
        for sub in ["checkpoints", "adversarial", "reports", "plots"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        write_atomic(&stored, config.to_toml()?.as_bytes())?;
        let record_path = dir.join(RECORD_FILE);
        let mut record = if record_path.exists() {
            serde_json::from_str(&fs::read_to_string(&record_path)?)
                .with_context(|| format!("parsing {}", record_path.display()))?
        } else {
            RunRecord {
                run_id: run_id.to_string(),
                config_hash: hash.clone(),
                seed: config.seed,
                stages: BTreeMap::new(),
            }
        };
        record.config_hash = hash.clone();
        record.seed = config.seed;
        let run = Self {
            dir,
            config,
            record,
            hash,
        };
        run.save_record()?;
        Ok(run)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn save_record(&self) -> Result<()> {
        write_atomic(&self.dir.join(RECORD_FILE), serde_json::to_string_pretty(&self.record)?.as_bytes())
    }

    fn inputs_for(&self, stage: Stage, options: &StageOptions) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        for dep in stage.dependencies() {
            let rec = self
                .record
                .stages
                .get(dep.name())
                .with_context(|| format!("stage `{stage}` needs the outputs of `{dep}`: run stage {dep} first"))?;
            inputs.insert(dep.name().to_string(), rec.digest.clone());
        }
        if stage == Stage::Ingest {
            let root = options
                .dataset_root
                .as_ref()
                .context("stage `ingest` needs --dataset-root")?;
            let root = root.canonicalize().with_context(|| format!("dataset root {}", root.display()))?;
            inputs.insert("dataset_root".into(), root.display().to_string());
        }
        Ok(inputs)
    }

    fn is_current(&self, stage: Stage, inputs: &BTreeMap<String, String>) -> bool {
        self.record.stages.get(stage.name()).is_some_and(|rec| {
            rec.config_hash == self.hash
                && &rec.inputs == inputs
                && rec.outputs.iter().all(|o| self.dir.join(o).exists())
        })
    }

    /// Runs one stage unless its recorded outputs are current. Ingest reuses
    /// the dataset root from its previous run when none is given.
    pub fn run_stage(&mut self, stage: Stage, options: &StageOptions) -> Result<StageStatus> {
        let mut options = options.clone();
        if stage == Stage::Ingest && options.dataset_root.is_none() {
            options.dataset_root = self
                .record
                .stages
                .get(stage.name())
                .and_then(|r| r.inputs.get("dataset_root"))
                .map(PathBuf::from);
        }
        let inputs = self.inputs_for(stage, &options)?;
        if !options.force && self.is_current(stage, &inputs) {
            info!("stage {stage} is up to date; pass --force to rerun it");
            return Ok(StageStatus::UpToDate);
        }
        info!("running stage {stage}");
        let mut out = Outputs::new(&self.dir, &self.hash, self.config.seed);
        match stage {
            Stage::Ingest => self.ingest(&PathBuf::from(&inputs["dataset_root"]), &mut out)?,
            Stage::TrainBackbone => self.train_backbone(&mut out)?,
            Stage::TrainHeads => self.train_heads(&mut out)?,
            Stage::Attack => self.attack(&mut out)?,
            Stage::Evaluate => self.evaluate(&mut out)?,
            Stage::Detect => self.detect(&mut out)?,
            Stage::Analyze => self.analyze(&mut out)?,
            Stage::Report => report::write_report(&self.dir, &mut out)?,
        }
        let record = StageRecord {
            config_hash: self.hash.clone(),
            inputs,
            digest: out.digest()?,
            outputs: out.files,
        };
        self.record.stages.insert(stage.name().to_string(), record);
        self.save_record()?;
        Ok(StageStatus::Ran)
    }

    /// Runs `stages` in order, each after its dependencies.
    pub fn run_all(&mut self, options: &StageOptions) -> Result<Vec<(Stage, StageStatus)>> {
        let mut done = Vec::new();
        for stage in Stage::ALL {
            done.push((stage, self.run_stage(stage, options)?));
        }
        Ok(done)
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        let path = self.dir.join(DATASET_FILE);
        let text = fs::read_to_string(&path).context("dataset manifest missing: run stage ingest first")?;
        Ok(serde_json::from_str(&text)?)
    }

    fn split(&self, split: Split) -> Result<Dataset> {
        let manifest = self.manifest()?;
        let b = &self.config.backbone;
        if manifest.num_classes() != b.num_classes {
            bail!(
                "dataset has {} classes but backbone.num_classes is {}",
                manifest.num_classes(),
                b.num_classes
            );
        }
        load_split(&manifest, split, b.channels, b.image_size)
    }

    fn backbone(&self) -> Result<Backbone> {
        Ok(Backbone::load_checkpoint_expecting(&self.dir.join(BACKBONE_CKPT), &self.config.backbone)?)
    }

    fn model(&self) -> Result<SevitModel> {
        Ok(load_bundle(&self.dir.join(ENSEMBLE_DIR))?)
    }

    fn ingest(&self, root: &Path, out: &mut Outputs) -> Result<()> {
        let manifest = ingest_dataset(root, &self.config.data, self.config.seeds().split)?;
        info!(
            "{} classes; split {}/{}/{}; {} skipped",
            manifest.num_classes(),
            manifest.train.len(),
            manifest.validation.len(),
            manifest.test.len(),
            manifest.skipped.len()
        );
        out.write(DATASET_FILE, serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    fn train_backbone(&self, out: &mut Outputs) -> Result<()> {
        let train = self.split(Split::Train)?;
        let config = &self.config;
        info!(
            "augmentation: {}",
            serde_json::to_string(&config.backbone_train.augment).unwrap_or_default()
        );
        let mut backbone = Backbone::new(config.backbone.clone(), config.seeds().backbone_init)?;
        let logs = train_backbone(&mut backbone, &train, &config.backbone_train)?;
        let path = self.dir.join(BACKBONE_CKPT);
        backbone.save_checkpoint(&path)?;
        out.record(BACKBONE_CKPT);
        let mut csv = out.csv();
        csv.write_record(["epoch", "learning_rate", "loss", "accuracy"])?;
        for log in &logs {
            info!("epoch {} loss {:.4} accuracy {:.2}", log.epoch, log.loss, log.accuracy);
            csv.write_record([
                log.epoch.to_string(),
                log.learning_rate.to_string(),
                format!("{:.6}", log.loss),
                format!("{:.4}", log.accuracy),
            ])?;
        }
        out.write_csv("reports/backbone_training.csv", csv)
    }

    fn train_heads(&self, out: &mut Outputs) -> Result<()> {
        let config = &self.config;
        let backbone = self.backbone()?;
        let train = self.split(Split::Train)?;
        let validation = self.split(Split::Validation)?;
        let validation = (!validation.is_empty()).then_some(&validation);
        let trained = train_heads(
            &backbone,
            &train,
            validation,
            &config.ensemble.blocks,
            &config.heads,
            config.seeds().heads,
        )?;
        let mut csv = out.csv();
        csv.write_record(["block", "epoch", "loss", "validation_accuracy"])?;
        for report in &trained.reports {
            for (epoch, loss) in report.epoch_losses.iter().enumerate() {
                csv.write_record([
                    report.block_index.to_string(),
                    epoch.to_string(),
                    format!("{loss:.6}"),
                    report.validation_accuracy.map(|a| format!("{:.4}", 100.0 * a)).unwrap_or_default(),
                ])?;
            }
        }
        let model = SevitModel::new(backbone, trained.heads, config.ensemble.fusion)?;
        let dir = self.dir.join(ENSEMBLE_DIR);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let manifest = save_bundle(&model, &dir)?;
        out.record(&format!("{ENSEMBLE_DIR}/{}", sevit_core::ensemble::BUNDLE_MANIFEST));
        out.record(&format!("{ENSEMBLE_DIR}/{}", manifest.backbone));
        for head in &manifest.heads {
            out.record(&format!("{ENSEMBLE_DIR}/{}", head.file));
        }
        out.write_csv("reports/head_training.csv", csv)
    }

    fn attack(&self, out: &mut Outputs) -> Result<()> {
        let backbone = self.backbone()?;
        let target = GrayBoxTarget::new(&backbone);
        let test = self.split(Split::Test)?;
        let mut csv = out.csv();
        csv.write_record([
            "attack",
            "attack_family",
            "epsilon",
            "samples",
            "success_rate",
            "mean_l2",
            "max_linf",
        ])?;
        for config in &self.config.attacks {
            let set = attack_dataset(&target, &test, config, self.config.evaluation.batch_size)?;
            let label = config.label();
            info!("{label}: success rate {:.3}", set.success_rate());
            let n = set.success.len().max(1) as f64;
            csv.write_record([
                label.clone(),
                config.family.name().to_string(),
                epsilon_field(config),
                set.success.len().to_string(),
                format!("{:.6}", set.success_rate()),
                format!("{:.6}", set.l2_distortion.iter().sum::<f64>() / n),
                format!("{:.6}", set.linf_distortion.iter().cloned().fold(0.0, f64::max)),
            ])?;
            let manifest = AdversarialManifest {
                attack: *config,
                channels: set.data.channels,
                image_size: set.data.image_size,
                num_classes: set.data.num_classes,
                pixel_file: "pixels.f32".into(),
                ids: set.data.ids.clone(),
                labels: set.data.labels.clone(),
                success: set.success.clone(),
                l2_distortion: set.l2_distortion.clone(),
                linf_distortion: set.linf_distortion.clone(),
            };
            let bytes: Vec<u8> = set.data.pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
            out.write(&format!("adversarial/{label}/pixels.f32"), &bytes)?;
            out.write(
                &format!("adversarial/{label}/manifest.json"),
                serde_json::to_string_pretty(&manifest)?.as_bytes(),
            )?;
        }
        out.write_csv("reports/attacks.csv", csv)
    }

    fn load_adversarial(&self, config: &AttackConfig, clean: &Dataset) -> Result<AdversarialSet> {
        let label = config.label();
        let dir = self.dir.join("adversarial").join(&label);
        let manifest: AdversarialManifest = serde_json::from_str(
            &fs::read_to_string(dir.join("manifest.json"))
                .with_context(|| format!("adversarial set {label} missing: run stage attack first"))?,
        )?;
        if manifest.attack != *config || manifest.ids != clean.ids {
            bail!("adversarial set {label} is stale: run stage attack again");
        }
        let bytes = fs::read(dir.join(&manifest.pixel_file))?;
        let pixels: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let data = Dataset::new(
            manifest.channels,
            manifest.image_size,
            manifest.num_classes,
            manifest.ids,
            manifest.labels,
            pixels,
        )?;
        Ok(AdversarialSet {
            config: manifest.attack,
            data,
            success: manifest.success,
            l2_distortion: manifest.l2_distortion,
            linf_distortion: manifest.linf_distortion,
        })
    }

    /// Clean test condition first, then one per configured attack.
    fn conditions(&self, model: &SevitModel) -> Result<(Vec<Condition>, Vec<AdversarialSet>)> {
        let bs = self.config.evaluation.batch_size;
        let test = self.split(Split::Test)?;
        let mut conditions = vec![Condition::clean(model, &test, bs)?];
        let mut sets = Vec::new();
        for config in &self.config.attacks {
            let set = self.load_adversarial(config, &test)?;
            conditions.push(Condition::attacked(model, &set, bs)?);
            sets.push(set);
        }
        Ok((conditions, sets))
    }

    fn evaluate(&self, out: &mut Outputs) -> Result<()> {
        let model = self.model()?;
        let (conditions, _) = self.conditions(&model)?;
        let report = robustness_report(&conditions, model.fusion().tie_break)?;
        info!("robust accuracy (%):\n{}", report.to_table());
        out.write_text_csv("reports/robustness.csv", &report.to_csv())?;
        out.write("reports/robustness.txt", report.to_table().as_bytes())
    }

    fn detect(&self, out: &mut Outputs) -> Result<()> {
        let model = self.model()?;
        let eps = self.config.detector.smoothing_eps;
        let (conditions, _) = self.conditions(&model)?;
        let validation = self.split(Split::Validation)?;
        let (calibration, source) = if validation.is_empty() {
            warn!("no validation split; calibrating the detection threshold on clean test scores");
            (detection_scores(&conditions[0].outputs, eps)?, "test")
        } else {
            (
                detection_scores(&model.members_for(&validation, self.config.evaluation.batch_size)?, eps)?,
                "validation",
            )
        };
        let target_fpr = self.config.evaluation.target_fpr;
        let tau = calibrate_tau(&calibration, target_fpr)?;
        info!("tau {tau:.6} calibrated on clean {source} scores at FPR {target_fpr}");

        let clean = &conditions[0];
        let clean_scores = detection_scores(&clean.outputs, eps)?;
        let mut scores = out.csv();
        scores.write_record(["sample_id", "score", "label", "attack_family", "epsilon", "fooled_vanilla"])?;
        for ((id, s), f) in clean.ids.iter().zip(&clean_scores).zip(clean.fooled_vanilla()) {
            scores.write_record([id.as_str(), &format!("{s:.9}"), "clean", "", "", &f.to_string()])?;
        }
        let mut summary = out.csv();
        summary.write_record([
            "condition",
            "subset",
            "clean_samples",
            "adversarial_samples",
            "auc",
            "tau",
            "calibrated_on",
            "tpr_at_tau",
            "fpr_at_tau",
        ])?;
        let mut roc_csv = out.csv();
        roc_csv.write_record(["condition", "subset", "threshold", "fpr", "tpr"])?;
        let fpr_at_tau = rate_above(&clean_scores, tau);
        for cond in &conditions[1..] {
            let config = cond.attack.expect("attacked condition");
            let adv = detection_scores(&cond.outputs, eps)?;
            let fooled = cond.fooled_vanilla();
            for ((id, s), f) in cond.ids.iter().zip(&adv).zip(&fooled) {
                scores.write_record([
                    id.as_str(),
                    &format!("{s:.9}"),
                    "adversarial",
                    config.family.name(),
                    &epsilon_field(&config),
                    &f.to_string(),
                ])?;
            }
            let fooled_scores = fooled_only(&adv, &fooled)?;
            for (subset, adv_scores) in [("all", adv.as_slice()), ("fooled", fooled_scores.as_slice())] {
                let roc: Option<Roc> = if adv_scores.is_empty() {
                    None
                } else {
                    Some(roc_curve(&clean_scores, adv_scores)?)
                };
                summary.write_record([
                    cond.name.clone(),
                    subset.to_string(),
                    clean_scores.len().to_string(),
                    adv_scores.len().to_string(),
                    roc.as_ref().map(|r| format!("{:.6}", r.auc)).unwrap_or_default(),
                    format!("{tau:.9}"),
                    source.to_string(),
                    if adv_scores.is_empty() { String::new() } else { format!("{:.6}", rate_above(adv_scores, tau)) },
                    format!("{fpr_at_tau:.6}"),
                ])?;
                if let Some(roc) = roc {
                    info!("{} ({subset}): AUC {:.4}", cond.name, roc.auc);
                    for p in &roc.points {
                        roc_csv.write_record([
                            cond.name.clone(),
                            subset.to_string(),
                            format!("{:.9}", p.threshold),
                            format!("{:.6}", p.fpr),
                            format!("{:.6}", p.tpr),
                        ])?;
                    }
                }
            }
        }
        out.write_csv("reports/detection_scores.csv", scores)?;
        out.write_csv("reports/detection_summary.csv", summary)?;
        out.write_csv("reports/detection_roc.csv", roc_csv)
    }

    fn analyze(&self, out: &mut Outputs) -> Result<()> {
        let model = self.model()?;
        let tie = model.fusion().tie_break;
        let (conditions, sets) = self.conditions(&model)?;
        let m = model.num_heads();

        let mut heads = out.csv();
        heads.write_record(["condition", "member", "block", "accuracy"])?;
        for cond in &conditions {
            for h in head_accuracy_sweep(cond)? {
                heads.write_record([
                    cond.name.clone(),
                    format!("head-block{}", h.block_index),
                    h.block_index.to_string(),
                    format!("{:.4}", h.accuracy),
                ])?;
            }
            heads.write_record([
                cond.name.clone(),
                "final".to_string(),
                model.backbone().config().depth.to_string(),
                format!("{:.4}", cond.vanilla_accuracy()?),
            ])?;
        }
        out.write_csv("reports/head_accuracy.csv", heads)?;

        let sizes: Vec<usize> = (0..=m).collect();
        out.write_text_csv("reports/voting_size.csv", &voting_size_sweep(&conditions, &sizes, tie)?.to_csv())?;
        let trials = random_subset_trials(
            &conditions,
            &self.config.subset_sizes(),
            &self.config.evaluation.trial_seeds,
            tie,
        )?;
        out.write_text_csv("reports/random_subset.csv", &trials.to_csv())?;

        let test = self.split(Split::Test)?;
        let mut dist = out.csv();
        dist.write_record(["condition", "block", "class_token", "patch_token", "aggregation", "samples"])?;
        let aggregation = self.config.evaluation.patch_aggregation;
        for set in &sets {
            let profile = token_distance_profile_dataset(
                model.backbone(),
                &test,
                &set.data,
                aggregation,
                self.config.evaluation.batch_size,
            )?;
            for block in 0..profile.depth() {
                dist.write_record([
                    set.config.label(),
                    (block + 1).to_string(),
                    format!("{:.6}", profile.class_token[block]),
                    format!("{:.6}", profile.patch_token[block]),
                    serde_json::to_value(aggregation)?.as_str().unwrap_or_default().to_string(),
                    profile.samples.to_string(),
                ])?;
            }
        }
        out.write_csv("reports/token_distance.csv", dist)
    }
}

fn rate_above(scores: &[f64], tau: f64) -> f64 {
    scores.iter().filter(|&&s| s > tau).count() as f64 / scores.len().max(1) as f64
}

fn epsilon_field(config: &AttackConfig) -> String {
    match config.family {
        sevit_core::attacks::AttackFamily::Cw => String::new(),
        _ => config.epsilon.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdversarialManifest {
    attack: AttackConfig,
    channels: usize,
    image_size: usize,
    num_classes: usize,
    /// Little-endian f32 pixels, channel-major per sample, in `ids` order.
    pixel_file: String,
    ids: Vec<String>,
    labels: Vec<u32>,
    success: Vec<bool>,
    l2_distortion: Vec<f64>,
    linf_distortion: Vec<f64>,
}

/// Files written by one stage, plus the provenance line for metric CSVs.
pub struct Outputs {
    dir: PathBuf,
    header: String,
    pub(crate) files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path, hash: &str, seed: u64) -> Self {
        Self {
            dir: dir.to_path_buf(),
            header: format!("# config_hash={hash} seed={seed}\n"),
            files: Vec::new(),
        }
    }

    pub(crate) fn record(&mut self, rel: &str) {
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
    }

    pub(crate) fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(rel), bytes)?;
        self.record(rel);
        Ok(())
    }

    pub(crate) fn csv(&self) -> csv::Writer<Vec<u8>> {
        csv::Writer::from_writer(Vec::new())
    }

    pub(crate) fn write_csv(&mut self, rel: &str, csv: csv::Writer<Vec<u8>>) -> Result<()> {
        let body = csv.into_inner().map_err(|e| anyhow::anyhow!("flushing csv: {e}"))?;
        self.write_text_csv(rel, std::str::from_utf8(&body)?)
    }

    /// Prepends the provenance comment line.
    pub(crate) fn write_text_csv(&mut self, rel: &str, body: &str) -> Result<()> {
        let text = format!("{}{body}", self.header);
        self.write(rel, text.as_bytes())
    }

    fn digest(&self) -> Result<String> {
        let mut files = self.files.clone();
        files.sort();
        let mut hasher = Sha256::new();
        for f in &files {
            hasher.update(f.as_bytes());
            hasher.update([0]);
            hasher.update(fs::read(self.dir.join(f)).with_context(|| format!("reading output {f}"))?);
        }
        Ok(format!("{:x}", hasher.finalize()))
    }
}
