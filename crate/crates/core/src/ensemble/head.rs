use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Linear;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{parse_dtype, Backbone, BackboneConfig};
use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Result, SevitError};
use crate::nn::{self, OptimizerConfig, ParamStore, ScheduledAdam, TensorMap};

const CHECKPOINT_KIND: &str = "intermediate-head";

/// How a block's `N × D` patch tokens are presented to its head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInput {
    /// One `N·D` vector.
    #[default]
    Flatten,
    /// Mean over patches, one `D` vector.
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub input: HeadInput,
    /// Widths of the three hidden layers of the 4-layer MLP.
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            input: HeadInput::Flatten,
            hidden: vec![512, 256, 128],
            dropout: 0.1,
            optimizer: OptimizerConfig {
                epochs: 5,
                ..Default::default()
            },
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.len() != 3 || self.hidden.contains(&0) {
            return Err(SevitError::Config(format!(
                "a head is a 4-layer MLP and needs three positive hidden widths, got {:?}",
                self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SevitError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.optimizer.validate()
    }
}

/// Shape metadata stored with every head checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadSpec {
    block_index: usize,
    num_patches: usize,
    embed_dim: usize,
    num_classes: usize,
    input: HeadInput,
    hidden: Vec<usize>,
    dropout: f64,
    dtype: String,
}

impl HeadSpec {
    fn input_dim(&self) -> usize {
        match self.input {
            HeadInput::Flatten => self.num_patches * self.embed_dim,
            HeadInput::MeanPool => self.embed_dim,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(&self.hidden);
        w.push(self.num_classes);
        w
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn new(map: &TensorMap, depth: usize) -> Result<Self> {
        let layers = (0..depth).map(|i| nn::linear(map, &format!("fc{i}"))).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    fn forward(&self, xs: &Tensor, dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut dropout = dropout;
        let mut xs = xs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            xs = layer.forward(&xs)?;
            if i < last {
                xs = xs.relu()?;
                if let Some((p, rng)) = dropout.as_mut() {
                    xs = nn::dropout(&xs, *p, rng)?;
                }
            }
        }
        Ok(xs)
    }
}

/// MLP classifier `g_β` reading the patch tokens of one backbone block.
#[derive(Debug)]
pub struct IntermediateHead {
    spec: HeadSpec,
    params: ParamStore,
    tracked: Mlp,
    frozen: Mlp,
}

impl IntermediateHead {
    pub fn new(block_index: usize, backbone: &BackboneConfig, config: &HeadConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(block_index, backbone, config, seed, DType::F32)
    }

    pub fn with_dtype(
        block_index: usize,
        backbone: &BackboneConfig,
        config: &HeadConfig,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        if block_index == 0 || block_index >= backbone.depth {
            return Err(SevitError::Config(format!(
                "head block index {block_index} must lie in 1..{}",
                backbone.depth
            )));
        }
        let spec = HeadSpec {
            block_index,
            num_patches: backbone.num_patches(),
            embed_dim: backbone.embed_dim,
            num_classes: backbone.num_classes,
            input: config.input,
            hidden: config.hidden.clone(),
            dropout: config.dropout,
            dtype: format!("{dtype:?}").to_lowercase(),
        };
        Self::from_spec(spec, seed, dtype)
    }

    fn from_spec(spec: HeadSpec, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(dtype);
        let widths = spec.widths();
        for (i, pair) in widths.windows(2).enumerate() {
            params.linear(&mut rng, &format!("fc{i}"), pair[0], pair[1])?;
        }
        let depth = widths.len() - 1;
        Ok(Self {
            tracked: Mlp::new(&params.tracked(), depth)?,
            frozen: Mlp::new(&params.detached(), depth)?,
            spec,
            params,
        })
    }

    pub fn block_index(&self) -> usize {
        self.spec.block_index
    }

    pub fn input_mode(&self) -> HeadInput {
        self.spec.input
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    pub(crate) fn check_compatible(&self, backbone: &BackboneConfig) -> Result<()> {
        let s = &self.spec;
        if s.block_index >= backbone.depth
            || s.num_patches != backbone.num_patches()
            || s.embed_dim != backbone.embed_dim
            || s.num_classes != backbone.num_classes
        {
            return Err(SevitError::Config(format!(
                "head on block {} ({} patches × {} dims, {} classes) does not fit the backbone",
                s.block_index, s.num_patches, s.embed_dim, s.num_classes
            )));
        }
        Ok(())
    }

    fn prepare(&self, patch_tokens: &Tensor) -> Result<Tensor> {
        let (_, n, d) = patch_tokens.dims3()?;
        if n != self.spec.num_patches || d != self.spec.embed_dim {
            return Err(SevitError::shape(
                format!("(batch, {}, {})", self.spec.num_patches, self.spec.embed_dim),
                format!("{:?}", patch_tokens.dims()),
            ));
        }
        let xs = patch_tokens.to_dtype(self.params.dtype())?;
        Ok(match self.spec.input {
            HeadInput::Flatten => xs.flatten_from(1)?,
            HeadInput::MeanPool => xs.mean(1)?,
        })
    }

    /// Class distribution `q_i` for each sample, rows of shape `(batch, K)`.
    pub fn probs(&self, patch_tokens: &Tensor) -> Result<Vec<Vec<f64>>> {
        let logits = self.frozen.forward(&self.prepare(patch_tokens)?, None)?;
        Ok(nn::softmax(&logits)?.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    pub fn predict(&self, patch_tokens: &Tensor) -> Result<Vec<u32>> {
        let logits = self.frozen.forward(&self.prepare(patch_tokens)?, None)?;
        Ok(logits.argmax(D::Minus1)?.to_vec1::<u32>()?)
    }

    #[cfg(test)]
    pub(crate) fn poison_for_test(&self) {
        for var in self.params.vars() {
            let nan = (var.as_tensor().zeros_like().unwrap() + f64::NAN).unwrap();
            var.set(&nan).unwrap();
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &self.spec, &self.params.detached())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let loaded = checkpoint::load::<HeadSpec>(path, CHECKPOINT_KIND)?;
        let bad = |reason: String| SevitError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let dtype = parse_dtype(&loaded.config.dtype).ok_or_else(|| bad(format!("unsupported dtype {}", loaded.config.dtype)))?;
        let head = Self::from_spec(loaded.config, 0, dtype)?;
        head.params.assign(&loaded.tensors).map_err(bad)?;
        Ok(head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub block_index: usize,
    pub epoch_losses: Vec<f64>,
    /// Fraction correct on the validation set, when one was given.
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug)]
pub struct TrainedHeads {
    pub heads: Vec<IntermediateHead>,
    pub reports: Vec<HeadReport>,
}

/// Patch tokens of the selected blocks for every sample, one `(n, N, D)`
/// tensor per block, computed with the backbone frozen.
fn collect_tokens(backbone: &Backbone, data: &Dataset, blocks: &[usize], batch_size: usize) -> Result<Vec<Tensor>> {
    let mut per_block: Vec<Vec<Tensor>> = vec![Vec::new(); blocks.len()];
    for batch in data.batches(batch_size) {
        let trace = backbone.forward_with_taps(&batch?)?;
        for (slot, &b) in per_block.iter_mut().zip(blocks) {
            slot.push(trace.patch_tokens[b - 1].clone());
        }
    }
    per_block
        .into_iter()
        .map(|parts| Ok(Tensor::cat(&parts, 0)?))
        .collect()
}

/// Trains one head per requested block on the frozen backbone's patch tokens.
///
/// Heads share the optimizer settings in `config`; head `i` draws its
/// initialization, shuffling and dropout from `seed + block_index`.
pub fn train_heads(
    backbone: &Backbone,
    train: &Dataset,
    validation: Option<&Dataset>,
    blocks: &[usize],
    config: &HeadConfig,
    seed: u64,
) -> Result<TrainedHeads> {
    config.validate()?;
    if train.is_empty() {
        return Err(SevitError::EmptyDataset);
    }
    let depth = backbone.config().depth;
    let mut sorted = blocks.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != blocks.len() {
        return Err(SevitError::Config(format!("duplicate head blocks in {blocks:?}")));
    }
    if let Some(&bad) = sorted.iter().find(|&&b| b == 0 || b >= depth) {
        return Err(SevitError::Config(format!(
            "requested head on block {bad}, but heads are only allowed on blocks 1..{depth}"
        )));
    }
    let opt = config.optimizer;
    let tokens = collect_tokens(backbone, train, &sorted, opt.batch_size)?;
    let val_tokens = match validation {
        Some(v) if !v.is_empty() => Some(collect_tokens(backbone, v, &sorted, opt.batch_size)?),
        _ => None,
    };
    let mut heads = Vec::with_capacity(sorted.len());
    let mut reports = Vec::with_capacity(sorted.len());
    for (slot, &block) in sorted.iter().enumerate() {
        let head_seed = seed.wrapping_add(block as u64);
        let head = IntermediateHead::with_dtype(block, backbone.config(), config, head_seed, backbone.dtype())?;
        let inputs = head.prepare(&tokens[slot])?;
        let epoch_losses = fit_head(&head, &inputs, &train.labels, opt, head_seed)?;
        let validation_accuracy = match (&val_tokens, validation) {
            (Some(vt), Some(v)) => {
                let preds = head.predict(&vt[slot])?;
                let correct = preds.iter().zip(&v.labels).filter(|(p, l)| p == l).count();
                Some(correct as f64 / v.len() as f64)
            }
            _ => None,
        };
        log::info!(
            "head on block {block}: final loss {:.4}, validation accuracy {:?}",
            epoch_losses.last().copied().unwrap_or(f64::NAN),
            validation_accuracy
        );
        reports.push(HeadReport {
            block_index: block,
            epoch_losses,
            validation_accuracy,
        });
        heads.push(head);
    }
    Ok(TrainedHeads { heads, reports })
}

fn fit_head(head: &IntermediateHead, inputs: &Tensor, labels: &[u32], opt: OptimizerConfig, seed: u64) -> Result<Vec<f64>> {
    if opt.epochs == 0 {
        return Ok(Vec::new());
    }
    let mut optimizer = ScheduledAdam::new(head.params.vars(), opt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_4ead);
    let n = labels.len();
    let mut losses = Vec::with_capacity(opt.epochs);
    for epoch in 0..opt.epochs {
        optimizer.start_epoch(epoch);
        let order = nn::epoch_order(n, &mut rng);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(opt.batch_size).enumerate() {
            let idx_u32: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
            let index = Tensor::from_vec(idx_u32, idx.len(), &Device::Cpu)?;
            let xs = inputs.index_select(&index, 0)?;
            let targets = nn::labels_tensor(&idx.iter().map(|&i| labels[i]).collect::<Vec<_>>())?;
            let logits = head.tracked.forward(&xs, Some((head.spec.dropout, &mut rng)))?;
            let loss = candle_nn::loss::cross_entropy(&logits, &targets)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(SevitError::NonFiniteLoss { epoch, batch, value });
            }
            total += value * idx.len() as f64;
            optimizer.backward_step(&loss)?;
        }
        losses.push(total / n as f64);
    }
    Ok(losses)
}
