//! Vision transformer whose forward pass records every block's tokens.
//!
//! Tokens are laid out as `[class, patch_1, .., patch_N]`; the class token is
//! prepended at index 0 and a learnable 1D position embedding is added to all
//! `N + 1` tokens. Blocks are pre-norm (`x + attn(ln(x))`, `x + mlp(ln(x))`).
//! The classifier `h` is a layer norm followed by a linear map applied to the
//! final class token. Pixels enter in `[0, 1]`; standardization happens inside.

mod train;

pub use train::{train_backbone, BackboneTrainConfig, EpochLog};

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Module, Tensor, D};
use candle_nn::Linear;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::ImageBatch;
use crate::error::{Result, SevitError};
use crate::nn::{self, LayerNorm, ParamStore, TensorMap};

const CHECKPOINT_KIND: &str = "backbone";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub channels: usize,
    /// Hidden width of each block's MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            depth: 6,
            num_heads: 4,
            num_classes: 2,
            channels: 1,
            mlp_ratio: 4,
            pixel_mean: 0.5,
            pixel_std: 0.25,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SevitError::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depth < 2 {
            return fail(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_classes < 2 || self.channels == 0 || self.mlp_ratio == 0 {
            return fail("need at least 2 classes, 1 channel and a positive mlp_ratio".into());
        }
        if !(self.pixel_std > 0.0) {
            return fail("pixel_std must be positive".into());
        }
        Ok(())
    }

    /// Number of patch tokens `N`.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Tokens recorded during one forward pass. Entry `i` holds block `i + 1`.
#[derive(Debug, Clone)]
pub struct TokenTrace {
    /// Per block, shape `(batch, N, D)`.
    pub patch_tokens: Vec<Tensor>,
    /// Per block, shape `(batch, D)`.
    pub class_tokens: Vec<Tensor>,
    /// Final-head logits, shape `(batch, K)`.
    pub logits: Tensor,
    /// Softmax of `logits`.
    pub probs: Tensor,
}

impl TokenTrace {
    pub fn depth(&self) -> usize {
        self.patch_tokens.len()
    }

    pub fn probs_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.probs.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    num_heads: usize,
}

impl Block {
    fn new(map: &TensorMap, prefix: &str, num_heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(map, &format!("{prefix}.norm1"))?,
            qkv: nn::linear(map, &format!("{prefix}.attn.qkv"))?,
            proj: nn::linear(map, &format!("{prefix}.attn.proj"))?,
            norm2: LayerNorm::new(map, &format!("{prefix}.norm2"))?,
            fc1: nn::linear(map, &format!("{prefix}.mlp.fc1"))?,
            fc2: nn::linear(map, &format!("{prefix}.mlp.fc2"))?,
            num_heads,
        })
    }

    fn attention(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, d) = xs.dims3()?;
        let head_dim = d / self.num_heads;
        let qkv = self
            .qkv
            .forward(xs)?
            .reshape((b, t, 3, self.num_heads, head_dim))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (head_dim as f64).sqrt())?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        self.proj.forward(&out)
    }
}

impl Module for Block {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let xs = (xs + self.attention(&self.norm1.forward(xs)?)?)?;
        let hidden = self.fc1.forward(&self.norm2.forward(&xs)?)?.gelu_erf()?;
        xs + self.fc2.forward(&hidden)?
    }
}

#[derive(Debug, Clone)]
struct Layers {
    patch_embed: Linear,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl Layers {
    fn new(config: &BackboneConfig, map: &TensorMap) -> Result<Self> {
        let blocks = (0..config.depth)
            .map(|i| Block::new(map, &format!("blocks.{i}"), config.num_heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch_embed: nn::linear(map, "patch_embed")?,
            cls_token: nn::take(map, "cls_token")?.clone(),
            pos_embed: nn::take(map, "pos_embed")?.clone(),
            blocks,
            norm: LayerNorm::new(map, "norm")?,
            head: nn::linear(map, "head")?,
        })
    }
}

/// Token-tapped vision transformer. Not `Clone`: copies would alias the
/// same variables.
#[derive(Debug)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamStore,
    tracked: Layers,
    frozen: Layers,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: BackboneConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let mut params = ParamStore::new(dtype);
        params.linear(&mut rng, "patch_embed", config.patch_dim(), d)?;
        params.constant("cls_token", &[1, 1, d], 0.0)?;
        params.normal(&mut rng, "pos_embed", &[1, config.num_patches() + 1, d], 0.02)?;
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            params.layer_norm(&format!("{p}.norm1"), d)?;
            params.linear(&mut rng, &format!("{p}.attn.qkv"), d, 3 * d)?;
            params.linear(&mut rng, &format!("{p}.attn.proj"), d, d)?;
            params.layer_norm(&format!("{p}.norm2"), d)?;
            params.linear(&mut rng, &format!("{p}.mlp.fc1"), d, hidden)?;
            params.linear(&mut rng, &format!("{p}.mlp.fc2"), hidden, d)?;
        }
        params.layer_norm("norm", d)?;
        params.linear(&mut rng, "head", d, config.num_classes)?;
        Self::from_params(config, params)
    }

    fn from_params(config: BackboneConfig, params: ParamStore) -> Result<Self> {
        let tracked = Layers::new(&config, &params.tracked())?;
        let frozen = Layers::new(&config, &params.detached())?;
        Ok(Self {
            config,
            params,
            tracked,
            frozen,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    pub(crate) fn params(&self) -> &ParamStore {
        &self.params
    }

    fn check_input(&self, pixels: &Tensor) -> Result<()> {
        let c = &self.config;
        match pixels.dims() {
            [_, ch, h, w] if *ch == c.channels && *h == c.image_size && *w == c.image_size => Ok(()),
            other => Err(SevitError::shape(
                format!("(batch, {}, {}, {})", c.channels, c.image_size, c.image_size),
                format!("{other:?}"),
            )),
        }
    }

    fn run(&self, layers: &Layers, pixels: &Tensor, taps: bool) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_input(pixels)?;
        let c = &self.config;
        let (b, ch, _, _) = pixels.dims4()?;
        let side = c.image_size / c.patch_size;
        let p = c.patch_size;
        let xs = pixels
            .to_dtype(self.dtype())?
            .affine(1.0 / c.pixel_std, -c.pixel_mean / c.pixel_std)?;
        let patches = xs
            .reshape((b, ch, side, p, side, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((b, side * side, ch * p * p))?;
        let embedded = layers.patch_embed.forward(&patches)?;
        let cls = layers.cls_token.broadcast_as((b, 1, c.embed_dim))?;
        let mut tokens = Tensor::cat(&[&cls, &embedded], 1)?.broadcast_add(&layers.pos_embed)?;
        let mut outputs = Vec::with_capacity(if taps { c.depth } else { 0 });
        for block in &layers.blocks {
            tokens = block.forward(&tokens)?;
            if taps {
                outputs.push(tokens.clone());
            }
        }
        let class_token = tokens.narrow(1, 0, 1)?.squeeze(1)?;
        let logits = layers.head.forward(&layers.norm.forward(&class_token)?)?;
        Ok((logits, outputs))
    }

    /// Forward pass recording patch and class tokens after every block.
    pub fn forward_with_taps(&self, batch: &ImageBatch) -> Result<TokenTrace> {
        let (logits, blocks) = self.run(&self.frozen, batch.pixels(), true)?;
        let n = self.config.num_patches();
        let mut patch_tokens = Vec::with_capacity(blocks.len());
        let mut class_tokens = Vec::with_capacity(blocks.len());
        for tokens in blocks {
            class_tokens.push(tokens.narrow(1, 0, 1)?.squeeze(1)?);
            patch_tokens.push(tokens.narrow(1, 1, n)?);
        }
        let probs = nn::softmax(&logits)?;
        Ok(TokenTrace {
            patch_tokens,
            class_tokens,
            logits,
            probs,
        })
    }

    /// Final-head logits with gradients flowing only into `pixels`.
    pub fn logits(&self, pixels: &Tensor) -> Result<Tensor> {
        Ok(self.run(&self.frozen, pixels, false)?.0)
    }

    pub(crate) fn trainable_logits(&self, pixels: &Tensor) -> Result<Tensor> {
        Ok(self.run(&self.tracked, pixels, false)?.0)
    }

    pub fn predict(&self, batch: &ImageBatch) -> Result<Vec<u32>> {
        Ok(self.logits(batch.pixels())?.argmax(D::Minus1)?.to_vec1::<u32>()?)
    }

    /// Replaces all weights with externally produced tensors, e.g. converted
    /// pretrained weights. Names and shapes must match this model exactly.
    pub fn import_weights(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        self.params
            .assign(tensors)
            .map_err(|reason| SevitError::Config(format!("weight import: {reason}")))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &self.stored_config(), &self.params.detached())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let loaded = checkpoint::load::<StoredConfig>(path, CHECKPOINT_KIND)?;
        let StoredConfig { model, dtype } = loaded.config;
        let dtype = parse_dtype(&dtype).ok_or_else(|| SevitError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("unsupported dtype {dtype}"),
        })?;
        let backbone = Self::with_dtype(model, 0, dtype)?;
        backbone
            .params
            .assign(&loaded.tensors)
            .map_err(|reason| SevitError::Checkpoint {
                path: path.to_path_buf(),
                reason,
            })?;
        Ok(backbone)
    }

    /// Loads a checkpoint and checks that it was produced for `expected`.
    pub fn load_checkpoint_expecting(path: &Path, expected: &BackboneConfig) -> Result<Self> {
        let backbone = Self::load_checkpoint(path)?;
        if backbone.config() != expected {
            return Err(SevitError::Checkpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "configuration mismatch: checkpoint has {:?}, expected {:?}",
                    backbone.config(),
                    expected
                ),
            });
        }
        Ok(backbone)
    }

    fn stored_config(&self) -> StoredConfig {
        StoredConfig {
            model: self.config.clone(),
            dtype: format!("{:?}", self.dtype()).to_lowercase(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredConfig {
    model: BackboneConfig,
    dtype: String,
}

pub(crate) fn parse_dtype(name: &str) -> Option<DType> {
    match name {
        "f32" => Some(DType::F32),
        "f64" => Some(DType::F64),
        _ => None,
    }
}
