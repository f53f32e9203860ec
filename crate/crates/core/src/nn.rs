//! Small neural-network building blocks on top of candle.
//!
//! Parameters live in a [`ParamStore`] of named [`Var`]s initialized from a
//! seeded generator, so that two models built with the same seed are
//! bit-identical. Layers are assembled from a name→tensor map, which is either
//! the variables themselves (training) or detached views of them (frozen
//! inference, where no gradient bookkeeping is wanted for the weights).

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{AdamW, Linear, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SevitError};

pub type TensorMap = BTreeMap<String, Tensor>;

/// Ordered collection of trainable parameters.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<()> {
        if self.vars.contains_key(name) {
            return Err(SevitError::Config(format!("duplicate parameter {name}")));
        }
        let tensor = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&tensor)?);
        Ok(())
    }

    pub fn uniform(&mut self, rng: &mut ChaCha8Rng, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let n = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound)
            .map_err(|e| SevitError::Config(format!("{name}: {e}")))?;
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn normal(&mut self, rng: &mut ChaCha8Rng, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| SevitError::Config(format!("{name}: {e}")))?;
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    /// Torch-style default linear initialization, U(±1/√fan_in) for weight and bias.
    pub fn linear(&mut self, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform(rng, &format!("{prefix}.weight"), &[fan_out, fan_in], bound)?;
        self.uniform(rng, &format!("{prefix}.bias"), &[fan_out], bound)
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.constant(&format!("{prefix}.weight"), &[dim], 1.0)?;
        self.constant(&format!("{prefix}.bias"), &[dim], 0.0)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// The variables themselves; layers built from these are trainable.
    pub fn tracked(&self) -> TensorMap {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Detached views sharing storage with the variables. Updates made by an
    /// optimizer remain visible through them.
    pub fn detached(&self) -> TensorMap {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites every parameter from `values`; names and shapes must match exactly.
    pub fn assign(&self, values: &HashMap<String, Tensor>) -> std::result::Result<(), String> {
        if values.len() != self.vars.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                self.vars.len(),
                values.len()
            ));
        }
        for (name, var) in &self.vars {
            let value = values.get(name).ok_or_else(|| format!("missing tensor {name}"))?;
            if value.dims() != var.dims() {
                return Err(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    var.dims(),
                    value.dims()
                ));
            }
            let value = value.to_dtype(self.dtype).map_err(|e| e.to_string())?;
            var.set(&value).map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

pub(crate) fn take<'a>(map: &'a TensorMap, name: &str) -> Result<&'a Tensor> {
    map.get(name)
        .ok_or_else(|| SevitError::Config(format!("missing parameter {name}")))
}

pub(crate) fn linear(map: &TensorMap, prefix: &str) -> Result<Linear> {
    let weight = take(map, &format!("{prefix}.weight"))?.clone();
    let bias = take(map, &format!("{prefix}.bias"))?.clone();
    Ok(Linear::new(weight, Some(bias)))
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub(crate) const EPS: f32 = 1e-6;

    pub(crate) fn new(map: &TensorMap, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: take(map, &format!("{prefix}.weight"))?.clone(),
            bias: take(map, &format!("{prefix}.bias"))?.clone(),
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        candle_nn::ops::layer_norm_slow(xs, &self.weight, &self.bias, Self::EPS)
    }
}

/// Inverted dropout with a mask drawn from a caller-owned generator.
pub(crate) fn dropout(xs: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(xs.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f32> = (0..xs.elem_count())
        .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, xs.shape(), xs.device())?.to_dtype(xs.dtype())?;
    Ok(xs.mul(&mask)?)
}

/// Row-wise softmax that stays differentiable.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus1)?)
}

/// Per-sample cross-entropy, shape (batch,).
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = log_probs.gather(&labels.unsqueeze(1)?, 1)?.squeeze(1)?;
    Ok(picked.neg()?)
}

pub fn labels_tensor(labels: &[u32]) -> Result<Tensor> {
    Ok(Tensor::from_slice(labels, labels.len(), &Device::Cpu)?)
}

/// Adam with a step decay of the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Multiplicative factor applied every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay_factor: 0.1,
            decay_every: 10,
            epochs: 10,
            batch_size: 50,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate in effect during (zero-based) `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let steps = if self.decay_every == 0 { 0 } else { epoch / self.decay_every };
        self.learning_rate * self.decay_factor.powi(steps as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SevitError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(SevitError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

pub(crate) struct ScheduledAdam {
    inner: AdamW,
    config: OptimizerConfig,
}

impl ScheduledAdam {
    pub(crate) fn new(vars: Vec<Var>, config: OptimizerConfig) -> Result<Self> {
        let params = ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        };
        Ok(Self {
            inner: AdamW::new(vars, params)?,
            config,
        })
    }

    pub(crate) fn start_epoch(&mut self, epoch: usize) -> f64 {
        let lr = self.config.lr_at_epoch(epoch);
        self.inner.set_learning_rate(lr);
        lr
    }

    pub(crate) fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        Ok(self.inner.backward_step(loss)?)
    }
}

/// Shuffled index order for one epoch.
pub(crate) fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn lr_decays_by_a_tenth_every_ten_epochs() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.lr_at_epoch(0), 1e-3);
        assert_eq!(cfg.lr_at_epoch(9), 1e-3);
        assert!((cfg.lr_at_epoch(10) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr_at_epoch(25) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn seeded_stores_are_identical() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut store = ParamStore::new(DType::F32);
            store.linear(&mut rng, "fc", 3, 2).unwrap();
            store.tracked()["fc.weight"].flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn assign_rejects_wrong_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F32);
        store.linear(&mut rng, "fc", 3, 2).unwrap();
        let mut values = HashMap::new();
        values.insert("fc.weight".to_string(), Tensor::zeros((3, 3), DType::F32, &Device::Cpu).unwrap());
        values.insert("fc.bias".to_string(), Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap());
        assert!(store.assign(&values).unwrap_err().contains("fc.weight"));
    }

    #[test]
    fn per_sample_cross_entropy_matches_hand_computation() {
        let logits = Tensor::new(&[[0.0f64, 0.0], [2.0, 0.0]], &Device::Cpu).unwrap();
        let labels = labels_tensor(&[1, 0]).unwrap();
        let ce = cross_entropy_per_sample(&logits, &labels).unwrap().to_vec1::<f64>().unwrap();
        assert!((ce[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((ce[1] - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
    }
}
