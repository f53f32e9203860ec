use candle_core::{Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::data::{AugmentConfig, Dataset};
use crate::error::{Result, SevitError};
use crate::nn::{self, OptimizerConfig, ScheduledAdam};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneTrainConfig {
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// Cross-entropy training of every backbone parameter (all blocks and the head).
pub fn train_backbone(model: &mut Backbone, data: &Dataset, config: &BackboneTrainConfig) -> Result<Vec<EpochLog>> {
    let opt_cfg = config.optimizer;
    opt_cfg.validate()?;
    if data.is_empty() {
        return Err(SevitError::EmptyDataset);
    }
    let mc = model.config();
    if data.channels != mc.channels || data.image_size != mc.image_size || data.num_classes > mc.num_classes {
        return Err(SevitError::Config(format!(
            "dataset ({} channels, {} px, {} classes) does not fit backbone ({} channels, {} px, {} classes)",
            data.channels, data.image_size, data.num_classes, mc.channels, mc.image_size, mc.num_classes
        )));
    }
    if opt_cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let mut optimizer = ScheduledAdam::new(model.params().vars(), opt_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opt_cfg.seed);
    let (c, s) = (data.channels, data.image_size);
    let mut log = Vec::with_capacity(opt_cfg.epochs);
    for epoch in 0..opt_cfg.epochs {
        let learning_rate = optimizer.start_epoch(epoch);
        let order = nn::epoch_order(data.len(), &mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch_idx, indices) in order.chunks(opt_cfg.batch_size).enumerate() {
            let mut pixels = Vec::with_capacity(indices.len() * data.sample_len());
            for &i in indices {
                let start = pixels.len();
                pixels.extend_from_slice(data.sample(i));
                config.augment.apply(&mut pixels[start..], c, s, &mut rng);
            }
            let labels: Vec<u32> = indices.iter().map(|&i| data.labels[i]).collect();
            let input = Tensor::from_vec(pixels, (indices.len(), c, s, s), &candle_core::Device::Cpu)?;
            let logits = model.trainable_logits(&input)?;
            let targets = nn::labels_tensor(&labels)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &targets)?;
            let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(SevitError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    value,
                });
            }
            let preds = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            loss_sum += value * indices.len() as f64;
            optimizer.backward_step(&loss)?;
        }
        let entry = EpochLog {
            epoch,
            learning_rate,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        log::info!(
            "backbone epoch {epoch}: lr {learning_rate:.2e} loss {:.4} acc {:.4}",
            entry.loss,
            entry.accuracy
        );
        log.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_leave_the_model_untouched() {
        let data = generate_synthetic(
            &SyntheticConfig {
                image_size: 16,
                samples_per_class: 4,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let mut model = Backbone::new(tiny(), 0).unwrap();
        let batch = data.batch(&[0, 1, 2]).unwrap();
        let before = model.logits(batch.pixels()).unwrap().to_vec2::<f32>().unwrap();
        let cfg = BackboneTrainConfig {
            optimizer: OptimizerConfig { epochs: 0, ..Default::default() },
            ..Default::default()
        };
        let log = train_backbone(&mut model, &data, &cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(before, model.logits(batch.pixels()).unwrap().to_vec2::<f32>().unwrap());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let data = Dataset::new(1, 16, 2, vec![], vec![], vec![]).unwrap();
        let mut model = Backbone::new(tiny(), 0).unwrap();
        assert!(matches!(
            train_backbone(&mut model, &data, &BackboneTrainConfig::default()),
            Err(SevitError::EmptyDataset)
        ));
    }

    #[test]
    fn exploding_learning_rate_aborts_with_diagnostic() {
        let data = generate_synthetic(
            &SyntheticConfig {
                image_size: 16,
                samples_per_class: 8,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let mut model = Backbone::new(tiny(), 0).unwrap();
        let cfg = BackboneTrainConfig {
            optimizer: OptimizerConfig {
                learning_rate: 1e30,
                epochs: 5,
                batch_size: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        match train_backbone(&mut model, &data, &cfg) {
            Err(SevitError::NonFiniteLoss { .. }) => {}
            other => panic!("expected non-finite loss, got {other:?}"),
        }
    }
}
