use std::io::Write;

use pcgpt_tensor::{lr_multiplier, AdamW, AdamWConfig, Graph, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_batch, DatasetError, Trajectory};
use crate::model::{ModelError, Pcgpt};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            steps_per_epoch: 500,
            batch_size: 64,
            lr_base: 1e-4,
            weight_decay: 1e-4,
            warmup_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if self.warmup_steps == 0 {
            return Err("warmup_steps must be at least 1".into());
        }
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return Err("lr_base must be positive".into());
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("weight_decay must be nonnegative and betas in [0, 1)".into());
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr_base,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] pcgpt_tensor::TensorError),
}

/// Runs `config.total_steps()` AdamW steps on windows sampled from `data`,
/// calling `on_step` after each one.
pub fn train<T: Scalar>(
    model: &mut Pcgpt<T>,
    data: &[Trajectory],
    config: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>, TrainError> {
    config.validate().map_err(TrainError::Config)?;
    let k = model.config.context_len;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);
    let mut opt = AdamW::new(config.optimizer(), &model.params);
    let mut log = Vec::with_capacity(config.total_steps());
    for step in 0..config.total_steps() {
        let windows = sample_batch(data, config.batch_size, k, &mut batch_rng)?;
        let mut g = Graph::new();
        let loss = model.window_loss(&mut g, &windows, true, &mut dropout_rng)?;
        g.backward(loss)?;
        model.params.zero_grads();
        g.accumulate_param_grads(&mut model.params);
        let mult = lr_multiplier(step as u64, config.warmup_steps);
        opt.step(&mut model.params, mult)?;
        let record = LossRecord {
            step,
            loss: g.value(loss)[0].to_f64().expect("finite loss"),
            lr: config.lr_base * mult,
        };
        on_step(&record);
        log.push(record);
    }
    Ok(log)
}

/// Writes `step,loss,lr` rows.
pub fn write_loss_log<W: Write>(out: W, log: &[LossRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_log_has_fixed_header() {
        let mut buf = Vec::new();
        write_loss_log(&mut buf, &[LossRecord { step: 0, loss: 1.5, lr: 1e-7 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,lr\n0,1.5,1e-7\n");
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = TrainConfig {
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
