use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::AdamWConfig;

/// Optimization settings plus the ablation switches of the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(alias = "lr")]
    pub learning_rate: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Probability of replacing a non-special input token by `[UNK]` during
    /// training.
    pub unk_prob: f64,
    /// Training-time augmentation: every clip of an example is shifted by the
    /// same random number of mel bins in `[-freq_shift, freq_shift]`.
    pub freq_shift: usize,
    /// Imagination and fusion at all; `false` trains a text-only model.
    pub imagination: bool,
    pub rejection: bool,
    pub fusion_gate: bool,
    pub dki: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: adam.lr,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
            unk_prob: 0.0,
            freq_shift: 0,
            imagination: true,
            rejection: true,
            fusion_gate: true,
            dki: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("learning rate and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.unk_prob) {
            return Err(Error::Config(format!("unk_prob {} not in [0, 1)", self.unk_prob)));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}
