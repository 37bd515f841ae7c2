use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{synth_mixture, synth_tone, Lexicon, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    /// The concept's clean tone.
    Oracle,
    /// Wrong concept with probability `q`, then additive Gaussian noise.
    Noisy,
    /// One mixed clip for every concept mentioned.
    SentenceLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub mode: GeneratorMode,
    #[serde(rename = "q")]
    pub wrong_concept_prob: f64,
    #[serde(rename = "noise_std")]
    pub additive_noise_std: f64,
    pub clip_duration_s: f64,
    pub sample_rate: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            mode: GeneratorMode::Oracle,
            wrong_concept_prob: 0.0,
            additive_noise_std: 0.0,
            clip_duration_s: 1.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.wrong_concept_prob) {
            return Err(Error::Config(format!("q = {} not in [0, 1]", self.wrong_concept_prob)));
        }
        if !(self.clip_duration_s > 0.0) || !(self.additive_noise_std >= 0.0) || self.sample_rate == 0 {
            return Err(Error::Config(format!("invalid generator config {self:?}")));
        }
        Ok(())
    }
}

/// Anything that turns span text into audio.
pub trait AudioGenerator: Send + Sync {
    fn generate(&self, words: &[String], rng: &mut SeededRng) -> Result<Waveform>;
}

/// Lexicon-backed stand-in for a text-to-audio model.
pub struct MockGenerator<'a> {
    lexicon: &'a Lexicon,
    cfg: GeneratorConfig,
}

impl<'a> MockGenerator<'a> {
    pub fn new(lexicon: &'a Lexicon, cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { lexicon, cfg })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn with_mode(&self, mode: GeneratorMode) -> Self {
        Self {
            lexicon: self.lexicon,
            cfg: GeneratorConfig {
                mode,
                ..self.cfg.clone()
            },
        }
    }

    /// Digest of everything that determines the generator's behavior.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        self.lexicon.write_jsonl(&mut buf).expect("in-memory write");
        h.update(&buf);
        h.update(serde_json::to_vec(&self.cfg).expect("serializable"));
        hex::encode(h.finalize())
    }
}

impl AudioGenerator for MockGenerator<'_> {
    fn generate(&self, words: &[String], rng: &mut SeededRng) -> Result<Waveform> {
        let concepts = self.lexicon.resolve(words);
        let Some(&first) = concepts.first() else {
            return Err(Error::Generation(format!("no known sound source in {words:?}")));
        };
        let (dur, sr) = (self.cfg.clip_duration_s, self.cfg.sample_rate);
        match self.cfg.mode {
            GeneratorMode::Oracle => synth_tone(first, self.lexicon, dur, sr),
            GeneratorMode::SentenceLevel => synth_mixture(&concepts, self.lexicon, dur, sr),
            GeneratorMode::Noisy => {
                let n = self.lexicon.len();
                let mut concept = first;
                if n > 1 && rng.random_bool(self.cfg.wrong_concept_prob) {
                    let k = rng.random_range(0..n - 1);
                    concept = if k >= first { k + 1 } else { k };
                }
                let mut w = synth_tone(concept, self.lexicon, dur, sr)?;
                if self.cfg.additive_noise_std > 0.0 {
                    let normal = Normal::new(0.0, self.cfg.additive_noise_std).expect("validated std");
                    for s in &mut w.samples {
                        *s = (*s + normal.sample(rng)).clamp(-1.0, 1.0);
                    }
                }
                Ok(w)
            }
        }
    }
}
