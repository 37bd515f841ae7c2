use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{gen_benchmark, BenchExample, BenchSplits, DataConfig, Task};
use crate::alignment::{RejectionConfig, SpectralScorer};
use crate::audio::{GeneratorConfig, GeneratorMode, Lexicon, MelConfig, MelFrontEnd, MockGenerator};
use crate::config::TrainConfig;
use crate::encoder::{evaluate_model, train_end_to_end, EpochRecord, Example, IthModel, ModelConfig};
use crate::error::{Error, Result};
use crate::imagination::{AudioEncoderConfig, Imagination, Imaginer, SpanStatus, UnresolvedSpanPolicy};
use crate::rng::stream;
use crate::spandet::{evaluate_detector, train_detector, DetectorConfig, DetectorModel, LabeledSeq};
use crate::text::Vocab;

/// Every knob of a benchmark run, as read from a TOML file. Missing keys take
/// the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub task: Task,
    pub seed: u64,
    /// Rejection threshold. Unset means 0.6 for pitch and 0.0 for recognition.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub max_trials: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub t_audio: usize,
    pub patch_frames: usize,
    pub top_db: f64,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub generator: GeneratorConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub unk_prob: f64,
    pub freq_shift: usize,
    pub detector_epochs: usize,
    pub detector_lr: f64,
    pub detector_unk_prob: f64,
    pub n_concepts: usize,
    pub n_unseen_concepts: usize,
    pub two_token_prob: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_unseen: usize,
    pub imagination: bool,
    pub rejection: bool,
    pub fusion_gate: bool,
    pub dki: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            task: Task::Pitch,
            seed: 0,
            tau: None,
            max_trials: 2,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            t_audio: 8,
            patch_frames: 4,
            top_db: 80.0,
            n_mels: 32,
            sample_rate: 16_000,
            generator: GeneratorConfig::default(),
            lr: 1e-3,
            epochs: 12,
            batch_size: 32,
            weight_decay: 0.01,
            unk_prob: 0.5,
            freq_shift: 2,
            detector_epochs: 6,
            detector_lr: 2e-3,
            detector_unk_prob: 0.2,
            n_concepts: data.n_concepts,
            n_unseen_concepts: data.n_unseen_concepts,
            two_token_prob: data.two_token_prob,
            n_train: data.n_train,
            n_dev: data.n_dev,
            n_test: data.n_test,
            n_unseen: data.n_unseen,
            imagination: true,
            rejection: true,
            fusion_gate: true,
            dki: true,
        }
    }
}

impl BenchConfig {
    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or(match self.task {
            Task::Pitch => 0.6,
            Task::Recognition => 0.0,
        })
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.rejection_config().validate()?;
        self.generator_config().validate()?;
        self.mel_config().validate()?;
        self.train_config().validate()?;
        self.detector_train_config().validate()?;
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            task: self.task,
            n_concepts: self.n_concepts,
            n_unseen_concepts: self.n_unseen_concepts,
            two_token_prob: self.two_token_prob,
            n_train: self.n_train,
            n_dev: self.n_dev,
            n_test: self.n_test,
            n_unseen: self.n_unseen,
        }
    }

    pub fn mel_config(&self) -> MelConfig {
        MelConfig {
            sample_rate: self.sample_rate,
            n_mels: self.n_mels,
            mel_high_hz: (self.sample_rate / 2) as f64,
            ..MelConfig::default()
        }
    }

    /// Generator settings with the run's sample rate; sentence-level when DKI
    /// is off.
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            sample_rate: self.sample_rate,
            mode: if self.dki {
                self.generator.mode
            } else {
                GeneratorMode::SentenceLevel
            },
            ..self.generator.clone()
        }
    }

    pub fn rejection_config(&self) -> RejectionConfig {
        if self.rejection {
            RejectionConfig {
                tau: self.tau(),
                max_trials: self.max_trials,
            }
        } else {
            RejectionConfig::disabled()
        }
    }

    pub fn model_config(&self, vocab_size: usize, n_classes: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            n_classes,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_mels: self.n_mels,
            fusion_gate: self.fusion_gate,
            audio: AudioEncoderConfig {
                t_audio: self.t_audio,
                patch_frames: self.patch_frames,
                top_db: self.top_db,
                ..AudioEncoderConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            seed: self.seed,
            weight_decay: self.weight_decay,
            unk_prob: self.unk_prob,
            freq_shift: self.freq_shift,
            imagination: self.imagination,
            rejection: self.rejection,
            fusion_gate: self.fusion_gate,
            dki: self.dki,
            ..TrainConfig::default()
        }
    }

    pub fn detector_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.detector_epochs,
            batch_size: self.batch_size,
            learning_rate: self.detector_lr,
            seed: self.seed ^ 0xd7,
            unk_prob: self.detector_unk_prob,
            ..TrainConfig::default()
        }
    }
}

/// Data, vocabulary and the trained (then frozen) detector for one seed.
pub struct Prepared {
    pub cfg: BenchConfig,
    pub splits: BenchSplits,
    pub lexicon: Lexicon,
    pub vocab: Vocab,
    pub detector: DetectorModel,
    pub detector_curve: Vec<f64>,
    pub detector_dev_f1: f64,
}

pub fn labeled(examples: &[BenchExample], vocab: &Vocab) -> Result<Vec<LabeledSeq>> {
    examples.iter().map(|e| e.labeled(vocab)).collect()
}

/// Generates the benchmark and trains the detector.
pub fn prepare(cfg: &BenchConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (splits, lexicon) = gen_benchmark(&cfg.data_config(), &cfg.mel_config(), &mut stream(cfg.seed, &[0xda7a]))?;
    prepare_from(cfg, splits, lexicon)
}

/// As [`prepare`] over existing data.
pub fn prepare_from(cfg: &BenchConfig, splits: BenchSplits, lexicon: Lexicon) -> Result<Prepared> {
    let vocab = splits.vocab();
    let train = labeled(&splits.train, &vocab)?;
    let (detector, detector_curve) = train_detector(
        &train,
        vocab.len(),
        DetectorConfig::default(),
        &cfg.detector_train_config(),
    )?;
    let detector_dev_f1 = evaluate_detector(&detector, &labeled(&splits.dev, &vocab)?)?;
    Ok(Prepared {
        cfg: cfg.clone(),
        splits,
        lexicon,
        vocab,
        detector,
        detector_curve,
        detector_dev_f1,
    })
}

/// Frozen components built from a config over a lexicon.
pub struct Frozen<'a> {
    pub generator: MockGenerator<'a>,
    pub scorer: SpectralScorer<'a>,
    pub front: MelFrontEnd,
}

impl<'a> Frozen<'a> {
    pub fn new(cfg: &BenchConfig, lexicon: &'a Lexicon) -> Result<Self> {
        let gen_cfg = cfg.generator_config();
        Ok(Self {
            generator: MockGenerator::new(lexicon, gen_cfg.clone())?,
            scorer: SpectralScorer::new(lexicon, cfg.mel_config(), gen_cfg.clip_duration_s)?,
            front: MelFrontEnd::new(cfg.mel_config())?,
        })
    }

    pub fn imaginer<'b>(&'b self, detector: &'b DetectorModel, rejection: RejectionConfig) -> Result<Imaginer<'b>> {
        Ok(
            Imaginer::new(detector, &self.generator, &self.scorer, &self.front, rejection)?
                .with_policy(UnresolvedSpanPolicy::Ignore),
        )
    }
}

/// Seed of the imagination streams for example `index` of split `split`.
pub fn example_seed(seed: u64, split: &str, index: usize) -> u64 {
    let tag = split
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    stream(seed, &[0x1a9, tag, index as u64]).random()
}

/// Runs the frozen imagination stage over a split.
pub fn imagine_split(
    cfg: &BenchConfig,
    prep_vocab: &Vocab,
    imaginer: Option<&Imaginer>,
    examples: &[BenchExample],
    split: &str,
) -> Result<Vec<Example>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let tokens = prep_vocab.encode(&e.tokens);
            let imagination = match imaginer {
                None => Imagination::default(),
                Some(im) => {
                    let seed = example_seed(cfg.seed, split, i);
                    if cfg.dki {
                        im.imagine(&e.tokens, &tokens, seed)?
                    } else {
                        im.imagine_sentence_level(&e.tokens, seed)?
                    }
                }
            };
            Ok(Example {
                tokens,
                label: e.label,
                imagination,
            })
        })
        .collect()
}

/// Span retention over a set of imagined examples: accepted / detected.
pub fn retention(examples: &[Example]) -> Option<f64> {
    let (mut acc, mut all) = (0usize, 0usize);
    for e in examples {
        for s in &e.imagination.spans {
            all += 1;
            acc += (s.status == SpanStatus::Accepted) as usize;
        }
    }
    (all > 0).then(|| acc as f64 / all as f64)
}

/// Fraction of detected spans that were drawn `max_trials` times and still
/// rejected. Spans the generator could not resolve count in neither this nor
/// [`retention`].
pub fn rejected_after_trials(examples: &[Example]) -> Option<f64> {
    let (mut rej, mut all) = (0usize, 0usize);
    for e in examples {
        for s in &e.imagination.spans {
            all += 1;
            rej += (s.status == SpanStatus::Ignored && !s.trial_scores.is_empty()) as usize;
        }
    }
    (all > 0).then(|| rej as f64 / all as f64)
}

/// Everything a single training run produces.
pub struct RunOutput {
    pub model: IthModel,
    pub curve: Vec<EpochRecord>,
    /// `(split, accuracy)` for dev, test and (if present) unseen.
    pub accuracy: Vec<(String, f64)>,
    pub detector_dev_f1: f64,
    pub frozen_digests_before: Vec<String>,
    pub frozen_digests_after: Vec<String>,
    /// Imagined evaluation splits, reusable for sweeps.
    pub eval_sets: Vec<(String, Vec<Example>)>,
}

impl RunOutput {
    pub fn accuracy_on(&self, split: &str) -> Option<f64> {
        self.accuracy.iter().find(|(s, _)| s == split).map(|(_, a)| *a)
    }
}

/// Imagines every split, trains the language model end to end and evaluates.
pub fn train_and_evaluate(prep: &Prepared, cfg: &BenchConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.task != prep.cfg.task {
        return Err(Error::Config("task differs from the prepared data".into()));
    }
    let frozen = Frozen::new(cfg, &prep.lexicon)?;
    let imaginer = frozen.imaginer(&prep.detector, cfg.rejection_config())?;
    let im = cfg.imagination.then_some(&imaginer);
    let digests = |d: &DetectorModel| vec![d.digest(), frozen.generator.digest(), frozen.scorer.digest()];
    let before = digests(&prep.detector);

    let train = imagine_split(cfg, &prep.vocab, im, &prep.splits.train, "train")?;
    let mut eval_sets = Vec::new();
    for (name, split) in prep.splits.named().into_iter().skip(1) {
        if !split.is_empty() {
            eval_sets.push((name.to_string(), imagine_split(cfg, &prep.vocab, im, split, name)?));
        }
    }
    let n_classes = cfg.task.n_classes(&prep.lexicon);
    let mut model = IthModel::new(cfg.model_config(prep.vocab.len(), n_classes), cfg.seed)?;
    let dev = eval_sets.iter().find(|(n, _)| n == "dev").map(|(_, d)| d.as_slice());
    let curve = train_end_to_end(&mut model, &train, dev, &cfg.train_config())?;
    let mut accuracy = Vec::new();
    for (name, set) in &eval_sets {
        accuracy.push((name.clone(), evaluate_model(&model, set)?.accuracy));
    }
    Ok(RunOutput {
        model,
        curve,
        accuracy,
        detector_dev_f1: prep.detector_dev_f1,
        frozen_digests_before: before,
        frozen_digests_after: digests(&prep.detector),
        eval_sets,
    })
}

/// Convenience: prepare and train in one go.
pub fn run(cfg: &BenchConfig) -> Result<RunOutput> {
    let prep = prepare(cfg)?;
    train_and_evaluate(&prep, cfg)
}
