//! Span detection, audio generation with rejection, and the trainable audio
//! tower that turns accepted clips into `T_a` tokens of model width.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{sample_with_rejection, RejectionConfig, RejectionOutcome, SpanScorer};
use crate::audio::{AudioGenerator, MelFrontEnd, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerStack};
use crate::rng::stream;
use crate::spandet::{DetectorModel, Span};
use crate::tensor::{Graph, ParamStore, ParamTag, Tensor, Var};
use crate::text::TokenSeq;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioEncoderConfig {
    /// Consecutive mel frames flattened into one patch.
    pub patch_frames: usize,
    pub d_audio: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    /// Audio tokens per clip after pooling.
    pub t_audio: usize,
    /// Log-mel values more than this many decibels below the clip's peak
    /// are raised to that floor before standardization.
    pub top_db: f64,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        Self {
            patch_frames: 4,
            d_audio: 64,
            n_layers: 1,
            n_heads: 4,
            ffn_hidden: 128,
            t_audio: 8,
            top_db: 80.0,
        }
    }
}

impl AudioEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_frames == 0
            || self.t_audio == 0
            || self.n_heads == 0
            || !self.d_audio.is_multiple_of(self.n_heads)
            || !(self.top_db > 0.0)
        {
            return Err(Error::Config(format!("invalid audio encoder config {self:?}")));
        }
        Ok(())
    }
}

/// Frame-patch transformer over standardized log-mel input, pooled to
/// `t_audio` tokens of width `d_audio`.
#[derive(Clone, Debug)]
pub struct ToyAudioEncoder {
    pub cfg: AudioEncoderConfig,
    pub n_mels: usize,
    pub patch: Linear,
    pub stack: TransformerStack,
}

impl ToyAudioEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: AudioEncoderConfig, n_mels: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let tag = ParamTag::AudioEncoder;
        let patch = Linear::new(store, "audio.patch", tag, cfg.patch_frames * n_mels, cfg.d_audio, rng);
        let stack = TransformerStack::new(
            store,
            "audio.enc",
            tag,
            cfg.d_audio,
            cfg.n_heads,
            cfg.ffn_hidden,
            cfg.n_layers,
            rng,
        );
        Ok(Self {
            cfg,
            n_mels,
            patch,
            stack,
        })
    }

    /// Minimum number of mel frames a clip needs.
    pub fn min_frames(&self) -> usize {
        self.cfg.patch_frames * self.cfg.t_audio
    }

    /// Per-clip standardized patches, `P × (patch_frames · n_mels)`. Trailing
    /// frames that do not fill a patch are dropped.
    pub fn patches(&self, mel: &MelSpectrogram) -> Result<Tensor> {
        if mel.n_mels() != self.n_mels {
            return Err(Error::Shape {
                op: "audio patches",
                lhs: vec![mel.frames(), mel.n_mels()],
                rhs: vec![self.n_mels],
            });
        }
        if mel.frames() < self.min_frames() {
            return Err(Error::Length {
                needed: self.min_frames(),
                got: mel.frames(),
            });
        }
        let p = mel.frames() / self.cfg.patch_frames;
        let width = self.cfg.patch_frames * self.n_mels;
        let data = &mel.values.data()[..p * width];
        let peak = data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let floor = peak - self.cfg.top_db * std::f64::consts::LN_10 / 10.0;
        let data: Vec<f64> = data.iter().map(|&v| v.max(floor)).collect();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        Tensor::matrix(p, width, data.iter().map(|v| (v - mean) * inv).collect())
    }

    /// Encodes clips packed row-wise; output has `t_audio` rows per clip, in
    /// input order.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mels: &[&MelSpectrogram]) -> Result<Var> {
        if mels.is_empty() {
            return Err(Error::Contract("no clips to encode".into()));
        }
        let mut parts = Vec::with_capacity(mels.len());
        let mut lengths = Vec::with_capacity(mels.len());
        for m in mels {
            let p = self.patches(m)?;
            lengths.push(p.rows());
            parts.push(p);
        }
        let cols = parts[0].cols();
        let rows: usize = lengths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend(p.into_data());
        }
        let x = g.leaf(Tensor::matrix(rows, cols, data)?);
        let h = self.patch.forward(g, store, x)?;
        let h = self.stack.forward(g, store, h, &lengths)?;
        g.pool_rows(h, &pool_groups(&lengths, self.cfg.t_audio))
    }
}

/// Uniform temporal pooling groups: each clip's rows split into `t` nearly
/// equal contiguous chunks.
pub fn pool_groups(lengths: &[usize], t: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(lengths.len() * t);
    let mut base = 0;
    for &p in lengths {
        for i in 0..t {
            let s = i * p / t;
            let e = (i + 1) * p / t;
            out.push((base + s, e - s));
        }
        base += p;
    }
    out
}

/// Two affine layers with GELU between, `d_audio → d_model`.
#[derive(Clone, Debug)]
pub struct AudioProjector {
    pub l1: Linear,
    pub l2: Linear,
}

impl AudioProjector {
    pub fn new<R: Rng>(store: &mut ParamStore, d_audio: usize, d_model: usize, rng: &mut R) -> Self {
        let tag = ParamTag::AudioProjector;
        Self {
            l1: Linear::new(store, "proj.l1", tag, d_audio, d_model, rng),
            l2: Linear::new(store, "proj.l2", tag, d_model, d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.l2.forward(g, store, h)
    }
}

/// Mel front end, encoder and projector for one waveform: `T_a × d_model`.
pub fn encode_audio(
    w: &Waveform,
    front: &MelFrontEnd,
    enc: &ToyAudioEncoder,
    proj: &AudioProjector,
    store: &ParamStore,
) -> Result<Tensor> {
    let mel = front.compute(w)?;
    let mut g = Graph::new();
    let h = enc.forward(&mut g, store, &[&mel])?;
    let z = proj.forward(&mut g, store, h)?;
    Ok(g.value(z).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanStatus {
    Accepted,
    Ignored,
}

/// An accepted clip in the form the trainable tower consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct ImaginedClip {
    /// Waveform fingerprint; equal keys mean identical audio.
    pub key: u64,
    pub mel: MelSpectrogram,
    pub waveform: Option<Waveform>,
}

/// Frozen-stage result for one span.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanImagination {
    pub span: Span,
    pub words: Vec<String>,
    pub status: SpanStatus,
    pub trial_scores: Vec<f64>,
    pub clip: Option<Arc<ImaginedClip>>,
}

/// Output of the frozen part of imagination (detection, generation,
/// rejection, mel). Audio tokens are computed from it by the trainable tower.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Imagination {
    pub spans: Vec<SpanImagination>,
}

impl Imagination {
    pub fn accepted(&self) -> impl Iterator<Item = (&Span, &Arc<ImaginedClip>)> {
        self.spans.iter().filter_map(|s| s.clip.as_ref().map(|c| (&s.span, c)))
    }

    pub fn generator_calls(&self) -> usize {
        self.spans.iter().map(|s| s.trial_scores.len()).sum()
    }

    /// Copy with every accepted clip's mel rolled `bins` filters up (down
    /// when negative). Vacated filters take the clip's minimum value.
    pub fn shift_mels(&self, bins: isize) -> Imagination {
        if bins == 0 {
            return self.clone();
        }
        let spans = self
            .spans
            .iter()
            .map(|s| SpanImagination {
                clip: s.clip.as_ref().map(|c| {
                    let m = &c.mel.values;
                    let (rows, cols) = (m.rows(), m.cols());
                    let floor = m.data().iter().copied().fold(f64::INFINITY, f64::min);
                    let mut data = vec![floor; rows * cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            let src = j as isize - bins;
                            if (0..cols as isize).contains(&src) {
                                data[r * cols + j] = m.at(r, src as usize);
                            }
                        }
                    }
                    let mut mel = c.mel.clone();
                    mel.values = Tensor::matrix(rows, cols, data).expect("same shape");
                    Arc::new(ImaginedClip {
                        key: c.key ^ (bins as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                        mel,
                        waveform: None,
                    })
                }),
                ..s.clone()
            })
            .collect();
        Imagination { spans }
    }
}

/// Per-span result with its audio tokens (`T_a × d_model`) when accepted.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanResult {
    pub span: Span,
    pub status: SpanStatus,
    pub trial_scores: Vec<f64>,
    pub audio_tokens: Option<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImaginationResult {
    pub spans: Vec<SpanResult>,
}

/// What to do when the generator or scorer cannot interpret a detected span.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnresolvedSpanPolicy {
    /// Fail with the span index attached.
    #[default]
    Error,
    /// Mark the span ignored with no trials.
    Ignore,
}

/// Frozen imagination components wired together.
pub struct Imaginer<'a> {
    pub detector: &'a DetectorModel,
    pub generator: &'a dyn AudioGenerator,
    pub scorer: &'a dyn SpanScorer,
    pub front: &'a MelFrontEnd,
    pub rejection: RejectionConfig,
    pub policy: UnresolvedSpanPolicy,
    pub keep_waveforms: bool,
    cache: Mutex<HashMap<u64, Arc<ImaginedClip>>>,
}

impl<'a> Imaginer<'a> {
    pub fn new(
        detector: &'a DetectorModel,
        generator: &'a dyn AudioGenerator,
        scorer: &'a dyn SpanScorer,
        front: &'a MelFrontEnd,
        rejection: RejectionConfig,
    ) -> Result<Self> {
        rejection.validate()?;
        Ok(Self {
            detector,
            generator,
            scorer,
            front,
            rejection,
            policy: UnresolvedSpanPolicy::Error,
            keep_waveforms: false,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_policy(mut self, policy: UnresolvedSpanPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn keeping_waveforms(mut self) -> Self {
        self.keep_waveforms = true;
        self
    }

    fn clip(&self, w: Waveform) -> Result<Arc<ImaginedClip>> {
        let key = w.fingerprint();
        if let Some(c) = self.cache.lock().expect("cache lock").get(&key) {
            if !self.keep_waveforms || c.waveform.is_some() {
                return Ok(c.clone());
            }
        }
        let mel = self.front.compute(&w)?;
        let clip = Arc::new(ImaginedClip {
            key,
            mel,
            waveform: self.keep_waveforms.then_some(w),
        });
        self.cache.lock().expect("cache lock").insert(key, clip.clone());
        Ok(clip)
    }

    fn one_span(&self, idx: usize, span: Span, words: Vec<String>, seed: u64) -> Result<SpanImagination> {
        let mut rng = stream(seed, &[idx as u64]);
        let outcome = match sample_with_rejection(&words, self.generator, self.scorer, &self.rejection, &mut rng) {
            Ok(o) => o,
            Err(Error::Generation(_) | Error::Embedding(_)) if self.policy == UnresolvedSpanPolicy::Ignore => {
                RejectionOutcome::Ignored {
                    trial_scores: Vec::new(),
                }
            }
            Err(e) => {
                return Err(Error::AtSpan {
                    span: idx,
                    source: Box::new(e),
                })
            }
        };
        Ok(match outcome {
            RejectionOutcome::Accepted { clip, trial_scores, .. } => SpanImagination {
                span,
                words,
                status: SpanStatus::Accepted,
                trial_scores,
                clip: Some(self.clip(clip).map_err(|e| Error::AtSpan {
                    span: idx,
                    source: Box::new(e),
                })?),
            },
            RejectionOutcome::Ignored { trial_scores } => SpanImagination {
                span,
                words,
                status: SpanStatus::Ignored,
                trial_scores,
                clip: None,
            },
        })
    }

    /// Detect spans, then generate with rejection per span. `words` are the
    /// raw tokens behind `tokens` (same length). Span `i` draws from its own
    /// stream derived from `seed`.
    pub fn imagine(&self, words: &[String], tokens: &TokenSeq, seed: u64) -> Result<Imagination> {
        if words.len() != tokens.len() {
            return Err(Error::Shape {
                op: "imagine",
                lhs: vec![words.len()],
                rhs: vec![tokens.len()],
            });
        }
        let spans = self.detector.detect_spans(tokens)?;
        self.imagine_spans(words, &spans, seed)
    }

    /// As [`Imaginer::imagine`] with spans already known.
    pub fn imagine_spans(&self, words: &[String], spans: &[Span], seed: u64) -> Result<Imagination> {
        let spans = spans
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                if s.end >= words.len() {
                    return Err(Error::Contract(format!("span {s:?} outside {} tokens", words.len())));
                }
                self.one_span(i, s, words[s.start..=s.end].to_vec(), seed)
            })
            .collect::<Result<_>>()?;
        Ok(Imagination { spans })
    }

    /// One clip for the whole text, attached to a pseudo-span over every
    /// token. Use with a sentence-level generator.
    pub fn imagine_sentence_level(&self, words: &[String], seed: u64) -> Result<Imagination> {
        if words.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        let span = Span::new(0, words.len() - 1)?;
        Ok(Imagination {
            spans: vec![self.one_span(0, span, words.to_vec(), seed)?],
        })
    }
}

/// Encodes every accepted clip of `im` into audio tokens.
pub fn encode_imagination(
    im: &Imagination,
    enc: &ToyAudioEncoder,
    proj: &AudioProjector,
    store: &ParamStore,
) -> Result<ImaginationResult> {
    let mut spans = Vec::with_capacity(im.spans.len());
    for s in &im.spans {
        let audio_tokens = match &s.clip {
            Some(c) => {
                let mut g = Graph::new();
                let h = enc.forward(&mut g, store, &[&c.mel])?;
                let z = proj.forward(&mut g, store, h)?;
                Some(g.value(z).clone())
            }
            None => None,
        };
        spans.push(SpanResult {
            span: s.span,
            status: s.status,
            trial_scores: s.trial_scores.clone(),
            audio_tokens,
        });
    }
    Ok(ImaginationResult { spans })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::MelConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pooling_groups_cover_rows() {
        assert_eq!(pool_groups(&[8], 4), vec![(0, 2), (2, 2), (4, 2), (6, 2)]);
        let g = pool_groups(&[24, 10], 8);
        assert_eq!(g.len(), 16);
        assert_eq!(g[8].0, 24);
        assert_eq!(g[8..].iter().map(|x| x.1).sum::<usize>(), 10);
    }

    #[test]
    fn encode_shape_and_length_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = ToyAudioEncoder::new(&mut store, AudioEncoderConfig::default(), 32, &mut rng).unwrap();
        let proj = AudioProjector::new(&mut store, 64, 64, &mut rng);
        let front = MelFrontEnd::new(MelConfig::default()).unwrap();
        let s: Vec<f64> = (0..16_000).map(|i| 0.5 * (i as f64 * 0.2).sin()).collect();
        let w = Waveform::new(s, 16_000).unwrap();
        let z = encode_audio(&w, &front, &enc, &proj, &store).unwrap();
        assert_eq!(z.shape(), &[8, 64]);
        // 32 frames are needed; 0.15 s gives 13.
        let short = Waveform::new(vec![0.1; 2400], 16_000).unwrap();
        assert!(matches!(
            encode_audio(&short, &front, &enc, &proj, &store),
            Err(Error::Length { .. })
        ));
    }

    proptest! {
        #[test]
        fn pool_groups_partition_rows(lengths in prop::collection::vec(8usize..60, 1..5), t in 1usize..8) {
            let g = pool_groups(&lengths, t);
            prop_assert_eq!(g.len(), lengths.len() * t);
            let mut next = 0;
            for &(start, len) in &g {
                prop_assert_eq!(start, next);
                prop_assert!(len >= 1);
                next += len;
            }
            prop_assert_eq!(next, lengths.iter().sum::<usize>());
        }
    }
}
