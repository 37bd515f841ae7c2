//! Text/audio agreement scoring and the rejection sampler that keeps
//! regenerating a span's audio until the score clears a threshold.
//!
//! The scorer embeds both sides into the same space: the time-averaged mel
//! energy profile. Text maps to the profile of the clean tones of the concepts
//! it names; audio maps to its own measured profile.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{synth_tone, AudioGenerator, Lexicon, MelConfig, MelFrontEnd, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Fixed-width embedding; never all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVec(Vec<f64>);

impl EmbeddingVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Embedding("embedding must be finite and non-empty".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn normalized(values: Vec<f64>) -> Result<Self> {
        let v = Self::new(values)?;
        let n = v.norm();
        if n == 0.0 {
            return Err(Error::Embedding("zero-energy profile".into()));
        }
        Ok(Self(v.0.into_iter().map(|x| x / n).collect()))
    }
}

pub fn cosine(u: &EmbeddingVec, v: &EmbeddingVec) -> Result<f64> {
    if u.0.len() != v.0.len() {
        return Err(Error::Shape {
            op: "cosine",
            lhs: vec![u.0.len()],
            rhs: vec![v.0.len()],
        });
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine of a zero vector".into()));
    }
    let d: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok((d / (nu * nv)).clamp(-1.0, 1.0))
}

/// Scores how well a clip matches the words it was generated from.
pub trait SpanScorer: Send + Sync {
    fn score(&self, words: &[String], clip: &Waveform) -> Result<f64>;
}

/// Deterministic spectral-signature scorer over a lexicon.
pub struct SpectralScorer<'a> {
    lexicon: &'a Lexicon,
    front: MelFrontEnd,
    profiles: Vec<EmbeddingVec>,
}

impl<'a> SpectralScorer<'a> {
    /// `reference_s` is the duration of the clean tones used as text profiles.
    pub fn new(lexicon: &'a Lexicon, mel: MelConfig, reference_s: f64) -> Result<Self> {
        let front = MelFrontEnd::new(mel)?;
        let sr = front.config().sample_rate;
        let profiles = lexicon
            .concepts()
            .iter()
            .map(|c| {
                let tone = synth_tone(c.id, lexicon, reference_s, sr)?;
                Ok(Self::embed_audio(&front.compute(&tone)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            lexicon,
            front,
            profiles,
        })
    }

    pub fn front_end(&self) -> &MelFrontEnd {
        &self.front
    }

    /// Unit-normalized sum of the profiles of every concept the words name.
    pub fn embed_text(&self, words: &[String]) -> Result<EmbeddingVec> {
        let concepts = self.lexicon.resolve(words);
        if concepts.is_empty() {
            return Err(Error::Embedding(format!("no known sound source in {words:?}")));
        }
        let mut acc = vec![0.0; self.front.config().n_mels];
        for c in concepts {
            for (a, p) in acc.iter_mut().zip(self.profiles[c].values()) {
                *a += p;
            }
        }
        EmbeddingVec::normalized(acc)
    }

    /// Unit-normalized time-averaged mel energy.
    pub fn embed_audio(mel: &MelSpectrogram) -> EmbeddingVec {
        EmbeddingVec::normalized(mel.mean_energy()).expect("floored energies are positive")
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self.front.config()).expect("serializable"));
        for p in &self.profiles {
            for v in p.values() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

impl SpanScorer for SpectralScorer<'_> {
    fn score(&self, words: &[String], clip: &Waveform) -> Result<f64> {
        let t = self.embed_text(words)?;
        let a = Self::embed_audio(&self.front.compute(clip)?);
        cosine(&a, &t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionConfig {
    pub tau: f64,
    pub max_trials: usize,
}

impl RejectionConfig {
    /// Accept every first draw.
    pub fn disabled() -> Self {
        Self {
            tau: -1.0,
            max_trials: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_trials == 0 {
            return Err(Error::Config("max_trials must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} not in [-1, 1]", self.tau)));
        }
        Ok(())
    }

    fn accepts(&self, score: f64) -> bool {
        // tau = -1 disables rejection outright, including a score of exactly -1.
        self.tau <= -1.0 || score > self.tau
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RejectionOutcome {
    Accepted {
        clip: Waveform,
        score: f64,
        trial_scores: Vec<f64>,
    },
    Ignored {
        trial_scores: Vec<f64>,
    },
}

impl RejectionOutcome {
    pub fn trial_scores(&self) -> &[f64] {
        match self {
            Self::Accepted { trial_scores, .. } | Self::Ignored { trial_scores } => trial_scores,
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self, Self::Accepted { .. })
    }
}

/// Draws up to `max_trials` clips and keeps the first whose score is strictly
/// above `tau`. Returns [`RejectionOutcome::Ignored`] when none qualifies.
pub fn sample_with_rejection(
    words: &[String],
    generator: &dyn AudioGenerator,
    scorer: &dyn SpanScorer,
    cfg: &RejectionConfig,
    rng: &mut SeededRng,
) -> Result<RejectionOutcome> {
    cfg.validate()?;
    let mut trial_scores = Vec::with_capacity(cfg.max_trials);
    for _ in 0..cfg.max_trials {
        let clip = generator.generate(words, rng)?;
        let score = scorer.score(words, &clip)?;
        trial_scores.push(score);
        if cfg.accepts(score) {
            return Ok(RejectionOutcome::Accepted {
                clip,
                score,
                trial_scores,
            });
        }
    }
    Ok(RejectionOutcome::Ignored { trial_scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{Concept, GeneratorConfig, MockGenerator};
    use crate::rng::stream;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn e(v: &[f64]) -> EmbeddingVec {
        EmbeddingVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let u = e(&[0.3, -1.2, 2.0]);
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine(&e(&[1.0, 0.0]), &e(&[1.0, 1.0])).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(cosine(&e(&[0.0, 0.0]), &u), Err(Error::Shape { .. })));
        assert!(matches!(
            cosine(&e(&[0.0, 0.0]), &e(&[1.0, 0.0])),
            Err(Error::Domain(_))
        ));
    }

    struct Fixed(f64, AtomicUsize);
    impl SpanScorer for Fixed {
        fn score(&self, _: &[String], _: &Waveform) -> Result<f64> {
            self.1.fetch_add(1, Ordering::Relaxed);
            Ok(self.0)
        }
    }

    fn lex() -> Lexicon {
        Lexicon::new(vec![Concept {
            id: 0,
            tokens: vec!["objA".into()],
            frequency_hz: 500.0,
            timbre_seed: 3,
            unseen: false,
        }])
        .unwrap()
    }

    #[test]
    fn stub_scorer_contracts() {
        let l = lex();
        let g = MockGenerator::new(
            &l,
            GeneratorConfig {
                clip_duration_s: 0.05,
                ..Default::default()
            },
        )
        .unwrap();
        let w = vec!["objA".to_string()];
        let cfg = RejectionConfig {
            tau: 0.6,
            max_trials: 2,
        };
        let yes = Fixed(1.0, AtomicUsize::new(0));
        let out = sample_with_rejection(&w, &g, &yes, &cfg, &mut stream(0, &[])).unwrap();
        assert!(out.is_accepted());
        assert_eq!(yes.1.load(Ordering::Relaxed), 1);

        let no = Fixed(0.3, AtomicUsize::new(0));
        let out = sample_with_rejection(&w, &g, &no, &cfg, &mut stream(0, &[])).unwrap();
        assert_eq!(
            out,
            RejectionOutcome::Ignored {
                trial_scores: vec![0.3, 0.3]
            }
        );

        // tie rejects
        let tie = Fixed(0.6, AtomicUsize::new(0));
        assert!(!sample_with_rejection(&w, &g, &tie, &cfg, &mut stream(0, &[]))
            .unwrap()
            .is_accepted());
    }

    #[test]
    fn generator_errors_propagate() {
        let l = lex();
        let g = MockGenerator::new(&l, GeneratorConfig::default()).unwrap();
        let yes = Fixed(1.0, AtomicUsize::new(0));
        let r = sample_with_rejection(
            &["nothing".to_string()],
            &g,
            &yes,
            &RejectionConfig::disabled(),
            &mut stream(0, &[]),
        );
        assert!(matches!(r, Err(Error::Generation(_))));
    }

    #[test]
    fn text_embedding_is_deterministic_and_peaked() {
        let l = lex();
        let mel = MelConfig::default();
        let s = SpectralScorer::new(&l, mel.clone(), 0.25).unwrap();
        let a = s.embed_text(&["objA".to_string()]).unwrap();
        let b = s.embed_text(&["objA".to_string()]).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_eq!(crate::audio::mel_argmax(a.values()), mel.bin_of_hz(500.0));
        assert!(matches!(s.embed_text(&["zzz".to_string()]), Err(Error::Embedding(_))));
    }

    #[test]
    fn silence_embeds_uniform() {
        let m = crate::audio::mel_spectrogram(&Waveform::new(vec![0.0; 2000], 16_000).unwrap(), 400, 160, 32, 1e-10)
            .unwrap();
        let v = SpectralScorer::embed_audio(&m);
        assert!(v.values().iter().all(|&x| (x - 1.0 / 32f64.sqrt()).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_bounded(u in prop::collection::vec(-10.0f64..10.0, 6), v in prop::collection::vec(-10.0f64..10.0, 6)) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-6) && v.iter().any(|x| x.abs() > 1e-6));
            let (a, b) = (e(&u), e(&v));
            let c = cosine(&a, &b).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
            prop_assert_eq!(c, cosine(&b, &a).unwrap());
        }
    }
}
