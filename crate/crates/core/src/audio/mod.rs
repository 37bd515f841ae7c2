//! Procedural audio: tone synthesis for lexicon concepts, a mock text-to-audio
//! generator with controllable imperfection, and a log-mel front end.

mod generator;
mod lexicon;
mod mel;
mod wav;

pub use generator::{AudioGenerator, GeneratorConfig, GeneratorMode, MockGenerator};
pub use lexicon::{Concept, ConceptId, Lexicon, MAX_FREQ_HZ, MIN_FREQ_HZ};
pub use mel::{argmax as mel_argmax, hz_to_mel, mel_spectrogram, mel_to_hz, MelConfig, MelFrontEnd, MelSpectrogram};
pub use wav::{read_wav, write_wav};

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const PEAK_AMPLITUDE: f64 = 0.9;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("waveform must have at least one sample".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if let Some(s) = samples.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
            return Err(Error::Domain(format!("sample {s} outside [-1, 1]")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Stable content hash, used to share encodings of identical clips.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.sample_rate_hz as u64;
        for s in &self.samples {
            h ^= s.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Harmonic partials `(multiple, amplitude, phase)` derived from a timbre seed.
///
/// Amplitudes satisfy `Σ k·a_k < 1`, so the fundamental fixes the zero
/// crossings: exactly two per period.
pub fn harmonic_series(timbre_seed: u64) -> Vec<(f64, f64, f64)> {
    let mut rng = SeededRng::seed_from_u64(timbre_seed);
    (2..=4)
        .map(|k| {
            let k = k as f64;
            let amp = rng.random_range(0.2..1.0) * 0.25 / (k * k);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (k, amp, phase)
        })
        .collect()
}

fn render_tone(freq: f64, timbre_seed: u64, n: usize, sr: u32, t0: f64) -> Vec<f64> {
    let partials = harmonic_series(timbre_seed);
    let nyquist = sr as f64 / 2.0;
    let tau = std::f64::consts::TAU;
    (0..n)
        .map(|i| {
            let t = t0 + i as f64 / sr as f64;
            let mut s = (tau * freq * t).sin();
            for &(k, a, ph) in &partials {
                if k * freq < nyquist {
                    s += a * (tau * k * freq * t + ph).sin();
                }
            }
            s
        })
        .collect()
}

fn normalize_peak(mut s: Vec<f64>) -> Vec<f64> {
    let peak = s.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let g = PEAK_AMPLITUDE / peak;
        s.iter_mut().for_each(|x| *x *= g);
    }
    s
}

fn sample_count(duration_s: f64, sr: u32) -> Result<usize> {
    if !(duration_s > 0.0) || sr == 0 {
        return Err(Error::Contract(format!(
            "tone needs positive duration and rate, got {duration_s} s at {sr} Hz"
        )));
    }
    let n = (duration_s * sr as f64).round() as usize;
    if n == 0 {
        return Err(Error::Contract(format!("{duration_s} s is under one sample")));
    }
    Ok(n)
}

/// Oracle tone for a concept: fundamental plus its harmonic series,
/// peak-normalized to [`PEAK_AMPLITUDE`].
pub fn synth_tone(concept: ConceptId, lexicon: &Lexicon, duration_s: f64, sr: u32) -> Result<Waveform> {
    synth_tone_at(concept, lexicon, duration_s, sr, 0.0)
}

/// [`synth_tone`] starting at time offset `t0` seconds.
pub fn synth_tone_at(concept: ConceptId, lexicon: &Lexicon, duration_s: f64, sr: u32, t0: f64) -> Result<Waveform> {
    let c = lexicon.get(concept)?;
    let n = sample_count(duration_s, sr)?;
    let s = normalize_peak(render_tone(c.frequency_hz, c.timbre_seed, n, sr, t0));
    Waveform::new(s, sr)
}

/// Sample-wise sum of several concepts' tones, renormalized.
pub fn synth_mixture(concepts: &[ConceptId], lexicon: &Lexicon, duration_s: f64, sr: u32) -> Result<Waveform> {
    let n = sample_count(duration_s, sr)?;
    let mut acc = vec![0.0; n];
    for &id in concepts {
        let tone = synth_tone(id, lexicon, duration_s, sr)?;
        for (a, s) in acc.iter_mut().zip(tone.samples) {
            *a += s;
        }
    }
    Waveform::new(normalize_peak(acc), sr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex(freqs: &[f64]) -> Lexicon {
        Lexicon::new(
            freqs
                .iter()
                .enumerate()
                .map(|(i, &f)| Concept {
                    id: i,
                    tokens: vec![format!("obj{i}")],
                    frequency_hz: f,
                    timbre_seed: 100 + i as u64,
                    unseen: false,
                })
                .collect(),
        )
        .unwrap()
    }

    fn zero_crossings(s: &[f64]) -> usize {
        // Exact zeros (t = 0) are skipped rather than counted twice.
        let nz: Vec<f64> = s.iter().copied().filter(|&x| x != 0.0).collect();
        nz.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count()
    }

    #[test]
    fn tone_length_crossings_and_peak() {
        let l = lex(&[400.0, 1234.0, 3999.0, 80.0]);
        let w = synth_tone(0, &l, 0.1, 16_000).unwrap();
        assert_eq!(w.len(), 1600);
        let zc = zero_crossings(&w.samples);
        assert!((78..=82).contains(&zc), "{zc}");
        for id in 0..4 {
            let w = synth_tone(id, &l, 0.25, 16_000).unwrap();
            assert!((w.peak() - 0.9).abs() < 1e-9);
        }
    }

    #[test]
    fn tone_preconditions() {
        let l = lex(&[400.0]);
        assert!(synth_tone(0, &l, 0.0, 16_000).is_err());
        assert!(matches!(synth_tone(3, &l, 1.0, 16_000), Err(Error::UnknownConcept(3))));
    }

    #[test]
    fn harmonics_bounded() {
        for seed in 0..50 {
            let h = harmonic_series(seed);
            assert!(h.iter().map(|(k, a, _)| k * a).sum::<f64>() < 1.0);
        }
    }

    #[test]
    fn waveform_invariants() {
        assert!(Waveform::new(vec![], 16_000).is_err());
        assert!(Waveform::new(vec![1.5], 16_000).is_err());
        assert!(Waveform::new(vec![0.5], 0).is_err());
    }

    proptest! {
        #[test]
        fn tones_are_peak_normalized(f in 80.0f64..4000.0, seed in 0u64..1000, dur in 0.01f64..0.3) {
            let l = Lexicon::new(vec![Concept {
                id: 0,
                tokens: vec!["x".into()],
                frequency_hz: f,
                timbre_seed: seed,
                unseen: false,
            }])
            .unwrap();
            let w = synth_tone(0, &l, dur, 16_000).unwrap();
            let peak = w.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            prop_assert!((peak - 0.9).abs() < 1e-9);
            prop_assert_eq!(w.samples.len(), (dur * 16_000.0).round() as usize);
        }
    }
}
