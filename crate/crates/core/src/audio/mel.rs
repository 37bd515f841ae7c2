use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// HTK mel scale.
pub fn hz_to_mel(f_hz: f64) -> Result<f64> {
    if !(f_hz >= 0.0) {
        return Err(Error::Domain(format!("negative frequency {f_hz}")));
    }
    Ok(2595.0 * (1.0 + f_hz / 700.0).log10())
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub floor: f64,
    pub mel_low_hz: f64,
    pub mel_high_hz: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 400,
            hop: 160,
            n_mels: 32,
            floor: 1e-10,
            mel_low_hz: 0.0,
            mel_high_hz: 8_000.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.n_fft == 0 || self.n_mels < 4 || self.floor <= 0.0 {
            return Err(Error::Config(format!("invalid mel config {self:?}")));
        }
        if !(self.mel_low_hz >= 0.0 && self.mel_low_hz < self.mel_high_hz)
            || self.mel_high_hz > self.sample_rate as f64 / 2.0
        {
            return Err(Error::Config("mel band edges out of range".into()));
        }
        Ok(())
    }

    /// Frame count for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> Option<usize> {
        (len >= self.n_fft).then(|| 1 + (len - self.n_fft) / self.hop)
    }

    /// Edge and center frequencies of the filters, `n_mels + 2` points.
    pub fn mel_points_hz(&self) -> Vec<f64> {
        let lo = hz_to_mel(self.mel_low_hz).expect("validated");
        let hi = hz_to_mel(self.mel_high_hz).expect("validated");
        let n = self.n_mels + 2;
        (0..n)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
            .collect()
    }

    /// Center frequency of filter `bin`.
    pub fn center_hz(&self, bin: usize) -> f64 {
        self.mel_points_hz()[bin + 1]
    }

    /// Response of filter `bin` to a pure tone at `f_hz` (triangle, peak 1).
    pub fn filter_weight(&self, bin: usize, f_hz: f64) -> f64 {
        let p = self.mel_points_hz();
        let (lo, c, hi) = (p[bin], p[bin + 1], p[bin + 2]);
        if f_hz <= lo || f_hz >= hi {
            0.0
        } else if f_hz <= c {
            (f_hz - lo) / (c - lo)
        } else {
            (hi - f_hz) / (hi - c)
        }
    }

    /// The filter that responds most strongly to a tone at `f_hz`.
    pub fn bin_of_hz(&self, f_hz: f64) -> usize {
        (0..self.n_mels)
            .map(|b| (b, self.filter_weight(b, f_hz)))
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (b, w)| if w > best.1 { (b, w) } else { best },
            )
            .0
    }
}

/// Log mel energies, `frames × n_mels`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor,
    pub frame_hop_samples: usize,
    pub mel_low_hz: f64,
    pub mel_high_hz: f64,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.cols()
    }

    /// Time-averaged linear energy per mel bin.
    pub fn mean_energy(&self) -> Vec<f64> {
        let (t, m) = (self.frames(), self.n_mels());
        let mut acc = vec![0.0; m];
        for r in 0..t {
            for (a, &v) in acc.iter_mut().zip(self.values.row(r)) {
                *a += v.exp();
            }
        }
        acc.iter_mut().for_each(|a| *a /= t as f64);
        acc
    }

    /// Index of the bin with the largest time-averaged energy.
    pub fn dominant_bin(&self) -> usize {
        argmax(&self.mean_energy())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

/// Hann-windowed STFT power, triangular mel filterbank, floored log.
pub struct MelFrontEnd {
    cfg: MelConfig,
    window: Vec<f64>,
    /// `n_mels` rows of `(first fft bin, weights)`.
    filters: Vec<(usize, Vec<f64>)>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelFrontEnd {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_fft;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let n_bins = n / 2 + 1;
        let bin_hz = cfg.sample_rate as f64 / n as f64;
        let filters = (0..cfg.n_mels)
            .map(|b| {
                let w: Vec<f64> = (0..n_bins).map(|k| cfg.filter_weight(b, k as f64 * bin_hz)).collect();
                let first = w.iter().position(|&x| x > 0.0).unwrap_or(0);
                let last = w.iter().rposition(|&x| x > 0.0).map_or(first, |l| l + 1);
                (first, w[first..last.max(first)].to_vec())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn compute(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let c = &self.cfg;
        let len = w.samples.len();
        let frames = c.frames_for(len).ok_or(Error::Length {
            needed: c.n_fft,
            got: len,
        })?;
        let n_bins = c.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); c.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];
        let mut out = Vec::with_capacity(frames * c.n_mels);
        for t in 0..frames {
            let start = t * c.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(w.samples[start + i] * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            for (first, weights) in &self.filters {
                let e: f64 = weights.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
                out.push(e.max(c.floor).ln());
            }
        }
        Ok(MelSpectrogram {
            values: Tensor::matrix(frames, c.n_mels, out)?,
            frame_hop_samples: c.hop,
            mel_low_hz: c.mel_low_hz,
            mel_high_hz: c.mel_high_hz,
        })
    }
}

/// One-shot convenience over [`MelFrontEnd`] with the waveform's sample rate.
pub fn mel_spectrogram(w: &Waveform, n_fft: usize, hop: usize, n_mels: usize, floor: f64) -> Result<MelSpectrogram> {
    let cfg = MelConfig {
        sample_rate: w.sample_rate_hz,
        n_fft,
        hop,
        n_mels,
        floor,
        mel_low_hz: 0.0,
        mel_high_hz: w.sample_rate_hz as f64 / 2.0,
    };
    MelFrontEnd::new(cfg)?.compute(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(f: f64, n: usize, sr: u32) -> Waveform {
        let s = (0..n)
            .map(|i| 0.9 * (2.0 * std::f64::consts::PI * f * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    #[test]
    fn mel_scale_examples() {
        assert_eq!(hz_to_mel(0.0).unwrap(), 0.0);
        assert!((hz_to_mel(700.0).unwrap() - 2595.0 * 2f64.log10()).abs() < 1e-9);
        assert!((hz_to_mel(700.0).unwrap() - 781.17).abs() < 0.01);
        assert!(hz_to_mel(-1.0).is_err());
        assert!((mel_to_hz(hz_to_mel(1234.5).unwrap()) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn frame_count() {
        let w = sine(440.0, 16_000, 16_000);
        let m = mel_spectrogram(&w, 400, 160, 32, 1e-10).unwrap();
        assert_eq!(m.frames(), 98);
        assert_eq!(m.n_mels(), 32);
    }

    #[test]
    fn silence_is_floor() {
        let w = Waveform::new(vec![0.0; 1000], 16_000).unwrap();
        let m = mel_spectrogram(&w, 400, 160, 32, 1e-10).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 1e-10f64.ln()));
    }

    #[test]
    fn too_short() {
        let w = Waveform::new(vec![0.0; 399], 16_000).unwrap();
        assert!(matches!(
            mel_spectrogram(&w, 400, 160, 32, 1e-10),
            Err(Error::Length { needed: 400, got: 399 })
        ));
    }

    #[test]
    fn pure_tone_lands_in_its_bin() {
        let cfg = MelConfig::default();
        // Independent oracle: nearest filter center on the mel axis.
        let target = hz_to_mel(440.0).unwrap();
        let step = hz_to_mel(8000.0).unwrap() / 33.0;
        let oracle = ((target / step).round() as usize) - 1;
        assert_eq!(cfg.bin_of_hz(440.0), oracle);
        let m = MelFrontEnd::new(cfg)
            .unwrap()
            .compute(&sine(440.0, 16_000, 16_000))
            .unwrap();
        assert_eq!(m.dominant_bin(), oracle);
    }

    proptest! {
        #[test]
        fn mel_scale_round_trips(f in 0.0f64..8000.0) {
            prop_assert!((mel_to_hz(hz_to_mel(f).unwrap()) - f).abs() < 1e-7);
        }

        #[test]
        fn spectrogram_is_finite(v in prop::collection::vec(-1.0f64..1.0, 400..2000)) {
            let n = v.len();
            let m = MelFrontEnd::new(MelConfig::default()).unwrap().compute(&Waveform::new(v, 16_000).unwrap()).unwrap();
            prop_assert!(m.values.data().iter().all(|x| x.is_finite()));
            prop_assert_eq!(m.frames(), MelConfig::default().frames_for(n).unwrap());
        }
    }
}
