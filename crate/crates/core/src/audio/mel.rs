use std::sync::Arc;

use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::wav::Waveform;
use crate::error::{FlapError, Result};
use crate::numerics::{Rng, Tensor};

/// Floor added to mel energies before the natural log.
pub const LOG_FLOOR: f64 = 1e-10;

/// Front-end framing and filterbank settings.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 1024,
            n_mels: 128,
        }
    }
}

impl FeatureConfig {
    pub fn window(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    /// Frame count for `seconds` of audio at the hop rate (10 s → 1000).
    pub fn frames_for_seconds(&self, seconds: f64) -> usize {
        (seconds * 1000.0 / self.hop_ms).round() as usize
    }

    /// Frames produced from `num_samples` samples, without centring.
    pub fn frame_count(&self, num_samples: usize) -> usize {
        if num_samples < self.window() {
            0
        } else {
            (num_samples - self.window()) / self.hop() + 1
        }
    }
}

/// Log-mel energies `[T, n_mels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
    pub sample_rate: u32,
    pub hop: usize,
    pub window: usize,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_mels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    pub fn with_frames(&self, frames: Tensor) -> Self {
        MelSpectrogram {
            frames,
            sample_rate: self.sample_rate,
            hop: self.hop,
            window: self.window,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, evenly spaced from 0 Hz to
/// Nyquist, evaluated at the FFT bin centre frequencies.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize) -> Self {
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate as f64 / n_fft as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        MelFilterbank {
            n_mels,
            n_bins,
            weights,
        }
    }

    pub fn filter(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }
}

/// Reusable STFT + filterbank front end.
pub struct MelExtractor {
    config: FeatureConfig,
    filterbank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        let window_len = config.window();
        if window_len == 0 || config.hop() == 0 || config.n_fft < window_len || config.n_mels == 0 {
            return Err(FlapError::Config(format!(
                "invalid framing: window {window_len}, hop {}, n_fft {}, n_mels {}",
                config.hop(),
                config.n_fft,
                config.n_mels
            )));
        }
        // Periodic Hann window.
        let window = (0..window_len)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / window_len as f64).cos())
            .collect();
        let filterbank = MelFilterbank::new(config.sample_rate, config.n_fft, config.n_mels);
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        Ok(MelExtractor {
            config,
            filterbank,
            window,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Natural-log mel energies of the power spectrum, `ln(E + 1e-10)`.
    pub fn compute(&self, wave: &Waveform) -> Result<MelSpectrogram> {
        if wave.sample_rate != self.config.sample_rate {
            return Err(FlapError::Input(format!(
                "waveform at {} Hz, extractor expects {} Hz",
                wave.sample_rate, self.config.sample_rate
            )));
        }
        let (win, hop) = (self.window.len(), self.config.hop());
        let frames = self.config.frame_count(wave.samples.len());
        if frames == 0 {
            return Err(FlapError::Input(format!(
                "{} samples is shorter than one {win}-sample window",
                wave.samples.len()
            )));
        }
        let n_mels = self.filterbank.n_mels;
        let n_bins = self.filterbank.n_bins;
        let mut buf = vec![Complex::new(0.0, 0.0); self.config.n_fft];
        let mut power = vec![0.0; n_bins];
        let mut out = Vec::with_capacity(frames * n_mels);
        for t in 0..frames {
            let chunk = &wave.samples[t * hop..t * hop + win];
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (c, (&s, &w)) in buf.iter_mut().zip(chunk.iter().zip(&self.window)) {
                c.re = s * w;
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for m in 0..n_mels {
                let e: f64 = self.filterbank.filter(m).iter().zip(&power).map(|(w, p)| w * p).sum();
                out.push((e + LOG_FLOOR).ln());
            }
        }
        Ok(MelSpectrogram {
            frames: Tensor::new(&[frames, n_mels], out)?,
            sample_rate: wave.sample_rate,
            hop,
            window: win,
        })
    }
}

pub fn mel_spectrogram(wave: &Waveform, config: &FeatureConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(config.clone())?.compute(wave)
}

/// `(x - mean) / std` on every cell.
pub fn normalize(spec: &MelSpectrogram, mean: f64, std: f64) -> MelSpectrogram {
    let mut frames = spec.frames.clone();
    frames.data_mut().iter_mut().for_each(|v| *v = (*v - mean) / std);
    spec.with_frames(frames)
}

/// Forces exactly `target_frames` frames: shorter input is zero-padded at the
/// end, longer input is cropped to a contiguous window. The crop start is
/// drawn from `rng`, or is 0 when no generator is given.
pub fn pad_or_crop(spec: &MelSpectrogram, target_frames: usize, rng: Option<&mut Rng>) -> MelSpectrogram {
    let (t, f) = (spec.num_frames(), spec.num_mels());
    let data = spec.frames.data();
    let out = if t <= target_frames {
        let mut v = data.to_vec();
        v.resize(target_frames * f, 0.0);
        v
    } else {
        let start = rng.map_or(0, |r| r.gen_range(0..=t - target_frames));
        data[start * f..(start + target_frames) * f].to_vec()
    };
    spec.with_frames(Tensor::new(&[target_frames, f], out).expect("positive target"))
}

/// Where a SpecAugment pass zeroed cells: `[start, start + width)` on each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecAugmentMasks {
    pub time: (usize, usize),
    pub freq: (usize, usize),
}

/// Upper bounds for SpecAugment stripe widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecAugmentConfig {
    pub max_time: usize,
    pub max_freq: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig {
            max_time: 192,
            max_freq: 48,
        }
    }
}

/// Zeroes one time stripe (width uniform in `[0, max_time]`) and one
/// frequency stripe (width uniform in `[0, max_freq]`); widths are clipped to
/// the spectrogram extent.
pub fn spec_augment(
    spec: &MelSpectrogram,
    config: SpecAugmentConfig,
    rng: &mut Rng,
) -> (MelSpectrogram, SpecAugmentMasks) {
    let (t, f) = (spec.num_frames(), spec.num_mels());
    let tw = rng.gen_range(0..=config.max_time).min(t);
    let ts = rng.gen_range(0..=t - tw);
    let fw = rng.gen_range(0..=config.max_freq).min(f);
    let fs = rng.gen_range(0..=f - fw);
    let masks = SpecAugmentMasks {
        time: (ts, tw),
        freq: (fs, fw),
    };
    (apply_spec_augment(spec, masks), masks)
}

pub fn apply_spec_augment(spec: &MelSpectrogram, masks: SpecAugmentMasks) -> MelSpectrogram {
    let f = spec.num_mels();
    let mut frames = spec.frames.clone();
    let data = frames.data_mut();
    for t in masks.time.0..masks.time.0 + masks.time.1 {
        data[t * f..(t + 1) * f].iter_mut().for_each(|v| *v = 0.0);
    }
    for row in data.chunks_mut(f) {
        row[masks.freq.0..masks.freq.0 + masks.freq.1]
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    spec.with_frames(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded, Stream};

    fn tone(freq: f64, seconds: f64) -> Waveform {
        let n = (16000.0 * seconds) as usize;
        Waveform {
            samples: (0..n)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
                .collect(),
            sample_rate: 16000,
        }
    }

    #[test]
    fn ten_seconds_gives_998_frames() {
        let cfg = FeatureConfig::default();
        assert_eq!((cfg.window(), cfg.hop()), (400, 160));
        // Independent recomputation: frame t covers samples [160t, 160t + 400).
        let n = 160_000usize;
        let brute = (0..n).step_by(160).filter(|&s| s + 400 <= n).count();
        assert_eq!(brute, 998);
        assert_eq!(cfg.frame_count(n), brute);
        let spec = mel_spectrogram(&tone(440.0, 10.0), &cfg).unwrap();
        assert_eq!(spec.frames.shape(), &[998, 128]);
        assert_eq!(cfg.frames_for_seconds(10.0), 1000);
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let wave = Waveform {
            samples: vec![0.0; 4000],
            sample_rate: 16000,
        };
        let spec = mel_spectrogram(&wave, &FeatureConfig::default()).unwrap();
        assert!(spec.frames.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn too_short_is_an_input_error() {
        let wave = Waveform {
            samples: vec![0.0; 399],
            sample_rate: 16000,
        };
        assert!(matches!(
            mel_spectrogram(&wave, &FeatureConfig::default()),
            Err(FlapError::Input(_))
        ));
    }

    #[test]
    fn every_filter_covers_at_least_one_bin() {
        let fb = MelFilterbank::new(16000, 1024, 128);
        for m in 0..128 {
            assert!(fb.filter(m).iter().any(|&w| w > 0.0), "filter {m} is empty");
        }
    }

    #[test]
    fn tone_peaks_in_the_filter_covering_its_frequency() {
        let cfg = FeatureConfig::default();
        let fb = MelFilterbank::new(16000, 1024, 128);
        for freq in [250.0, 1000.0, 3000.0] {
            let spec = mel_spectrogram(&tone(freq, 0.5), &cfg).unwrap();
            // Filterbank oracle: the filter with the largest weight on the tone's bin.
            let bin = (freq * 1024.0 / 16000.0).round() as usize;
            let expected = (0..128)
                .max_by(|&a, &b| fb.filter(a)[bin].total_cmp(&fb.filter(b)[bin]))
                .unwrap();
            for t in 0..spec.num_frames() {
                let row = spec.frame(t);
                let arg = (0..128).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert!(arg.abs_diff(expected) <= 1, "{freq} Hz frame {t}: {arg} vs {expected}");
            }
        }
    }

    fn ramp(frames: usize) -> MelSpectrogram {
        MelSpectrogram {
            frames: Tensor::from_fn(&[frames, 4], |i| i as f64 + 1.0),
            sample_rate: 16000,
            hop: 160,
            window: 400,
        }
    }

    #[test]
    fn pad_crop_contract() {
        let short = ramp(500);
        let padded = pad_or_crop(&short, 1000, None);
        assert_eq!(padded.num_frames(), 1000);
        assert_eq!(&padded.frames.data()[..2000], short.frames.data());
        assert!(padded.frames.data()[2000..].iter().all(|&v| v == 0.0));

        let exact = ramp(1000);
        assert_eq!(pad_or_crop(&exact, 1000, Some(&mut seeded(1, Stream::Crop))), exact);

        let long = ramp(3000);
        let a = pad_or_crop(&long, 1000, Some(&mut seeded(9, Stream::Crop)));
        let b = pad_or_crop(&long, 1000, Some(&mut seeded(9, Stream::Crop)));
        assert_eq!(a, b);
        let start = (a.frames.data()[0] as usize - 1) / 4;
        assert_eq!(a.frames.data(), &long.frames.data()[start * 4..(start + 1000) * 4]);
    }

    #[test]
    fn spec_augment_zeroes_only_the_stripes() {
        let spec = ramp(300);
        let masks = SpecAugmentMasks {
            time: (10, 5),
            freq: (1, 2),
        };
        let out = apply_spec_augment(&spec, masks);
        for t in 0..300 {
            for f in 0..4 {
                let inside = (10..15).contains(&t) || (1..3).contains(&f);
                let v = out.frames.get(&[t, f]);
                if inside {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v.to_bits(), spec.frames.get(&[t, f]).to_bits());
                }
            }
        }
        let none = SpecAugmentMasks {
            time: (7, 0),
            freq: (0, 0),
        };
        assert_eq!(apply_spec_augment(&spec, none), spec);
    }

    #[test]
    fn spec_augment_widths_stay_bounded() {
        let spec = MelSpectrogram {
            frames: Tensor::ones(&[256, 64]),
            sample_rate: 16000,
            hop: 160,
            window: 400,
        };
        let mut rng = seeded(3, Stream::SpecAugment);
        let (mut max_t, mut max_f) = (0, 0);
        for _ in 0..10_000 {
            let (_, m) = spec_augment(&spec, SpecAugmentConfig::default(), &mut rng);
            assert!(m.time.0 + m.time.1 <= 256 && m.freq.0 + m.freq.1 <= 64);
            max_t = max_t.max(m.time.1);
            max_f = max_f.max(m.freq.1);
        }
        assert!(max_t <= 192 && max_f <= 48);
        // Upper ends are reachable.
        assert!(max_t > 180 && max_f > 44);
    }
}
