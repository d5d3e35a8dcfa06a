use std::path::Path;

use crate::error::{FlapError, Result};

/// Mono waveform with samples in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a RIFF PCM16 mono file. Any other layout, or a rate other than
/// `expected_rate`, is rejected; nothing is resampled.
pub fn load_wav(path: &Path, expected_rate: u32) -> Result<Waveform> {
    let format_err = |detail: String| FlapError::Format {
        path: path.to_path_buf(),
        detail,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => FlapError::io(path, io),
        other => format_err(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(format_err(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(format_err(format!(
            "{:?} {}-bit samples, expected PCM16",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.sample_rate != expected_rate {
        return Err(format_err(format!(
            "sample rate {} Hz, expected {expected_rate} Hz",
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format_err(e.to_string()))?;
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes PCM16 mono, clamping to [-1, 1) and rounding to the nearest step.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => FlapError::io(path, io),
        other => FlapError::Format {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &wave.samples {
        let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(v).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_round_trips_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine.wav");
        let wave = Waveform {
            samples: (0..16000)
                .map(|i| 0.8 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin())
                .collect(),
            sample_rate: 16000,
        };
        write_wav(&path, &wave).unwrap();
        let back = load_wav(&path, 16000).unwrap();
        assert_eq!(back.samples.len(), 16000);
        let worst = wave
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 32768.0, "{worst}");
    }

    #[test]
    fn silence_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.wav");
        write_wav(
            &path,
            &Waveform {
                samples: vec![0.0; 800],
                sample_rate: 16000,
            },
        )
        .unwrap();
        assert!(load_wav(&path, 16000).unwrap().samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rejects_wrong_rate_and_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("8k.wav");
        write_wav(
            &path,
            &Waveform {
                samples: vec![0.0; 80],
                sample_rate: 8000,
            },
        )
        .unwrap();
        assert!(matches!(load_wav(&path, 16000), Err(FlapError::Format { .. })));

        let stereo = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(load_wav(&stereo, 16000), Err(FlapError::Format { .. })));

        let float = dir.path().join("float.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&float, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&float, 16000), Err(FlapError::Format { .. })));
    }
}
