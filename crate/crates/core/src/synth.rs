//! Synthetic tone/caption datasets for smoke tests and desk-scale training.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::audio::{write_wav, CaptionRecord, Manifest, Waveform};
use crate::error::{FlapError, Result};
use crate::numerics::{seeded, Stream};

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "h", "j",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

pub const TONE_LOW_HZ: f64 = 120.0;
pub const TONE_HIGH_HZ: f64 = 6500.0;

/// Distinct two-syllable pseudo-word for every index below 6400.
pub fn tone_word(i: usize) -> String {
    let syl = |k: usize| format!("{}{}", ONSETS[k % 16], VOWELS[(k / 16) % 5]);
    format!("{}{}", syl(i % 80), syl(i / 80 + 7))
}

/// Frequency of tone `i` out of `count`, log-spaced across the band.
pub fn tone_frequency(i: usize, count: usize) -> f64 {
    if count <= 1 {
        return TONE_LOW_HZ;
    }
    TONE_LOW_HZ * (TONE_HIGH_HZ / TONE_LOW_HZ).powf(i as f64 / (count - 1) as f64)
}

/// Pure tone with a short fade at both ends and a little seeded noise.
pub fn tone(freq: f64, seconds: f64, sample_rate: u32, noise: f64, seed: u64) -> Waveform {
    let n = (seconds * sample_rate as f64).round() as usize;
    let fade = (0.01 * sample_rate as f64) as usize;
    let mut rng = seeded(seed, Stream::Synth);
    let samples = (0..n)
        .map(|k| {
            let env = (k.min(n - 1 - k) as f64 / fade.max(1) as f64).min(1.0);
            let t = k as f64 / sample_rate as f64;
            0.5 * env * (2.0 * PI * freq * t).sin() + noise * rng.gen_range(-1.0..1.0)
        })
        .collect();
    Waveform { samples, sample_rate }
}

/// Writes `count` tone clips plus `manifest.jsonl` into `dir`; clip `i` is
/// captioned with [`tone_word`]`(i)`.
pub fn generate_tone_dataset(dir: &Path, count: usize, seconds: f64, seed: u64) -> Result<Manifest> {
    if count == 0 || count > 6400 {
        return Err(FlapError::Input(format!("tone count must be in 1..=6400, got {count}")));
    }
    fs::create_dir_all(dir).map_err(|e| FlapError::io(dir, e))?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let name = format!("tone_{i:04}.wav");
        let wave = tone(
            tone_frequency(i, count),
            seconds,
            16_000,
            0.01,
            seed.wrapping_add(i as u64),
        );
        write_wav(&dir.join(&name), &wave)?;
        records.push(CaptionRecord::new(format!("tone_{i:04}"), name, vec![tone_word(i)]));
    }
    let manifest = Manifest::new(records, dir)?;
    manifest.save(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
