//! Feature caching, caption sampling and batch assembly.

use rand::Rng as _;

use crate::audio::fusion::fusion_views;
use crate::audio::mel::{apply_spec_augment, normalize, pad_or_crop, spec_augment};
use crate::audio::{
    load_wav, patchify, CaptionRecord, FeatureConfig, Manifest, MelExtractor, MelSpectrogram, SpecAugmentConfig,
};
use crate::error::{FlapError, Result};
use crate::model::{AudioInput, ModelConfig};
use crate::numerics::{seeded, Rng, Stream, Tensor};

/// Normalised log-mel features for every readable record of a manifest.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    /// `(record index, features)` in manifest order.
    pub items: Vec<(usize, MelSpectrogram)>,
    pub skipped: Vec<String>,
}

impl FeatureStore {
    pub fn build(manifest: &Manifest, features: &FeatureConfig, mean: f64, std: f64) -> Result<Self> {
        let extractor = MelExtractor::new(features.clone())?;
        let mut items = Vec::with_capacity(manifest.records.len());
        let mut skipped = Vec::new();
        for (i, r) in manifest.records.iter().enumerate() {
            let path = manifest.resolve_audio(r);
            match load_wav(&path, features.sample_rate).and_then(|w| extractor.compute(&w)) {
                Ok(spec) => items.push((i, normalize(&spec, mean, std))),
                Err(e) => {
                    log::warn!("skipping record {}: {e}", r.id);
                    skipped.push(r.id.clone());
                }
            }
        }
        Ok(FeatureStore { items, skipped })
    }

    /// Mean and standard deviation over every cell of every clip.
    pub fn stats(&self) -> (f64, f64) {
        let cells = || self.items.iter().flat_map(|(_, s)| s.frames.data().iter().copied());
        let n = cells().count().max(1) as f64;
        let mean = cells().sum::<f64>() / n;
        let var = cells().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Uniform choice among a record's captions.
pub fn caption_sampler<'a>(record: &'a CaptionRecord, rng: &mut Rng) -> &'a str {
    let i = rng.gen_range(0..record.captions.len());
    &record.captions[i]
}

/// Per-run random streams used while assembling training batches.
#[derive(Clone, Debug)]
pub struct BatchRngs {
    pub crop: Rng,
    pub spec_augment: Rng,
    pub fusion: Rng,
}

impl BatchRngs {
    pub fn new(seed: u64) -> Self {
        BatchRngs {
            crop: seeded(seed, Stream::Crop),
            spec_augment: seeded(seed, Stream::SpecAugment),
            fusion: seeded(seed, Stream::Fusion),
        }
    }
}

/// Encoder input plus the clean patches the decoder should reconstruct.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBatch {
    pub input: AudioInput,
    /// `[B, N, P]` patches before SpecAugment.
    pub target: Tensor,
}

/// Builds one batch. Without `rngs` (evaluation) long clips are cropped from
/// frame 0, SpecAugment is skipped and fusion crops come from a fixed stream.
pub fn assemble_audio(
    specs: &[&MelSpectrogram],
    model: &ModelConfig,
    spec_aug: Option<SpecAugmentConfig>,
    mut rngs: Option<&mut BatchRngs>,
) -> Result<AudioBatch> {
    if specs.is_empty() {
        return Err(FlapError::Input("empty audio batch".into()));
    }
    let frames = model.frames;
    let mut target = Vec::new();
    let mut input = Vec::new();
    let mut eval_fusion = seeded(0, Stream::Fusion);
    for spec in specs {
        if spec.num_mels() != model.mels {
            return Err(FlapError::shape(
                "assemble_audio",
                format!("{} mel bins, model expects {}", spec.num_mels(), model.mels),
            ));
        }
        if model.fusion {
            let fusion_rng = match rngs.as_deref_mut() {
                Some(r) => &mut r.fusion,
                None => &mut eval_fusion,
            };
            let views = fusion_views(spec, frames, fusion_rng);
            let one = frames * model.mels;
            let global = Tensor::new(&[frames, model.mels], views.data()[..one].to_vec())?;
            target.extend_from_slice(patchify(&global, model.patch)?.tokens.data());
            match (spec_aug, rngs.as_deref_mut()) {
                (Some(cfg), Some(r)) => {
                    let (_, masks) = spec_augment(&spec.with_frames(global), cfg, &mut r.spec_augment);
                    for v in views.data().chunks(one) {
                        let view = spec.with_frames(Tensor::new(&[frames, model.mels], v.to_vec())?);
                        input.extend_from_slice(apply_spec_augment(&view, masks).frames.data());
                    }
                }
                _ => input.extend_from_slice(views.data()),
            }
        } else {
            let clean = pad_or_crop(spec, frames, rngs.as_deref_mut().map(|r| &mut r.crop));
            let clean_patches = patchify(&clean.frames, model.patch)?;
            target.extend_from_slice(clean_patches.tokens.data());
            match (spec_aug, rngs.as_deref_mut()) {
                (Some(cfg), Some(r)) => {
                    let (aug, _) = spec_augment(&clean, cfg, &mut r.spec_augment);
                    input.extend_from_slice(patchify(&aug.frames, model.patch)?.tokens.data());
                }
                _ => input.extend_from_slice(clean_patches.tokens.data()),
            }
        }
    }
    let b = specs.len();
    let (n, p) = (model.num_patches()?, model.patch.dim());
    let target = Tensor::new(&[b, n, p], target)?;
    let input = if model.fusion {
        AudioInput::FusionViews(Tensor::new(&[b, 4, frames, model.mels], input)?)
    } else {
        AudioInput::Patches(Tensor::new(&[b, n, p], input)?)
    };
    Ok(AudioBatch { input, target })
}
