//! Global + local views of long clips, merged by a learned 3×3 convolution.
//!
//! Experimental: one global view (the whole clip resampled along time to the
//! target length) and three random target-length crops. Clips that already
//! fit produce four copies of the padded clip.

use rand::Rng as _;

use super::mel::{pad_or_crop, MelSpectrogram};
use super::patch::{patchify, PatchSequence, PatchSize};
use crate::error::Result;
use crate::numerics::{Graph, Rng, Tensor};

pub const FUSION_VIEWS: usize = 4;
pub const LOCAL_VIEWS: usize = 3;

/// Stacked views `[4, T, F]`: global first, then the local crops.
pub fn fusion_views(spec: &MelSpectrogram, target_frames: usize, rng: &mut Rng) -> Tensor {
    let (t, f) = (spec.num_frames(), spec.num_mels());
    let mut data = Vec::with_capacity(FUSION_VIEWS * target_frames * f);
    if t <= target_frames {
        let padded = pad_or_crop(spec, target_frames, None);
        for _ in 0..FUSION_VIEWS {
            data.extend_from_slice(padded.frames.data());
        }
    } else {
        data.extend(resample_time(spec, target_frames));
        for _ in 0..LOCAL_VIEWS {
            let start = rng.gen_range(0..=t - target_frames);
            data.extend_from_slice(&spec.frames.data()[start * f..(start + target_frames) * f]);
        }
    }
    Tensor::new(&[FUSION_VIEWS, target_frames, f], data).expect("positive extents")
}

/// Linear interpolation of every mel bin onto `target` evenly spaced frames.
fn resample_time(spec: &MelSpectrogram, target: usize) -> Vec<f64> {
    let (t, f) = (spec.num_frames(), spec.num_mels());
    let mut out = Vec::with_capacity(target * f);
    for i in 0..target {
        let pos = if target == 1 {
            0.0
        } else {
            i as f64 * (t - 1) as f64 / (target - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let frac = pos - lo as f64;
        let (a, b) = (spec.frame(lo), spec.frame(hi));
        out.extend(a.iter().zip(b).map(|(x, y)| x + frac * (y - x)));
    }
    out
}

/// Kernel `[4, 3, 3]` whose centre taps average the views.
pub fn averaging_kernel() -> Tensor {
    Tensor::from_fn(&[FUSION_VIEWS, 3, 3], |i| if i % 9 == 4 { 0.25 } else { 0.0 })
}

/// Merges `[B, 4, T, F]` views into `[B, T, F]` on the graph.
pub fn merge_views(
    g: &mut Graph,
    views: crate::numerics::Var,
    kernel: crate::numerics::Var,
    bias: crate::numerics::Var,
) -> Result<crate::numerics::Var> {
    g.conv3x3(views, kernel, bias)
}

/// Value-level fusion of one clip: views → convolution → patches.
pub fn feature_fusion(
    spec: &MelSpectrogram,
    target_frames: usize,
    patch: PatchSize,
    kernel: &Tensor,
    bias: f64,
    rng: &mut Rng,
) -> Result<PatchSequence> {
    let views = fusion_views(spec, target_frames, rng);
    let mut g = Graph::new();
    let shape = views.shape().to_vec();
    let v = g.constant(views.reshape(&[1, shape[0], shape[1], shape[2]])?);
    let k = g.constant(kernel.clone());
    let b = g.constant(Tensor::scalar(bias));
    let merged = merge_views(&mut g, v, k, b)?;
    let frames = g.value(merged).clone().reshape(&[shape[1], shape[2]])?;
    patchify(&frames, patch)
}
