use serde::{Deserialize, Serialize};

use crate::error::{FlapError, Result};
use crate::numerics::Tensor;

/// Patch extent in (time frames, mel bins).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSize {
    pub time: usize,
    pub freq: usize,
}

impl PatchSize {
    pub fn new(time: usize, freq: usize) -> Self {
        PatchSize { time, freq }
    }

    pub fn dim(&self) -> usize {
        self.time * self.freq
    }
}

/// Patch grid (time patches, freq patches) for a `[frames, mels]` input.
/// Frames are padded up to a multiple of the patch height.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub time: usize,
    pub freq: usize,
    /// Frame count before padding.
    pub frames: usize,
}

impl PatchGrid {
    pub fn for_input(frames: usize, mels: usize, patch: PatchSize) -> Result<Self> {
        if patch.time == 0 || patch.freq == 0 || !mels.is_multiple_of(patch.freq) {
            return Err(FlapError::Config(format!(
                "patch {}x{} does not tile {mels} mel bins",
                patch.time, patch.freq
            )));
        }
        Ok(PatchGrid {
            time: frames.div_ceil(patch.time),
            freq: mels / patch.freq,
            frames,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.time * self.freq
    }
}

/// Batch of flattened spectrogram patches `[B, N, patch.dim()]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub tokens: Tensor,
    pub grid: PatchGrid,
    pub patch: PatchSize,
}

impl PatchSequence {
    pub fn batch_size(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn num_patches(&self) -> usize {
        self.grid.num_patches()
    }

    /// Concatenates single-item sequences sharing one grid into a batch.
    pub fn stack(items: &[PatchSequence]) -> Result<PatchSequence> {
        let first = items
            .first()
            .ok_or_else(|| FlapError::Input("cannot stack an empty batch".into()))?;
        if items.iter().any(|p| p.grid != first.grid || p.patch != first.patch) {
            return Err(FlapError::shape("stack", "patch sequences use different grids"));
        }
        let batch: usize = items.iter().map(PatchSequence::batch_size).sum();
        let data = items.iter().flat_map(|p| p.tokens.data().iter().copied()).collect();
        Ok(PatchSequence {
            tokens: Tensor::new(&[batch, first.num_patches(), first.patch.dim()], data)?,
            grid: first.grid,
            patch: first.patch,
        })
    }

    /// Single-item sequence for batch row `b`.
    pub fn item(&self, b: usize) -> PatchSequence {
        let width = self.num_patches() * self.patch.dim();
        let data = self.tokens.data()[b * width..(b + 1) * width].to_vec();
        PatchSequence {
            tokens: Tensor::new(&[1, self.num_patches(), self.patch.dim()], data).expect("shape"),
            grid: self.grid,
            patch: self.patch,
        }
    }
}

/// Source index (frame, mel) of every patch element, in token order:
/// patches time-major then frequency, elements row-major inside a patch.
/// `None` marks padding frames.
fn layout(grid: PatchGrid, patch: PatchSize) -> impl Iterator<Item = Option<(usize, usize)>> {
    (0..grid.time).flat_map(move |gt| {
        (0..grid.freq).flat_map(move |gf| {
            (0..patch.time).flat_map(move |dt| {
                (0..patch.freq).map(move |df| {
                    let t = gt * patch.time + dt;
                    (t < grid.frames).then_some((t, gf * patch.freq + df))
                })
            })
        })
    })
}

/// Splits a `[T, F]` spectrogram into non-overlapping patches.
pub fn patchify(frames: &Tensor, patch: PatchSize) -> Result<PatchSequence> {
    if frames.rank() != 2 {
        return Err(FlapError::shape(
            "patchify",
            format!("expected [T, F], got {:?}", frames.shape()),
        ));
    }
    let (t, f) = (frames.shape()[0], frames.shape()[1]);
    let grid = PatchGrid::for_input(t, f, patch)?;
    let data = frames.data();
    let tokens = layout(grid, patch)
        .map(|src| src.map_or(0.0, |(ti, fi)| data[ti * f + fi]))
        .collect();
    Ok(PatchSequence {
        tokens: Tensor::new(&[1, grid.num_patches(), patch.dim()], tokens)?,
        grid,
        patch,
    })
}

/// Inverse of [`patchify`] for one item of `tokens` (`[N, P]` or `[1, N, P]`);
/// padding frames are dropped.
pub fn depatchify(tokens: &Tensor, grid: PatchGrid, patch: PatchSize) -> Result<Tensor> {
    let expected = grid.num_patches() * patch.dim();
    if tokens.numel() != expected {
        return Err(FlapError::shape(
            "depatchify",
            format!(
                "{:?} does not hold {} patches of {}",
                tokens.shape(),
                grid.num_patches(),
                patch.dim()
            ),
        ));
    }
    let f = grid.freq * patch.freq;
    let mut out = vec![0.0; grid.frames * f];
    for (src, &v) in layout(grid, patch).zip(tokens.data()) {
        if let Some((t, fi)) = src {
            out[t * f + fi] = v;
        }
    }
    Tensor::new(&[grid.frames, f], out)
}
