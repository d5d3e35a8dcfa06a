//! Random token dropping before the audio encoder.
//!
//! A [`MaskPlan`] records, per batch item, which of the `N` tokens stay
//! visible. 1-D plans keep `N' = max(1, ⌊(1-ρ)N⌋)` tokens sampled uniformly.
//! 2-D plans split the sequence into `M` runs of `K = N/M` consecutive tokens,
//! keep `M'` runs and, inside each kept run, the same number `K'` of tokens,
//! so `N' = M'·K'`. Kept indices are always sorted ascending.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{FlapError, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskStrategy {
    #[default]
    None,
    OneD {
        ratio: f64,
    },
    TwoD {
        groups: usize,
        group_ratio: f64,
        frame_ratio: f64,
    },
}

impl MaskStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            MaskStrategy::None => "none",
            MaskStrategy::OneD { .. } => "1d",
            MaskStrategy::TwoD { .. } => "2d",
        }
    }

    /// Exact `N'` this strategy keeps out of `n` tokens.
    pub fn kept_count(&self, n: usize) -> Result<usize> {
        match *self {
            MaskStrategy::None => Ok(n),
            MaskStrategy::OneD { ratio } => {
                check_ratio(ratio)?;
                Ok(kept_after(n, ratio))
            }
            MaskStrategy::TwoD {
                groups,
                group_ratio,
                frame_ratio,
            } => {
                let k = group_len(n, groups)?;
                check_ratio(group_ratio)?;
                check_ratio(frame_ratio)?;
                Ok(kept_after(groups, group_ratio) * kept_after(k, frame_ratio))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `max(1, ⌊(1-ρ)·n⌋)`. The product is nudged by 1e-9 before flooring so that
/// ratios like 0.9 of 10 give 1, not 0.99999….
pub fn kept_after(n: usize, ratio: f64) -> usize {
    (((1.0 - ratio) * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(FlapError::Config(format!(
            "masking ratio must be in [0, 1), got {ratio}"
        )));
    }
    Ok(())
}

fn group_len(n: usize, groups: usize) -> Result<usize> {
    if groups == 0 || !n.is_multiple_of(groups) {
        return Err(FlapError::Config(format!(
            "{groups} groups do not divide a sequence of {n} tokens"
        )));
    }
    Ok(n / groups)
}

/// Kept/dropped token indices for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub strategy: MaskStrategy,
    pub n: usize,
    /// Per batch item, ascending kept indices (all of length `N'`).
    pub kept: Vec<Vec<usize>>,
    /// Per batch item, ascending dropped indices.
    pub dropped: Vec<Vec<usize>>,
    /// Per batch item, `restore[i]` is the position of token `i` in
    /// `kept ++ dropped`.
    pub restore: Vec<Vec<usize>>,
}

impl MaskPlan {
    fn from_kept(strategy: MaskStrategy, n: usize, kept: Vec<Vec<usize>>) -> Self {
        let mut dropped = Vec::with_capacity(kept.len());
        let mut restore = Vec::with_capacity(kept.len());
        for ks in &kept {
            let mut is_kept = vec![false; n];
            ks.iter().for_each(|&i| is_kept[i] = true);
            let ds: Vec<usize> = (0..n).filter(|&i| !is_kept[i]).collect();
            let mut r = vec![0; n];
            for (pos, &i) in ks.iter().chain(&ds).enumerate() {
                r[i] = pos;
            }
            dropped.push(ds);
            restore.push(r);
        }
        MaskPlan {
            strategy,
            n,
            kept,
            dropped,
            restore,
        }
    }

    /// Plan from explicit per-item kept indices (sorted, distinct, all of
    /// one length).
    pub fn custom(n: usize, kept: Vec<Vec<usize>>) -> Result<Self> {
        let len = kept.first().map_or(0, Vec::len);
        for ks in &kept {
            if ks.len() != len || ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) || ks[ks.len() - 1] >= n {
                return Err(FlapError::Input(format!(
                    "kept indices {ks:?} are not {len} sorted distinct tokens below {n}"
                )));
            }
        }
        Ok(Self::from_kept(MaskStrategy::None, n, kept))
    }

    pub fn keep_all(n: usize, batch: usize) -> Self {
        Self::from_kept(MaskStrategy::None, n, vec![(0..n).collect(); batch])
    }

    pub fn batch_size(&self) -> usize {
        self.kept.len()
    }

    pub fn kept_count(&self) -> usize {
        self.kept.first().map_or(self.n, Vec::len)
    }

    pub fn masked_count(&self) -> usize {
        self.n - self.kept_count()
    }

    pub fn keep_fraction(&self) -> f64 {
        self.kept_count() as f64 / self.n as f64
    }

    pub fn is_keep_all(&self) -> bool {
        self.kept_count() == self.n
    }

    /// Row-major `[B, N]` flags, true where the token was dropped.
    pub fn masked_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.batch_size() * self.n];
        for (b, ds) in self.dropped.iter().enumerate() {
            ds.iter().for_each(|&i| flags[b * self.n + i] = true);
        }
        flags
    }
}

/// Uniform 1-D plan: the first `N'` entries of a random permutation, sorted.
pub fn plan_mask_1d(n: usize, ratio: f64, batch: usize, rng: &mut Rng) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let keep = kept_after(n, ratio);
    let kept = (0..batch)
        .map(|_| {
            let mut ks = sample(rng, n, keep).into_vec();
            ks.sort_unstable();
            ks
        })
        .collect();
    Ok(MaskPlan::from_kept(MaskStrategy::OneD { ratio }, n, kept))
}

/// Grouped 2-D plan over `groups` runs of consecutive tokens.
pub fn plan_mask_2d(
    n: usize,
    groups: usize,
    group_ratio: f64,
    frame_ratio: f64,
    batch: usize,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    let k = group_len(n, groups)?;
    check_ratio(group_ratio)?;
    check_ratio(frame_ratio)?;
    let keep_groups = kept_after(groups, group_ratio);
    let keep_frames = kept_after(k, frame_ratio);
    let kept = (0..batch)
        .map(|_| {
            let mut gs = sample(rng, groups, keep_groups).into_vec();
            gs.sort_unstable();
            let mut ks = Vec::with_capacity(keep_groups * keep_frames);
            for g in gs {
                let mut fs = sample(rng, k, keep_frames).into_vec();
                fs.sort_unstable();
                ks.extend(fs.into_iter().map(|f| g * k + f));
            }
            ks
        })
        .collect();
    let strategy = MaskStrategy::TwoD {
        groups,
        group_ratio,
        frame_ratio,
    };
    Ok(MaskPlan::from_kept(strategy, n, kept))
}

/// Plan for one batch; evaluation always keeps every token.
pub fn plan(strategy: MaskStrategy, n: usize, batch: usize, mode: Mode, rng: &mut Rng) -> Result<MaskPlan> {
    match (mode, strategy) {
        (Mode::Eval, _) | (_, MaskStrategy::None) => Ok(MaskPlan::keep_all(n, batch)),
        (Mode::Train, MaskStrategy::OneD { ratio }) => plan_mask_1d(n, ratio, batch, rng),
        (
            Mode::Train,
            MaskStrategy::TwoD {
                groups,
                group_ratio,
                frame_ratio,
            },
        ) => plan_mask_2d(n, groups, group_ratio, frame_ratio, batch, rng),
    }
}

fn check_plan(op: &'static str, plan: &MaskPlan, batch: usize, len: usize, expected: usize) -> Result<()> {
    if plan.batch_size() != batch || len != expected {
        return Err(FlapError::shape(
            op,
            format!(
                "plan for B={} N={} N'={} does not fit batch {batch} of length {len}",
                plan.batch_size(),
                plan.n,
                plan.kept_count()
            ),
        ));
    }
    Ok(())
}

/// `[B, N, D]` → `[B, N', D]`: row `j` of item `b` is input row `kept[b][j]`.
pub fn apply_mask(g: &mut Graph, tokens: Var, plan: &MaskPlan) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 3 {
        return Err(FlapError::shape(
            "apply_mask",
            format!("expected [B,N,D], got {shape:?}"),
        ));
    }
    check_plan("apply_mask", plan, shape[0], shape[1], plan.n)?;
    if plan.is_keep_all() {
        return Ok(tokens);
    }
    g.gather_rows(tokens, &plan.kept)
}

/// `[B, N', D]` → `[B, N, D]` with `mask_token` at every dropped position.
pub fn restore_order(g: &mut Graph, visible: Var, mask_token: Var, plan: &MaskPlan) -> Result<Var> {
    let shape = g.shape(visible).to_vec();
    if shape.len() != 3 {
        return Err(FlapError::shape(
            "restore_order",
            format!("expected [B,N',D], got {shape:?}"),
        ));
    }
    check_plan("restore_order", plan, shape[0], shape[1], plan.kept_count())?;
    g.scatter_rows(visible, mask_token, &plan.kept, plan.n)
}

/// Value-level [`apply_mask`].
pub fn apply_mask_tensor(tokens: &Tensor, plan: &MaskPlan) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(tokens.clone());
    let out = apply_mask(&mut g, v, plan)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded, Stream};

    #[test]
    fn one_d_counts() {
        let mut rng = seeded(0, Stream::Mask);
        assert_eq!(plan_mask_1d(256, 0.4, 1, &mut rng).unwrap().kept_count(), 153);
        let all = plan_mask_1d(10, 0.0, 2, &mut rng).unwrap();
        assert_eq!(all.kept[0], (0..10).collect::<Vec<_>>());
        assert_eq!(plan_mask_1d(4, 0.99, 1, &mut rng).unwrap().kept_count(), 1);
        assert!(plan_mask_1d(4, 1.0, 1, &mut rng).is_err());
        assert!(plan_mask_1d(4, f64::NAN, 1, &mut rng).is_err());
    }

    #[test]
    fn two_d_counts() {
        let mut rng = seeded(0, Stream::Mask);
        let p = plan_mask_2d(512, 64, 0.2, 0.2, 3, &mut rng).unwrap();
        assert_eq!(p.kept_count(), 51 * 6);
        assert_eq!(p.kept_count(), 306);
        let all = plan_mask_2d(512, 64, 0.0, 0.0, 1, &mut rng).unwrap();
        assert!(all.is_keep_all());
        let quarter = plan_mask_2d(64, 8, 0.5, 0.5, 1, &mut rng).unwrap();
        assert_eq!(quarter.keep_fraction(), 0.25);
        assert!(plan_mask_2d(100, 64, 0.2, 0.2, 1, &mut rng).is_err());
    }

    #[test]
    fn two_d_keeps_equal_counts_per_kept_group() {
        let mut rng = seeded(5, Stream::Mask);
        let p = plan_mask_2d(48, 6, 0.4, 0.3, 4, &mut rng).unwrap();
        let (mk, kk) = (kept_after(6, 0.4), kept_after(8, 0.3));
        for ks in &p.kept {
            let mut per_group = [0usize; 6];
            ks.iter().for_each(|&i| per_group[i / 8] += 1);
            let used: Vec<_> = per_group.iter().filter(|&&c| c > 0).collect();
            assert_eq!(used.len(), mk);
            assert!(used.iter().all(|&&c| c == kk));
        }
    }

    #[test]
    fn eval_mode_keeps_everything() {
        let mut rng = seeded(1, Stream::Mask);
        let s = MaskStrategy::TwoD {
            groups: 4,
            group_ratio: 0.5,
            frame_ratio: 0.5,
        };
        assert!(plan(s, 32, 2, Mode::Eval, &mut rng).unwrap().is_keep_all());
        assert!(!plan(s, 32, 2, Mode::Train, &mut rng).unwrap().is_keep_all());
    }

    #[test]
    fn restore_permutation_inverts_concatenation() {
        let p = plan_mask_1d(20, 0.6, 3, &mut seeded(2, Stream::Mask)).unwrap();
        for b in 0..3 {
            let concat: Vec<usize> = p.kept[b].iter().chain(&p.dropped[b]).copied().collect();
            let restored: Vec<usize> = p.restore[b].iter().map(|&pos| concat[pos]).collect();
            assert_eq!(restored, (0..20).collect::<Vec<_>>());
        }
    }

    #[test]
    fn seeded_plans_replay() {
        let a = plan_mask_1d(8, 0.5, 2, &mut seeded(42, Stream::Mask)).unwrap();
        let b = plan_mask_1d(8, 0.5, 2, &mut seeded(42, Stream::Mask)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kept_count(), 4);
    }

    #[test]
    fn mask_token_receives_one_gradient_per_dropped_slot() {
        let p = plan_mask_1d(10, 0.3, 3, &mut seeded(4, Stream::Mask)).unwrap();
        let mut g = Graph::new();
        let vis = g.param(Tensor::zeros(&[3, p.kept_count(), 2]));
        let tok = g.param(Tensor::zeros(&[2]));
        let out = restore_order(&mut g, vis, tok, &p).unwrap();
        let s = g.sum(out);
        g.backward(s).unwrap();
        let expected = (p.masked_count() * 3) as f64;
        assert_eq!(g.grad(tok).unwrap(), &[expected, expected]);
        assert!(g.grad(vis).unwrap().iter().all(|&v| v == 1.0));
    }
}
