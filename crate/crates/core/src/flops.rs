//! Analytic matmul FLOPs of the audio encoder under masking, checked against
//! the graph's instrumented counter.
//!
//! Per layer with `N` tokens of width `D` (2 FLOPs per multiply-accumulate):
//! linear `8·N·D² + 4·r·N·D²` (Q, K, V, output and the two MLP layers with
//! hidden width `r·D`) and attention `4·N²·D` (scores and weighted values).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{FlapError, Result};
use crate::masking::MaskStrategy;
use crate::model::{ModelConfig, StackConfig};
use crate::numerics::Graph;

/// Encoder shape for cost accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Unmasked sequence length.
    pub tokens: usize,
    pub batch: usize,
}

impl EncoderDims {
    pub fn from_stack(stack: StackConfig, tokens: usize, batch: usize) -> Self {
        EncoderDims {
            depth: stack.depth,
            width: stack.width,
            heads: stack.heads,
            mlp_ratio: stack.mlp_ratio,
            tokens,
            batch,
        }
    }

    /// ViT-B on 10 s clips, batch 8.
    pub fn vit_base() -> Self {
        let m = ModelConfig::vit_base(1);
        Self::from_stack(m.audio, m.num_patches().expect("valid preset"), 8)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub dims: EncoderDims,
    pub kept_tokens: usize,
    pub keep_fraction: f64,
    pub flops_linear: u64,
    pub flops_attention: u64,
    pub flops_total: u64,
    pub relative_to_unmasked: f64,
}

fn layer_terms(n: u64, d: u64, r: u64) -> (u64, u64) {
    (8 * n * d * d + 4 * r * n * d * d, 4 * n * n * d)
}

/// Analytic cost of running the encoder on `kept` of `dims.tokens` tokens.
pub fn encoder_flops(dims: EncoderDims, kept: usize) -> Result<CostReport> {
    if dims.depth == 0
        || dims.width == 0
        || dims.heads == 0
        || dims.mlp_ratio == 0
        || dims.tokens == 0
        || dims.batch == 0
    {
        return Err(FlapError::Config("encoder dimensions must be positive".into()));
    }
    if kept == 0 || kept > dims.tokens {
        return Err(FlapError::Config(format!("{kept} kept tokens out of {}", dims.tokens)));
    }
    let scale = (dims.depth * dims.batch) as u64;
    let (d, r) = (dims.width as u64, dims.mlp_ratio as u64);
    let (lin, att) = layer_terms(kept as u64, d, r);
    let (lin0, att0) = layer_terms(dims.tokens as u64, d, r);
    let total = scale * (lin + att);
    Ok(CostReport {
        dims,
        kept_tokens: kept,
        keep_fraction: kept as f64 / dims.tokens as f64,
        flops_linear: scale * lin,
        flops_attention: scale * att,
        flops_total: total,
        relative_to_unmasked: total as f64 / (scale * (lin0 + att0)) as f64,
    })
}

/// Cost of a masking strategy, using the exact kept count.
pub fn strategy_cost(dims: EncoderDims, strategy: MaskStrategy) -> Result<CostReport> {
    encoder_flops(dims, strategy.kept_count(dims.tokens)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub strategy: String,
    pub ratio_1: f64,
    /// Frame ratio for 2-D masking; absent for 1-D.
    pub ratio_2: Option<f64>,
    pub keep_fraction: f64,
    pub gflops: f64,
    pub relative: f64,
}

pub const CURVE_HEADER: &str = "strategy,ratio_1,ratio_2,keep_fraction,gflops,relative";

/// One row per ratio. `groups = Some(m)` sweeps 2-D masking with the same
/// ratio for groups and frames; `None` sweeps 1-D masking.
pub fn masking_cost_curve(dims: EncoderDims, groups: Option<usize>, ratios: &[f64]) -> Result<Vec<CurveRow>> {
    ratios
        .iter()
        .map(|&r| {
            let strategy = match groups {
                Some(groups) => MaskStrategy::TwoD {
                    groups,
                    group_ratio: r,
                    frame_ratio: r,
                },
                None => MaskStrategy::OneD { ratio: r },
            };
            let c = strategy_cost(dims, strategy)?;
            Ok(CurveRow {
                strategy: strategy.label().to_string(),
                ratio_1: r,
                ratio_2: groups.map(|_| r),
                keep_fraction: c.keep_fraction,
                gflops: c.flops_total as f64 / 1e9,
                relative: c.relative_to_unmasked,
            })
        })
        .collect()
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in rows {
        let r2 = r.ratio_2.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6}",
            r.strategy, r.ratio_1, r2, r.keep_fraction, r.gflops, r.relative
        );
    }
    out
}

/// Matmul FLOPs recorded under `scope` while `forward` runs on a fresh graph.
pub fn measured_op_count(scope: &str, forward: impl FnOnce(&mut Graph) -> Result<()>) -> Result<u64> {
    let mut g = Graph::new();
    forward(&mut g)?;
    Ok(g.flops_in(scope))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn small() -> EncoderDims {
        EncoderDims {
            depth: 1,
            width: 8,
            heads: 1,
            mlp_ratio: 4,
            tokens: 4,
            batch: 1,
        }
    }

    #[test]
    fn hand_computed_layer() {
        // Linear: 8·4·64 + 4·4·4·64 = 2048 + 4096; attention: 4·16·8 = 512.
        let c = encoder_flops(small(), 4).unwrap();
        assert_eq!((c.flops_linear, c.flops_attention, c.flops_total), (6144, 512, 6656));
        assert_eq!(c.relative_to_unmasked, 1.0);
    }

    #[test]
    fn quarter_keep_scales_terms() {
        let dims = EncoderDims { tokens: 400, ..small() };
        let full = encoder_flops(dims, 400).unwrap();
        let quarter = encoder_flops(dims, 100).unwrap();
        assert_eq!(quarter.flops_attention as f64 / full.flops_attention as f64, 0.0625);
        assert_eq!(quarter.flops_linear as f64 / full.flops_linear as f64, 0.25);
        assert!(quarter.relative_to_unmasked <= 0.25);
    }

    #[test]
    fn default_two_d_cost_is_in_band() {
        let s = MaskStrategy::TwoD {
            groups: 63,
            group_ratio: 0.2,
            frame_ratio: 0.2,
        };
        let c = strategy_cost(EncoderDims::vit_base(), s).unwrap();
        assert_eq!(c.kept_tokens, 300);
        assert!(
            (0.55..=0.75).contains(&c.relative_to_unmasked),
            "{}",
            c.relative_to_unmasked
        );
    }

    #[test]
    fn curve_is_decreasing() {
        let rows = masking_cost_curve(EncoderDims::vit_base(), Some(63), &[0.0, 0.1, 0.2, 0.3, 0.5, 0.75]).unwrap();
        assert_eq!(rows[0].relative, 1.0);
        assert!(rows.windows(2).all(|w| w[1].relative < w[0].relative));
        let csv = curve_csv(&rows);
        assert!(csv.starts_with(CURVE_HEADER));
        assert_eq!(csv.lines().count(), 7);
        let one_d = curve_csv(&masking_cost_curve(small(), None, &[0.5]).unwrap());
        assert_eq!(one_d.lines().nth(1).unwrap(), "1d,0.5,,0.500000,0.000003,0.480769");
    }

    #[test]
    fn single_matmul_is_forty_eight() {
        let n = measured_op_count("m", |g| {
            let a = g.constant(Tensor::zeros(&[2, 3]));
            let b = g.constant(Tensor::zeros(&[3, 4]));
            g.scoped("m", |g| g.matmul(a, b))?;
            Ok(())
        })
        .unwrap();
        assert_eq!(n, 48);
    }
}
