//! Contrastive and reconstruction losses.
//!
//! `info_nce` is row-wise cross-entropy over `S/τ` with diagonal targets,
//! where `S[i][j] = a_i · t_j` for unit rows. With `symmetric` the text→audio
//! direction (columns) is averaged in. `reconstruction_mse` averages the
//! per-patch mean squared error over dropped patches only.

use serde::{Deserialize, Serialize};

use crate::error::{FlapError, Result};
use crate::masking::MaskPlan;
use crate::numerics::{Graph, Tensor, Var};

pub const NORM_TOLERANCE: f64 = 1e-6;
pub const MIN_TEMPERATURE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub contrastive: f64,
    pub reconstruction: f64,
    pub total: f64,
    pub temperature: f64,
    pub recon_weight: f64,
    /// False when the plan dropped nothing, so the reconstruction term is 0.
    pub reconstruction_active: bool,
}

/// Graph handles for a combined loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub contrastive: Var,
    pub reconstruction: Var,
    pub total: Var,
}

fn check_unit_rows(what: &str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(FlapError::shape(
            "info_nce",
            format!("{what} has shape {:?}", t.shape()),
        ));
    }
    let d = t.shape()[1];
    for (i, row) in t.data().chunks(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(FlapError::Contract(format!(
                "{what} row {i} has norm {norm}, expected unit length"
            )));
        }
    }
    Ok(())
}

fn check_temperature(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(FlapError::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// InfoNCE on the graph. `log_tau` is a one-element node holding `ln τ`.
pub fn info_nce(g: &mut Graph, audio: Var, text: Var, log_tau: Var, symmetric: bool) -> Result<Var> {
    check_unit_rows("audio embedding", g.value(audio))?;
    check_unit_rows("text embedding", g.value(text))?;
    check_temperature(g.item(log_tau).exp())?;
    let (ba, bt) = (g.shape(audio)[0], g.shape(text)[0]);
    if ba != bt || g.shape(audio)[1] != g.shape(text)[1] {
        return Err(FlapError::shape(
            "info_nce",
            format!("audio {:?} vs text {:?}", g.shape(audio), g.shape(text)),
        ));
    }
    let tt = g.transpose(text)?;
    let sim = g.matmul(audio, tt)?;
    let neg = g.scale(log_tau, -1.0);
    let inv_tau = g.exp(neg);
    let logits = g.mul_scalar(sim, inv_tau)?;
    let targets: Vec<usize> = (0..ba).collect();
    let a2t = g.cross_entropy_rows(logits, &targets)?;
    if !symmetric {
        return Ok(a2t);
    }
    let lt = g.transpose(logits)?;
    let t2a = g.cross_entropy_rows(lt, &targets)?;
    let both = g.add(a2t, t2a)?;
    Ok(g.scale(both, 0.5))
}

/// Value-level InfoNCE at a fixed temperature.
pub fn info_nce_value(audio: &Tensor, text: &Tensor, tau: f64, symmetric: bool) -> Result<f64> {
    check_temperature(tau)?;
    let mut g = Graph::new();
    let a = g.constant(audio.clone());
    let t = g.constant(text.clone());
    let lt = g.constant(Tensor::scalar(tau.ln()));
    let loss = info_nce(&mut g, a, t, lt, symmetric)?;
    Ok(g.item(loss))
}

/// Masked-patch MSE and whether any patch was masked.
pub fn reconstruction_mse(g: &mut Graph, reconstructed: Var, target: &Tensor, plan: &MaskPlan) -> Result<(Var, bool)> {
    let shape = g.shape(reconstructed).to_vec();
    if shape.len() != 3 || shape[0] != plan.batch_size() || shape[1] != plan.n {
        return Err(FlapError::shape(
            "reconstruction_mse",
            format!(
                "reconstruction {shape:?} does not match plan B={} N={}",
                plan.batch_size(),
                plan.n
            ),
        ));
    }
    let loss = g.masked_mse(reconstructed, target, &plan.masked_flags())?;
    Ok((loss, !plan.is_keep_all()))
}

/// `contrastive + λ_r · reconstruction`; pass `None` when the decoder is off.
pub fn combined_loss(
    g: &mut Graph,
    contrastive: Var,
    reconstruction: Option<(Var, bool)>,
    log_tau: Var,
    recon_weight: f64,
) -> Result<(LossVars, LossReport)> {
    let (recon, active) = match reconstruction {
        Some(r) => r,
        None => (g.constant(Tensor::scalar(0.0)), false),
    };
    let weighted = g.scale(recon, recon_weight);
    let total = g.add(contrastive, weighted)?;
    let report = LossReport {
        contrastive: g.item(contrastive),
        reconstruction: g.item(recon),
        total: g.item(total),
        temperature: g.item(log_tau).exp(),
        recon_weight,
        reconstruction_active: active,
    };
    Ok((
        LossVars {
            contrastive,
            reconstruction: recon,
            total,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::plan_mask_1d;
    use crate::numerics::{seeded, Stream};

    fn unit(rows: &[&[f64]]) -> Tensor {
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        Tensor::from_rows(&normed).unwrap()
    }

    #[test]
    fn single_pair_is_zero() {
        let a = unit(&[&[1.0, 2.0]]);
        let t = unit(&[&[-3.0, 1.0]]);
        assert_eq!(info_nce_value(&a, &t, 0.07, false).unwrap(), 0.0);
        assert_eq!(info_nce_value(&a, &t, 0.07, true).unwrap(), 0.0);
    }

    #[test]
    fn identical_rows_give_log_batch() {
        let r: &[f64] = &[1.0, 0.0];
        let a = unit(&[r; 4]);
        let l = info_nce_value(&a, &a, 0.07, true).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contract_and_config_errors() {
        let bad = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let ok = unit(&[&[1.0, 1.0]]);
        assert!(matches!(
            info_nce_value(&bad, &ok, 0.1, true),
            Err(FlapError::Contract(_))
        ));
        assert!(matches!(info_nce_value(&ok, &ok, 0.0, true), Err(FlapError::Config(_))));
        assert!(matches!(
            info_nce_value(&ok, &ok, -1.0, true),
            Err(FlapError::Config(_))
        ));
    }

    #[test]
    fn sharper_temperature_lowers_loss_when_diagonal_dominates() {
        let a = unit(&[&[1.0, 0.1, 0.0], &[0.0, 1.0, 0.2], &[0.1, 0.0, 1.0]]);
        let t = unit(&[&[1.0, 0.0, 0.1], &[0.2, 1.0, 0.0], &[0.0, 0.1, 1.0]]);
        let mut last = f64::INFINITY;
        for tau in [1.0, 0.5, 0.2, 0.1, 0.05] {
            let l = info_nce_value(&a, &t, tau, false).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn hand_computed_reconstruction() {
        let plan = MaskPlan::custom(2, vec![vec![0]]).unwrap();
        let mut g = Graph::new();
        let target = Tensor::zeros(&[1, 2, 4]);
        let pred = g.leaf(Tensor::from_fn(&[1, 2, 4], |i| if i < 4 { 7.0 } else { 1.0 }));
        let (l, active) = reconstruction_mse(&mut g, pred, &target, &plan).unwrap();
        assert!(active);
        assert_eq!(g.item(l), 1.0);

        let all = MaskPlan::keep_all(2, 1);
        let (l, active) = reconstruction_mse(&mut g, pred, &target, &all).unwrap();
        assert!(!active);
        assert_eq!(g.item(l), 0.0);
    }

    #[test]
    fn combined_total_follows_weight() {
        let mut g = Graph::new();
        let c = g.leaf(Tensor::scalar(2.0));
        let r = g.leaf(Tensor::scalar(0.5));
        let lt = g.leaf(Tensor::scalar(0.07f64.ln()));
        let (_, rep) = combined_loss(&mut g, c, Some((r, true)), lt, 0.0).unwrap();
        assert_eq!(rep.total, 2.0);
        let (_, rep) = combined_loss(&mut g, c, Some((r, true)), lt, 2.0).unwrap();
        assert_eq!(rep.total, 3.0);
        assert!((rep.temperature - 0.07).abs() < 1e-15);
        let (_, rep) = combined_loss(&mut g, c, None, lt, 1.0).unwrap();
        assert_eq!(rep.total, 2.0);
    }

    #[test]
    fn visible_targets_do_not_matter() {
        let plan = plan_mask_1d(6, 0.5, 2, &mut seeded(3, Stream::Mask)).unwrap();
        let pred_t = Tensor::from_fn(&[2, 6, 3], |i| (i as f64 * 0.37).sin());
        let target = Tensor::from_fn(&[2, 6, 3], |i| (i as f64 * 0.11).cos());
        let mut other = target.clone();
        for (b, ks) in plan.kept.iter().enumerate() {
            for &k in ks {
                for e in 0..3 {
                    other.data_mut()[(b * 6 + k) * 3 + e] += 100.0;
                }
            }
        }
        let mut g = Graph::new();
        let p = g.leaf(pred_t);
        let (l1, _) = reconstruction_mse(&mut g, p, &target, &plan).unwrap();
        let (l2, _) = reconstruction_mse(&mut g, p, &other, &plan).unwrap();
        assert_eq!(g.item(l1), g.item(l2));
    }
}
