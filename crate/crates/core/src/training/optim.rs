use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{FlapError, Result};
use crate::numerics::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(FlapError::Numeric {
                op: "adam_step",
                detail: format!("non-finite gradient {} at element {i} of {name}", g[i]),
            });
        }
        let p = params.get(name)?;
        if p.numel() != g.len() {
            return Err(FlapError::shape(
                "adam_step",
                format!("{name} has {} values but {} gradients", p.numel(), g.len()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|v| *v *= s);
    }
    norm
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to 0
/// at `total`.
pub fn lr_at(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    const CFG: AdamConfig = AdamConfig {
        beta1: 0.99,
        beta2: 0.9,
        eps: 1e-8,
    };

    fn store(x: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(x));
        p
    }

    #[test]
    fn unit_gradient_moves_by_lr() {
        let mut p = store(1.0);
        let mut s = OptimizerState::default();
        let g = BTreeMap::from([("x".to_string(), vec![1.0])]);
        adam_step(&mut p, &g, &mut s, 0.1, CFG).unwrap();
        assert!((p.get("x").unwrap().item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = store(3.0);
        let mut s = OptimizerState::default();
        let g = BTreeMap::from([("x".to_string(), vec![0.0])]);
        adam_step(&mut p, &g, &mut s, 0.1, CFG).unwrap();
        assert_eq!(p.get("x").unwrap().item(), 3.0);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = store(3.0);
        let mut s = OptimizerState::default();
        let g = BTreeMap::from([("x".to_string(), vec![f64::NAN])]);
        let err = adam_step(&mut p, &g, &mut s, 0.1, CFG).unwrap_err().to_string();
        assert!(err.contains("x"), "{err}");
        assert_eq!(s.step, 0);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 10, 100, 1e-4), 0.0);
        assert_eq!(lr_at(10, 10, 100, 1e-4), 1e-4);
        assert!(lr_at(100, 10, 100, 1e-4).abs() < 1e-12);
        assert!((lr_at(9, 10, 100, 1.0) - 0.9).abs() < 1e-12);
        assert_eq!(lr_at(0, 0, 10, 2.0), 2.0);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = BTreeMap::from([("a".to_string(), vec![3.0]), ("b".to_string(), vec![4.0])]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-12 && (g["b"][0] - 0.8).abs() < 1e-12);
    }
}
