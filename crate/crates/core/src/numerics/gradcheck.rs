use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{FlapError, Result};

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the worst `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` receives a fresh graph and the leaf holding `x`; it must return a
/// one-element node.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// [`grad_check`] restricted to the listed flat coordinates of `x`.
pub fn grad_check_coords<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    g.backward(out)?;
    let analytic = g
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |shifted: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(shifted);
        let out = f(&mut g, leaf)?;
        if g.value(out).numel() != 1 {
            return Err(FlapError::shape("grad_check", "function must return a scalar"));
        }
        Ok(g.item(out))
    };

    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_at_one_two_three() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0, 6.0]);

        let err = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }
}
