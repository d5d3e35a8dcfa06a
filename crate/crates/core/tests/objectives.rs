use flap::masking::plan_mask_1d;
use flap::numerics::{grad_check, seeded, Graph, Stream, Tensor};
use flap::objectives::{info_nce, info_nce_value, reconstruction_mse};
use rand::Rng as _;

fn unit_rows(seed: u64, b: usize, d: usize) -> Tensor {
    let mut rng = seeded(seed, Stream::Synth);
    let mut t = Tensor::from_fn(&[b, d], |_| rng.gen_range(-1.0..1.0));
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.data()[i * d..(i + 1) * d].to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn loss_is_positive_and_permutation_equivariant() {
    for seed in 0..20 {
        let a = unit_rows(seed, 5, 8);
        let t = unit_rows(seed + 100, 5, 8);
        let perm = [3, 0, 4, 1, 2];
        for sym in [false, true] {
            let l = info_nce_value(&a, &t, 0.07, sym).unwrap();
            assert!(l > 0.0);
            let lp = info_nce_value(&permute_rows(&a, &perm), &permute_rows(&t, &perm), 0.07, sym).unwrap();
            assert!((l - lp).abs() < 1e-12);
        }
    }
}

#[test]
fn info_nce_gradient_matches_finite_differences() {
    let t = unit_rows(7, 4, 8);
    let raw = Tensor::from_fn(&[4, 8], |i| (i as f64 * 0.7).cos());
    // Normalise inside the graph so perturbed inputs stay on the sphere.
    let err = grad_check(
        |g: &mut Graph, x| {
            let a = g.l2_normalize(x);
            let tv = g.constant(t.clone());
            let lt = g.constant(Tensor::scalar(0.07f64.ln()));
            info_nce(g, a, tv, lt, true)
        },
        &raw,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");

    let err = grad_check(
        |g: &mut Graph, x| {
            let a = g.constant(unit_rows(1, 4, 8));
            let tv = g.constant(t.clone());
            info_nce(g, a, tv, x, false)
        },
        &Tensor::scalar(0.2f64.ln()),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn reconstruction_gradient_only_touches_masked_patches() {
    let plan = plan_mask_1d(6, 0.5, 2, &mut seeded(2, Stream::Mask)).unwrap();
    let target = Tensor::from_fn(&[2, 6, 3], |i| (i as f64).sin());
    let pred = Tensor::from_fn(&[2, 6, 3], |i| (i as f64 * 0.3).cos());
    let mut g = Graph::new();
    let p = g.param(pred.clone());
    let (l, _) = reconstruction_mse(&mut g, p, &target, &plan).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(p).unwrap().to_vec();
    for b in 0..2 {
        for &i in &plan.kept[b] {
            assert!(grad[(b * 6 + i) * 3..(b * 6 + i + 1) * 3].iter().all(|&v| v == 0.0));
        }
    }
    let err = grad_check(
        |g: &mut Graph, x| Ok(reconstruction_mse(g, x, &target, &plan)?.0),
        &pred,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}
