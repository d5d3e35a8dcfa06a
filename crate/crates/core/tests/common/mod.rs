//! Shared fixtures for integration tests.
#![allow(dead_code)]

use flap::numerics::{grad_check, seeded, Graph, Stream, Tensor, Var};
use rand::Rng;

pub const H: f64 = 1e-5;

pub type Primitive = Box<dyn Fn(&mut Graph, Var) -> flap::Result<Var>>;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed, Stream::Init);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Weighted sum so the upstream gradient is not all ones.
pub fn probe(g: &mut Graph, y: Var, seed: u64) -> flap::Result<Var> {
    let w = g.constant(random(g.shape(y), seed ^ 0xabcdef));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

/// Worst relative error of `f` over seeds `0..seeds`.
pub fn primitive_error(shape: &[usize], f: &Primitive, seeds: u64) -> f64 {
    (0..seeds)
        .map(|seed| {
            let x = random(shape, seed);
            grad_check(
                |g, v| {
                    let y = f(g, v)?;
                    probe(g, y, seed)
                },
                &x,
                H,
            )
            .unwrap()
        })
        .fold(0.0, f64::max)
}

fn case(
    name: &'static str,
    shape: &[usize],
    f: impl Fn(&mut Graph, Var) -> flap::Result<Var> + 'static,
) -> (&'static str, Vec<usize>, Primitive) {
    (name, shape.to_vec(), Box::new(f))
}

/// Every differentiable graph primitive, each with the input it is checked on.
pub fn primitives() -> Vec<(&'static str, Vec<usize>, Primitive)> {
    let mut c = Vec::new();
    c.push(case("softmax", &[4], |g, v| g.softmax(v)));
    c.push(case("softmax rows", &[3, 5], |g, v| g.softmax(v)));
    c.push(case("gelu", &[2, 6], |g, v| Ok(g.gelu(v))));
    c.push(case("exp", &[5], |g, v| Ok(g.exp(v))));
    c.push(case("scale", &[5], |g, v| Ok(g.scale(v, -1.7))));
    c.push(case("mul self", &[4], |g, v| g.mul(v, v)));
    c.push(case("sub", &[4], |g, v| {
        let c = g.constant(Tensor::ones(&[4]));
        g.sub(c, v)
    }));
    c.push(case("layernorm x", &[3, 6], |g, v| {
        let gain = g.constant(random(&[6], 11));
        let bias = g.constant(random(&[6], 12));
        g.layernorm(v, gain, bias, 1e-5)
    }));
    c.push(case("layernorm gain", &[6], |g, v| {
        let x = g.constant(random(&[3, 6], 13));
        let bias = g.constant(random(&[6], 12));
        g.layernorm(x, v, bias, 1e-5)
    }));
    c.push(case("add_row bias", &[4], |g, v| {
        let x = g.constant(random(&[3, 4], 14));
        g.add_row(x, v)
    }));
    c.push(case("mul_row gain", &[4], |g, v| {
        let x = g.constant(random(&[3, 4], 15));
        g.mul_row(x, v)
    }));
    c.push(case("mul_scalar scalar", &[1], |g, v| {
        let x = g.constant(random(&[2, 3], 16));
        g.mul_scalar(x, v)
    }));
    c.push(case("matmul rhs", &[4, 3], |g, v| {
        let a = g.constant(random(&[2, 4], 17));
        g.matmul(a, v)
    }));
    c.push(case("bmm lhs", &[2, 3, 4], |g, v| {
        let b = g.constant(random(&[2, 4, 5], 18));
        g.bmm(v, b, false)
    }));
    c.push(case("bmm rhs", &[2, 4, 5], |g, v| {
        let a = g.constant(random(&[2, 3, 4], 19));
        g.bmm(a, v, false)
    }));
    c.push(case("bmm_nt lhs", &[2, 3, 4], |g, v| {
        let b = g.constant(random(&[2, 5, 4], 20));
        g.bmm(v, b, true)
    }));
    c.push(case("bmm_nt rhs", &[2, 5, 4], |g, v| {
        let a = g.constant(random(&[2, 3, 4], 21));
        g.bmm(a, v, true)
    }));
    c.push(case("permute", &[2, 3, 4], |g, v| g.permute(v, &[2, 0, 1])));
    c.push(case("reshape", &[2, 6], |g, v| g.reshape(v, &[3, 4])));
    c.push(case("mean_pool", &[2, 3, 4], |g, v| g.mean_pool(v)));
    c.push(case("weighted_pool", &[2, 3, 4], |g, v| {
        g.weighted_pool(v, &[vec![0.5, 0.5, 0.0], vec![0.2, 0.3, 0.5]])
    }));
    c.push(case("l2_normalize", &[3, 4], |g, v| Ok(g.l2_normalize(v))));
    c.push(case("cosine", &[6], |g, v| {
        let b = g.constant(random(&[6], 22));
        g.cosine_similarity(v, b)
    }));
    c.push(case("cross_entropy", &[3, 4], |g, v| {
        g.cross_entropy_rows(v, &[0, 3, 1])
    }));
    c.push(case("gather", &[2, 4, 3], |g, v| {
        g.gather_rows(v, &[vec![0, 2], vec![1, 3]])
    }));
    c.push(case("scatter visible", &[2, 2, 3], |g, v| {
        let fill = g.constant(random(&[3], 23));
        g.scatter_rows(v, fill, &[vec![0, 2], vec![1, 3]], 4)
    }));
    c.push(case("scatter fill", &[3], |g, v| {
        let vis = g.constant(random(&[2, 2, 3], 24));
        g.scatter_rows(vis, v, &[vec![0, 2], vec![1, 3]], 4)
    }));
    c.push(case("embedding", &[5, 3], |g, v| {
        g.embedding(v, &[0, 4, 4, 2], &[2, 2])
    }));
    c.push(case("masked_mse", &[2, 3, 4], |g, v| {
        let target = random(&[2, 3, 4], 25);
        g.masked_mse(v, &target, &[true, false, true, false, false, true])
    }));
    c.push(case("conv input", &[2, 3, 4, 5], |g, v| {
        let k = g.constant(random(&[3, 3, 3], 26));
        let b = g.constant(random(&[1], 27));
        g.conv3x3(v, k, b)
    }));
    c.push(case("conv kernel", &[3, 3, 3], |g, v| {
        let x = g.constant(random(&[2, 3, 4, 5], 28));
        let b = g.constant(random(&[1], 27));
        g.conv3x3(x, v, b)
    }));
    c.push(case("conv bias", &[1], |g, v| {
        let x = g.constant(random(&[2, 3, 4, 5], 28));
        let k = g.constant(random(&[3, 3, 3], 26));
        g.conv3x3(x, k, v)
    }));
    c
}
