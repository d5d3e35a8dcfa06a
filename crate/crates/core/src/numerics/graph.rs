//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a Wengert list: every primitive appends one node holding its
//! forward value and whatever the vector-Jacobian product needs later.
//! Nodes only reference earlier nodes, so walking the list backwards visits
//! each node once, after all of its consumers. Gradients from fan-out are
//! summed into one buffer per node.

use std::collections::BTreeMap;

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{strides, Tensor};
use crate::error::{FlapError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Norm floor used by [`Graph::l2_normalize`] and [`Graph::cosine_similarity`].
pub const NORM_EPS: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Reshape(Var),
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    WeightedPool {
        x: Var,
        weights: Vec<f64>,
        n: usize,
        d: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        index: Vec<Vec<usize>>,
        n: usize,
        d: usize,
    },
    Scatter {
        visible: Var,
        fill: Var,
        kept: Vec<Vec<usize>>,
        n: usize,
        d: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedMse {
        pred: Var,
        target: Vec<f64>,
        masked: Vec<bool>,
        count: usize,
    },
    Conv3x3 {
        input: Var,
        kernel: Var,
        bias: Var,
        dims: [usize; 4],
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of primitive applications plus the gradients of the last backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    flops: BTreeMap<String, u64>,
    scope: String,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with_flag(value, op, requires_grad)
    }

    fn push_with_flag(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.grad = None;
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let flag = tensor.requires_grad;
        self.push_with_flag(tensor, Op::Leaf, flag)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push_with_flag(tensor, Op::Leaf, true)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_with_flag(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Value of `v` with its gradient attached.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        t.grad = self.grad(v).map(<[f64]>::to_vec);
        t
    }

    // ---- FLOP accounting -------------------------------------------------

    /// Runs `f` with matmul FLOPs attributed to `scope`.
    pub fn scoped<R>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = std::mem::replace(&mut self.scope, scope.to_string());
        let out = f(self);
        self.scope = saved;
        out
    }

    fn count_flops(&mut self, flops: u64) {
        *self.flops.entry(self.scope.clone()).or_default() += flops;
    }

    /// Matmul FLOPs (2 per multiply-accumulate) recorded under `scope`.
    pub fn flops_in(&self, scope: &str) -> u64 {
        self.flops.get(scope).copied().unwrap_or(0)
    }

    pub fn flops_total(&self) -> u64 {
        self.flops.values().sum()
    }

    // ---- elementwise -----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(FlapError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn row_operand(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let width = *self.shape(x).last().expect("rank >= 1");
        if self.shape(row) != [width] {
            return Err(FlapError::shape(
                op,
                format!("{:?} cannot broadcast over {:?}", self.shape(row), self.shape(x)),
            ));
        }
        Ok(width)
    }

    /// `x + bias` with `bias` broadcast along the last axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let width = self.row_operand("add_row", x, bias)?;
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(width) {
            chunk.iter_mut().zip(b).for_each(|(o, &v)| *o += v);
        }
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `x * gain` with `gain` broadcast along the last axis.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let width = self.row_operand("mul_row", x, gain)?;
        let g = self.value(gain).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(width) {
            chunk.iter_mut().zip(g).for_each(|(o, &v)| *o *= v);
        }
        Ok(self.push(out, Op::MulRow(x, gain), &[x, gain]))
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(FlapError::shape(
                "add_const",
                format!("{:?} vs {:?}", self.shape(x), c.shape()),
            ));
        }
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(c.data()).for_each(|(o, &v)| *o += v);
        Ok(self.push(out, Op::AddConst(x), &[x]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// `x * s` where `s` is a one-element node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(FlapError::shape(
                "mul_scalar",
                format!("scalar operand has shape {:?}", self.shape(s)),
            ));
        }
        let factor = self.item(s);
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        Ok(self.push(out, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v.exp()).collect()).expect("shape");
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(t.shape(), data).expect("shape");
        self.push(out, Op::Gelu(x), &[x])
    }

    // ---- products --------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(FlapError::shape("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.count_flops(2 * (m * k * n) as u64);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched product over the leading axis: `a[b,m,k] @ b[b,k,n]`, or
    /// `a[b,m,k] @ b[b,n,k]ᵀ` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let inner_b = if transpose_b { sb.get(2) } else { sb.get(1) };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || Some(&sa[2]) != inner_b {
            return Err(FlapError::shape(
                "bmm",
                format!("{sa:?} @ {sb:?}{}", if transpose_b { "ᵀ" } else { "" }),
            ));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let ci = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                gemm_nt(ai, bi, ci, m, k, n);
            } else {
                gemm_nn(ai, bi, ci, m, k, n);
            }
        }
        self.count_flops(2 * (batch * m * k * n) as u64);
        let out = Tensor::new(&[batch, m, n], out)?;
        let op = Op::Bmm {
            a,
            b,
            batch,
            m,
            k,
            n,
            transpose_b,
        };
        Ok(self.push(out, op, &[a, b]))
    }

    // ---- layout ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() || std::mem::replace(&mut seen[a], true) {
                return Err(FlapError::shape(
                    "permute",
                    format!("axes {axes:?} are not a permutation for {shape:?}"),
                ));
            }
        }
        if axes.len() != shape.len() {
            return Err(FlapError::shape(
                "permute",
                format!("axes {axes:?} are not a permutation for {shape:?}"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(&shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let numel = self.value(x).numel();
        let mut map = Vec::with_capacity(numel);
        let mut counter = vec![0usize; shape.len()];
        let mut src = 0usize;
        for _ in 0..numel {
            map.push(src);
            for ax in (0..counter.len()).rev() {
                counter[ax] += 1;
                src += src_strides[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                src -= src_strides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        let data = self.value(x).data();
        let out = Tensor::new(&out_shape, map.iter().map(|&i| data[i]).collect())?;
        Ok(self.push(out, Op::Permute { x, map }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(FlapError::shape(
                "transpose",
                format!("expected a matrix, got {:?}", self.shape(x)),
            ));
        }
        self.permute(x, &[1, 0])
    }

    // ---- normalisation and reductions ------------------------------------

    /// Softmax along the last axis, computed after subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(FlapError::Numeric {
                op: "softmax",
                detail: "NaN in input".into(),
            });
        }
        let width = *t.shape().last().expect("rank >= 1");
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(width) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Layer normalisation over the last axis with affine `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(FlapError::Config(format!("layernorm eps must be > 0, got {eps}")));
        }
        let width = self.row_operand("layernorm", x, gain)?;
        self.row_operand("layernorm", x, bias)?;
        let t = self.value(x);
        let rows = t.numel() / width;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, row) in t.data().chunks(width).enumerate() {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (h, &v) in xhat[r * width..(r + 1) * width].iter_mut().zip(row) {
                *h = (v - mean) * s;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(width) {
            for ((o, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let out = Tensor::new(self.shape(x), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(out, op, &[x, gain, bias]))
    }

    /// `out[b,:] = Σ_n weights[b][n] · x[b,n,:]` for `x` of shape `[B,N,D]`.
    pub fn weighted_pool(&mut self, x: Var, weights: &[Vec<f64>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || weights.len() != shape[0] || weights.iter().any(|w| w.len() != shape[1]) {
            return Err(FlapError::shape(
                "weighted_pool",
                format!("weights do not match input {shape:?}"),
            ));
        }
        let (bsz, n, d) = (shape[0], shape[1], shape[2]);
        let data = self.value(x).data();
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            let o = &mut out[b * d..(b + 1) * d];
            for (i, &w) in weights[b].iter().enumerate() {
                let row = &data[(b * n + i) * d..(b * n + i + 1) * d];
                o.iter_mut().zip(row).for_each(|(o, &v)| *o += w * v);
            }
        }
        let out = Tensor::new(&[bsz, d], out)?;
        let op = Op::WeightedPool {
            x,
            weights: weights.concat(),
            n,
            d,
        };
        Ok(self.push(out, op, &[x]))
    }

    /// Mean over axis 1 of a `[B,N,D]` tensor.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(FlapError::shape(
                "mean_pool",
                format!("expected [B,N,D], got {shape:?}"),
            ));
        }
        let w = vec![vec![1.0 / shape[1] as f64; shape[1]]; shape[0]];
        self.weighted_pool(x, &w)
    }

    /// Scales each last-axis row to unit L2 norm; norms below [`NORM_EPS`]
    /// are floored.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let width = *t.shape().last().expect("rank >= 1");
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.numel() / width);
        for row in out.data_mut().chunks_mut(width) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            let denom = norm.max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= denom);
        }
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    /// `aᵀb / (‖a‖‖b‖)` over all elements, each norm floored at [`NORM_EPS`].
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let na = dot(da, da).sqrt().max(NORM_EPS);
        let nb = dot(db, db).sqrt().max(NORM_EPS);
        let out = Tensor::scalar(dot(da, db) / (na * nb));
        Ok(self.push(out, Op::Cosine { a, b }, &[a, b]))
    }

    /// Mean over rows of `logsumexp(row) - row[target]` for `logits[R,C]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || targets.len() != shape[0] || targets.iter().any(|&t| t >= shape[1]) {
            return Err(FlapError::shape(
                "cross_entropy_rows",
                format!("{} targets for logits {shape:?}", targets.len()),
            ));
        }
        let cols = shape[1];
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(cols).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / shape[0] as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(out, op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    // ---- indexing --------------------------------------------------------

    /// Selects rows per batch item: `out[b,j,:] = x[b, index[b][j], :]`.
    pub fn gather_rows(&mut self, x: Var, index: &[Vec<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || index.len() != shape[0] {
            return Err(FlapError::shape(
                "gather_rows",
                format!("{} index lists for input {shape:?}", index.len()),
            ));
        }
        let (n, d) = (shape[1], shape[2]);
        let kept = index[0].len();
        if kept == 0 || index.iter().any(|ix| ix.len() != kept || ix.iter().any(|&i| i >= n)) {
            return Err(FlapError::shape(
                "gather_rows",
                format!("ragged or out-of-range index for N={n}"),
            ));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(shape[0] * kept * d);
        for (b, ix) in index.iter().enumerate() {
            for &i in ix {
                out.extend_from_slice(&data[(b * n + i) * d..(b * n + i + 1) * d]);
            }
        }
        let out = Tensor::new(&[shape[0], kept, d], out)?;
        let op = Op::Gather {
            x,
            index: index.to_vec(),
            n,
            d,
        };
        Ok(self.push(out, op, &[x]))
    }

    /// Inverse of [`Graph::gather_rows`]: rows of `visible[B,N',D]` go back to
    /// their `kept` positions in a length-`n` sequence, every other position
    /// receives `fill[D]`.
    pub fn scatter_rows(&mut self, visible: Var, fill: Var, kept: &[Vec<usize>], n: usize) -> Result<Var> {
        let shape = self.shape(visible).to_vec();
        if shape.len() != 3
            || kept.len() != shape[0]
            || kept.iter().any(|k| k.len() != shape[1] || k.iter().any(|&i| i >= n))
        {
            return Err(FlapError::shape(
                "scatter_rows",
                format!("kept lists do not match visible {shape:?} for N={n}"),
            ));
        }
        let d = shape[2];
        if self.shape(fill) != [d] {
            return Err(FlapError::shape(
                "scatter_rows",
                format!("fill {:?} for width {d}", self.shape(fill)),
            ));
        }
        let (vis, f) = (self.value(visible).data(), self.value(fill).data());
        let mut out = Vec::with_capacity(shape[0] * n * d);
        for _ in 0..shape[0] * n {
            out.extend_from_slice(f);
        }
        for (b, ks) in kept.iter().enumerate() {
            for (j, &i) in ks.iter().enumerate() {
                out[(b * n + i) * d..(b * n + i + 1) * d]
                    .copy_from_slice(&vis[(b * shape[1] + j) * d..(b * shape[1] + j + 1) * d]);
            }
        }
        let out = Tensor::new(&[shape[0], n, d], out)?;
        let op = Op::Scatter {
            visible,
            fill,
            kept: kept.to_vec(),
            n,
            d,
        };
        Ok(self.push(out, op, &[visible, fill]))
    }

    /// Looks up rows of `table[V,D]`; output shape is `ids_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.iter().any(|&i| i >= shape[0]) {
            return Err(FlapError::shape(
                "embedding",
                format!("id out of range for table {shape:?}"),
            ));
        }
        let d = shape[1];
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
        }
        let mut out_shape = ids_shape.to_vec();
        out_shape.push(d);
        let out = Tensor::new(&out_shape, out)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(out, op, &[table]))
    }

    // ---- losses and convolution -------------------------------------------

    /// Mean over the `masked` rows of the per-row mean squared error between
    /// `pred[B,N,P]` and a constant target. Zero when no row is masked.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor, masked: &[bool]) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if target.shape() != shape.as_slice() || shape.len() != 3 || masked.len() != shape[0] * shape[1] {
            return Err(FlapError::shape(
                "masked_mse",
                format!(
                    "pred {shape:?}, target {:?}, {} mask flags",
                    target.shape(),
                    masked.len()
                ),
            ));
        }
        let p = shape[2];
        let count = masked.iter().filter(|&&m| m).count();
        let mut loss = 0.0;
        if count > 0 {
            let pd = self.value(pred).data();
            for (r, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
                let err: f64 = pd[r * p..(r + 1) * p]
                    .iter()
                    .zip(&target.data()[r * p..(r + 1) * p])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                loss += err / p as f64;
            }
            loss /= count as f64;
        }
        let op = Op::MaskedMse {
            pred,
            target: target.data().to_vec(),
            masked: masked.to_vec(),
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[pred]))
    }

    /// Same-size 3×3 convolution with zero padding, `C` input channels to one
    /// output channel: `input[B,C,H,W]`, `kernel[C,3,3]`, `bias[1]` → `[B,H,W]`.
    pub fn conv3x3(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || self.shape(kernel) != [s[1], 3, 3] || self.shape(bias) != [1] {
            return Err(FlapError::shape(
                "conv3x3",
                format!(
                    "input {s:?}, kernel {:?}, bias {:?}",
                    self.shape(kernel),
                    self.shape(bias)
                ),
            ));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let [bsz, c, h, w] = dims;
        let (x, k) = (self.value(input).data(), self.value(kernel).data());
        let b0 = self.item(bias);
        let mut out = vec![b0; bsz * h * w];
        conv_taps(dims, |oi, xi, ki| out[oi] += x[xi] * k[ki]);
        self.count_flops(2 * (bsz * c * h * w * 9) as u64);
        let out = Tensor::new(&[bsz, h, w], out)?;
        let op = Op::Conv3x3 {
            input,
            kernel,
            bias,
            dims,
        };
        Ok(self.push(out, op, &[input, kernel, bias]))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates d`loss`/d`node` for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(FlapError::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.backprop_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut slot = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.0];
            if node.requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
                f(buf);
            }
        };
        let add_into = |buf: &mut [f64], src: &[f64]| {
            buf.iter_mut().zip(src).for_each(|(b, &s)| *b += s);
        };

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                slot(*a, &mut |buf| add_into(buf, g));
                slot(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                slot(*a, &mut |buf| add_into(buf, g));
                slot(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(b, &s)| *b -= s));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                slot(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * vb[i];
                    }
                });
                slot(*b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddRow(x, bias) => {
                slot(*x, &mut |buf| add_into(buf, g));
                slot(*bias, &mut |buf| {
                    let w = buf.len();
                    for chunk in g.chunks(w) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::MulRow(x, gain) => {
                let (vx, vg) = (val(*x), val(*gain));
                let w = vg.len();
                slot(*x, &mut |buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += g[i] * vg[i % w];
                    }
                });
                slot(*gain, &mut |buf| {
                    for (i, (&gi, &xi)) in g.iter().zip(vx).enumerate() {
                        buf[i % w] += gi * xi;
                    }
                });
            }
            Op::AddConst(x) | Op::Reshape(x) => slot(*x, &mut |buf| add_into(buf, g)),
            Op::Scale(x, factor) => slot(*x, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(b, &s)| *b += factor * s)
            }),
            Op::MulScalar(x, s) => {
                let factor = val(*s)[0];
                let vx = val(*x);
                slot(*x, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, &gi)| *b += factor * gi)
                });
                slot(*s, &mut |buf| buf[0] += dot(g, vx));
            }
            Op::Exp(x) => {
                let y = nodes[id].value.data();
                slot(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * y[i];
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                slot(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        let v = vx[i];
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        buf[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            &Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (val(a), val(b));
                slot(a, &mut |buf| gemm_nt(g, vb, buf, m, n, k));
                slot(b, &mut |buf| gemm_tn(va, g, buf, k, m, n));
            }
            &Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            } => {
                let (va, vb) = (val(a), val(b));
                slot(a, &mut |buf| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        let out = &mut buf[i * m * k..(i + 1) * m * k];
                        if transpose_b {
                            gemm_nn(gi, bi, out, m, n, k);
                        } else {
                            gemm_nt(gi, bi, out, m, n, k);
                        }
                    }
                });
                slot(b, &mut |buf| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let out = &mut buf[i * k * n..(i + 1) * k * n];
                        if transpose_b {
                            gemm_tn(gi, ai, out, n, m, k);
                        } else {
                            gemm_tn(ai, gi, out, k, m, n);
                        }
                    }
                });
            }
            Op::Permute { x, map } => slot(*x, &mut |buf| {
                for (o, &src) in map.iter().enumerate() {
                    buf[src] += g[o];
                }
            }),
            Op::Softmax(x) => {
                let y = nodes[id].value.data();
                let w = *nodes[id].value.shape().last().expect("rank >= 1");
                slot(*x, &mut |buf| {
                    for ((bo, go), yo) in buf.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                        let s = dot(go, yo);
                        for i in 0..w {
                            bo[i] += yo[i] * (go[i] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let vg = val(*gain);
                let w = vg.len();
                slot(*x, &mut |buf| {
                    let mut dxhat = vec![0.0; w];
                    for (r, (bo, go)) in buf.chunks_mut(w).zip(g.chunks(w)).enumerate() {
                        let h = &xhat[r * w..(r + 1) * w];
                        for i in 0..w {
                            dxhat[i] = go[i] * vg[i];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / w as f64;
                        let mean_dh = dot(&dxhat, h) / w as f64;
                        for i in 0..w {
                            bo[i] += rstd[r] * (dxhat[i] - mean_d - h[i] * mean_dh);
                        }
                    }
                });
                slot(*gain, &mut |buf| {
                    for (go, h) in g.chunks(w).zip(xhat.chunks(w)) {
                        for i in 0..w {
                            buf[i] += go[i] * h[i];
                        }
                    }
                });
                slot(*bias, &mut |buf| {
                    for go in g.chunks(w) {
                        add_into(buf, go);
                    }
                });
            }
            Op::WeightedPool { x, weights, n, d } => {
                let (n, d) = (*n, *d);
                slot(*x, &mut |buf| {
                    for (r, &w) in weights.iter().enumerate() {
                        let b = r / n;
                        let go = &g[b * d..(b + 1) * d];
                        buf[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(o, &gv)| *o += w * gv);
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let y = nodes[id].value.data();
                let w = y.len() / norms.len();
                slot(*x, &mut |buf| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let (go, yo) = (&g[r * w..(r + 1) * w], &y[r * w..(r + 1) * w]);
                        let bo = &mut buf[r * w..(r + 1) * w];
                        if norm > NORM_EPS {
                            let s = dot(go, yo);
                            for i in 0..w {
                                bo[i] += (go[i] - yo[i] * s) / norm;
                            }
                        } else {
                            for i in 0..w {
                                bo[i] += go[i] / NORM_EPS;
                            }
                        }
                    }
                });
            }
            Op::Cosine { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let s = nodes[id].value.data()[0];
                let (ra, rb) = (dot(va, va).sqrt(), dot(vb, vb).sqrt());
                let (na, nb) = (ra.max(NORM_EPS), rb.max(NORM_EPS));
                let g0 = g[0];
                // The floored norm is constant below NORM_EPS, so its own
                // derivative term drops out there.
                let term_a = if ra > NORM_EPS { s / (na * na) } else { 0.0 };
                let term_b = if rb > NORM_EPS { s / (nb * nb) } else { 0.0 };
                slot(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g0 * (vb[i] / (na * nb) - term_a * va[i]);
                    }
                });
                slot(*b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g0 * (va[i] / (na * nb) - term_b * vb[i]);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                let scale = g[0] / rows as f64;
                slot(*logits, &mut |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            buf[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => slot(*x, &mut |buf| buf.iter_mut().for_each(|b| *b += g[0])),
            Op::Mean(x) => slot(*x, &mut |buf| {
                let s = g[0] / buf.len() as f64;
                buf.iter_mut().for_each(|b| *b += s);
            }),
            Op::Gather { x, index, n, d } => {
                let (n, d) = (*n, *d);
                let kept = index[0].len();
                slot(*x, &mut |buf| {
                    for (b, ix) in index.iter().enumerate() {
                        for (j, &i) in ix.iter().enumerate() {
                            let go = &g[(b * kept + j) * d..(b * kept + j + 1) * d];
                            add_into(&mut buf[(b * n + i) * d..(b * n + i + 1) * d], go);
                        }
                    }
                });
            }
            Op::Scatter {
                visible,
                fill,
                kept,
                n,
                d,
            } => {
                let (n, d) = (*n, *d);
                let nk = kept[0].len();
                slot(*visible, &mut |buf| {
                    for (b, ks) in kept.iter().enumerate() {
                        for (j, &i) in ks.iter().enumerate() {
                            let go = &g[(b * n + i) * d..(b * n + i + 1) * d];
                            add_into(&mut buf[(b * nk + j) * d..(b * nk + j + 1) * d], go);
                        }
                    }
                });
                slot(*fill, &mut |buf| {
                    for (b, ks) in kept.iter().enumerate() {
                        let mut is_kept = vec![false; n];
                        ks.iter().for_each(|&i| is_kept[i] = true);
                        for i in (0..n).filter(|&i| !is_kept[i]) {
                            add_into(buf, &g[(b * n + i) * d..(b * n + i + 1) * d]);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                slot(*table, &mut |buf| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut buf[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::MaskedMse {
                pred,
                target,
                masked,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vp = val(*pred);
                let p = vp.len() / masked.len();
                let scale = g[0] * 2.0 / (*count as f64 * p as f64);
                slot(*pred, &mut |buf| {
                    for (r, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
                        for i in r * p..(r + 1) * p {
                            buf[i] += scale * (vp[i] - target[i]);
                        }
                    }
                });
            }
            Op::Conv3x3 {
                input,
                kernel,
                bias,
                dims,
            } => {
                let (x, k) = (val(*input), val(*kernel));
                slot(*input, &mut |buf| {
                    conv_taps(*dims, |oi, xi, ki| buf[xi] += g[oi] * k[ki])
                });
                slot(*kernel, &mut |buf| {
                    conv_taps(*dims, |oi, xi, ki| buf[ki] += g[oi] * x[xi])
                });
                slot(*bias, &mut |buf| buf[0] += g.iter().sum::<f64>());
            }
        }
    }
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Visits every (output, input, kernel) flat-index triple of a zero-padded
/// same-size 3×3 convolution.
fn conv_taps(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let [bsz, c, h, w] = dims;
    for b in 0..bsz {
        for ch in 0..c {
            for dy in 0..3 {
                for dx in 0..3 {
                    let ki = ch * 9 + dy * 3 + dx;
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx + dx;
                            if sx < 1 || sx > w {
                                continue;
                            }
                            let xi = ((b * c + ch) * h + sy - 1) * w + sx - 1;
                            f((b * h + y) * w + xx, xi, ki);
                        }
                    }
                }
            }
        }
    }
}
