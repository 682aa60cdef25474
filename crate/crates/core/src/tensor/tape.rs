use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{add_into, axpy, mm_nn, mm_nt, mm_tn, sum};
use super::{conv, Mode, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<F> {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Dropout(Var, Vec<F>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Concat {
        parts: Vec<Var>,
        dim: usize,
    },
    Narrow {
        x: Var,
        dim: usize,
        start: usize,
    },
    PadEnd {
        x: Var,
        dim: usize,
    },
    RepeatInterleave {
        x: Var,
        dim: usize,
        factor: usize,
    },
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<F>,
        weights: Vec<F>,
    },
    MeanAbsDiff(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape is single-threaded and append-only. It owns the RNG used by
/// dropout, so a fixed seed gives a reproducible graph.
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// `(outer, n, inner)` around dimension `dim`.
pub(crate) fn split_at_dim(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    let outer = shape[..dim].iter().product();
    let inner = shape[dim + 1..].iter().product();
    (outer, shape[dim], inner)
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid_scalar<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new(0)
    }
}

impl<F: Real> Tape<F> {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn into_value(mut self, v: Var) -> Tensor<F> {
        self.nodes.swap_remove(v.0).value
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() > ta.rank() || ta.shape()[ta.rank() - tb.rank()..] != *tb.shape() {
            return Err(shape_err("add_broadcast", ta.shape(), tb.shape()));
        }
        let n = tb.numel();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            add_into(tb.data(), chunk);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(F::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_scalar);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Inverted dropout: identity in eval mode, `x·m/(1-p)` with
    /// `m ~ Bernoulli(1-p)` in train mode.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !mode.is_train() || p == 0.0 {
            return Ok(x);
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout(x, mask), &[x]))
    }

    /// `x[..., din] · w[din, dout] + b[dout]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let din = *tx.shape().last().unwrap_or(&0);
        if tw.rank() != 2 || tw.shape()[0] != din {
            return Err(shape_err("linear", tx.shape(), tw.shape()));
        }
        let dout = tw.shape()[1];
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(shape_err("linear bias", tw.shape(), self.value(b).shape()));
            }
        }
        let rows = tx.numel() / din;
        let mut data = vec![F::zero(); rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in data.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        mm_nn(tx.data(), tw.data(), &mut data, rows, din, dout);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(shape, data)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// Batched matmul `a[B,M,K] · b[B,K,N]`, or `a · bᵀ` with `b[B,N,K]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(shape_err("bmm", ta.shape(), tb.shape()));
        }
        let (bt, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(shape_err("bmm", ta.shape(), tb.shape()));
        }
        let mut data = vec![F::zero(); bt * m * n];
        for i in 0..bt {
            let ab = &ta.data()[i * m * k..(i + 1) * m * k];
            let bb = &tb.data()[i * k * n..(i + 1) * k * n];
            let cb = &mut data[i * m * n..(i + 1) * m * n];
            if trans_b {
                mm_nt(ab, bb, cb, m, k, n);
            } else {
                mm_nn(ab, bb, cb, m, k, n);
            }
        }
        let out = Tensor::new(vec![bt, m, n], data)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// Reorders dimensions: output dim `i` is input dim `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || rank > 4 {
            return Err(Error::Shape(format!(
                "permute {perm:?} invalid for shape {:?}",
                tx.shape()
            )));
        }
        for &p in perm {
            if p >= rank || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Shape(format!("permute {perm:?} is not a permutation")));
            }
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| tx.shape()[p]).collect();
        let data = permute_data(tx.data(), tx.shape(), perm);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn transpose(&mut self, x: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.value(x).rank();
        if d0 >= rank || d1 >= rank {
            return Err(Error::Shape(format!("transpose({d0}, {d1}) on rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(shape_err("layer_norm", tx.shape(), self.value(p).shape()));
            }
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.numel() / d;
        let mut xhat = vec![F::zero(); tx.numel()];
        let mut inv_std = vec![F::zero(); rows];
        let mut data = vec![F::zero(); tx.numel()];
        let df = F::lit(d as f64);
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = sum(row) / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let is = F::one() / (var + F::lit(eps)).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                data[r * d + j] = xh * g[j] + bt[j];
            }
        }
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Concatenates along `dim`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], dim: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if dim >= first.len() {
            return Err(Error::Shape(format!("concat dim {dim} on shape {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != dim && a != b)
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[dim];
        }
        let (outer, _, inner) = split_at_dim(&first, dim);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let n = t.shape()[dim] * inner;
                data.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[dim] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                dim,
            },
            parts,
        ))
    }

    /// Slice `[start, start+len)` of dimension `dim`.
    pub fn narrow(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if dim >= tx.rank() || len == 0 || start + len > tx.shape()[dim] {
            return Err(Error::Shape(format!(
                "narrow(dim {dim}, {start}..{}) out of range for {:?}",
                start + len,
                tx.shape()
            )));
        }
        let (outer, n, inner) = split_at_dim(tx.shape(), dim);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&tx.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[dim] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Narrow { x, dim, start }, &[x]))
    }

    /// Appends `amount` zeros at the end of dimension `dim`.
    pub fn pad_end(&mut self, x: Var, dim: usize, amount: usize) -> Result<Var> {
        if amount == 0 {
            return Ok(x);
        }
        let tx = self.value(x);
        if dim >= tx.rank() {
            return Err(Error::Shape(format!("pad dim {dim} on {:?}", tx.shape())));
        }
        let (outer, n, inner) = split_at_dim(tx.shape(), dim);
        let m = n + amount;
        let mut data = vec![F::zero(); outer * m * inner];
        for o in 0..outer {
            data[o * m * inner..(o * m + n) * inner]
                .copy_from_slice(&tx.data()[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[dim] = m;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::PadEnd { x, dim }, &[x]))
    }

    /// Nearest-neighbour upsampling: repeats every slice of `dim` `factor` times.
    pub fn repeat_interleave(&mut self, x: Var, dim: usize, factor: usize) -> Result<Var> {
        let tx = self.value(x);
        if dim >= tx.rank() || factor == 0 {
            return Err(Error::Shape(format!(
                "repeat_interleave(dim {dim}, x{factor}) on {:?}",
                tx.shape()
            )));
        }
        let (outer, n, inner) = split_at_dim(tx.shape(), dim);
        let mut data = Vec::with_capacity(outer * n * factor * inner);
        for o in 0..outer {
            for i in 0..n {
                let src = &tx.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                for _ in 0..factor {
                    data.extend_from_slice(src);
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[dim] = n * factor;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::RepeatInterleave { x, dim, factor }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = sum(self.value(x).data());
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = sum(t.data()) / F::lit(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Weighted binary cross-entropy on logits, averaged over every element.
    ///
    /// `weights[k]` scales the terms of the last-dimension column `k`. The
    /// fused form `max(z,0) − z·y + ln(1 + e^{−|z|})` never evaluates a
    /// saturated sigmoid.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<F>, weights: &[F]) -> Result<Var> {
        let tz = self.value(logits);
        if tz.shape() != targets.shape() {
            return Err(shape_err("bce_with_logits", tz.shape(), targets.shape()));
        }
        let k = *tz.shape().last().unwrap();
        if weights.len() != k {
            return Err(Error::Shape(format!(
                "bce_with_logits: {} class weights for {k} columns",
                weights.len()
            )));
        }
        let mut acc = F::zero();
        for (i, (&z, &y)) in tz.data().iter().zip(targets.data()).enumerate() {
            let l = z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln();
            acc += weights[i % k] * l;
        }
        let loss = acc / F::lit(tz.numel() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
                weights: weights.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean absolute difference between adjacent steps of dim 1 of `[B, T, K]`:
    /// `Σ|x[b,t+1,k] − x[b,t,k]| / (B·(T−1)·K)`.
    pub fn mean_abs_diff(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 || tx.shape()[1] < 2 {
            return Err(Error::InvalidArgument(format!(
                "mean_abs_diff needs [B, T>=2, K], got {:?}",
                tx.shape()
            )));
        }
        let (b, t, k) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let d = tx.data();
        let mut acc = F::zero();
        for bi in 0..b {
            for ti in 0..t - 1 {
                let r0 = (bi * t + ti) * k;
                for ki in 0..k {
                    acc += (d[r0 + k + ki] - d[r0 + ki]).abs();
                }
            }
        }
        let loss = acc / F::lit((b * (t - 1) * k) as f64);
        Ok(self.push(Tensor::scalar(loss), Op::MeanAbsDiff(x), &[x]))
    }

    /// Gradients of a scalar node with respect to every differentiable leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_with(root, Tensor::scalar(F::one()))
    }

    /// Vector-Jacobian product: propagates `seed` (same shape as `root`).
    pub fn backward_with(&self, root: Var, seed: Tensor<F>) -> Result<Gradients<F>> {
        if seed.shape() != self.shape(root) {
            return Err(shape_err("backward seed", seed.shape(), self.shape(root)));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed.into_data());
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let n = node.value.numel();
        let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        f(buf);
    }

    fn backprop(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(g, ga));
                self.acc(grads, *b, |gb| add_into(g, gb));
            }
            Op::AddBroadcast(a, b) => {
                self.acc(grads, *a, |ga| add_into(g, ga));
                self.acc(grads, *b, |gb| {
                    let n = gb.len();
                    for chunk in g.chunks_exact(n) {
                        add_into(chunk, gb);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * vb[j];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * va[j];
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |gx| axpy(*c, g, gx)),
            Op::Relu(x) => {
                let y = out.data();
                self.acc(grads, *x, |gx| {
                    for j in 0..g.len() {
                        if y[j] > F::zero() {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.acc(grads, *x, |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j] * (F::one() - y[j]);
                    }
                });
            }
            Op::Dropout(x, mask) => self.acc(grads, *x, |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * mask[j];
                }
            }),
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (din, dout) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.numel() / din;
                self.acc(grads, *x, |gx| mm_nt(g, tw.data(), gx, rows, dout, din));
                self.acc(grads, *w, |gw| mm_tn(tx.data(), g, gw, din, rows, dout));
                if let Some(b) = b {
                    self.acc(grads, *b, |gb| {
                        for row in g.chunks_exact(dout) {
                            add_into(row, gb);
                        }
                    });
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bt, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                self.acc(grads, *a, |ga| {
                    for i in 0..bt {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bb = &tb.data()[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            mm_nn(gi, bb, gai, m, n, k);
                        } else {
                            mm_nt(gi, bb, gai, m, n, k);
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..bt {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ab = &ta.data()[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            mm_tn(gi, ab, gbi, n, m, k);
                        } else {
                            mm_tn(ab, gi, gbi, k, m, n);
                        }
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, out.shape(), &inv);
                self.acc(grads, *x, |gx| add_into(&back, gx));
            }
            Op::Reshape(x) => self.acc(grads, *x, |gx| add_into(g, gx)),
            Op::Softmax(x) => {
                let y = out.data();
                let d = *out.shape().last().unwrap();
                self.acc(grads, *x, |gx| {
                    for r in 0..y.len() / d {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dotp: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let rows = xhat.len() / d;
                self.acc(grads, *gamma, |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for row in g.chunks_exact(d) {
                        add_into(row, gb);
                    }
                });
                self.acc(grads, *x, |gx| {
                    let df = F::lit(d as f64);
                    let mut gxh = vec![F::zero(); d];
                    for r in 0..rows {
                        let xr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            gxh[j] = g[r * d + j] * gam[j];
                        }
                        let s1: F = gxh.iter().copied().sum();
                        let s2: F = gxh.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] / df * (df * gxh[j] - s1 - xr[j] * s2);
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => conv::conv1d_backward(self, grads, g, *x, *w, *b, *stride, *padding),
            Op::ConvTranspose1d { x, w, b, stride } => {
                conv::conv_transpose1d_backward(self, grads, g, *x, *w, *b, *stride)
            }
            Op::MaxPool1d { x, argmax } => self.acc(grads, *x, |gx| {
                for (j, &src) in argmax.iter().enumerate() {
                    gx[src] += g[j];
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => conv::batchnorm_backward(
                self,
                grads,
                g,
                (*x, *gamma, *beta),
                xhat,
                inv_std,
                *batch_stats,
            ),
            Op::Concat { parts, dim } => {
                let (outer, total, inner) = split_at_dim(out.shape(), *dim);
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).shape()[*dim];
                    self.acc(grads, p, |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            add_into(src, &mut gp[o * n * inner..(o + 1) * n * inner]);
                        }
                    });
                    offset += n;
                }
            }
            Op::Narrow { x, dim, start } => {
                let src_shape = self.value(*x).shape();
                let (outer, n, inner) = split_at_dim(src_shape, *dim);
                let len = out.shape()[*dim];
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                        add_into(&g[o * len * inner..(o + 1) * len * inner], dst);
                    }
                });
            }
            Op::PadEnd { x, dim } => {
                let (outer, n, inner) = split_at_dim(self.value(*x).shape(), *dim);
                let m = out.shape()[*dim];
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        add_into(
                            &g[o * m * inner..(o * m + n) * inner],
                            &mut gx[o * n * inner..(o + 1) * n * inner],
                        );
                    }
                });
            }
            Op::RepeatInterleave { x, dim, factor } => {
                let (outer, n, inner) = split_at_dim(self.value(*x).shape(), *dim);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..n {
                            let dst = &mut gx[(o * n + i) * inner..(o * n + i + 1) * inner];
                            for r in 0..*factor {
                                let s = ((o * n + i) * factor + r) * inner;
                                add_into(&g[s..s + inner], dst);
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = F::lit(self.value(*x).numel() as f64);
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let z = self.value(*logits).data();
                let k = weights.len();
                let scale = g[0] / F::lit(z.len() as f64);
                self.acc(grads, *logits, |gz| {
                    for j in 0..z.len() {
                        gz[j] += scale * weights[j % k] * (sigmoid_scalar(z[j]) - targets[j]);
                    }
                });
            }
            Op::MeanAbsDiff(x) => {
                let tx = self.value(*x);
                let (b, t, k) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let d = tx.data();
                let scale = g[0] / F::lit((b * (t - 1) * k) as f64);
                self.acc(grads, *x, |gx| {
                    for bi in 0..b {
                        for ti in 0..t - 1 {
                            let r0 = (bi * t + ti) * k;
                            for ki in 0..k {
                                let diff = d[r0 + k + ki] - d[r0 + ki];
                                let s = if diff > F::zero() {
                                    scale
                                } else if diff < F::zero() {
                                    -scale
                                } else {
                                    F::zero()
                                };
                                gx[r0 + k + ki] += s;
                                gx[r0 + ki] -= s;
                            }
                        }
                    }
                });
            }
        }
    }

    pub(crate) fn acc_pub(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        self.acc(grads, v, f)
    }
}

/// Permutes contiguous data of rank ≤ 4.
fn permute_data<F: Real>(src: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = shape.len();
    // pad to rank 4 with leading unit dimensions
    let pad = 4 - rank;
    let mut dims = [1usize; 4];
    dims[pad..].copy_from_slice(shape);
    let mut strides = [0usize; 4];
    let mut s = 1;
    for i in (0..4).rev() {
        strides[i] = s;
        s *= dims[i];
    }
    let mut p4 = [0usize, 1, 2, 3];
    for (i, &p) in perm.iter().enumerate() {
        p4[pad + i] = pad + p;
    }
    let od = [dims[p4[0]], dims[p4[1]], dims[p4[2]], dims[p4[3]]];
    let os = [strides[p4[0]], strides[p4[1]], strides[p4[2]], strides[p4[3]]];
    let mut out = Vec::with_capacity(src.len());
    for a in 0..od[0] {
        for b in 0..od[1] {
            for c in 0..od[2] {
                let base = a * os[0] + b * os[1] + c * os[2];
                if os[3] == 1 {
                    out.extend_from_slice(&src[base..base + od[3]]);
                } else {
                    out.extend((0..od[3]).map(|d| src[base + d * os[3]]));
                }
            }
        }
    }
    out
}
