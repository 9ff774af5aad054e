//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass as a node in
//! topological order. [`Graph::backward`] walks the nodes in reverse and
//! returns a [`Gradients`] table for every leaf that participates in
//! differentiation; parameter gradients are then accumulated into the
//! [`ParamStore`] the graph was built over. Dropping the graph frees the
//! whole tape. Higher-order gradients are not supported.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::ndcore::tensor::{ParamId, ParamStore, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Reshape(Var),
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    Broadcast {
        x: Var,
    },
    Chamfer {
        recon: Var,
        target: Vec<T>,
        m_re: usize,
        m_gt: usize,
        nn_re: Vec<usize>,
        nn_gt: Vec<usize>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'a, T: Scalar> {
    store: Option<&'a ParamStore<T>>,
    nodes: Vec<Node<'a, T>>,
    param_vars: Vec<Option<Var>>,
    record: bool,
}

/// Split a shape into `(outer, len, inner)` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.044_715;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let u = k * (x + c * x * x * x);
    let t = T::one() - T::lit(2.0) / ((u + u).exp() + T::one());
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x);
    (y, dy)
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// A graph with no parameter store; only inputs and constants.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            record: true,
        }
    }

    /// A graph whose parameter leaves borrow from `store`.
    pub fn with_params(store: &'a ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            record: true,
        }
    }

    /// A graph that never records gradient information.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self {
            record: false,
            ..Self::with_params(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, needs_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf; its gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The node for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("graph built without a parameter store");
        let p = store.get(id);
        let v = self.push_cow(Cow::Borrowed(&p.value), Op::Param(id), p.requires_grad);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `a[..., k] · b[k, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MatMul { a, b }, g))
    }

    /// Batched product `a[N,m,k] · b[N,k,n]`, or `a · bᵀ` with `b[N,n,k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &bv[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[batch, m, n], out)?, Op::Bmm { a, b, trans_b }, g))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), g))
    }

    /// Adds `bias[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tx.last_dim() != tb.len() || tx.rank() == 0 {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let n = tb.len();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += *b;
            }
        }
        let t = Tensor::new(tx.shape(), data)?;
        let g = self.any_grad(&[x, bias]);
        Ok(self.push(t, Op::AddBias { x, bias }, g))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        let g = self.any_grad(&[x]);
        self.push(t, Op::Scale(x, s), g)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        let g = self.any_grad(&[x]);
        self.push(t, Op::Gelu(x), g)
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.last_dim();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(tx.shape(), data).expect("same shape");
        let g = self.any_grad(&[x]);
        self.push(t, Op::Softmax(x), g)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.last_dim();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(tx.shape(), data).expect("same shape");
        let g = self.any_grad(&[x]);
        self.push(t, Op::LogSoftmax(x), g)
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.last_dim();
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.len() / c.max(1);
        let cf = T::lit(c as f64);
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let g = self.any_grad(&[x, gamma, beta]);
        let (xhat, rstd) = if g { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::Contract("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!("concat axis {axis} on rank {}", first.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let g = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            g,
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Contract(format!(
                "slice {start}..{} of axis {axis} in shape {s:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_at_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = len;
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Slice { x, axis, start }, g))
    }

    /// Gathers rows of `x` viewed as `[len / C, C]`, producing `out_shape`
    /// whose trailing axis must be `C`.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>, out_shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        let nrows = tx.len() / c.max(1);
        if out_shape.last().copied().unwrap_or(1) != c || out_shape.iter().product::<usize>() != rows.len() * c {
            return Err(Error::shape("gather_rows", tx.shape(), out_shape));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            if r >= nrows {
                return Err(Error::Contract(format!("gather row {r} out of {nrows}")));
            }
            out.extend_from_slice(tx.row(r));
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::GatherRows { x, rows }, g))
    }

    /// Max over `axis` (removed). Ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::Contract(format!("max over axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_at_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = src[o * len * inner + i];
                let mut bi = 0;
                for l in 1..len {
                    let v = src[(o * len + l) * inner + i];
                    if v > best {
                        best = v;
                        bi = l;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = bi;
            }
        }
        let mut out_shape = s;
        out_shape.remove(axis);
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MaxAxis { x, axis, argmax }, g))
    }

    /// Mean over `axis` (removed).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::Contract(format!("mean over axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_at_axis(&s, axis);
        let src = self.value(x).data();
        let inv = T::one() / T::lit(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + l) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let mut out_shape = s;
        out_shape.remove(axis);
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MeanAxis { x, axis }, g))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), g))
    }

    /// `[B, K, heads·d] → [B·heads, K, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", &s, &[heads]));
        }
        let (b, k, c) = (s[0], s[1], s[2]);
        let d = c / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for t in 0..k {
                for h in 0..heads {
                    let from = (bi * k + t) * c + h * d;
                    let to = ((bi * heads + h) * k + t) * d;
                    out[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[b * heads, k, d], out)?, Op::SplitHeads { x, heads }, g))
    }

    /// `[B·heads, K, d] → [B, K, heads·d]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(Error::shape("merge_heads", &s, &[heads]));
        }
        let (bh, k, d) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let c = heads * d;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for t in 0..k {
                for h in 0..heads {
                    let to = (bi * k + t) * c + h * d;
                    let from = ((bi * heads + h) * k + t) * d;
                    out[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[b, k, c], out)?, Op::MergeHeads { x, heads }, g))
    }

    /// Repeats `x` under new leading axes: result shape is `prefix ++ x.shape`.
    pub fn broadcast(&mut self, x: Var, prefix: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let reps: usize = prefix.iter().product();
        let mut out = Vec::with_capacity(reps * tx.len());
        for _ in 0..reps {
            out.extend_from_slice(tx.data());
        }
        let mut shape = prefix.to_vec();
        shape.extend_from_slice(tx.shape());
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Broadcast { x }, g))
    }

    /// Mean patch-wise Chamfer-L2 between predicted sets `recon[N, M_re, 3]`
    /// and constant targets `target[N, M_gt, 3]`.
    ///
    /// Each patch contributes the mean squared nearest-neighbour distance in
    /// both directions; nearest-neighbour ties go to the lowest index.
    pub fn chamfer(&mut self, recon: Var, target: &Tensor<T>) -> Result<Var> {
        let sr = self.shape(recon).to_vec();
        let st = target.shape();
        if sr.len() != 3 || st.len() != 3 || sr[0] != st[0] || sr[2] != 3 || st[2] != 3 {
            return Err(Error::shape("chamfer", &sr, st));
        }
        let (n, m_re, m_gt) = (sr[0], sr[1], st[1]);
        if n == 0 || m_re == 0 || m_gt == 0 {
            return Err(Error::Contract("chamfer on an empty point set".into()));
        }
        let rv = self.value(recon).data();
        let tv = target.data();
        let mut nn_re = vec![0usize; n * m_re];
        let mut nn_gt = vec![0usize; n * m_gt];
        let mut total = T::zero();
        let sq = |a: &[T], b: &[T]| {
            let dx = a[0] - b[0];
            let dy = a[1] - b[1];
            let dz = a[2] - b[2];
            dx * dx + dy * dy + dz * dz
        };
        for p in 0..n {
            let r = &rv[p * m_re * 3..(p + 1) * m_re * 3];
            let t = &tv[p * m_gt * 3..(p + 1) * m_gt * 3];
            let mut best_gt = vec![T::infinity(); m_gt];
            let mut term_re = T::zero();
            for i in 0..m_re {
                let pi = &r[i * 3..i * 3 + 3];
                let mut best = T::infinity();
                let mut bj = 0;
                for j in 0..m_gt {
                    let d = sq(pi, &t[j * 3..j * 3 + 3]);
                    if d < best {
                        best = d;
                        bj = j;
                    }
                    if d < best_gt[j] {
                        best_gt[j] = d;
                        nn_gt[p * m_gt + j] = i;
                    }
                }
                nn_re[p * m_re + i] = bj;
                term_re += best;
            }
            let term_gt: T = best_gt.iter().copied().sum();
            total += term_re / T::lit(m_re as f64) + term_gt / T::lit(m_gt as f64);
        }
        let loss = total / T::lit(n as f64);
        let g = self.any_grad(&[recon]);
        let target = if g { tv.to_vec() } else { Vec::new() };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Chamfer {
                recon,
                target,
                m_re,
                m_gt,
                nn_re,
                nn_gt,
            },
            g,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients {
            leaves: Vec::new(),
            params: Vec::new(),
        };
        if !self.nodes[loss.0].needs_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => out.leaves.push((Var(i), Tensor::new(node.value.shape(), g)?)),
                Op::Param(id) => out.params.push((*id, Tensor::new(node.value.shape(), g)?)),
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, op: &Op<T>, y: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = tb.shape()[0];
                let n = tb.shape()[1];
                let m = ta.len() / k.max(1);
                if let Some(ga) = self.slot(grads, *a) {
                    // ga += g · bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        tb.data(),
                        1,
                        n as isize,
                        T::one(),
                        ga,
                        k as isize,
                        1,
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // gb += aᵀ · g
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        ta.data(),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::one(),
                        gb,
                        n as isize,
                        1,
                    );
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = y.shape()[2];
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..batch {
                        let bs = &tb.data()[i * k * n..(i + 1) * k * n];
                        // ga_i += g_i · b_iᵀ where b_i is k×n (or stored n×k)
                        let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            bs,
                            rsb,
                            csb,
                            T::one(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..batch {
                        let as_ = &ta.data()[i * m * k..(i + 1) * m * k];
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // gb_i (n×k) += g_iᵀ · a_i
                            T::gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                gi,
                                1,
                                n as isize,
                                as_,
                                k as isize,
                                1,
                                T::one(),
                                gbi,
                                k as isize,
                                1,
                            );
                        } else {
                            // gb_i (k×n) += a_iᵀ · g_i
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                as_,
                                1,
                                k as isize,
                                gi,
                                n as isize,
                                1,
                                T::one(),
                                gbi,
                                n as isize,
                                1,
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(s, &d)| *s -= d);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * tb[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ta[i];
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                }
                let n = self.value(*bias).len();
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &d)| *a += d * *s);
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_parts(tx[i]).1;
                    }
                }
            }
            Op::Softmax(x) => {
                let n = y.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((gr, yr), gxr) in g.chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = y.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((gr, yr), gxr) in g.chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..n {
                            gxr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = y.last_dim();
                let cf = T::lit(c as f64);
                let gm = self.value(*gamma).data();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(s, &d)| *s += d);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dh = vec![T::zero(); c];
                    for (r, ((gr, hr), gxr)) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dhh = T::zero();
                        for j in 0..c {
                            dh[j] = gr[j] * gm[j];
                            mean_dh += dh[j];
                            mean_dhh += dh[j] * hr[j];
                        }
                        mean_dh /= cf;
                        mean_dhh /= cf;
                        for j in 0..c {
                            gxr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_at_axis(y.shape(), *axis);
                let total = y.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                gp[dst + t] += g[src + t];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let full = self.shape(*x)[*axis];
                let (outer, len, inner) = split_at_axis(y.shape(), *axis);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let c = y.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, len, inner) = split_at_axis(self.shape(*x), *axis);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let l = argmax[o * inner + i];
                            gx[(o * len + l) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_at_axis(self.shape(*x), *axis);
                let inv = T::one() / T::lit(len as f64);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                }
            }
            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x);
                let (b, k, c) = (s[0], s[1], s[2]);
                let d = c / heads;
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..b {
                        for t in 0..k {
                            for h in 0..*heads {
                                let to = (bi * k + t) * c + h * d;
                                let from = ((bi * heads + h) * k + t) * d;
                                for e in 0..d {
                                    gx[to + e] += g[from + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let s = self.shape(*x);
                let (bh, k, d) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let c = heads * d;
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..b {
                        for t in 0..k {
                            for h in 0..*heads {
                                let from = (bi * k + t) * c + h * d;
                                let to = ((bi * heads + h) * k + t) * d;
                                for e in 0..d {
                                    gx[to + e] += g[from + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::Broadcast { x } => {
                let n = self.value(*x).len();
                if let Some(gx) = self.slot(grads, *x) {
                    for chunk in g.chunks(n) {
                        gx.iter_mut().zip(chunk).for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::Chamfer {
                recon,
                target,
                m_re,
                m_gt,
                nn_re,
                nn_gt,
            } => {
                let rv = self.value(*recon).data();
                let n = rv.len() / (m_re * 3);
                let nf = T::lit(n as f64);
                let w_re = T::lit(2.0) * g[0] / (T::lit(*m_re as f64) * nf);
                let w_gt = T::lit(2.0) * g[0] / (T::lit(*m_gt as f64) * nf);
                if let Some(gr) = self.slot(grads, *recon) {
                    for p in 0..n {
                        for i in 0..*m_re {
                            let ri = (p * m_re + i) * 3;
                            let tj = (p * m_gt + nn_re[p * m_re + i]) * 3;
                            for d in 0..3 {
                                gr[ri + d] += w_re * (rv[ri + d] - target[tj + d]);
                            }
                        }
                        for j in 0..*m_gt {
                            let tj = (p * m_gt + j) * 3;
                            let ri = (p * m_re + nn_gt[p * m_gt + j]) * 3;
                            for d in 0..3 {
                                gr[ri + d] += w_gt * (rv[ri + d] - target[tj + d]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: Vec<(Var, Tensor<T>)>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a differentiable input leaf, if the loss reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, t)| t)
    }

    /// Gradient of a parameter from this sweep alone.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    /// Adds every parameter gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            store.get_mut(*id).accumulate(g.data());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let x = g.input(Tensor::full(&[2], 2.0));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::full(&[2], 1.0));
        let mut g = Graph::inference(&store);
        let wv = g.param(w);
        let s = g.sum(wv);
        assert!(!g.requires_grad(s));
        assert!(g.backward(s).unwrap().param(w).is_none());
    }

    #[test]
    fn param_node_is_shared() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::full(&[1], 2.0));
        let mut g = Graph::with_params(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[4.0]);
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let s = g.split_heads(x, 2).unwrap();
        assert_eq!(g.shape(s), &[4, 3, 2]);
        let m = g.merge_heads(s, 2).unwrap();
        assert_eq!(g.value(m), g.value(x));
    }

    #[test]
    fn max_axis_ties_take_lowest_index() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[1, 3, 1], &[2.0, 2.0, 1.0]).unwrap());
        let m = g.max_axis(x, 1).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_fn(&[2, 1, 3], |i| i as f64));
        let b = g.input(Tensor::from_fn(&[2, 2, 3], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 3]);
        let back = g.slice(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }
}
