//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and whatever it saved for the backward rule;
//! inputs always precede their consumers, so [`Graph::backward`] only has to
//! walk the tape in reverse append order.

use std::cell::Cell;

use rand::Rng;

use crate::kernels::{self, batched_gemm};
use crate::memory::Buffer;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{rng_from_seed, InitRng};
use crate::{Error, Result, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout enabled; masks are drawn from a generator seeded with `seed`.
    Train {
        seed: u64,
    },
    Eval,
}

enum Value<'p, T: Scalar> {
    Borrowed(&'p Tensor<T>),
    Owned(Tensor<T>),
}

impl<T: Scalar> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    CausalSoftmax(Var, T),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        mean: Buffer<T>,
        rstd: Buffer<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    SliceRows(Var, usize),
    SliceLast(Var, usize),
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    Dropout(Var, Buffer<T>),
    CausalConv {
        x: Var,
        w: Var,
        bias: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        lse: Buffer<T>,
    },
    Sum(Var),
}

struct Node<'p, T: Scalar> {
    value: Value<'p, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
    param_base: usize,
    param_count: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        assert!(
            id.index() < self.param_count,
            "parameter {id:?} was not bound"
        );
        self.grads[self.param_base + id.index()].as_ref()
    }

    /// Gradients of the bound parameters, in store order.
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor<T>>> {
        self.grads
            .drain(self.param_base..self.param_base + self.param_count)
            .collect()
    }
}

/// One forward pass worth of autodiff tape.
pub struct Graph<'p, T: Scalar = f32> {
    nodes: Vec<Node<'p, T>>,
    mode: Mode,
    rng: Option<InitRng>,
    param_base: usize,
    param_count: usize,
    flops: Cell<u64>,
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(mode: Mode) -> Self {
        let rng = match mode {
            Mode::Train { seed } => Some(rng_from_seed(seed)),
            Mode::Eval => None,
        };
        Graph {
            nodes: Vec::new(),
            mode,
            rng,
            param_base: 0,
            param_count: 0,
            flops: Cell::new(0),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations executed so far, forward and backward.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    fn count(&self, n: usize) {
        self.flops.set(self.flops.get() + n as u64);
    }

    fn push(&mut self, value: Value<'p, T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, t: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Value::Owned(t), op, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Borrowed constant; never receives a gradient.
    pub fn constant(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, false)
    }

    /// Owned constant; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Value::Owned(t), Op::Leaf, false)
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(Value::Owned(t), Op::Leaf, true)
    }

    /// Borrowed leaf that receives a gradient.
    pub fn leaf(&mut self, t: &'p Tensor<T>, requires_grad: bool) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, requires_grad)
    }

    /// Registers every parameter of `store` as a leaf; see [`Graph::param`].
    pub fn bind(&mut self, store: &'p ParamStore<T>, requires_grad: bool) {
        assert_eq!(self.param_count, 0, "parameters already bound");
        self.param_base = self.nodes.len();
        self.param_count = store.len();
        for t in store.values() {
            self.leaf(t, requires_grad);
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.index() < self.param_count, "parameter {id:?} not bound");
        Var(self.param_base + id.index())
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product over the last two dimensions.
    ///
    /// `a` is `[..., m, k]`; `b` is either a shared `[k, n]` matrix or has
    /// the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` over the last two dimensions; `b` is `[n, k]` or `[..., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(op, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::dim(op, &sa, &sb));
        }
        let lead = &sa[..sa.len() - 2];
        let shared = sb.len() == 2;
        if !shared && sb[..sb.len() - 2] != *lead {
            return Err(Error::dim(op, &sa, &sb));
        }
        let lead_n: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        // A shared right operand lets the leading dims fold into one product.
        let (batch, rows) = if shared { (1, lead_n * m) } else { (lead_n, m) };
        let mut out = Buffer::zeros(lead_n * m * n);
        batched_gemm(
            batch,
            rows,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        self.count(2 * batch * rows * k * n);
        let t = Tensor::from_buffer(&out_shape, out);
        Ok(self.push_owned(
            t,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m: rows,
                k,
                n,
            },
            &[a, b],
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, usize)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !suffix_broadcast(ta.shape(), tb.shape()) {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let bn = tb.numel();
        let mut out = Buffer::zeros(ta.numel());
        for (chunk, xa) in out.chunks_mut(bn).zip(ta.data().chunks(bn)) {
            for ((o, &x), &y) in chunk.iter_mut().zip(xa).zip(tb.data()) {
                *o = f(x, y);
            }
        }
        let n = ta.numel();
        Ok((Tensor::from_buffer(ta.shape(), out), n))
    }

    /// `a + b`, where `b` may broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, n) = self.binary("add", a, b, |x, y| x + y)?;
        self.count(n);
        Ok(self.push_owned(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, n) = self.binary("sub", a, b, |x, y| x - y)?;
        self.count(n);
        Ok(self.push_owned(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, n) = self.binary("mul", a, b, |x, y| x * y)?;
        self.count(n);
        Ok(self.push_owned(t, Op::Mul(a, b), &[a, b]))
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        let mut out = Buffer::zeros(ta.numel());
        for (o, &x) in out.iter_mut().zip(ta.data()) {
            *o = f(x);
        }
        Tensor::from_buffer(ta.shape(), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let t = self.unary(a, |x| x * s);
        self.count(t.numel());
        self.push_owned(t, Op::Scale(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, kernels::sigmoid);
        self.count(4 * t.numel());
        self.push_owned(t, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.unary(a, kernels::gelu);
        self.count(8 * t.numel());
        self.push_owned(t, Op::Gelu(a), &[a])
    }

    /// Softmax over the last dimension; rejects non-finite input.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if let Some(x) = ta.data().iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("softmax input contains {x}")));
        }
        let d = *ta.shape().last().expect("rank >= 1");
        let mut out = Buffer::zeros(ta.numel());
        for (o, x) in out.chunks_mut(d).zip(ta.data().chunks(d)) {
            kernels::softmax_row(x, o);
        }
        let t = Tensor::from_buffer(ta.shape(), out);
        self.count(4 * t.numel());
        Ok(self.push_owned(t, Op::Softmax(a), &[a]))
    }

    /// Row-wise softmax of `scale * a` over `[..., n, n]` score matrices with
    /// every strictly-future column (`j > i`) forced to exactly zero.
    ///
    /// Masked inputs are never read.
    pub fn causal_softmax(&mut self, a: Var, scale: f64) -> Result<Var> {
        let ta = self.value(a);
        let sh = ta.shape();
        if sh.len() < 2 || sh[sh.len() - 1] != sh[sh.len() - 2] {
            return Err(Error::dim("causal_softmax", sh, &[]));
        }
        let n = sh[sh.len() - 1];
        let s = T::lit(scale);
        let mut out = Buffer::zeros(ta.numel());
        let mut tmp = vec![T::zero(); n];
        for (r, (o, x)) in out.chunks_mut(n).zip(ta.data().chunks(n)).enumerate() {
            let q = r % n;
            for (t, &v) in tmp[..=q].iter_mut().zip(&x[..=q]) {
                *t = v * s;
            }
            kernels::softmax_row(&tmp[..=q], &mut o[..=q]);
        }
        let t = Tensor::from_buffer(sh, out);
        self.count(2 * t.numel());
        Ok(self.push_owned(t, Op::CausalSoftmax(a, s), &[a]))
    }

    /// Normalizes over the last dimension, then applies `scale * x + shift`.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().expect("rank >= 1");
        let (tg, tb) = (self.value(scale), self.value(shift));
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / d;
        let mut out = Buffer::zeros(tx.numel());
        let mut mean = Buffer::zeros(rows);
        let mut rstd = Buffer::zeros(rows);
        let eps = T::lit(eps);
        let inv_d = T::lit(1.0 / d as f64);
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                o[j] = (row[j] - mu) * rs * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::from_buffer(tx.shape(), out);
        self.count(8 * t.numel());
        Ok(self.push_owned(
            t,
            Op::LayerNorm {
                x,
                scale,
                shift,
                mean,
                rstd,
            },
            &[x, scale, shift],
        ))
    }

    /// Gathers rows of a `[V, d]` table; the output has shape `[out_shape.., d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], out_shape: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::dim("embedding", tt.shape(), out_shape));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if out_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("embedding", &[ids.len()], out_shape));
        }
        let mut out = Buffer::zeros(ids.len() * d);
        for (o, &id) in out.chunks_mut(d).zip(ids) {
            let id = id as usize;
            if id >= v {
                return Err(Error::Index { index: id, size: v });
            }
            o.copy_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let t = Tensor::from_buffer(&shape, out);
        Ok(self.push_owned(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || start + len > ta.shape()[0] {
            return Err(Error::SequenceLength {
                len: start + len,
                max: ta.shape()[0],
            });
        }
        let d = ta.shape()[1];
        let data = ta.data()[start * d..(start + len) * d].to_vec();
        let t = Tensor::from_buffer(&[len, d], Buffer::from_vec(data));
        Ok(self.push_owned(t, Op::SliceRows(a, start), &[a]))
    }

    /// Columns `start..start+len` of the last dimension.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let d = *ta.shape().last().expect("rank >= 1");
        if start + len > d {
            return Err(Error::Contract(format!(
                "slice {start}..{} of last dimension {d}",
                start + len
            )));
        }
        let rows = ta.numel() / d;
        let mut out = Buffer::zeros(rows * len);
        for (o, x) in out.chunks_mut(len).zip(ta.data().chunks(d)) {
            o.copy_from_slice(&x[start..start + len]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::from_buffer(&shape, out);
        Ok(self.push_owned(t, Op::SliceLast(a, start), &[a]))
    }

    /// `[B, N, H*e]` to `[B, H, N, e]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let ta = self.value(a);
        let sh = ta.shape();
        if sh.len() != 3 || heads == 0 || !sh[2].is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "cannot split shape {sh:?} into {heads} heads"
            )));
        }
        let (b, n, e) = (sh[0], sh[1], sh[2] / heads);
        let mut out = Buffer::zeros(ta.numel());
        let x = ta.data();
        for bi in 0..b {
            for t in 0..n {
                for h in 0..heads {
                    let src = ((bi * n + t) * heads + h) * e;
                    let dst = ((bi * heads + h) * n + t) * e;
                    out[dst..dst + e].copy_from_slice(&x[src..src + e]);
                }
            }
        }
        let t = Tensor::from_buffer(&[b, heads, n, e], out);
        Ok(self.push_owned(t, Op::SplitHeads(a, heads), &[a]))
    }

    /// `[B, H, N, e]` to `[B, N, H*e]`.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let sh = ta.shape();
        if sh.len() != 4 {
            return Err(Error::dim("merge_heads", sh, &[]));
        }
        let (b, heads, n, e) = (sh[0], sh[1], sh[2], sh[3]);
        let mut out = Buffer::zeros(ta.numel());
        let x = ta.data();
        for bi in 0..b {
            for h in 0..heads {
                for t in 0..n {
                    let src = ((bi * heads + h) * n + t) * e;
                    let dst = ((bi * n + t) * heads + h) * e;
                    out[dst..dst + e].copy_from_slice(&x[src..src + e]);
                }
            }
        }
        let t = Tensor::from_buffer(&[b, n, heads * e], out);
        Ok(self.push_owned(t, Op::MergeHeads(a, heads), &[a]))
    }

    /// Inverted dropout. The identity (no new node) in eval mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(a);
        };
        let n = self.nodes[a.0].value.get().numel();
        let keep = T::lit(1.0 / (1.0 - rate));
        let mut mask = Buffer::zeros(n);
        for m in mask.iter_mut() {
            *m = if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            };
        }
        let ta = self.value(a);
        let mut out = Buffer::zeros(n);
        for ((o, &x), &m) in out.iter_mut().zip(ta.data()).zip(mask.iter()) {
            *o = x * m;
        }
        let t = Tensor::from_buffer(ta.shape(), out);
        self.count(n);
        Ok(self.push_owned(t, Op::Dropout(a, mask), &[a]))
    }

    /// Depthwise causal convolution over `[B, N, d]` with taps `w: [d, k]`.
    ///
    /// Tap `k-1` multiplies the current position, tap `0` the position `k-1`
    /// steps back; positions before the sequence start read as zero.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(bias));
        let sx = tx.shape();
        if sx.len() != 3 || tw.rank() != 2 || tw.shape()[0] != sx[2] || tb.shape() != [sx[2]] {
            return Err(Error::dim("causal_conv1d", sx, tw.shape()));
        }
        let (b, n, d) = (sx[0], sx[1], sx[2]);
        let k = tw.shape()[1];
        if k == 0 {
            return Err(Error::Contract("convolution needs at least one tap".into()));
        }
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let mut out = Buffer::zeros(tx.numel());
        for bi in 0..b {
            for t in 0..n {
                let o = &mut out[(bi * n + t) * d..(bi * n + t + 1) * d];
                o.copy_from_slice(bd);
                for i in 0..k {
                    // source position t - (k-1) + i
                    let Some(s) = (t + i).checked_sub(k - 1) else {
                        continue;
                    };
                    let xs = &xd[(bi * n + s) * d..(bi * n + s + 1) * d];
                    for c in 0..d {
                        o[c] += wd[c * k + i] * xs[c];
                    }
                }
            }
        }
        let t = Tensor::from_buffer(sx, out);
        self.count(2 * k * t.numel());
        Ok(self.push_owned(t, Op::CausalConv { x, w, bias }, &[x, w, bias]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`; returns shape `[1]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let tl = self.value(logits);
        let v = *tl.shape().last().expect("rank >= 1");
        let rows = tl.numel() / v;
        if rows != targets.len() {
            return Err(Error::dim("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let mut lse = Buffer::zeros(rows);
        let mut total = 0.0f64;
        for (r, (x, &tgt)) in tl.data().chunks(v).zip(targets).enumerate() {
            let tgt = tgt as usize;
            if tgt >= v {
                return Err(Error::Index {
                    index: tgt,
                    size: v,
                });
            }
            lse[r] = kernels::logsumexp(x);
            total += (lse[r] - x[tgt]).as_f64();
        }
        let t = Tensor::scalar(T::lit(total / rows as f64));
        self.count(3 * tl.numel());
        Ok(self.push_owned(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                lse,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.count(self.value(a).numel());
        self.push_owned(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a one-element `loss`.
    ///
    /// Every gradient-requiring leaf reachable from `loss` gets a gradient;
    /// contributions from multiple uses are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Buffer<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            let mut seed = Buffer::zeros(1);
            seed[0] = T::one();
            grads[loss.0] = Some(seed);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|b| Tensor::from_buffer(self.value(Var(i)).shape(), b)))
            .collect();
        Ok(Gradients {
            grads,
            param_base: self.param_base,
            param_count: self.param_count,
        })
    }

    /// Gradient slot of `v`, zero-initialized on first use; `None` when `v`
    /// does not require a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Buffer<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| Buffer::zeros(n)))
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Buffer<T>>]) {
        let out = self.nodes[i].value.get();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.slot(grads, a) {
                    // dA = dC * op(B)^T
                    batched_gemm(batch, m, n, k, g, false, bv, !trans_b, da, true);
                    self.count(2 * batch * m * k * n);
                }
                if let Some(db) = self.slot(grads, b) {
                    if trans_b {
                        // dB[n,k] = dC^T * A
                        batched_gemm(batch, n, m, k, g, true, av, false, db, true);
                    } else {
                        // dB[k,n] = A^T * dC
                        batched_gemm(batch, k, m, n, av, true, g, false, db, true);
                    }
                    self.count(2 * batch * m * k * n);
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let neg = matches!(self.nodes[i].op, Op::Sub(..));
                if let Some(da) = self.slot(grads, a) {
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    let bn = db.len();
                    for chunk in g.chunks(bn) {
                        for (d, &x) in db.iter_mut().zip(chunk) {
                            if neg {
                                *d -= x
                            } else {
                                *d += x
                            }
                        }
                    }
                }
                self.count(2 * g.len());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let bn = bv.len();
                if let Some(da) = self.slot(grads, a) {
                    for (j, (d, &x)) in da.iter_mut().zip(g).enumerate() {
                        *d += x * bv[j % bn];
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for (j, (&x, &y)) in g.iter().zip(av).enumerate() {
                        db[j % bn] += x * y;
                    }
                }
                self.count(4 * g.len());
            }
            &Op::Scale(a, s) => {
                if let Some(da) = self.slot(grads, a) {
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += x * s;
                    }
                }
                self.count(g.len());
            }
            &Op::Sigmoid(a) => {
                if let Some(da) = self.slot(grads, a) {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(out.data()) {
                        *d += x * y * (T::one() - y);
                    }
                }
                self.count(3 * g.len());
            }
            &Op::Gelu(a) => {
                let av = self.value(a).data();
                if let Some(da) = self.slot(grads, a) {
                    for ((d, &x), &v) in da.iter_mut().zip(g).zip(av) {
                        *d += x * kernels::gelu_grad(v);
                    }
                }
                self.count(12 * g.len());
            }
            &Op::Softmax(a) | &Op::CausalSoftmax(a, _) => {
                let scale = match self.nodes[i].op {
                    Op::CausalSoftmax(_, s) => s,
                    _ => T::one(),
                };
                let d = *out.shape().last().unwrap();
                if let Some(da) = self.slot(grads, a) {
                    for ((dr, gr), yr) in
                        da.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                        for ((dd, &x), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *dd += scale * y * (x - dot);
                        }
                    }
                }
                self.count(4 * g.len());
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                mean,
                rstd,
            } => {
                let (x, scale, shift) = (*x, *scale, *shift);
                let xv = self.value(x).data();
                let gamma = self.value(scale).data();
                let d = gamma.len();
                let rows = xv.len() / d;
                let inv_d = T::lit(1.0 / d as f64);
                let mut xhat = vec![T::zero(); d];
                let mut gg = vec![T::zero(); d];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let need_x = self.nodes[x.0].requires_grad;
                for r in 0..rows {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        xhat[j] = (xr[j] - mu) * rs;
                        gg[j] = gr[j] * gamma[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        s1 += gg[j];
                        s2 += gg[j] * xhat[j];
                    }
                    if need_x {
                        let dx = self.slot(grads, x).unwrap();
                        let dx = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dx[j] += rs * (gg[j] - s1 * inv_d - xhat[j] * s2 * inv_d);
                        }
                    }
                }
                if let Some(ds) = self.slot(grads, scale) {
                    for (a, b) in ds.iter_mut().zip(&dgamma) {
                        *a += *b;
                    }
                }
                if let Some(ds) = self.slot(grads, shift) {
                    for (a, b) in ds.iter_mut().zip(&dbeta) {
                        *a += *b;
                    }
                }
                self.count(10 * g.len());
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (gr, &id) in g.chunks(d).zip(ids) {
                        let row = &mut dt[id as usize * d..(id as usize + 1) * d];
                        for (a, &b) in row.iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                }
                self.count(g.len());
            }
            &Op::SliceRows(a, start) => {
                let d = self.value(a).shape()[1];
                if let Some(da) = self.slot(grads, a) {
                    for (x, &y) in da[start * d..start * d + g.len()].iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            &Op::SliceLast(a, start) => {
                let d = *self.value(a).shape().last().unwrap();
                let len = *out.shape().last().unwrap();
                if let Some(da) = self.slot(grads, a) {
                    for (dr, gr) in da.chunks_mut(d).zip(g.chunks(len)) {
                        for (x, &y) in dr[start..start + len].iter_mut().zip(gr) {
                            *x += y;
                        }
                    }
                }
            }
            &Op::SplitHeads(a, heads) => {
                let sh = out.shape();
                let (b, n, e) = (sh[0], sh[2], sh[3]);
                if let Some(da) = self.slot(grads, a) {
                    for bi in 0..b {
                        for t in 0..n {
                            for h in 0..heads {
                                let src = ((bi * heads + h) * n + t) * e;
                                let dst = ((bi * n + t) * heads + h) * e;
                                for j in 0..e {
                                    da[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads(a, heads) => {
                let sa = self.value(a).shape();
                let (b, n, e) = (sa[0], sa[2], sa[3]);
                if let Some(da) = self.slot(grads, a) {
                    for bi in 0..b {
                        for h in 0..heads {
                            for t in 0..n {
                                let src = ((bi * n + t) * heads + h) * e;
                                let dst = ((bi * heads + h) * n + t) * e;
                                for j in 0..e {
                                    da[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &x), &m) in da.iter_mut().zip(g).zip(mask.iter()) {
                        *d += x * m;
                    }
                }
                self.count(g.len());
            }
            &Op::CausalConv { x, w, bias } => {
                let sx = self.value(x).shape();
                let (b, n, d) = (sx[0], sx[1], sx[2]);
                let k = self.value(w).shape()[1];
                let (xd, wd) = (self.value(x).data(), self.value(w).data());
                if let Some(dx) = self.slot(grads, x) {
                    for bi in 0..b {
                        for t in 0..n {
                            let gr = &g[(bi * n + t) * d..(bi * n + t + 1) * d];
                            for i in 0..k {
                                let Some(s) = (t + i).checked_sub(k - 1) else {
                                    continue;
                                };
                                let dr = &mut dx[(bi * n + s) * d..(bi * n + s + 1) * d];
                                for c in 0..d {
                                    dr[c] += wd[c * k + i] * gr[c];
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, w) {
                    for bi in 0..b {
                        for t in 0..n {
                            let gr = &g[(bi * n + t) * d..(bi * n + t + 1) * d];
                            for i in 0..k {
                                let Some(s) = (t + i).checked_sub(k - 1) else {
                                    continue;
                                };
                                let xs = &xd[(bi * n + s) * d..(bi * n + s + 1) * d];
                                for c in 0..d {
                                    dw[c * k + i] += gr[c] * xs[c];
                                }
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(grads, bias) {
                    for gr in g.chunks(d) {
                        for (a, &y) in db.iter_mut().zip(gr) {
                            *a += y;
                        }
                    }
                }
                self.count(4 * k * g.len() + g.len());
            }
            Op::CrossEntropy {
                logits,
                targets,
                lse,
            } => {
                let lv = self.value(*logits);
                let v = *lv.shape().last().unwrap();
                let rows = targets.len();
                let coef = g[0] / T::lit(rows as f64);
                if let Some(dl) = self.slot(grads, *logits) {
                    for (r, (dr, xr)) in dl.chunks_mut(v).zip(lv.data().chunks(v)).enumerate() {
                        let l = lse[r];
                        for (d, &x) in dr.iter_mut().zip(xr) {
                            *d += coef * (x - l).exp();
                        }
                        dr[targets[r] as usize] -= coef;
                    }
                }
                self.count(4 * lv.numel());
            }
            &Op::Sum(a) => {
                if let Some(da) = self.slot(grads, a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
                self.count(g.len());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let i = g.input(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = g.input(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3., 4., 5., 6.]);
    }

    #[test]
    fn row_times_column() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let a = g.input(t(&[1, 2], &[1., 2.]));
        let b = g.input(t(&[2, 1], &[3., 4.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new(Mode::Eval);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.input(t(&[3], &[0., 0., 0.]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = g.input(t(&[2], &[1000., 0.]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
        let x = g.input(t(&[2], &[f64::NAN, 0.]));
        assert!(matches!(g.softmax(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.variable(t(&[2, 3], &[1., -2., 3., 0.5, 0., 9.]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.variable(t(&[3], &[1., 2., 3.]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.variable(t(&[2], &[1., 2.]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let s = g.input(Tensor::zeros(&[1, 3, 3]));
        let a = g.causal_softmax(s, 1.0).unwrap();
        let v = g.value(a).data();
        let expect = [1., 0., 0., 0.5, 0.5, 0., 1. / 3., 1. / 3., 1. / 3.];
        for (x, y) in v.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_identity_in_eval_and_at_rate_zero() {
        let mut g = Graph::<f32>::new(Mode::Eval);
        let x = g.input(Tensor::full(&[4], 2.0));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
        let mut g = Graph::<f32>::new(Mode::Train { seed: 1 });
        let x = g.input(Tensor::full(&[4], 2.0));
        assert_eq!(g.dropout(x, 0.0).unwrap(), x);
        assert!(matches!(g.dropout(x, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn flops_of_matmul() {
        let mut g = Graph::<f32>::new(Mode::Eval);
        let a = g.variable(Tensor::zeros(&[3, 4]));
        let b = g.variable(Tensor::zeros(&[4, 5]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.flops(), 2 * 3 * 4 * 5);
        let l = g.sum(c);
        g.backward(l).unwrap();
        // sum: 15 adds forward, one broadcast backward
        assert_eq!(g.flops(), 3 * 2 * 3 * 4 * 5 + 15 + 1);
    }
}
