//! A small tape-based reverse-mode differentiator over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward sweep simply walks it in reverse.
//! Every operation the network needs has a hand-written adjoint here.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
    /// Population variance.
    Var,
}

/// Geometry of a 3D convolution over `[B, C, T, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn pointwise() -> Self {
        Self {
            stride: [1; 3],
            padding: [0; 3],
            groups: 1,
        }
    }

    pub fn output_dim(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if span < kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (span - kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }
}

enum Op {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Unary(Var, Activation),
    Affine {
        x: Var,
        scale: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Pool {
        x: Var,
        kind: PoolKind,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    GatherTokens {
        x: Var,
        positions: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    RepeatBatch(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

fn mismatch(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf whose gradient is tracked (parameters, or inputs under test).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Softmax weights of an attention node, laid out `[B, heads, Lq, N]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(mismatch("conv3d rank", &xs, &ws));
        }
        let (cin, cout, g) = (xs[1], ws[0], spec.groups);
        if g == 0 || cin % g != 0 || cout % g != 0 || ws[1] != cin / g {
            return Err(mismatch("conv3d channels", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv3d bias", self.shape(b), &[cout]));
            }
        }
        let kernel = [ws[2], ws[3], ws[4]];
        let out_dim = spec
            .output_dim([xs[2], xs[3], xs[4]], kernel)
            .ok_or_else(|| mismatch("conv3d kernel larger than input", &xs, &ws))?;
        let geo = ConvGeo::new(&xs, &ws, out_dim, spec);
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = conv_forward(
            &geo,
            self.value(x).data(),
            self.value(w).data(),
            bias.as_deref(),
        );
        let shape = vec![xs[0], cout, out_dim[0], out_dim[1], out_dim[2]];
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv3d { x, w, b, spec },
            needs,
        ))
    }

    /// `y = x W^T + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(mismatch("linear", &xs, &ws));
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                return Err(mismatch("linear bias", self.shape(b), &[out_f]));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let rows = xv.len() / in_f;
        let mut out = vec![0.0; rows * out_f];
        let bias = b.map(|b| self.value(b).data());
        out.par_chunks_mut(out_f)
            .zip(xv.par_chunks(in_f))
            .for_each(|(o, xr)| {
                for (j, oj) in o.iter_mut().enumerate() {
                    let wr = &wv[j * in_f..(j + 1) * in_f];
                    let mut acc = bias.map_or(0.0, |b| b[j]);
                    for (a, c) in xr.iter().zip(wr) {
                        acc += a * c;
                    }
                    *oj = acc;
                }
            });
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_f;
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add_broadcast", sa, sb));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(bv.len()) {
            for (o, v) in chunk.iter_mut().zip(&bv) {
                *o += v;
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let out = self.value(x).map(|v| act.apply(v));
        let needs = self.needs(&[x]);
        self.push(out, Op::Unary(x, act), needs)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let needs = self.needs(&[x]);
        self.push(out, Op::Affine { x, scale }, needs)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let (mean, rstd) = row_stats(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + bt[j];
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            needs,
        ))
    }

    /// Reduces `[B, C, ...]` to `[B, C]` over all trailing axes.
    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::ShapeMismatch(format!(
                "pool needs rank >= 3, got {s:?}"
            )));
        }
        let inner: usize = s[2..].iter().product();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| match kind {
                PoolKind::Mean => c.iter().sum::<f64>() / inner as f64,
                PoolKind::Max => c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                PoolKind::Var => {
                    let m = c.iter().sum::<f64>() / inner as f64;
                    c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / inner as f64
                }
            })
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1]], out)?,
            Op::Pool { x, kind },
            needs,
        ))
    }

    /// Multiplies each `[b, c, ...]` slab of `x` by `s[b, c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.shape(s) != [xs[0], xs[1]] {
            return Err(mismatch("scale_channels", xs, self.shape(s)));
        }
        let inner: usize = xs[2..].iter().product();
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (chunk, f) in out.data_mut().chunks_mut(inner).zip(&sv) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let needs = self.needs(&[x, s]);
        Ok(self.push(out, Op::ScaleChannels { x, s }, needs))
    }

    /// Picks flattened spatial `positions` out of `[B, C, ...]`, returning
    /// channel-last tokens `[B, n, C]`.
    pub fn gather_tokens(&mut self, x: Var, positions: Vec<usize>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::ShapeMismatch(format!(
                "gather needs rank >= 3, got {s:?}"
            )));
        }
        let (b, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if positions.iter().any(|&p| p >= inner) {
            return Err(Error::ShapeMismatch("token position out of range".into()));
        }
        let n = positions.len();
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * n * c];
        for bi in 0..b {
            for (j, &p) in positions.iter().enumerate() {
                for ci in 0..c {
                    out[(bi * n + j) * c + ci] = xv[(bi * c + ci) * inner + p];
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![b, n, c], out)?,
            Op::GatherTokens { x, positions },
            needs,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch(format!(
                "concat axis {axis} for {first:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut out =
            Vec::with_capacity(outer * total * first[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.len() / outer;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Tiles `x` along a new leading batch axis.
    pub fn repeat_batch(&mut self, x: Var, batch: usize) -> Var {
        let t = self.value(x);
        let mut shape = vec![batch];
        shape.extend_from_slice(t.shape());
        let data = t.data().repeat(batch);
        let needs = self.needs(&[x]);
        self.push(Tensor::new(shape, data).unwrap(), Op::RepeatBatch(x), needs)
    }

    /// `x[..., start..start + len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if start + len > d {
            return Err(Error::ShapeMismatch(format!("slice {start}+{len} of {d}")));
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceLast { x, start }, needs))
    }

    /// Scaled dot-product attention with `heads` heads. `q` is `[B, Lq, h]`,
    /// `k` and `v` are `[B, N, h]`; output is `[B, Lq, h]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        if qs.len() != 3 || ks.len() != 3 || self.shape(v) != ks.as_slice() {
            return Err(mismatch("attention", &qs, &ks));
        }
        let (b, lq, h) = (qs[0], qs[1], qs[2]);
        let n = ks[1];
        if ks[0] != b || ks[2] != h || heads == 0 || h % heads != 0 || n == 0 {
            return Err(mismatch("attention", &qs, &ks));
        }
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; b * heads * lq * n];
        let mut out = vec![0.0; b * lq * h];
        for bi in 0..b {
            for hd in 0..heads {
                let off = hd * dh;
                for i in 0..lq {
                    let qrow = &qv[(bi * lq + i) * h + off..][..dh];
                    let prow = &mut probs[((bi * heads + hd) * lq + i) * n..][..n];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = &kv[(bi * n + j) * h + off..][..dh];
                        let s: f64 = qrow.iter().zip(krow).map(|(a, c)| a * c).sum();
                        *p = s * scale;
                        mx = mx.max(*p);
                    }
                    let mut z = 0.0;
                    for p in prow.iter_mut() {
                        *p = (*p - mx).exp();
                        z += *p;
                    }
                    let orow = &mut out[(bi * lq + i) * h + off..][..dh];
                    for (j, p) in prow.iter_mut().enumerate() {
                        *p /= z;
                        let vrow = &vv[(bi * n + j) * h + off..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += *p * x;
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![b, lq, h], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Reverse sweep from the given output adjoints.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if self.shape(*v) != g.shape() {
                return Err(mismatch("backward seed", self.shape(*v), g.shape()));
            }
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.node_backward(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn node_backward(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, spec } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let out_dim = [y.shape()[2], y.shape()[3], y.shape()[4]];
                let geo = ConvGeo::new(xs, ws, out_dim, *spec);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.wants(*x) {
                    let gx = conv_backward_input(&geo, gy.data(), wv);
                    accumulate(grads, *x, Tensor::new(xs.to_vec(), gx).unwrap());
                }
                if self.wants(*w) {
                    let gw = conv_backward_weight(&geo, gy.data(), xv);
                    accumulate(grads, *w, Tensor::new(ws.to_vec(), gw).unwrap());
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let spatial = geo.out_len();
                        let mut gb = vec![0.0; geo.cout];
                        for (i, chunk) in gy.data().chunks(spatial).enumerate() {
                            gb[i % geo.cout] += chunk.iter().sum::<f64>();
                        }
                        accumulate(grads, *b, Tensor::new(vec![geo.cout], gb).unwrap());
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (out_f, in_f) = (ws[0], ws[1]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let g = gy.data();
                if self.wants(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    gx.par_chunks_mut(in_f)
                        .zip(g.par_chunks(out_f))
                        .for_each(|(gxr, gr)| {
                            for (j, &gj) in gr.iter().enumerate() {
                                if gj == 0.0 {
                                    continue;
                                }
                                let wr = &wv[j * in_f..(j + 1) * in_f];
                                for (a, c) in gxr.iter_mut().zip(wr) {
                                    *a += gj * c;
                                }
                            }
                        });
                    accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).unwrap());
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; out_f * in_f];
                    gw.par_chunks_mut(in_f).enumerate().for_each(|(j, gwr)| {
                        for (xr, gr) in xv.chunks(in_f).zip(g.chunks(out_f)) {
                            let gj = gr[j];
                            if gj == 0.0 {
                                continue;
                            }
                            for (a, c) in gwr.iter_mut().zip(xr) {
                                *a += gj * c;
                            }
                        }
                    });
                    accumulate(grads, *w, Tensor::new(ws.to_vec(), gw).unwrap());
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![0.0; out_f];
                        for gr in g.chunks(out_f) {
                            for (a, c) in gb.iter_mut().zip(gr) {
                                *a += c;
                            }
                        }
                        accumulate(grads, *b, Tensor::new(vec![out_f], gb).unwrap());
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(grads, *v, gy.clone());
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(self.shape(*b));
                    let n = gb.len();
                    for chunk in gy.data().chunks(n) {
                        for (o, v) in gb.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gy
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(g, v)| g * v)
                        .collect();
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
                }
                if self.wants(*b) {
                    let d = gy
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(g, v)| g * v)
                        .collect();
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d).unwrap());
                }
            }
            Op::Unary(x, act) => {
                let xv = self.value(*x);
                let d = gy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(y.data())
                    .map(|((g, xi), yi)| g * act.derivative(*xi, *yi))
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::Affine { x, scale } => {
                accumulate(grads, *x, gy.map(|g| g * scale));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*x);
                let d = *xv.shape().last().unwrap();
                let gv = self.value(*gamma).data();
                let mut gx = vec![0.0; xv.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut gxh = vec![0.0; d];
                for ((xr, gr), gxr) in xv
                    .data()
                    .chunks(d)
                    .zip(gy.data().chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    let (mean, rstd) = row_stats(xr, *eps);
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        gxh[j] = gr[j] * gv[j];
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                    }
                    let m1 = gxh.iter().sum::<f64>() / d as f64;
                    let m2 = gxh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gxr[j] = rstd * (gxh[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(vec![d], gg).unwrap());
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Tensor::new(vec![d], gb).unwrap());
                }
            }
            Op::Pool { x, kind } => {
                let xv = self.value(*x);
                let inner = xv.inner_size(1);
                let mut gx = vec![0.0; xv.len()];
                for ((xr, gxr), (&g, &yv)) in xv
                    .data()
                    .chunks(inner)
                    .zip(gx.chunks_mut(inner))
                    .zip(gy.data().iter().zip(y.data()))
                {
                    match kind {
                        PoolKind::Mean => gxr.iter_mut().for_each(|v| *v = g / inner as f64),
                        PoolKind::Max => {
                            let pos = xr.iter().position(|&v| v == yv).unwrap_or(0);
                            gxr[pos] = g;
                        }
                        PoolKind::Var => {
                            let m = xr.iter().sum::<f64>() / inner as f64;
                            for (o, v) in gxr.iter_mut().zip(xr) {
                                *o = g * 2.0 * (v - m) / inner as f64;
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
            Op::ScaleChannels { x, s } => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let inner = xv.inner_size(1);
                if self.wants(*x) {
                    let mut gx = gy.clone();
                    for (chunk, f) in gx.data_mut().chunks_mut(inner).zip(sv.data()) {
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    accumulate(grads, *x, gx);
                }
                if self.wants(*s) {
                    let gs = gy
                        .data()
                        .chunks(inner)
                        .zip(xv.data().chunks(inner))
                        .map(|(g, xr)| g.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(grads, *s, Tensor::new(sv.shape().to_vec(), gs).unwrap());
                }
            }
            Op::GatherTokens { x, positions } => {
                let xs = self.shape(*x);
                let (b, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let n = positions.len();
                let mut gx = Tensor::zeros(xs);
                let g = gy.data();
                let gxd = gx.data_mut();
                for bi in 0..b {
                    for (j, &p) in positions.iter().enumerate() {
                        for ci in 0..c {
                            gxd[(bi * c + ci) * inner + p] += g[(bi * n + j) * c + ci];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let outer: usize = y.shape()[..*axis].iter().product();
                let mut offset = 0;
                let row = y.len() / outer;
                for &p in parts {
                    let ps = self.shape(p);
                    let block = ps.iter().product::<usize>() / outer;
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(block * outer);
                        for o in 0..outer {
                            gp.extend_from_slice(&gy.data()[o * row + offset..][..block]);
                        }
                        accumulate(grads, p, Tensor::new(ps.to_vec(), gp).unwrap());
                    }
                    offset += block;
                }
            }
            Op::Reshape(x) => {
                let g = gy.clone().reshape(self.shape(*x)).unwrap();
                accumulate(grads, *x, g);
            }
            Op::RepeatBatch(x) => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let n = gx.len();
                for chunk in gy.data().chunks(n) {
                    for (o, v) in gx.data_mut().iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SliceLast { x, start } => {
                let xs = self.shape(*x);
                let d = *xs.last().unwrap();
                let len = *y.shape().last().unwrap();
                let mut gx = Tensor::zeros(xs);
                for (gr, src) in gx.data_mut().chunks_mut(d).zip(gy.data().chunks(len)) {
                    gr[*start..start + len].copy_from_slice(src);
                }
                accumulate(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (b, lq, h) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                let n = self.shape(*k)[1];
                let dh = h / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let g = gy.data();
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gv = vec![0.0; vv.len()];
                let mut gs = vec![0.0; n];
                for bi in 0..b {
                    for hd in 0..*heads {
                        let off = hd * dh;
                        for i in 0..lq {
                            let grow = &g[(bi * lq + i) * h + off..][..dh];
                            let prow = &probs[((bi * heads + hd) * lq + i) * n..][..n];
                            let mut dot = 0.0;
                            for j in 0..n {
                                let vrow = &vv[(bi * n + j) * h + off..][..dh];
                                let gp: f64 = grow.iter().zip(vrow).map(|(a, c)| a * c).sum();
                                gs[j] = gp;
                                dot += gp * prow[j];
                                let gvrow = &mut gv[(bi * n + j) * h + off..][..dh];
                                for (o, a) in gvrow.iter_mut().zip(grow) {
                                    *o += prow[j] * a;
                                }
                            }
                            let qrow = &qv[(bi * lq + i) * h + off..][..dh];
                            let gqrow = &mut gq[(bi * lq + i) * h + off..][..dh];
                            for j in 0..n {
                                let ds = prow[j] * (gs[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = &kv[(bi * n + j) * h + off..][..dh];
                                for (o, kk) in gqrow.iter_mut().zip(krow) {
                                    *o += ds * kk;
                                }
                                let gkrow = &mut gk[(bi * n + j) * h + off..][..dh];
                                for (o, qq) in gkrow.iter_mut().zip(qrow) {
                                    *o += ds * qq;
                                }
                            }
                        }
                    }
                }
                for (var, data) in [(q, gq), (k, gk), (v, gv)] {
                    if self.wants(*var) {
                        let shape = self.shape(*var).to_vec();
                        accumulate(grads, *var, Tensor::new(shape, data).unwrap());
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Flattened conv bookkeeping shared by the forward and adjoint kernels.
struct ConvGeo {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl ConvGeo {
    fn new(xs: &[usize], ws: &[usize], output: [usize; 3], spec: ConvSpec) -> Self {
        Self {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            groups: spec.groups,
            input: [xs[2], xs[3], xs[4]],
            kernel: [ws[2], ws[3], ws[4]],
            output,
            stride: spec.stride,
            padding: spec.padding,
        }
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Output indices `o` along `axis` whose input index `o * s + k - p` is
    /// inside the input, as a half-open range.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n, o) = (
            self.stride[axis] as isize,
            self.padding[axis] as isize,
            self.input[axis] as isize,
            self.output[axis] as isize,
        );
        let k = k as isize;
        // o * s + k - p >= 0  and  o * s + k - p <= n - 1
        let lo = ((p - k) + s - 1).div_euclid(s).max(0);
        let hi = ((n - 1 - k + p).div_euclid(s) + 1).min(o);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    /// Visits every (kernel offset, output row) pair with its matching input
    /// row; `f(kernel_index, out_row_start, in_row_start, wo_range)`.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, (usize, usize))) {
        let [kt, kh, kw] = self.kernel;
        let [_, ho_n, wo_n] = self.output;
        let [_, hi_n, wi_n] = self.input;
        for dt in 0..kt {
            let (t0, t1) = self.valid(0, dt);
            for dh in 0..kh {
                let (h0, h1) = self.valid(1, dh);
                for dw in 0..kw {
                    let wr = self.valid(2, dw);
                    if wr.1 == wr.0 {
                        continue;
                    }
                    let kidx = (dt * kh + dh) * kw + dw;
                    for to in t0..t1 {
                        let ti = to * self.stride[0] + dt - self.padding[0];
                        for ho in h0..h1 {
                            let hi = ho * self.stride[1] + dh - self.padding[1];
                            let orow = (to * ho_n + ho) * wo_n;
                            let irow = (ti * hi_n + hi) * wi_n;
                            f(kidx, orow, irow, wr);
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(geo: &ConvGeo, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (olen, ilen, klen) = (geo.out_len(), geo.in_len(), geo.kernel_len());
    let (cig, cog) = (geo.cin_per_group(), geo.cout_per_group());
    let (sw, pw, kw) = (geo.stride[2], geo.padding[2], geo.kernel[2]);
    let mut out = vec![0.0; geo.batch * geo.cout * olen];
    out.par_chunks_mut(olen).enumerate().for_each(|(bc, o)| {
        let (b, co) = (bc / geo.cout, bc % geo.cout);
        let g = co / cog;
        if let Some(bias) = bias {
            o.iter_mut().for_each(|v| *v = bias[co]);
        }
        for cl in 0..cig {
            let ci = g * cig + cl;
            let xin = &x[(b * geo.cin + ci) * ilen..][..ilen];
            let wk = &w[(co * cig + cl) * klen..][..klen];
            geo.for_each_row(|kidx, orow, irow, (w0, w1)| {
                let wv = wk[kidx];
                if wv == 0.0 {
                    return;
                }
                let dw = kidx % kw;
                let orow = &mut o[orow + w0..orow + w1];
                let base = irow + w0 * sw + dw - pw;
                if sw == 1 {
                    for (ov, xv) in orow.iter_mut().zip(&xin[base..base + (w1 - w0)]) {
                        *ov += wv * xv;
                    }
                } else {
                    for (j, ov) in orow.iter_mut().enumerate() {
                        *ov += wv * xin[base + j * sw];
                    }
                }
            });
        }
    });
    out
}

fn conv_backward_input(geo: &ConvGeo, gy: &[f64], w: &[f64]) -> Vec<f64> {
    let (olen, ilen, klen) = (geo.out_len(), geo.in_len(), geo.kernel_len());
    let (cig, cog) = (geo.cin_per_group(), geo.cout_per_group());
    let (sw, pw, kw) = (geo.stride[2], geo.padding[2], geo.kernel[2]);
    let mut gx = vec![0.0; geo.batch * geo.cin * ilen];
    gx.par_chunks_mut(ilen).enumerate().for_each(|(bc, gxi)| {
        let (b, ci) = (bc / geo.cin, bc % geo.cin);
        let g = ci / cig;
        let cl = ci % cig;
        for co in g * cog..(g + 1) * cog {
            let gout = &gy[(b * geo.cout + co) * olen..][..olen];
            let wk = &w[(co * cig + cl) * klen..][..klen];
            geo.for_each_row(|kidx, orow, irow, (w0, w1)| {
                let wv = wk[kidx];
                if wv == 0.0 {
                    return;
                }
                let dw = kidx % kw;
                let base = irow + w0 * sw + dw - pw;
                let grow = &gout[orow + w0..orow + w1];
                if sw == 1 {
                    for (xv, gv) in gxi[base..base + (w1 - w0)].iter_mut().zip(grow) {
                        *xv += wv * gv;
                    }
                } else {
                    for (j, gv) in grow.iter().enumerate() {
                        gxi[base + j * sw] += wv * gv;
                    }
                }
            });
        }
    });
    gx
}

fn conv_backward_weight(geo: &ConvGeo, gy: &[f64], x: &[f64]) -> Vec<f64> {
    let (olen, ilen, klen) = (geo.out_len(), geo.in_len(), geo.kernel_len());
    let (cig, cog) = (geo.cin_per_group(), geo.cout_per_group());
    let (sw, pw, kw) = (geo.stride[2], geo.padding[2], geo.kernel[2]);
    let mut gw = vec![0.0; geo.cout * cig * klen];
    gw.par_chunks_mut(cig * klen)
        .enumerate()
        .for_each(|(co, gwc)| {
            let g = co / cog;
            for b in 0..geo.batch {
                let gout = &gy[(b * geo.cout + co) * olen..][..olen];
                for cl in 0..cig {
                    let ci = g * cig + cl;
                    let xin = &x[(b * geo.cin + ci) * ilen..][..ilen];
                    let gk = &mut gwc[cl * klen..][..klen];
                    geo.for_each_row(|kidx, orow, irow, (w0, w1)| {
                        let dw = kidx % kw;
                        let base = irow + w0 * sw + dw - pw;
                        let grow = &gout[orow + w0..orow + w1];
                        let mut acc = 0.0;
                        if sw == 1 {
                            for (gv, xv) in grow.iter().zip(&xin[base..base + (w1 - w0)]) {
                                acc += gv * xv;
                            }
                        } else {
                            for (j, gv) in grow.iter().enumerate() {
                                acc += gv * xin[base + j * sw];
                            }
                        }
                        gk[kidx] += acc;
                    });
                }
            }
        });
    gw
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Checks d(sum(out * r))/d(leaf) against central differences for every
    /// leaf entry.
    fn check<F>(leaves: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        let r = random(g.shape(out), &mut rng);
        let grads = g.backward(&[(out, r.clone())]).unwrap();
        let objective = |leaves: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = leaves.iter().map(|t| g.variable(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out)
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let eps = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads
                .get(vars[li])
                .cloned()
                .unwrap_or(Tensor::zeros(leaf.shape()));
            for j in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[j] += eps;
                let mut minus = leaves.clone();
                minus[li].data_mut()[j] -= eps;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let a = analytic.data()[j];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "leaf {li} entry {j}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn conv3d_strided_padded_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 2, 3, 5, 6], &mut rng);
        let w = random(&[4, 2, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        check(vec![x, w, b], |g, v| {
            let spec = ConvSpec {
                stride: [1, 2, 2],
                padding: [1, 1, 1],
                groups: 1,
            };
            g.conv3d(v[0], v[1], Some(v[2]), spec).unwrap()
        });
    }

    #[test]
    fn depthwise_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 3, 3, 4, 4], &mut rng);
        let w = random(&[3, 1, 3, 5, 5], &mut rng);
        check(vec![x, w], |g, v| {
            let spec = ConvSpec {
                stride: [1, 1, 1],
                padding: [1, 2, 2],
                groups: 3,
            };
            g.conv3d(v[0], v[1], None, spec).unwrap()
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1x1x1 channel mixing is a per-voxel matrix product.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 2, 1, 2, 2], &mut rng);
        let w = random(&[3, 2, 1, 1, 1], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv3d(xv, wv, None, ConvSpec::pointwise()).unwrap();
        for co in 0..3 {
            for p in 0..4 {
                let expect = (0..2)
                    .map(|ci| w.data()[co * 2 + ci] * x.data()[ci * 4 + p])
                    .sum::<f64>();
                assert!((g.value(y).data()[co * 4 + p] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_layernorm_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 3, 5], &mut rng);
        let w = random(&[4, 5], &mut rng);
        let b = random(&[4], &mut rng);
        let gamma = random(&[4], &mut rng);
        let beta = random(&[4], &mut rng);
        check(vec![x, w, b, gamma, beta], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let y = g.layer_norm(y, v[3], v[4], 1e-5).unwrap();
            let y = g.activation(y, Activation::Gelu);
            let s = g.activation(y, Activation::Sigmoid);
            let t = g.activation(y, Activation::Tanh);
            let m = g.mul(s, t).unwrap();
            g.affine(m, 3.0, 1.0)
        });
    }

    #[test]
    fn pooling_and_channel_scaling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 2, 2, 2], &mut rng);
        check(vec![x], |g, v| {
            let mean = g.pool(v[0], PoolKind::Mean).unwrap();
            let max = g.pool(v[0], PoolKind::Max).unwrap();
            let var = g.pool(v[0], PoolKind::Var).unwrap();
            let s = g.activation(mean, Activation::Sigmoid);
            let scaled = g.scale_channels(v[0], s).unwrap();
            let sp = g.pool(scaled, PoolKind::Var).unwrap();
            g.concat(&[mean, max, var, sp], 1).unwrap()
        });
    }

    #[test]
    fn attention_gradients_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random(&[2, 3, 4], &mut rng);
        let k = random(&[2, 5, 4], &mut rng);
        let v = random(&[2, 5, 4], &mut rng);
        check(vec![q.clone(), k.clone(), v.clone()], |g, vars| {
            g.attention(vars[0], vars[1], vars[2], 2).unwrap()
        });
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
        let out = g.attention(q, k, v, 2).unwrap();
        for row in g.attention_probs(out).unwrap().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 3, 2, 2, 2], &mut rng);
        let bank = random(&[4, 3], &mut rng);
        let bias = random(&[3], &mut rng);
        check(vec![x, bank, bias], |g, v| {
            let tok = g.gather_tokens(v[0], vec![0, 3, 7]).unwrap();
            let rep = g.repeat_batch(v[1], 2);
            let cat = g.concat(&[tok, rep], 1).unwrap();
            let biased = g.add_broadcast(cat, v[2]).unwrap();
            let sl = g.slice_last(biased, 1, 2).unwrap();
            let r = g.reshape(sl, &[2, 14]).unwrap();
            let r2 = g.activation(r, Activation::Relu);
            g.add(r, r2).unwrap()
        });
    }

    #[test]
    fn single_key_attention_ignores_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random(&[1, 4, 4], &mut rng);
        let kv = random(&[1, 1, 4], &mut rng);
        let mut g = Graph::new();
        let q = g.constant(q);
        let k = g.constant(kv.clone());
        let out = g.attention(q, k, k, 2).unwrap();
        for row in g.value(out).data().chunks(4) {
            assert_eq!(row, kv.data());
        }
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.linear(a, b, None).is_err());
        let x = g.constant(Tensor::zeros(&[1, 1, 1, 2, 2]));
        let w = g.constant(Tensor::zeros(&[1, 1, 1, 3, 3]));
        assert!(g.conv3d(x, w, None, ConvSpec::pointwise()).is_err());
    }
}
