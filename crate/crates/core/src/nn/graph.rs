//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the backward sweep simply walks the tape in reverse.
//! Parameter gradients are accumulated into the [`ParamStore`]; frozen
//! parameters are treated as constants and receive nothing.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv2d { x: NodeId, w: NodeId, geom: ConvGeom },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Elu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MaxPool { x: NodeId, argmax: Vec<usize> },
    ConcatChannels(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    SelectRows { x: NodeId, rows: Vec<usize> },
    Reshape(NodeId),
    AffineCols { x: NodeId, scale: Vec<f64> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const BN_EPS: f64 = 1e-5;
pub const ELU_ALPHA: f64 = 1.0;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let p = store.get(id);
        let n = self.push(p.value.clone(), Op::Param(id), !p.frozen);
        self.param_nodes.insert(id, n);
        n
    }

    /// `x·w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (xs, ws) = (self.shape(x), self.shape(w));
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[0], "linear: x {xs:?}, w {ws:?}");
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let mut y = vec![0.0; n * dout];
        gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), false, 0.0, &mut y);
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), dout);
            for row in y.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::from_vec(&[n, dout], y), Op::Linear { x, w, b }, ng)
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1], "conv2d: x {xs:?}, w {ws:?}");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { c, h, w: wd, kh, kw, stride, pad, ho, wo };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut y = vec![0.0; n * o * cols_n];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { rows * cols_n }];
        for i in 0..n {
            let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
            let src: &[f64] = if geom.is_pointwise() {
                xi
            } else {
                im2col(xi, &geom, &mut cols);
                &cols
            };
            gemm(o, rows, cols_n, wv, false, src, false, 0.0, &mut y[i * o * cols_n..(i + 1) * o * cols_n]);
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::from_vec(&[n, o, ho, wo], y), Op::Conv2d { x, w, geom }, ng)
    }

    /// Batch normalization over every axis except 1 of `x: [N, C, ...]`.
    ///
    /// With `stats = None` the batch statistics are used and returned as
    /// `(mean, biased variance)`; otherwise the given running statistics are applied.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: Option<(&[f64], &[f64])>,
    ) -> (NodeId, Option<(Vec<f64>, Vec<f64>)>) {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() >= 2, "batch_norm: rank {}", xs.len());
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let m = (n * inner) as f64;
        let xv = self.value(x).data();
        let (mean, var) = match stats {
            Some((mu, var)) => (mu.to_vec(), var.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xv[(i * c + ch) * inner..(i * c + ch + 1) * inner].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut ss = 0.0;
                    for i in 0..n {
                        ss += xv[(i * c + ch) * inner..(i * c + ch + 1) * inner].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                for j in off..off + inner {
                    xhat[j] = (xv[j] - mean[ch]) * inv_std[ch];
                    y[j] = gv[ch] * xhat[j] + bv[ch];
                }
            }
        }
        let batch_stats = stats.is_none();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let id = self.push(Tensor::from_vec(&xs, y), Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, ng);
        (id, batch_stats.then_some((mean, var)))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|&a| f(a)).collect());
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |a| if a > 0.0 { a } else { ELU_ALPHA * a.exp_m1() }, Op::Elu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |a| 1.0 / (1.0 + (-a).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shapes");
        let out = Tensor::from_vec(va.shape(), va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Max pooling with a square window over `x: [N, C, H, W]`.
    pub fn max_pool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let xv = self.value(x).data();
        let mut y = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0; y.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = usize::MAX;
                    for dy in 0..k {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xv[idx] > best {
                                best = xv[idx];
                                arg = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    y[o] = best;
                    argmax[o] = arg;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[n, c, ho, wo], y), Op::MaxPool { x, argmax }, ng)
    }

    /// Concatenation along axis 1 of `[N, C_i, ...]` tensors.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        let first = self.shape(xs[0]).to_vec();
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let widths: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let s = self.shape(x);
                assert!(s[0] == n && s[2..] == first[2..], "concat_channels: {s:?} vs {first:?}");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(n * total * inner);
        for i in 0..n {
            for (&x, &cw) in xs.iter().zip(&widths) {
                y.extend_from_slice(&self.value(x).data()[i * cw * inner..(i + 1) * cw * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Tensor::from_vec(&shape, y), Op::ConcatChannels(xs.to_vec()), ng)
    }

    /// Concatenation of `[N, D_i]` matrices along columns.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        let s0 = self.shape(xs[0]);
        assert_eq!(s0.len(), 2);
        let rank4: Vec<NodeId> = xs.to_vec();
        // Same memory layout as channel concatenation with no trailing axes.
        let id = self.concat_channels(&rank4);
        let last = self.nodes.last_mut().expect("just pushed");
        last.op = Op::ConcatCols(rank4);
        id
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.shape(x);
        assert!(s.len() == 2 && start + len <= s[1], "slice_cols {s:?} [{start}, +{len})");
        let (n, d) = (s[0], s[1]);
        let xv = self.value(x).data();
        let y: Vec<f64> = (0..n).flat_map(|i| xv[i * d + start..i * d + start + len].iter().copied()).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[n, len], y), Op::SliceCols { x, start }, ng)
    }

    /// Gathers entries of the leading axis.
    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let s = self.shape(x).to_vec();
        let inner: usize = s[1..].iter().product();
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            assert!(r < s[0], "select_rows: row {r} of {}", s[0]);
            y.extend_from_slice(&xv[r * inner..(r + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, y), Op::SelectRows { x, rows: rows.to_vec() }, ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).clone().reshaped(shape);
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Fixed per-column affine map `x·diag(scale) + shift` on `[N, D]`.
    pub fn affine_cols(&mut self, x: NodeId, scale: &[f64], shift: &[f64]) -> NodeId {
        let s = self.shape(x);
        assert!(s.len() == 2 && s[1] == scale.len() && s[1] == shift.len());
        let d = s[1];
        let y: Vec<f64> = self.value(x).data().iter().enumerate().map(|(i, v)| v * scale[i % d] + shift[i % d]).collect();
        let shape = s.to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, y), Op::AffineCols { x, scale: scale.to_vec() }, ng)
    }

    /// Reverse sweep seeded with `d(objective)/d(node)` for each given node.
    /// Gradients of trainable parameters are added to `store`.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>, store: &mut ParamStore) {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.shape(id), "seed shape");
            last = last.max(id.0);
            accumulate(&mut grads, id, g);
        }
        for i in (0..=last).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, gy, &mut grads, store);
        }
    }

    fn backprop_node(&self, node: &Node, gy: Tensor, grads: &mut [Option<Tensor>], store: &mut ParamStore) {
        match &node.op {
            Op::Input => {}
            Op::Param(pid) => {
                let p = store.get_mut(*pid);
                if !p.frozen {
                    p.grad.add_assign(&gy);
                }
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, din, dout) = (xs[0], xs[1], ws[1]);
                if self.ng(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, gy.data(), false, self.value(*w).data(), true, 0.0, &mut dx);
                    accumulate(grads, *x, Tensor::from_vec(&[n, din], dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, n, dout, self.value(*x).data(), true, gy.data(), false, 0.0, &mut dw);
                    accumulate(grads, *w, Tensor::from_vec(&[din, dout], dw));
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    let mut db = vec![0.0; dout];
                    for row in gy.data().chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    accumulate(grads, b, Tensor::from_vec(&[dout], db));
                }
            }
            Op::Conv2d { x, w, geom } => self.conv2d_backward(*x, *w, geom, &gy, grads),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let g = gy.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * inner;
                        for j in off..off + inner {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if self.ng(*x) {
                    let gv = self.value(*gamma).data();
                    let m = (n * inner) as f64;
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * inner;
                            let k = gv[ch] * inv_std[ch];
                            for j in off..off + inner {
                                dx[j] = if *batch_stats {
                                    k * (g[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::from_vec(xs, dx));
                }
                if self.ng(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                }
                if self.ng(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta));
                }
            }
            Op::Elu(x) => {
                let y = node.value.data();
                let xv = self.value(*x).data();
                let dx = gy.data().iter().zip(xv.iter().zip(y)).map(|(g, (&a, &b))| if a > 0.0 { *g } else { g * (b + ELU_ALPHA) });
                accumulate(grads, *x, Tensor::from_vec(gy.shape(), dx.collect()));
            }
            Op::Sigmoid(x) => {
                let dx = gy.data().iter().zip(node.value.data()).map(|(g, s)| g * s * (1.0 - s));
                accumulate(grads, *x, Tensor::from_vec(gy.shape(), dx.collect()));
            }
            Op::Tanh(x) => {
                let dx = gy.data().iter().zip(node.value.data()).map(|(g, t)| g * (1.0 - t * t));
                accumulate(grads, *x, Tensor::from_vec(gy.shape(), dx.collect()));
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, gy);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d = gy.data().iter().zip(self.value(*b).data()).map(|(g, v)| g * v);
                    accumulate(grads, *a, Tensor::from_vec(gy.shape(), d.collect()));
                }
                if self.ng(*b) {
                    let d = gy.data().iter().zip(self.value(*a).data()).map(|(g, v)| g * v);
                    accumulate(grads, *b, Tensor::from_vec(gy.shape(), d.collect()));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (g, &a) in gy.data().iter().zip(argmax) {
                    d[a] += g;
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatChannels(xs) | Op::ConcatCols(xs) => {
                let shape = gy.shape();
                let n = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total = shape[1];
                let mut off = 0;
                for &x in xs {
                    let cw = self.shape(x)[1];
                    if self.ng(x) {
                        let mut d = Vec::with_capacity(n * cw * inner);
                        for i in 0..n {
                            let start = (i * total + off) * inner;
                            d.extend_from_slice(&gy.data()[start..start + cw * inner]);
                        }
                        accumulate(grads, x, Tensor::from_vec(self.shape(x), d));
                    }
                    off += cw;
                }
            }
            Op::SliceCols { x, start } => {
                let xs = self.shape(*x);
                let (n, d) = (xs[0], xs[1]);
                let len = gy.shape()[1];
                let mut dx = Tensor::zeros(xs);
                for i in 0..n {
                    dx.data_mut()[i * d + start..i * d + start + len].copy_from_slice(&gy.data()[i * len..(i + 1) * len]);
                }
                accumulate(grads, *x, dx);
            }
            Op::SelectRows { x, rows } => {
                let xs = self.shape(*x);
                let inner: usize = xs[1..].iter().product();
                let mut dx = Tensor::zeros(xs);
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut dx.data_mut()[r * inner..(r + 1) * inner];
                    dst.iter_mut().zip(&gy.data()[k * inner..(k + 1) * inner]).for_each(|(a, g)| *a += g);
                }
                accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                accumulate(grads, *x, gy.reshaped(&shape));
            }
            Op::AffineCols { x, scale } => {
                let d = scale.len();
                let dx = gy.data().iter().enumerate().map(|(i, g)| g * scale[i % d]).collect();
                accumulate(grads, *x, Tensor::from_vec(gy.shape(), dx));
            }
        }
    }

    fn conv2d_backward(&self, x: NodeId, w: NodeId, geom: &ConvGeom, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let xs = self.shape(x);
        let n = xs[0];
        let o = self.shape(w)[0];
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let plane = geom.c * geom.h * geom.w;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let (need_x, need_w) = (self.ng(x), self.ng(w));
        let mut dw = vec![0.0; if need_w { o * rows } else { 0 }];
        let mut dx = vec![0.0; if need_x { xv.len() } else { 0 }];
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { rows * cols_n }];
        let mut dcols = vec![0.0; if need_x { rows * cols_n } else { 0 }];
        for i in 0..n {
            let gi = &gy.data()[i * o * cols_n..(i + 1) * o * cols_n];
            if need_w {
                let xi = &xv[i * plane..(i + 1) * plane];
                let src: &[f64] = if geom.is_pointwise() {
                    xi
                } else {
                    im2col(xi, geom, &mut cols);
                    &cols
                };
                gemm(o, cols_n, rows, gi, false, src, true, 1.0, &mut dw);
            }
            if need_x {
                gemm(rows, o, cols_n, wv, true, gi, false, 0.0, &mut dcols);
                let dxi = &mut dx[i * plane..(i + 1) * plane];
                if geom.is_pointwise() {
                    dxi.copy_from_slice(&dcols);
                } else {
                    col2im(&dcols, geom, dxi);
                }
            }
        }
        if need_w {
            accumulate(grads, w, Tensor::from_vec(self.shape(w), dw));
        }
        if need_x {
            accumulate(grads, x, Tensor::from_vec(xs, dx));
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n_cols = g.ho * g.wo;
    for ch in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ch * g.h + iy as usize) * g.w..(ch * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    dx.fill(0.0);
    let n_cols = g.ho * g.wo;
    for ch in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ch * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
