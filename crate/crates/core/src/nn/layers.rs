//! Parameterized building blocks on top of [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

/// One forward pass: the tape, the parameters it reads and the batch-norm
/// statistics it observed.
pub struct Forward<'s> {
    pub graph: Graph,
    pub store: &'s ParamStore,
    /// Normalize with batch statistics (training) instead of running statistics.
    pub train_bn: bool,
    /// Name prefixes whose batch-norm layers use running statistics even when `train_bn` is set.
    pub eval_bn: Vec<String>,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s ParamStore, train_bn: bool) -> Forward<'s> {
        Forward { graph: Graph::new(), store, train_bn, eval_bn: Vec::new(), bn_updates: Vec::new() }
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.graph.param(self.store, id)
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.graph.input(t)
    }
}

/// Folds observed batch statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let unbias = if u.count > 1 { u.count as f64 / (u.count as f64 - 1.0) } else { 1.0 };
        let mean = store.buffer_mut(&format!("{}.running_mean", u.prefix));
        for (r, m) in mean.data_mut().iter_mut().zip(&u.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let var = store.buffer_mut(&format!("{}.running_var", u.prefix));
        for (r, v) in var.data_mut().iter_mut().zip(&u.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
    }
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    /// He-normal weights (the layer is usually followed by an ELU), zero bias.
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool, rng: &mut impl Rng) -> Linear {
        let w = store.add(format!("{name}.weight"), normal_tensor(rng, &[din, dout], (2.0 / din as f64).sqrt()));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[dout])));
        Linear { w, b, din, dout }
    }

    /// Small-variance weights for regression heads.
    pub fn new_head(store: &mut ParamStore, name: &str, din: usize, bias_init: &[f64], rng: &mut impl Rng) -> Linear {
        let dout = bias_init.len();
        let w = store.add(format!("{name}.weight"), normal_tensor(rng, &[din, dout], 0.01 / (din as f64).sqrt()));
        let b = store.add(format!("{name}.bias"), Tensor::from_vec(&[dout], bias_init.to_vec()));
        Linear { w, b: Some(b), din, dout }
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> NodeId {
        let w = f.param(self.w);
        let b = self.b.map(|b| f.param(b));
        f.graph.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub name: String,
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> ConvBn {
        let fan_in = (cin * k * k) as f64;
        let w = store.add(format!("{name}.weight"), normal_tensor(rng, &[cout, cin, k, k], (2.0 / fan_in).sqrt()));
        let gamma = store.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0));
        let beta = store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
        store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[cout]));
        store.add_buffer(format!("{name}.bn.running_var"), Tensor::full(&[cout], 1.0));
        ConvBn { name: name.to_string(), w, gamma, beta, stride, pad }
    }

    /// Convolution followed by batch normalization (no activation).
    pub fn forward(&self, f: &mut Forward, x: NodeId) -> NodeId {
        let w = f.param(self.w);
        let c = f.graph.conv2d(x, w, self.stride, self.pad);
        let (gamma, beta) = (f.param(self.gamma), f.param(self.beta));
        let prefix = format!("{}.bn", self.name);
        if f.train_bn && !f.eval_bn.iter().any(|p| self.name.starts_with(p.as_str())) {
            let count = f.graph.shape(c)[0] * f.graph.shape(c)[2] * f.graph.shape(c)[3];
            let (y, stats) = f.graph.batch_norm(c, gamma, beta, None);
            let (mean, var) = stats.expect("batch statistics");
            f.bn_updates.push(BnUpdate { prefix, mean, var, count });
            y
        } else {
            let mean = f.store.buffer(&format!("{prefix}.running_mean")).data().to_vec();
            let var = f.store.buffer(&format!("{prefix}.running_var")).data().to_vec();
            f.graph.batch_norm(c, gamma, beta, Some((&mean, &var))).0
        }
    }

    pub fn forward_elu(&self, f: &mut Forward, x: NodeId) -> NodeId {
        let y = self.forward(f, x);
        f.graph.elu(y)
    }
}

/// Residual bottleneck: 1×1 reduce, 3×3 (strided), 1×1 expand, with a
/// projection shortcut when the shape changes.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: ConvBn,
    pub spatial: ConvBn,
    pub expand: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Bottleneck {
        let reduce = ConvBn::new(store, &format!("{name}.reduce"), cin, mid, 1, 1, 0, rng);
        let spatial = ConvBn::new(store, &format!("{name}.spatial"), mid, mid, 3, stride, 1, rng);
        let expand = ConvBn::new(store, &format!("{name}.expand"), mid, cout, 1, 1, 0, rng);
        let shortcut = (cin != cout || stride != 1)
            .then(|| ConvBn::new(store, &format!("{name}.shortcut"), cin, cout, 1, stride, 0, rng));
        Bottleneck { reduce, spatial, expand, shortcut }
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> NodeId {
        let h = self.reduce.forward_elu(f, x);
        let h = self.spatial.forward_elu(f, h);
        let h = self.expand.forward(f, h);
        let s = match &self.shortcut {
            Some(sc) => sc.forward(f, x),
            None => x,
        };
        let y = f.graph.add(h, s);
        f.graph.elu(y)
    }
}

/// Sequence of bottlenecks; only the first one changes width and resolution.
#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<Bottleneck>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        blocks: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Stage {
        let blocks = (0..blocks)
            .map(|i| {
                let (ci, s) = if i == 0 { (cin, stride) } else { (cout, 1) };
                Bottleneck::new(store, &format!("{name}.{i}"), ci, mid, cout, s, rng)
            })
            .collect();
        Stage { blocks }
    }

    pub fn forward(&self, f: &mut Forward, mut x: NodeId) -> NodeId {
        for b in &self.blocks {
            x = b.forward(f, x);
        }
        x
    }
}

#[derive(Clone, Debug)]
struct LstmLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

/// Stacked LSTM with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct Lstm {
    layers: Vec<LstmLayer>,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, num_layers: usize, rng: &mut impl Rng) -> Lstm {
        let bound = 1.0 / (hidden as f64).sqrt();
        let layers = (0..num_layers)
            .map(|l| {
                let din = if l == 0 { input } else { hidden };
                let w_ih = store.add(format!("{name}.{l}.w_ih"), uniform_tensor(rng, &[din, 4 * hidden], bound));
                let w_hh = store.add(format!("{name}.{l}.w_hh"), uniform_tensor(rng, &[hidden, 4 * hidden], bound));
                let mut b = vec![0.0; 4 * hidden];
                b[hidden..2 * hidden].fill(1.0);
                let b = store.add(format!("{name}.{l}.bias"), Tensor::from_vec(&[4 * hidden], b));
                LstmLayer { w_ih, w_hh, b }
            })
            .collect();
        Lstm { layers, input, hidden }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Runs the sequence `xs` (each `[batch, input]`) from a zero state and
    /// returns the top layer's hidden state at every step.
    pub fn forward(&self, f: &mut Forward, xs: &[NodeId]) -> Vec<NodeId> {
        let hd = self.hidden;
        let mut seq = xs.to_vec();
        for layer in &self.layers {
            let (w_ih, w_hh, b) = (f.param(layer.w_ih), f.param(layer.w_hh), f.param(layer.b));
            let mut state: Option<(NodeId, NodeId)> = None;
            let mut out = Vec::with_capacity(seq.len());
            for &x in &seq {
                let mut z = f.graph.linear(x, w_ih, Some(b));
                if let Some((h, _)) = state {
                    let r = f.graph.linear(h, w_hh, None);
                    z = f.graph.add(z, r);
                }
                let zi = f.graph.slice_cols(z, 0, hd);
                let zf = f.graph.slice_cols(z, hd, hd);
                let zg = f.graph.slice_cols(z, 2 * hd, hd);
                let zo = f.graph.slice_cols(z, 3 * hd, hd);
                let i = f.graph.sigmoid(zi);
                let g = f.graph.tanh(zg);
                let o = f.graph.sigmoid(zo);
                let mut c = f.graph.mul(i, g);
                if let Some((_, c_prev)) = state {
                    let fg = f.graph.sigmoid(zf);
                    let kept = f.graph.mul(fg, c_prev);
                    c = f.graph.add(c, kept);
                }
                let tc = f.graph.tanh(c);
                let h = f.graph.mul(o, tc);
                state = Some((h, c));
                out.push(h);
            }
            seq = out;
        }
        seq
    }
}
