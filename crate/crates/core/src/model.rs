//! The fused relative/global recurrent pose network.
//!
//! * `cnn1`: shared per-frame feature extractor (stem + three bottleneck stages, stride 16).
//! * `rel`: adjacent frame pairs, channel-concatenated, through a stage-5 block,
//!   a stacked LSTM, `fc1` and a relative pose head.
//! * `glob`: single frames through its own stage-5 block, an LSTM, `fc2` and a
//!   global pose head.
//! * `fuse`: `fc3` over `[fc1, fc2]` followed by translation (`fc4`) and
//!   quaternion (`fc5`) heads.
//!
//! Head outputs are raw 7-vectors `(t, q)`; translations are mapped back to
//! metres with fixed per-axis statistics from the training data.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{pairs_from_adjacent, pairs_from_globals, PairSpec, RawPose, WindowPrediction};
use crate::nn::{ConvBn, Forward, Linear, Lstm, NodeId, ParamStore, Stage, Tensor};
use crate::pose::{canonicalize, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fused,
    RelativeOnly,
    GlobalOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Fused, Mode::RelativeOnly, Mode::GlobalOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fused => "fused",
            Mode::RelativeOnly => "relative_only",
            Mode::GlobalOnly => "global_only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected fused, relative_only or global_only)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub k: usize,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub stem_channels: usize,
    /// Output widths of the three bottleneck stages after the stem.
    pub backbone_channels: Vec<usize>,
    pub backbone_mid_channels: Vec<usize>,
    pub backbone_blocks: Vec<usize>,
    pub stage5_channels: usize,
    pub stage5_mid_channels: usize,
    pub stage5_blocks: usize,
    pub lstm_hidden: usize,
    pub lstm_layers_relative: usize,
    pub lstm_layers_global: usize,
    pub fc_width: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size network: a 50-layer residual trunk, 1000-unit LSTMs, 1024-wide embeddings.
    pub fn paper(k: usize) -> ModelConfig {
        ModelConfig {
            preset: Preset::Paper,
            k,
            image_size: (224, 224),
            stem_channels: 64,
            backbone_channels: vec![256, 512, 1024],
            backbone_mid_channels: vec![64, 128, 256],
            backbone_blocks: vec![3, 4, 6],
            stage5_channels: 1024,
            stage5_mid_channels: 256,
            stage5_blocks: 3,
            lstm_hidden: 1000,
            lstm_layers_relative: 2,
            lstm_layers_global: 1,
            fc_width: 1024,
            seed: 0,
        }
    }

    /// Same topology scaled down for CPU training.
    pub fn tiny(k: usize) -> ModelConfig {
        ModelConfig {
            preset: Preset::Tiny,
            k,
            image_size: (32, 32),
            stem_channels: 8,
            backbone_channels: vec![16, 32, 48],
            backbone_mid_channels: vec![8, 8, 16],
            backbone_blocks: vec![1, 1, 1],
            stage5_channels: 48,
            stage5_mid_channels: 16,
            stage5_blocks: 1,
            lstm_hidden: 64,
            lstm_layers_relative: 2,
            lstm_layers_global: 1,
            fc_width: 64,
            seed: 0,
        }
    }

    pub fn preset(preset: Preset, k: usize) -> ModelConfig {
        match preset {
            Preset::Paper => ModelConfig::paper(k),
            Preset::Tiny => ModelConfig::tiny(k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::loss::make_pair_spec(self.k)?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.backbone_channels.len() != 3 || self.backbone_mid_channels.len() != 3 || self.backbone_blocks.len() != 3 {
            return bad("backbone lists must have three entries");
        }
        let widths = [self.stem_channels, self.stage5_channels, self.stage5_mid_channels, self.lstm_hidden, self.fc_width];
        if widths.iter().chain(&self.backbone_channels).chain(&self.backbone_mid_channels).any(|&w| w == 0) {
            return bad("layer widths must be positive");
        }
        if self.backbone_blocks.contains(&0) || self.stage5_blocks == 0 {
            return bad("every stage needs at least one block");
        }
        if self.lstm_layers_relative == 0 || self.lstm_layers_global == 0 {
            return bad("recurrent branches need at least one layer");
        }
        let (h, w) = self.image_size;
        if h < 32 || w < 32 {
            return bad("image_size must be at least 32x32");
        }
        Ok(())
    }

    /// Spatial size after the stem convolution, after pooling, and after each stage.
    fn grids(&self) -> Vec<(usize, usize)> {
        let down = |(h, w): (usize, usize), k: usize, s: usize, p: usize| ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
        let stem = down(self.image_size, 7, 2, 3);
        let pool = down(stem, 3, 2, 1);
        let s2 = pool;
        let s3 = down(s2, 3, 2, 1);
        let s4 = down(s3, 3, 2, 1);
        let s5 = down(s4, 3, 2, 1);
        vec![stem, pool, s2, s3, s4, s5]
    }

    /// Grid of the shared feature maps (stride 16).
    pub fn feature_grid(&self) -> (usize, usize) {
        self.grids()[4]
    }

    pub fn stage5_grid(&self) -> (usize, usize) {
        self.grids()[5]
    }

    /// Width of the flattened stage-5 output fed to each LSTM.
    pub fn lstm_input(&self) -> usize {
        let (h, w) = self.stage5_grid();
        h * w * self.stage5_channels
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone_channels[2]
    }
}

/// Fixed input and output scaling, estimated on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub image_mean: [f64; 3],
    pub image_std: [f64; 3],
    pub global_t_mean: [f64; 3],
    pub global_t_std: [f64; 3],
    pub rel_t_mean: [f64; 3],
    pub rel_t_std: [f64; 3],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            image_mean: [0.0; 3],
            image_std: [1.0; 3],
            global_t_mean: [0.0; 3],
            global_t_std: [1.0; 3],
            rel_t_mean: [0.0; 3],
            rel_t_std: [1.0; 3],
        }
    }
}

impl NormStats {
    /// Standardizes `[N, 3, H, W]` images in place.
    pub fn normalize_images(&self, images: &mut Tensor) {
        let s = images.shape().to_vec();
        let plane = s[2] * s[3];
        for (i, chunk) in images.data_mut().chunks_mut(plane).enumerate() {
            let c = i % 3;
            chunk.iter_mut().for_each(|v| *v = (*v - self.image_mean[c]) / self.image_std[c]);
        }
    }

    fn affine(mean: &[f64; 3], std: &[f64; 3]) -> (Vec<f64>, Vec<f64>) {
        let scale = [std[0], std[1], std[2], 1.0, 1.0, 1.0, 1.0].to_vec();
        let shift = [mean[0], mean[1], mean[2], 0.0, 0.0, 0.0, 0.0].to_vec();
        (scale, shift)
    }
}

#[derive(Clone, Debug)]
struct PoseHead {
    t: Linear,
    q: Linear,
}

impl PoseHead {
    fn new(store: &mut ParamStore, prefix: &str, din: usize, rng: &mut ChaCha8Rng) -> PoseHead {
        PoseHead {
            t: Linear::new_head(store, &format!("{prefix}.fc4"), din, &[0.0; 3], rng),
            q: Linear::new_head(store, &format!("{prefix}.fc5"), din, &[1.0, 0.0, 0.0, 0.0], rng),
        }
    }

    fn forward(&self, f: &mut Forward, x: NodeId) -> NodeId {
        let t = self.t.forward(f, x);
        let q = self.q.forward(f, x);
        f.graph.concat_cols(&[t, q])
    }
}

#[derive(Clone, Debug)]
struct Branch {
    stage5: Stage,
    lstm: Lstm,
    fc: Linear,
    head: PoseHead,
}

/// Graph nodes produced by one forward pass. Pose nodes are `[B, 7]`
/// (translation in metres, raw quaternion); embeddings are `[B, fc_width]`.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub fc1: Vec<NodeId>,
    pub fc2: Vec<NodeId>,
    /// Adjacent transforms `j → j+1`, one per step.
    pub relative: Vec<NodeId>,
    /// Global poses read from `fc2` directly.
    pub global: Vec<NodeId>,
    /// Global poses from the fusion head.
    pub fused: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct VoModel {
    cfg: ModelConfig,
    stem: ConvBn,
    stages: Vec<Stage>,
    rel: Branch,
    glob: Branch,
    fc3: Linear,
    fuse_head: PoseHead,
}

impl VoModel {
    /// Builds the network and registers its parameters, initialized from `cfg.seed`.
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore) -> Result<VoModel> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rng = &mut rng;
        let stem = ConvBn::new(store, "cnn1.stem", 3, cfg.stem_channels, 7, 2, 3, rng);
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::new();
        for i in 0..3 {
            let stride = if i == 0 { 1 } else { 2 };
            let cout = cfg.backbone_channels[i];
            let name = format!("cnn1.stage{}", i + 2);
            stages.push(Stage::new(store, &name, cin, cfg.backbone_mid_channels[i], cout, cfg.backbone_blocks[i], stride, rng));
            cin = cout;
        }
        let feat = cfg.feature_channels();
        let branch = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, layers: usize, fc: &str| Branch {
            stage5: Stage::new(
                store,
                &format!("{prefix}.stage5"),
                cin,
                cfg.stage5_mid_channels,
                cfg.stage5_channels,
                cfg.stage5_blocks,
                2,
                rng,
            ),
            lstm: Lstm::new(store, &format!("{prefix}.lstm"), cfg.lstm_input(), cfg.lstm_hidden, layers, rng),
            fc: Linear::new(store, &format!("{prefix}.{fc}"), cfg.lstm_hidden, cfg.fc_width, true, rng),
            head: PoseHead::new(store, prefix, cfg.fc_width, rng),
        };
        let rel = branch(store, rng, "rel", 2 * feat, cfg.lstm_layers_relative, "fc1");
        let glob = branch(store, rng, "glob", feat, cfg.lstm_layers_global, "fc2");
        let fc3 = Linear::new(store, "fuse.fc3", 2 * cfg.fc_width, cfg.fc_width, false, rng);
        let fuse_head = PoseHead::new(store, "fuse", cfg.fc_width, rng);
        Ok(VoModel { cfg: cfg.clone(), stem, stages, rel, glob, fc3, fuse_head })
    }

    /// Convenience constructor returning a fresh parameter store.
    pub fn build(cfg: &ModelConfig) -> Result<(VoModel, ParamStore)> {
        let mut store = ParamStore::new();
        let model = VoModel::new(cfg, &mut store)?;
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        let (h, w) = self.cfg.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(Error::shape(format!("images {s:?}, expected [N, 3, {h}, {w}]")));
        }
        Ok(())
    }

    /// Per-frame feature maps `[N, C, H/16, W/16]` for images `[N, 3, H, W]`.
    pub fn extract_features(&self, f: &mut Forward, images: NodeId) -> NodeId {
        let x = self.stem.forward_elu(f, images);
        let mut x = f.graph.max_pool(x, 3, 2, 1);
        for s in &self.stages {
            x = s.forward(f, x);
        }
        x
    }

    fn run_branch(&self, f: &mut Forward, branch: &Branch, x: NodeId, steps: usize, b: usize) -> (Vec<NodeId>, Vec<NodeId>) {
        let y = branch.stage5.forward(f, x);
        let y = f.graph.reshape(y, &[steps * b, self.cfg.lstm_input()]);
        let seq: Vec<NodeId> = (0..steps).map(|j| f.graph.select_rows(y, &(j * b..(j + 1) * b).collect::<Vec<_>>())).collect();
        let hs = branch.lstm.forward(f, &seq);
        let emb: Vec<NodeId> = hs
            .into_iter()
            .map(|h| {
                let z = branch.fc.forward(f, h);
                f.graph.elu(z)
            })
            .collect();
        let raw = emb.iter().map(|&e| branch.head.forward(f, e)).collect();
        (emb, raw)
    }

    /// `fc1` embeddings and raw adjacent transforms for `b` windows whose
    /// features are stacked window-major in `feats` (`[b·K, C, h, w]`).
    pub fn relative_branch(&self, f: &mut Forward, feats: NodeId, b: usize) -> (Vec<NodeId>, Vec<NodeId>) {
        let k = self.cfg.k;
        let steps = k - 1;
        let first: Vec<usize> = (0..steps).flat_map(|j| (0..b).map(move |i| i * k + j)).collect();
        let second: Vec<usize> = first.iter().map(|i| i + 1).collect();
        let xa = f.graph.select_rows(feats, &first);
        let xb = f.graph.select_rows(feats, &second);
        let x = f.graph.concat_channels(&[xa, xb]);
        self.run_branch(f, &self.rel, x, steps, b)
    }

    /// `fc2` embeddings and raw global poses, one per frame.
    pub fn global_branch(&self, f: &mut Forward, feats: NodeId, b: usize) -> (Vec<NodeId>, Vec<NodeId>) {
        let k = self.cfg.k;
        let order: Vec<usize> = (0..k).flat_map(|j| (0..b).map(move |i| i * k + j)).collect();
        let x = f.graph.select_rows(feats, &order);
        self.run_branch(f, &self.glob, x, k, b)
    }

    /// Fusion head on one step: `fc3` over the concatenated embeddings, then
    /// the `fc4`/`fc5` heads. Returns the raw head output.
    pub fn fuse(&self, f: &mut Forward, fc1: NodeId, fc2: NodeId) -> NodeId {
        let x = f.graph.concat_cols(&[fc1, fc2]);
        let h = self.fc3.forward(f, x);
        let h = f.graph.elu(h);
        self.fuse_head.forward(f, h)
    }

    /// `fc1` embeddings and adjacent transforms with translations in metres.
    pub fn relative_poses(&self, f: &mut Forward, feats: NodeId, b: usize, norm: &NormStats) -> (Vec<NodeId>, Vec<NodeId>) {
        let (scale, shift) = NormStats::affine(&norm.rel_t_mean, &norm.rel_t_std);
        let (emb, raw) = self.relative_branch(f, feats, b);
        let poses = raw.into_iter().map(|r| f.graph.affine_cols(r, &scale, &shift)).collect();
        (emb, poses)
    }

    /// Runs the branches `mode` needs on precomputed features.
    ///
    /// In fused mode global step `j` is fused with the embedding of the pair
    /// `(j-1, j)`; step 0 has no incoming pair and uses a zero embedding.
    pub fn forward_features(&self, f: &mut Forward, feats: NodeId, b: usize, mode: Mode, norm: &NormStats) -> Outputs {
        let (glob_scale, glob_shift) = NormStats::affine(&norm.global_t_mean, &norm.global_t_std);
        let mut out = Outputs::default();
        if mode != Mode::GlobalOnly {
            (out.fc1, out.relative) = self.relative_poses(f, feats, b, norm);
        }
        if mode != Mode::RelativeOnly {
            let (emb, raw) = self.global_branch(f, feats, b);
            out.fc2 = emb;
            if mode == Mode::GlobalOnly {
                out.global = raw.into_iter().map(|r| f.graph.affine_cols(r, &glob_scale, &glob_shift)).collect();
            }
        }
        if mode == Mode::Fused {
            let zero = f.input(Tensor::zeros(&[b, self.cfg.fc_width]));
            for j in 0..self.cfg.k {
                let e1 = if j == 0 { zero } else { out.fc1[j - 1] };
                let raw = self.fuse(f, e1, out.fc2[j]);
                out.fused.push(f.graph.affine_cols(raw, &glob_scale, &glob_shift));
            }
        }
        out
    }

    /// Full forward pass on normalized images `[b·K, 3, H, W]`.
    pub fn forward(&self, f: &mut Forward, images: Tensor, b: usize, mode: Mode, norm: &NormStats) -> Result<Outputs> {
        self.check_images(&images)?;
        if images.shape()[0] != b * self.cfg.k {
            return Err(Error::shape(format!("{} frames for {b} windows of {}", images.shape()[0], self.cfg.k)));
        }
        let x = f.input(images);
        let feats = self.extract_features(f, x);
        Ok(self.forward_features(f, feats, b, mode, norm))
    }

    /// Inference on normalized images (batch-norm in evaluation mode).
    ///
    /// Relative-only predictions carry no global poses; see
    /// [`integrate_from_anchor`] for the evaluation-time reconstruction.
    pub fn predict(
        &self,
        store: &ParamStore,
        images: Tensor,
        b: usize,
        mode: Mode,
        norm: &NormStats,
        spec: &PairSpec,
    ) -> Result<Vec<WindowPrediction>> {
        let mut f = Forward::new(store, false);
        let out = self.forward(&mut f, images, b, mode, norm)?;
        collect_predictions(&f, &out, b, mode, spec, PairSource::Relative)
    }
}

/// Where the pair predictions of a global-only pass come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    /// Relative transforms between the predicted global poses.
    Globals,
    /// The relative branch's composed adjacent transforms.
    Relative,
}

fn rows(f: &Forward, nodes: &[NodeId], i: usize) -> Vec<RawPose> {
    nodes
        .iter()
        .map(|&n| {
            let v = &f.graph.value(n).data()[i * 7..(i + 1) * 7];
            RawPose::from_array(v.try_into().expect("7 columns"))
        })
        .collect()
}

/// Reads per-window predictions out of a finished forward pass.
///
/// Global-only passes derive pairs from the global poses unless
/// `global_pairs` is [`PairSource::Relative`] and relative outputs exist.
pub fn collect_predictions(
    f: &Forward,
    out: &Outputs,
    b: usize,
    mode: Mode,
    spec: &PairSpec,
    global_pairs: PairSource,
) -> Result<Vec<WindowPrediction>> {
    (0..b)
        .map(|i| {
            let adjacent = rows(f, &out.relative, i);
            let pred_global = match mode {
                Mode::Fused => rows(f, &out.fused, i),
                Mode::GlobalOnly => rows(f, &out.global, i),
                Mode::RelativeOnly => Vec::new(),
            };
            let pred_pairs = if mode == Mode::GlobalOnly && (global_pairs == PairSource::Globals || adjacent.is_empty()) {
                pairs_from_globals(&pred_global, spec)?
            } else {
                pairs_from_adjacent(&adjacent, spec)?
            };
            for p in pred_global.iter().chain(&pred_pairs) {
                canonicalize(p.q)?;
            }
            Ok(WindowPrediction { pred_global, pred_pairs })
        })
        .collect()
}

/// Fills `pred_global` of a relative-only prediction by chaining its
/// adjacent transforms onto `anchor` (the window's first ground-truth pose).
pub fn integrate_from_anchor(pred: &mut WindowPrediction, spec: &PairSpec, anchor: &Pose) -> Result<()> {
    let mut poses = vec![*anchor];
    let adjacent: Vec<&RawPose> = spec
        .pairs()
        .iter()
        .zip(&pred.pred_pairs)
        .filter(|((i, j), _)| *j == i + 1)
        .map(|(_, p)| p)
        .collect();
    for a in adjacent {
        let step = a.to_pose()?;
        let next = step.compose(poses.last().expect("nonempty"));
        poses.push(next);
    }
    pred.pred_global = poses.into_iter().map(RawPose::from).collect();
    Ok(())
}

/// Names and shapes of every parameter the network registers, computed
/// without allocating any weights.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let conv_bn = |out: &mut Vec<(String, Vec<usize>)>, name: String, cin: usize, cout: usize, k: usize| {
        out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
        out.push((format!("{name}.bn.gamma"), vec![cout]));
        out.push((format!("{name}.bn.beta"), vec![cout]));
    };
    let stage = |out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, mid: usize, cout: usize, blocks: usize, stride: usize| {
        for i in 0..blocks {
            let (ci, s) = if i == 0 { (cin, stride) } else { (cout, 1) };
            let b = format!("{name}.{i}");
            conv_bn(out, format!("{b}.reduce"), ci, mid, 1);
            conv_bn(out, format!("{b}.spatial"), mid, mid, 3);
            conv_bn(out, format!("{b}.expand"), mid, cout, 1);
            if ci != cout || s != 1 {
                conv_bn(out, format!("{b}.shortcut"), ci, cout, 1);
            }
        }
    };
    out.push(("cnn1.stem.weight".into(), vec![cfg.stem_channels, 3, 7, 7]));
    out.push(("cnn1.stem.bn.gamma".into(), vec![cfg.stem_channels]));
    out.push(("cnn1.stem.bn.beta".into(), vec![cfg.stem_channels]));
    let mut cin = cfg.stem_channels;
    for i in 0..3 {
        let name = format!("cnn1.stage{}", i + 2);
        let stride = if i == 0 { 1 } else { 2 };
        stage(&mut out, &name, cin, cfg.backbone_mid_channels[i], cfg.backbone_channels[i], cfg.backbone_blocks[i], stride);
        cin = cfg.backbone_channels[i];
    }
    for (prefix, cin, layers, fc) in [
        ("rel", 2 * cfg.feature_channels(), cfg.lstm_layers_relative, "fc1"),
        ("glob", cfg.feature_channels(), cfg.lstm_layers_global, "fc2"),
    ] {
        stage(&mut out, &format!("{prefix}.stage5"), cin, cfg.stage5_mid_channels, cfg.stage5_channels, cfg.stage5_blocks, 2);
        let h = cfg.lstm_hidden;
        for l in 0..layers {
            let din = if l == 0 { cfg.lstm_input() } else { h };
            out.push((format!("{prefix}.lstm.{l}.w_ih"), vec![din, 4 * h]));
            out.push((format!("{prefix}.lstm.{l}.w_hh"), vec![h, 4 * h]));
            out.push((format!("{prefix}.lstm.{l}.bias"), vec![4 * h]));
        }
        out.push((format!("{prefix}.{fc}.weight"), vec![h, cfg.fc_width]));
        out.push((format!("{prefix}.{fc}.bias"), vec![cfg.fc_width]));
        head_shapes(&mut out, prefix, cfg.fc_width);
    }
    out.push(("fuse.fc3.weight".into(), vec![2 * cfg.fc_width, cfg.fc_width]));
    head_shapes(&mut out, "fuse", cfg.fc_width);
    out
}

fn head_shapes(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, din: usize) {
    out.push((format!("{prefix}.fc4.weight"), vec![din, 3]));
    out.push((format!("{prefix}.fc4.bias"), vec![3]));
    out.push((format!("{prefix}.fc5.weight"), vec![din, 4]));
    out.push((format!("{prefix}.fc5.bias"), vec![4]));
}

/// Per-window activation shapes (leading batch axis omitted) of the main
/// layer outputs, computed analytically.
pub fn activation_shapes(cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let g = cfg.grids();
    let c = &cfg.backbone_channels;
    vec![
        ("cnn1.stem", vec![cfg.stem_channels, g[0].0, g[0].1]),
        ("cnn1.pool", vec![cfg.stem_channels, g[1].0, g[1].1]),
        ("cnn1.stage2", vec![c[0], g[2].0, g[2].1]),
        ("cnn1.stage3", vec![c[1], g[3].0, g[3].1]),
        ("cnn1.stage4", vec![c[2], g[4].0, g[4].1]),
        ("rel.stage5", vec![cfg.stage5_channels, g[5].0, g[5].1]),
        ("rel.lstm", vec![cfg.lstm_hidden]),
        ("rel.fc1", vec![cfg.fc_width]),
        ("glob.stage5", vec![cfg.stage5_channels, g[5].0, g[5].1]),
        ("glob.lstm", vec![cfg.lstm_hidden]),
        ("glob.fc2", vec![cfg.fc_width]),
        ("fuse.fc3", vec![cfg.fc_width]),
        ("fuse.fc4", vec![3]),
        ("fuse.fc5", vec![4]),
    ]
}

pub fn count_parameters(cfg: &ModelConfig) -> usize {
    param_shapes(cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}
