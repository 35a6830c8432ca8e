//! Three-stage training: relative pretraining, per-scene global pretraining
//! on frozen features, and end-to-end refinement of the fused network.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, SceneRegistry};
use crate::dataset::{estimate_norm_stats, mean_std, stack_frames, window_iter, Frame, SequenceRecord};
use crate::error::{Error, Result};
use crate::loss::{
    joint_loss_grad, make_pair_spec, pairs_from_adjacent_vjp, pairs_from_globals_vjp, relative_loss_grad, LossBreakdown, LossWeights,
    PairSpec, RawPose, WindowPrediction, WindowTarget,
};
use crate::model::{collect_predictions, Mode, ModelConfig, NormStats, Outputs, PairSource, VoModel};
use crate::nn::{apply_bn_updates, clip_grad_norm, Adam, AdamConfig, Forward, NodeId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    RelativePretrain,
    GlobalPretrain,
    EndToEnd,
}

impl StageKind {
    pub fn mode(self) -> Mode {
        match self {
            StageKind::RelativePretrain => Mode::RelativeOnly,
            StageKind::GlobalPretrain => Mode::GlobalOnly,
            StageKind::EndToEnd => Mode::Fused,
        }
    }

    /// Parameter-name prefixes updated in this stage.
    pub fn trainable(self) -> &'static [&'static str] {
        match self {
            StageKind::RelativePretrain => &["cnn1.", "rel."],
            StageKind::GlobalPretrain => &["glob."],
            StageKind::EndToEnd => &[""],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::RelativePretrain => "relative_pretrain",
            StageKind::GlobalPretrain => "global_pretrain",
            StageKind::EndToEnd => "end_to_end",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: StageKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Schedule horizon; defaults to `epochs × batches per epoch`.
    pub total_iterations: Option<u64>,
    /// Maximum global gradient norm.
    pub grad_clip: f64,
    pub weights: LossWeights,
    pub window_stride: usize,
    pub scene_id: Option<String>,
    /// Source of pair predictions during global pretraining.
    pub stage2_pairs: PairSource,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(stage: StageKind) -> TrainConfig {
        TrainConfig {
            stage,
            epochs: 10,
            batch_size: 8,
            lr0: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            total_iterations: None,
            grad_clip: 10.0,
            weights: LossWeights::default(),
            window_stride: 1,
            scene_id: None,
            stage2_pairs: PairSource::Globals,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{} stage: {m}", self.stage)));
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("Adam betas must lie in (0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip > 0.0) {
            return bad("adam_eps and grad_clip must be positive");
        }
        if self.batch_size == 0 || self.window_stride == 0 {
            return bad("batch_size and window_stride must be at least 1");
        }
        if self.total_iterations == Some(0) {
            return bad("total_iterations must be positive");
        }
        LossWeights::new(self.weights.beta_rot, self.weights.lambda_global)?;
        Ok(())
    }
}

/// `lr0 · 2^(−⌊5·iteration/total⌋)`: five halving plateaus.
pub fn lr_schedule(iteration: u64, total: u64, lr0: f64) -> f64 {
    let plateau = (5 * iteration / total.max(1)).min(4);
    lr0 * 0.5f64.powi(plateau as i32)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub ctc: f64,
    pub global: f64,
    pub total: f64,
}

impl From<LossBreakdown> for EpochLoss {
    fn from(b: LossBreakdown) -> Self {
        EpochLoss { ctc: b.ctc, global: b.global, total: b.total }
    }
}

/// Progress of one stage; stored in checkpoints for exact resumption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub iteration: u64,
    pub total_iterations: u64,
    /// Mean training loss of every finished epoch.
    pub epoch_losses: Vec<EpochLoss>,
    pub adam_step: u64,
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct IterLog {
    pub stage: StageKind,
    pub epoch: usize,
    pub iteration: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub wall_secs: f64,
}

impl fmt::Display for IterLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage={} epoch={} iter={} lr={:e} ctc={} global={} total={} grad_norm={} wall={:.3}",
            self.stage, self.epoch, self.iteration, self.lr, self.loss.ctc, self.loss.global, self.loss.total, self.grad_norm, self.wall_secs
        )
    }
}

#[derive(Clone, Debug)]
struct WindowRef {
    seq: usize,
    start: usize,
    target: WindowTarget,
}

/// Frames loaded at model resolution plus the training windows over them.
#[derive(Clone, Debug)]
pub struct TrainData {
    ids: Vec<String>,
    frames: Vec<Vec<Frame>>,
    gt: Vec<Vec<crate::pose::Pose>>,
    windows: Vec<WindowRef>,
    spec: PairSpec,
}

impl TrainData {
    pub fn new(seqs: &[SequenceRecord], k: usize, stride: usize, image_size: (usize, usize)) -> Result<TrainData> {
        let spec = make_pair_spec(k)?;
        let mut data = TrainData { ids: Vec::new(), frames: Vec::new(), gt: Vec::new(), windows: Vec::new(), spec };
        for (si, seq) in seqs.iter().enumerate() {
            for item in window_iter(seq, k, stride, &data.spec)? {
                let (w, target) = item?;
                data.windows.push(WindowRef { seq: si, start: w.start, target });
            }
            data.ids.push(seq.id.clone());
            data.frames.push(seq.load_frames(image_size)?);
            data.gt.push(seq.gt.clone());
        }
        if data.windows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(data)
    }

    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn spec(&self) -> &PairSpec {
        &self.spec
    }

    pub fn k(&self) -> usize {
        self.spec.k()
    }

    /// Input and output statistics over all frames and poses.
    pub fn norm_stats(&self) -> NormStats {
        let frames: Vec<Frame> = self.frames.iter().flatten().cloned().collect();
        let mut norm = estimate_norm_stats(&frames, &[]);
        let gt: Vec<crate::pose::Pose> = self.gt.iter().flatten().copied().collect();
        let poses = estimate_norm_stats(&[], &gt);
        norm.global_t_mean = poses.global_t_mean;
        norm.global_t_std = poses.global_t_std;
        let rel = self.gt.iter().flat_map(|g| g.windows(2).map(|w| crate::pose::relative(&w[0], &w[1])));
        let (mean, std) = mean_std(rel.map(|p| p.t()));
        norm.rel_t_mean = mean;
        norm.rel_t_std = std;
        norm
    }

    fn window_id(&self, w: usize) -> String {
        let r = &self.windows[w];
        format!("{}@{}", self.ids[r.seq], r.start)
    }

    fn images(&self, batch: &[usize], norm: &NormStats) -> Tensor {
        let k = self.k();
        let refs: Vec<&Frame> = batch.iter().flat_map(|&w| {
            let r = &self.windows[w];
            self.frames[r.seq][r.start..r.start + k].iter()
        }).collect();
        stack_frames(&refs, norm)
    }
}

fn set_trainable(store: &mut ParamStore, stage: StageKind) {
    store.set_frozen("", true);
    for p in stage.trainable() {
        store.set_frozen(p, false);
    }
}

fn feature_cache(model: &VoModel, store: &ParamStore, norm: &NormStats, data: &TrainData) -> Result<Vec<Vec<Tensor>>> {
    const CHUNK: usize = 32;
    let mut out = Vec::with_capacity(data.frames.len());
    for frames in &data.frames {
        let mut per_frame = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(CHUNK) {
            let refs: Vec<&Frame> = chunk.iter().collect();
            let images = stack_frames(&refs, norm);
            model.check_images(&images)?;
            let mut f = Forward::new(store, false);
            let x = f.input(images);
            let y = model.extract_features(&mut f, x);
            let v = f.graph.value(y);
            let shape = v.shape()[1..].to_vec();
            let per: usize = shape.iter().product();
            for i in 0..chunk.len() {
                per_frame.push(Tensor::from_vec(&shape, v.data()[i * per..(i + 1) * per].to_vec()));
            }
        }
        out.push(per_frame);
    }
    Ok(out)
}

/// Runs the graph for one batch and returns predictions alongside the outputs.
struct BatchPass {
    graph: crate::nn::Graph,
    outputs: Outputs,
    preds: Vec<WindowPrediction>,
    bn_updates: Vec<crate::nn::BnUpdate>,
}

#[allow(clippy::too_many_arguments)]
fn batch_pass(
    model: &VoModel,
    store: &ParamStore,
    norm: &NormStats,
    data: &TrainData,
    features: Option<&[Vec<Tensor>]>,
    batch: &[usize],
    stage: StageKind,
    pair_source: PairSource,
    train_bn: bool,
) -> Result<BatchPass> {
    let b = batch.len();
    let k = data.k();
    let mode = stage.mode();
    let mut f = Forward::new(store, train_bn);
    if stage == StageKind::GlobalPretrain {
        f.eval_bn = vec!["cnn1.".into(), "rel.".into()];
    }
    let feats = match features {
        Some(cache) => {
            let shape = cache[0][0].shape().to_vec();
            let mut stacked = Vec::with_capacity(b * k * shape.iter().product::<usize>());
            for &w in batch {
                let r = &data.windows[w];
                for t in &cache[r.seq][r.start..r.start + k] {
                    stacked.extend_from_slice(t.data());
                }
            }
            let mut full = vec![b * k];
            full.extend_from_slice(&shape);
            f.input(Tensor::from_vec(&full, stacked))
        }
        None => {
            let images = data.images(batch, norm);
            model.check_images(&images)?;
            let x = f.input(images);
            model.extract_features(&mut f, x)
        }
    };
    let mut outputs = model.forward_features(&mut f, feats, b, mode, norm);
    if mode == Mode::GlobalOnly && pair_source == PairSource::Relative {
        outputs.relative = model.relative_poses(&mut f, feats, b, norm).1;
    }
    for &n in outputs.relative.iter().chain(&outputs.global).chain(&outputs.fused) {
        if !f.graph.value(n).all_finite() {
            return Err(Error::NonFiniteLoss { iteration: 0, lr: f64::NAN, window: String::new() });
        }
    }
    let preds = collect_predictions(&f, &outputs, b, mode, &data.spec, pair_source)?;
    let Forward { graph, bn_updates, .. } = f;
    Ok(BatchPass { graph, outputs, preds, bn_updates })
}

fn seed_rows(seeds: &mut Vec<(NodeId, Tensor)>, nodes: &[NodeId], b: usize, grads: impl Fn(usize) -> Vec<RawPose>) {
    let mut tensors: Vec<Tensor> = nodes.iter().map(|_| Tensor::zeros(&[b, 7])).collect();
    for i in 0..b {
        for (step, g) in grads(i).iter().enumerate() {
            tensors[step].data_mut()[i * 7..(i + 1) * 7].copy_from_slice(&g.to_array());
        }
    }
    seeds.extend(nodes.iter().copied().zip(tensors));
}

fn add_raw(a: &[RawPose], b: &[RawPose]) -> Vec<RawPose> {
    a.iter()
        .zip(b)
        .map(|(x, y)| RawPose { t: std::array::from_fn(|c| x.t[c] + y.t[c]), q: std::array::from_fn(|c| x.q[c] + y.q[c]) })
        .collect()
}

/// Trains one stage epoch by epoch; checkpointable between epochs.
pub struct StageRunner<'a> {
    model: &'a VoModel,
    store: &'a mut ParamStore,
    norm: &'a NormStats,
    data: &'a TrainData,
    adam: Adam,
    state: TrainState,
    features: Option<Vec<Vec<Tensor>>>,
    clock: Instant,
}

impl<'a> StageRunner<'a> {
    pub fn new(model: &'a VoModel, store: &'a mut ParamStore, norm: &'a NormStats, data: &'a TrainData, cfg: TrainConfig) -> Result<StageRunner<'a>> {
        cfg.validate()?;
        if data.k() != model.config().k {
            return Err(Error::CheckpointMismatch(format!("data windows have K={}, model has K={}", data.k(), model.config().k)));
        }
        let batches = data.num_windows().div_ceil(cfg.batch_size) as u64;
        let total_iterations = cfg.total_iterations.unwrap_or((cfg.epochs as u64 * batches).max(1));
        let adam = Adam::new(store, AdamConfig { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps });
        let state = TrainState { config: cfg, epochs_done: 0, iteration: 0, total_iterations, epoch_losses: Vec::new(), adam_step: 0 };
        StageRunner::assemble(model, store, norm, data, adam, state)
    }

    /// Continues from a checkpoint written by [`StageRunner::checkpoint`].
    pub fn resume(model: &'a VoModel, store: &'a mut ParamStore, norm: &'a NormStats, data: &'a TrainData, ckpt: &Checkpoint) -> Result<StageRunner<'a>> {
        ckpt.check_model(model.config())?;
        let state = ckpt.state.clone().ok_or_else(|| Error::CheckpointMismatch("checkpoint carries no training state".into()))?;
        ckpt.restore(store)?;
        let c = &state.config;
        let mut adam = Adam::new(store, AdamConfig { beta1: c.adam_beta1, beta2: c.adam_beta2, eps: c.adam_eps });
        ckpt.restore_adam(store, &mut adam)?;
        adam.step = state.adam_step;
        StageRunner::assemble(model, store, norm, data, adam, state)
    }

    fn assemble(
        model: &'a VoModel,
        store: &'a mut ParamStore,
        norm: &'a NormStats,
        data: &'a TrainData,
        adam: Adam,
        state: TrainState,
    ) -> Result<StageRunner<'a>> {
        set_trainable(store, state.config.stage);
        let features = if state.config.stage == StageKind::GlobalPretrain { Some(feature_cache(model, store, norm, data)?) } else { None };
        Ok(StageRunner { model, store, norm, data, adam, state, features, clock: Instant::now() })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.epochs_done >= self.state.config.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.adam_step = self.adam.step;
        Checkpoint::capture(self.model.config(), self.norm, self.store, "", Some(&self.adam), Some(state))
    }

    fn epoch_order(&self) -> Vec<usize> {
        let epoch = self.state.epochs_done as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.config.seed ^ (epoch + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..self.data.num_windows()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn step(&mut self, batch: &[usize]) -> Result<(LossBreakdown, f64, f64)> {
        let cfg = self.state.config.clone();
        let lr = lr_schedule(self.state.iteration.min(self.state.total_iterations - 1), self.state.total_iterations, cfg.lr0);
        let non_finite = |iteration: u64, data: &TrainData| Error::NonFiniteLoss {
            iteration,
            lr,
            window: batch.iter().map(|&w| data.window_id(w)).collect::<Vec<_>>().join(","),
        };
        self.store.zero_grads();
        let pass = match batch_pass(
            self.model,
            self.store,
            self.norm,
            self.data,
            self.features.as_deref(),
            batch,
            cfg.stage,
            cfg.stage2_pairs,
            true,
        ) {
            Ok(p) => p,
            Err(Error::DegenerateQuaternion { .. }) | Err(Error::NonFiniteLoss { .. }) => return Err(non_finite(self.state.iteration, self.data)),
            Err(e) => return Err(e),
        };
        let pairs: Vec<(WindowPrediction, WindowTarget)> =
            pass.preds.iter().cloned().zip(batch.iter().map(|&w| self.data.windows[w].target.clone())).collect();
        let (loss, grads) = match cfg.stage {
            StageKind::RelativePretrain => relative_loss_grad(&pairs, &self.data.spec, &cfg.weights)?,
            _ => joint_loss_grad(&pairs, &self.data.spec, &cfg.weights)?,
        };
        if !loss.total.is_finite() {
            return Err(non_finite(self.state.iteration, self.data));
        }
        let spec = &self.data.spec;
        let out = &pass.outputs;
        let b = batch.len();
        let adjacent = |i: usize| -> Vec<RawPose> {
            out.relative.iter().map(|&n| RawPose::from_array(pass.graph.value(n).data()[i * 7..(i + 1) * 7].try_into().expect("7"))).collect()
        };
        let mut seeds = Vec::new();
        match cfg.stage {
            StageKind::RelativePretrain | StageKind::EndToEnd => {
                let adj: Vec<Vec<RawPose>> = (0..b).map(adjacent).collect();
                let g_adj = (0..b)
                    .map(|i| pairs_from_adjacent_vjp(&adj[i], spec, &grads[i].pred_pairs))
                    .collect::<Result<Vec<_>>>()?;
                seed_rows(&mut seeds, &out.relative, b, |i| g_adj[i].clone());
                if cfg.stage == StageKind::EndToEnd {
                    seed_rows(&mut seeds, &out.fused, b, |i| grads[i].pred_global.clone());
                }
            }
            StageKind::GlobalPretrain => {
                let g_glob = (0..b)
                    .map(|i| {
                        if cfg.stage2_pairs == PairSource::Globals {
                            let via_pairs = pairs_from_globals_vjp(&pass.preds[i].pred_global, spec, &grads[i].pred_pairs)?;
                            Ok(add_raw(&grads[i].pred_global, &via_pairs))
                        } else {
                            Ok(grads[i].pred_global.clone())
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                seed_rows(&mut seeds, &out.global, b, |i| g_glob[i].clone());
            }
        }
        pass.graph.backward(seeds, self.store);
        let grad_norm = clip_grad_norm(self.store, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(non_finite(self.state.iteration, self.data));
        }
        self.adam.update(self.store, lr);
        apply_bn_updates(self.store, &pass.bn_updates);
        Ok((loss, lr, grad_norm))
    }

    /// One pass over the shuffled windows; returns the epoch's mean loss.
    pub fn run_epoch(&mut self, log: &mut dyn FnMut(&IterLog)) -> Result<EpochLoss> {
        let order = self.epoch_order();
        let bs = self.state.config.batch_size;
        let mut sum = EpochLoss::default();
        for batch in order.chunks(bs) {
            let (loss, lr, grad_norm) = self.step(batch)?;
            let w = batch.len() as f64;
            sum.ctc += loss.ctc * w;
            sum.global += loss.global * w;
            sum.total += loss.total * w;
            log(&IterLog {
                stage: self.state.config.stage,
                epoch: self.state.epochs_done,
                iteration: self.state.iteration,
                lr,
                loss,
                grad_norm,
                wall_secs: self.clock.elapsed().as_secs_f64(),
            });
            self.state.iteration += 1;
        }
        let n = order.len() as f64;
        let mean = EpochLoss { ctc: sum.ctc / n, global: sum.global / n, total: sum.total / n };
        self.state.epoch_losses.push(mean);
        self.state.epochs_done += 1;
        self.state.adam_step = self.adam.step;
        Ok(mean)
    }

    /// Runs the remaining epochs, saving a checkpoint after each when `path` is given.
    pub fn run(mut self, checkpoint: Option<&Path>, log: &mut dyn FnMut(&IterLog)) -> Result<TrainState> {
        let mut saved = false;
        while !self.is_done() {
            self.run_epoch(log)?;
            if let Some(p) = checkpoint {
                self.checkpoint().save(p)?;
                saved = true;
            }
        }
        if let (Some(p), false) = (checkpoint, saved) {
            self.checkpoint().save(p)?;
        }
        Ok(self.state)
    }
}

/// Mean loss over every window with batch-norm in evaluation mode.
pub fn evaluate_loss(
    model: &VoModel,
    store: &ParamStore,
    norm: &NormStats,
    data: &TrainData,
    stage: StageKind,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let all: Vec<usize> = (0..data.num_windows()).collect();
    let mut sum = LossBreakdown::default();
    for batch in all.chunks(16) {
        let pass = batch_pass(model, store, norm, data, None, batch, stage, PairSource::Globals, false)?;
        let pairs: Vec<(WindowPrediction, WindowTarget)> =
            pass.preds.into_iter().zip(batch.iter().map(|&w| data.windows[w].target.clone())).collect();
        let (l, _) = match stage {
            StageKind::RelativePretrain => relative_loss_grad(&pairs, &data.spec, weights)?,
            _ => joint_loss_grad(&pairs, &data.spec, weights)?,
        };
        let w = batch.len() as f64;
        sum.ctc += l.ctc * w;
        sum.global += l.global * w;
        sum.total += l.total * w;
    }
    let n = all.len() as f64;
    Ok(LossBreakdown { ctc: sum.ctc / n, global: sum.global / n, total: sum.total / n })
}

/// Where a stage writes its checkpoint, and whether to continue from it.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint: Option<PathBuf>,
    /// Continue from `checkpoint` if it exists and holds unfinished training state.
    pub resume: bool,
}

fn run_or_resume(
    model: &VoModel,
    store: &mut ParamStore,
    norm: &NormStats,
    data: &TrainData,
    cfg: &TrainConfig,
    opts: &RunOptions,
    log: &mut dyn FnMut(&IterLog),
) -> Result<TrainState> {
    if let (true, Some(path)) = (opts.resume, &opts.checkpoint) {
        if path.exists() {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.state.as_ref().is_some_and(|s| s.config == *cfg) {
                let runner = StageRunner::resume(model, store, norm, data, &ckpt)?;
                return runner.run(opts.checkpoint.as_deref(), log);
            }
        }
    }
    StageRunner::new(model, store, norm, data, cfg.clone())?.run(opts.checkpoint.as_deref(), log)
}

/// Result of a training stage: the trained parameters and their statistics.
pub struct StageOutput {
    pub model: VoModel,
    pub store: ParamStore,
    pub norm: NormStats,
    pub state: TrainState,
}

impl StageOutput {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self.model.config(), &self.norm, &self.store, "", None, Some(self.state.clone()))
    }
}

/// Stage 1: feature extractor and relative branch under the CTC loss.
pub fn pretrain_relative(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    opts: &RunOptions,
    log: &mut dyn FnMut(&IterLog),
) -> Result<StageOutput> {
    expect_stage(cfg, StageKind::RelativePretrain)?;
    let (model, mut store) = VoModel::build(model_cfg)?;
    let norm = data.norm_stats();
    let state = run_or_resume(&model, &mut store, &norm, data, cfg, opts, log)?;
    Ok(StageOutput { model, store, norm, state })
}

/// Stage 2: a scene's global branch on the frozen feature extractor of
/// `base`; the result is stored in `registry` under `cfg.scene_id`.
pub fn pretrain_global(
    cfg: &TrainConfig,
    data: &TrainData,
    base: &Checkpoint,
    registry: &SceneRegistry,
    overwrite: bool,
    opts: &RunOptions,
    log: &mut dyn FnMut(&IterLog),
) -> Result<StageOutput> {
    expect_stage(cfg, StageKind::GlobalPretrain)?;
    let scene = cfg.scene_id.clone().ok_or_else(|| Error::Config("global pretraining needs a scene_id".into()))?;
    if registry.contains(&scene) && !overwrite {
        return Err(Error::SceneExists(scene));
    }
    let (model, mut store) = VoModel::build(&base.model)?;
    base.restore(&mut store)?;
    let scene_stats = data.norm_stats();
    let norm = NormStats { global_t_mean: scene_stats.global_t_mean, global_t_std: scene_stats.global_t_std, ..base.norm.clone() };
    let frozen_before: Vec<Tensor> = store.params().iter().filter(|p| p.name.starts_with("cnn1.")).map(|p| p.value.clone()).collect();
    let state = run_or_resume(&model, &mut store, &norm, data, cfg, opts, log)?;
    let frozen_after = store.params().iter().filter(|p| p.name.starts_with("cnn1.")).map(|p| &p.value);
    if !frozen_before.iter().eq(frozen_after) {
        return Err(Error::CheckpointMismatch("feature extractor changed during global pretraining".into()));
    }
    registry.register(&scene, &base.model, &norm, &store, overwrite)?;
    Ok(StageOutput { model, store, norm, state })
}

/// Stage 3: every parameter trainable, fused mode, joint loss.
#[allow(clippy::too_many_arguments)]
pub fn finetune_end_to_end(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    base: &Checkpoint,
    registry: &SceneRegistry,
    scene: &str,
    opts: &RunOptions,
    log: &mut dyn FnMut(&IterLog),
) -> Result<StageOutput> {
    expect_stage(cfg, StageKind::EndToEnd)?;
    let (model, mut store, norm) = assemble_pretrained(model_cfg, base, registry, scene)?;
    let state = run_or_resume(&model, &mut store, &norm, data, cfg, opts, log)?;
    Ok(StageOutput { model, store, norm, state })
}

/// Network with stage-1 weights from `base` and the global branch of `scene`.
pub fn assemble_pretrained(model_cfg: &ModelConfig, base: &Checkpoint, registry: &SceneRegistry, scene: &str) -> Result<(VoModel, ParamStore, NormStats)> {
    base.check_model(model_cfg)?;
    let (model, mut store) = VoModel::build(model_cfg)?;
    base.restore(&mut store)?;
    let entry = registry.apply(scene, model_cfg, &mut store)?;
    Ok((model, store, entry.norm))
}

fn expect_stage(cfg: &TrainConfig, stage: StageKind) -> Result<()> {
    if cfg.stage != stage {
        return Err(Error::Config(format!("expected a {stage} configuration, got {}", cfg.stage)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_sequence, SynthParams};

    fn tiny_model(k: usize) -> ModelConfig {
        ModelConfig { lstm_hidden: 16, fc_width: 16, ..ModelConfig::tiny(k) }
    }

    fn data(n: usize, k: usize) -> TrainData {
        let seq = synth_sequence(&SynthParams { n_frames: n, ..SynthParams::default() }).unwrap();
        TrainData::new(&[seq], k, 1, (32, 32)).unwrap()
    }

    #[test]
    fn schedule_plateaus() {
        assert_eq!(lr_schedule(0, 100, 1e-3), 1e-3);
        assert_eq!(lr_schedule(20, 100, 1e-3), 5e-4);
        assert_eq!(lr_schedule(19, 100, 1e-3), 1e-3);
        assert_eq!(lr_schedule(99, 100, 1e-3), 6.25e-5);
        let values: Vec<f64> = (0..1000).map(|i| lr_schedule(i, 1000, 1e-3)).collect();
        assert!(values.windows(2).all(|w| w[1] <= w[0]));
        let mut distinct = values.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(StageKind::EndToEnd);
        c.adam_beta1 = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::new(StageKind::EndToEnd);
        c.lr0 = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let d = data(12, 3);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::new(StageKind::RelativePretrain) };
        let out = pretrain_relative(&tiny_model(3), &cfg, &d, &RunOptions::default(), &mut |_| {}).unwrap();
        let (_, init) = VoModel::build(&tiny_model(3)).unwrap();
        for (a, b) in out.store.params().iter().zip(init.params()) {
            assert_eq!(a.value, b.value);
        }
        assert!(out.state.epoch_losses.is_empty());
    }

    #[test]
    fn same_seed_same_curve() {
        let d = data(14, 3);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::new(StageKind::RelativePretrain) };
        let run = || {
            let mut lines = Vec::new();
            let out = pretrain_relative(&tiny_model(3), &cfg, &d, &RunOptions::default(), &mut |l| lines.push(l.loss)).unwrap();
            (out.state.epoch_losses, lines)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let d = data(14, 3);
        let model_cfg = tiny_model(3);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::new(StageKind::RelativePretrain) };
        let full = pretrain_relative(&model_cfg, &cfg, &d, &RunOptions::default(), &mut |_| {}).unwrap();

        let (model, mut store) = VoModel::build(&model_cfg).unwrap();
        let norm = d.norm_stats();
        let path = dir.path().join("partial.ckpt");
        {
            let mut runner = StageRunner::new(&model, &mut store, &norm, &d, cfg.clone()).unwrap();
            runner.run_epoch(&mut |_| {}).unwrap();
            runner.checkpoint().save(&path).unwrap();
        }
        let (model2, mut store2) = VoModel::build(&model_cfg).unwrap();
        let ckpt = Checkpoint::load(&path).unwrap();
        let state = StageRunner::resume(&model2, &mut store2, &norm, &d, &ckpt).unwrap().run(None, &mut |_| {}).unwrap();
        assert_eq!(state.epoch_losses, full.state.epoch_losses);
        for (a, b) in store2.params().iter().zip(full.store.params()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert_eq!(store2.buffers(), full.store.buffers());
    }

    #[test]
    fn global_stage_freezes_features_and_registers() {
        let dir = tempfile::tempdir().unwrap();
        let d = data(12, 3);
        let model_cfg = tiny_model(3);
        let rel_cfg = TrainConfig { epochs: 1, batch_size: 5, ..TrainConfig::new(StageKind::RelativePretrain) };
        let stage1 = pretrain_relative(&model_cfg, &rel_cfg, &d, &RunOptions::default(), &mut |_| {}).unwrap();
        let base = stage1.checkpoint();
        let registry = SceneRegistry::open(dir.path().join("scenes")).unwrap();
        let glob_cfg = TrainConfig { epochs: 2, batch_size: 5, scene_id: Some("a".into()), ..TrainConfig::new(StageKind::GlobalPretrain) };
        let stage2 = pretrain_global(&glob_cfg, &d, &base, &registry, false, &RunOptions::default(), &mut |_| {}).unwrap();
        for (a, b) in stage2.store.params().iter().zip(stage1.store.params()) {
            if a.name.starts_with("glob.") {
                continue;
            }
            assert_eq!(a.value, b.value, "{} changed", a.name);
        }
        let changed = stage2.store.params().iter().zip(stage1.store.params()).any(|(a, b)| a.name.starts_with("glob.") && a.value != b.value);
        assert!(changed);
        assert!(registry.contains("a"));
        let again = pretrain_global(&glob_cfg, &d, &base, &registry, false, &RunOptions::default(), &mut |_| {});
        assert!(matches!(again, Err(Error::SceneExists(_))));
        let relative_pairs = TrainConfig { stage2_pairs: PairSource::Relative, scene_id: Some("b".into()), ..glob_cfg.clone() };
        pretrain_global(&relative_pairs, &d, &base, &registry, false, &RunOptions::default(), &mut |_| {}).unwrap();

        let bad = ModelConfig { k: 4, ..model_cfg.clone() };
        let e2e = TrainConfig { epochs: 1, ..TrainConfig::new(StageKind::EndToEnd) };
        let err = finetune_end_to_end(&bad, &e2e, &d, &base, &registry, "a", &RunOptions::default(), &mut |_| {}).err().unwrap();
        assert!(matches!(err, Error::CheckpointMismatch(_)));
        let err = finetune_end_to_end(&model_cfg, &e2e, &d, &base, &registry, "zzz", &RunOptions::default(), &mut |_| {}).err().unwrap();
        assert!(matches!(err, Error::UnknownScene(_)));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let d = data(10, 3);
        let (model, mut store) = VoModel::build(&tiny_model(3)).unwrap();
        let id = store.id("rel.fc4.bias").unwrap();
        store.get_mut(id).value.data_mut()[0] = f64::NAN;
        let norm = d.norm_stats();
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::new(StageKind::RelativePretrain) };
        let err = StageRunner::new(&model, &mut store, &norm, &d, cfg).unwrap().run(None, &mut |_| {}).unwrap_err();
        match err {
            Error::NonFiniteLoss { iteration, window, .. } => {
                assert_eq!(iteration, 0);
                assert!(window.contains('@'));
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn log_lines_are_key_value() {
        let l = IterLog {
            stage: StageKind::EndToEnd,
            epoch: 1,
            iteration: 7,
            lr: 5e-4,
            loss: LossBreakdown { ctc: 1.5, global: 2.0, total: 3.5 },
            grad_norm: 0.25,
            wall_secs: 1.0,
        };
        let s = l.to_string();
        let kv: std::collections::HashMap<&str, &str> = s.split(' ').map(|t| t.split_once('=').unwrap()).collect();
        assert_eq!(kv["iter"], "7");
        assert_eq!(kv["total"].parse::<f64>().unwrap(), 3.5);
        assert_eq!(kv["lr"].parse::<f64>().unwrap(), 5e-4);
    }
}
