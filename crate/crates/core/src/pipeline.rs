//! Run configuration and the glue between data, training and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::SceneRegistry;
use crate::dataset::{load_kitti_sequence, load_sevenscenes_sequence, stack_frames, Frame, Route, SequenceRecord, SynthParams};
use crate::error::{Error, Result};
use crate::loss::{make_pair_spec, LossWeights};
use crate::metrics::{accumulate_trajectory, kitti_drift, median_pose_errors, AblationRow, DriftReport, MedianReport, TrajectoryEstimate};
use crate::model::{Mode, ModelConfig, NormStats, PairSource, Preset, VoModel};
use crate::nn::ParamStore;
use crate::pose::Pose;
use crate::train::{finetune_end_to_end, pretrain_global, pretrain_relative, IterLog, RunOptions, StageKind, StageOutput, TrainConfig, TrainData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// `poses/<seq>.txt` plus `sequences/<seq>/image_2/*.png`; also the layout `synth` writes.
    Kitti,
    /// `<scene>/seq-XX/frame-NNNNNN.{color.png,pose.txt}`.
    SevenScenes,
}

/// Every setting of a run. Read from flat TOML; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub preset: Preset,
    pub k: usize,
    /// Overrides the preset's recurrent width.
    pub lstm_hidden: Option<usize>,
    /// Overrides the preset's fully-connected width.
    pub fc_width: Option<usize>,

    pub epochs_relative: usize,
    pub epochs_global: usize,
    pub epochs_end_to_end: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Schedule horizon of each stage; by default its own iteration count.
    pub total_iterations: Option<u64>,
    pub grad_clip: f64,
    pub beta_rot: f64,
    pub lambda_global: f64,
    pub window_stride: usize,
    pub stage2_pairs: PairSource,
    pub scene_id: String,
    pub overwrite_scene: bool,

    pub dataset: DatasetKind,
    pub data_root: Option<PathBuf>,
    /// 7-Scenes scene directory name.
    pub scene: Option<String>,
    pub train_sequences: Vec<String>,
    pub eval_sequences: Vec<String>,
    /// Trailing frames of each training sequence kept out of training and
    /// evaluated instead of `eval_sequences`.
    pub holdout_tail: usize,
    pub eval_modes: Vec<Mode>,
    /// Move predicted trajectories onto the first true pose in plot files.
    pub plot_align: bool,

    pub synth_sequences: usize,
    pub synth_frames: usize,
    pub synth_fps: f64,
    pub synth_route: Route,
    pub synth_circuit_radius: f64,
    pub synth_speed_min: f64,
    pub synth_speed_max: f64,
    pub synth_yaw_rate_max: f64,
    pub synth_pixel_noise: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let synth = SynthParams::default();
        PipelineConfig {
            seed: 0,
            preset: Preset::Tiny,
            k: 5,
            lstm_hidden: None,
            fc_width: None,
            epochs_relative: 10,
            epochs_global: 10,
            epochs_end_to_end: 10,
            batch_size: 8,
            lr0: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            total_iterations: None,
            grad_clip: 10.0,
            beta_rot: 1.0,
            lambda_global: 1.0,
            window_stride: 1,
            stage2_pairs: PairSource::Globals,
            scene_id: "default".into(),
            overwrite_scene: false,
            dataset: DatasetKind::Kitti,
            data_root: None,
            scene: None,
            train_sequences: vec!["00".into()],
            eval_sequences: Vec::new(),
            holdout_tail: 0,
            eval_modes: Mode::ALL.to_vec(),
            plot_align: false,
            synth_sequences: 1,
            synth_frames: synth.n_frames,
            synth_fps: synth.fps,
            synth_route: synth.route,
            synth_circuit_radius: synth.circuit_radius,
            synth_speed_min: synth.speed_range.0,
            synth_speed_max: synth.speed_range.1,
            synth_yaw_rate_max: synth.yaw_rate_range.1,
            synth_pixel_noise: synth.pixel_noise,
        }
    }
}

impl PipelineConfig {
    /// Parses TOML text, then applies `key=value` overrides (values in TOML
    /// syntax; bare words are taken as strings).
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<PipelineConfig> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let (key, value) = (key.trim(), value.trim());
            let parsed = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        let cfg: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
        let text = match path {
            Some(p) if !p.exists() => return Err(Error::MissingFile(p.to_path_buf())),
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        PipelineConfig::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        for stage in [StageKind::RelativePretrain, StageKind::GlobalPretrain, StageKind::EndToEnd] {
            self.train_config(stage).validate()?;
        }
        if self.eval_modes.is_empty() {
            return Err(Error::Config("eval_modes is empty".into()));
        }
        self.synth_params(0).validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = ModelConfig::preset(self.preset, self.k);
        ModelConfig {
            lstm_hidden: self.lstm_hidden.unwrap_or(base.lstm_hidden),
            fc_width: self.fc_width.unwrap_or(base.fc_width),
            seed: self.seed,
            ..base
        }
    }

    pub fn train_config(&self, stage: StageKind) -> TrainConfig {
        let epochs = match stage {
            StageKind::RelativePretrain => self.epochs_relative,
            StageKind::GlobalPretrain => self.epochs_global,
            StageKind::EndToEnd => self.epochs_end_to_end,
        };
        TrainConfig {
            stage,
            epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            total_iterations: self.total_iterations,
            grad_clip: self.grad_clip,
            weights: LossWeights { beta_rot: self.beta_rot, lambda_global: self.lambda_global },
            window_stride: self.window_stride,
            scene_id: (stage == StageKind::GlobalPretrain).then(|| self.scene_id.clone()),
            stage2_pairs: self.stage2_pairs,
            seed: self.seed,
        }
    }

    /// Parameters of the `i`-th generated sequence.
    pub fn synth_params(&self, i: usize) -> SynthParams {
        let d = SynthParams::default();
        SynthParams {
            n_frames: self.synth_frames,
            fps: self.synth_fps,
            route: self.synth_route,
            circuit_radius: self.synth_circuit_radius,
            speed_range: (self.synth_speed_min, self.synth_speed_max),
            yaw_rate_range: (d.yaw_rate_range.0.min(self.synth_yaw_rate_max), self.synth_yaw_rate_max),
            pixel_noise: self.synth_pixel_noise,
            image_size: self.model_config().image_size,
            seed: self.seed.wrapping_add(i as u64),
            ..d
        }
    }

    fn root(&self) -> Result<&Path> {
        self.data_root.as_deref().ok_or_else(|| Error::Config("no data root configured".into()))
    }

    pub fn load_sequences(&self, ids: &[String]) -> Result<Vec<SequenceRecord>> {
        let root = self.root()?;
        ids.iter()
            .map(|id| match self.dataset {
                DatasetKind::Kitti => load_kitti_sequence(root, id),
                DatasetKind::SevenScenes => {
                    let scene = self.scene.as_deref().ok_or_else(|| Error::Config("7-Scenes data needs `scene`".into()))?;
                    load_sevenscenes_sequence(root, scene, id)
                }
            })
            .collect()
    }

    /// Training sequences, with the held-out tail removed when configured.
    pub fn training_split(&self) -> Result<Vec<SequenceRecord>> {
        let seqs = self.load_sequences(&self.train_sequences)?;
        Ok(split_tail(&seqs, self.holdout_tail)?.0)
    }

    /// Held-out tails when configured, otherwise `eval_sequences`.
    pub fn evaluation_split(&self) -> Result<Vec<SequenceRecord>> {
        if self.holdout_tail > 0 {
            let seqs = self.load_sequences(&self.train_sequences)?;
            return Ok(split_tail(&seqs, self.holdout_tail)?.1);
        }
        self.load_sequences(&self.eval_sequences)
    }
}

/// Splits every sequence into a head and its last `tail` frames.
pub fn split_tail(seqs: &[SequenceRecord], tail: usize) -> Result<(Vec<SequenceRecord>, Vec<SequenceRecord>)> {
    if tail == 0 {
        return Ok((seqs.to_vec(), Vec::new()));
    }
    let mut heads = Vec::new();
    let mut tails = Vec::new();
    for s in seqs {
        if s.len() <= tail {
            return Err(Error::SequenceTooShort { len: s.len(), k: tail + 1 });
        }
        heads.push(s.slice(0, s.len() - tail));
        tails.push(s.slice(s.len() - tail, s.len()));
    }
    Ok((heads, tails))
}

/// Window starts `0, stride, 2·stride, …` plus a final window aligned to the
/// end of the sequence when the stride does not land there.
pub fn covering_starts(n: usize, k: usize, stride: usize) -> Vec<usize> {
    if n < k {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..=n - k).step_by(stride.max(1)).collect();
    if *starts.last().expect("n >= k") != n - k {
        starts.push(n - k);
    }
    starts
}

/// Per-frame poses of a whole sequence.
///
/// Fused and global-only modes read each frame's global pose from
/// non-overlapping windows. Relative-only mode chains the adjacent
/// transforms of windows overlapping by one frame, starting at the first
/// ground-truth pose.
pub fn predict_trajectory(model: &VoModel, store: &ParamStore, norm: &NormStats, seq: &SequenceRecord, mode: Mode) -> Result<TrajectoryEstimate> {
    const CHUNK: usize = 16;
    let k = model.config().k;
    let n = seq.len();
    if n < k {
        return Err(Error::SequenceTooShort { len: n, k });
    }
    let spec = make_pair_spec(k)?;
    let size = model.config().image_size;
    let frames = seq.load_frames(size)?;
    let stride = if mode == Mode::RelativeOnly { k - 1 } else { k };
    let starts = covering_starts(n, k, stride);
    let mut preds = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(CHUNK) {
        let refs: Vec<&Frame> = chunk.iter().flat_map(|&s| frames[s..s + k].iter()).collect();
        let images = stack_frames(&refs, norm);
        preds.extend(model.predict(store, images, chunk.len(), mode, norm, &spec)?);
    }
    let poses = if mode == Mode::RelativeOnly {
        let adjacent: Vec<usize> = (0..k - 1)
            .map(|j| spec.pairs().iter().position(|&p| p == (j, j + 1)).expect("adjacent pairs are always constrained"))
            .collect();
        let mut steps: Vec<Option<Pose>> = vec![None; n - 1];
        for (&s, p) in starts.iter().zip(&preds) {
            for (j, &idx) in adjacent.iter().enumerate() {
                if steps[s + j].is_none() {
                    steps[s + j] = Some(p.pred_pairs[idx].to_pose()?);
                }
            }
        }
        let steps: Vec<Pose> = steps.into_iter().map(|s| s.expect("windows cover every step")).collect();
        accumulate_trajectory(seq.gt[0], &steps).poses
    } else {
        let mut out: Vec<Option<Pose>> = vec![None; n];
        for (&s, p) in starts.iter().zip(&preds) {
            for (j, g) in p.pred_global.iter().enumerate() {
                if out[s + j].is_none() {
                    out[s + j] = Some(g.to_pose()?);
                }
            }
        }
        out.into_iter().map(|p| p.expect("windows cover every frame")).collect()
    };
    Ok(TrajectoryEstimate::new(poses, Some(mode)))
}

#[derive(Clone, Debug)]
pub struct SequenceEval {
    pub seq_id: String,
    pub trajectory: TrajectoryEstimate,
    pub drift: DriftReport,
    pub median: MedianReport,
}

pub fn evaluate_sequence(model: &VoModel, store: &ParamStore, norm: &NormStats, seq: &SequenceRecord, mode: Mode) -> Result<SequenceEval> {
    let trajectory = predict_trajectory(model, store, norm, seq, mode)?;
    let drift = kitti_drift(&trajectory.poses, &seq.gt)?;
    let median = median_pose_errors(&trajectory.poses, &seq.gt)?;
    Ok(SequenceEval { seq_id: seq.id.clone(), trajectory, drift, median })
}

/// Mean over sequences; drift averages only sequences long enough to have one.
pub fn mean_reports(evals: &[SequenceEval]) -> (DriftReport, MedianReport) {
    let with_drift: Vec<&DriftReport> = evals.iter().map(|e| &e.drift).filter(|d| !d.empty).collect();
    let mut drift = DriftReport { empty: with_drift.is_empty(), ..DriftReport::default() };
    if !with_drift.is_empty() {
        let n = with_drift.len() as f64;
        drift.t_rel = with_drift.iter().map(|d| d.t_rel).sum::<f64>() / n;
        drift.r_rel = with_drift.iter().map(|d| d.r_rel).sum::<f64>() / n;
        if with_drift.len() == 1 {
            drift.per_length = with_drift[0].per_length.clone();
        }
    }
    let n = evals.len().max(1) as f64;
    let median = MedianReport {
        t_med: evals.iter().map(|e| e.median.t_med).sum::<f64>() / n,
        r_med: evals.iter().map(|e| e.median.r_med).sum::<f64>() / n,
    };
    (drift, median)
}

/// Checkpoints and results of the three training stages.
pub struct PipelineRun {
    pub relative: StageOutput,
    pub global: Option<StageOutput>,
    pub end_to_end: Option<StageOutput>,
}

impl PipelineRun {
    /// The most complete network trained.
    pub fn last(&self) -> &StageOutput {
        self.end_to_end.as_ref().or(self.global.as_ref()).unwrap_or(&self.relative)
    }
}

/// Trains stages 1 to `through` on `train`, writing `relative.ckpt`,
/// `global.ckpt` and `final.ckpt` under `dir` when given.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    train: &[SequenceRecord],
    registry: &SceneRegistry,
    through: StageKind,
    dir: Option<&Path>,
    log: &mut dyn FnMut(&IterLog),
) -> Result<PipelineRun> {
    let model_cfg = cfg.model_config();
    let opts = |name: &str| RunOptions { checkpoint: dir.map(|d| d.join(name)), resume: false };
    let data = TrainData::new(train, cfg.k, cfg.window_stride, model_cfg.image_size)?;
    let relative = pretrain_relative(&model_cfg, &cfg.train_config(StageKind::RelativePretrain), &data, &opts("relative.ckpt"), log)?;
    if through == StageKind::RelativePretrain {
        return Ok(PipelineRun { relative, global: None, end_to_end: None });
    }
    let base = relative.checkpoint();
    let global = pretrain_global(&cfg.train_config(StageKind::GlobalPretrain), &data, &base, registry, cfg.overwrite_scene, &opts("global.ckpt"), log)?;
    if through == StageKind::GlobalPretrain {
        return Ok(PipelineRun { relative, global: Some(global), end_to_end: None });
    }
    let e2e = finetune_end_to_end(&model_cfg, &cfg.train_config(StageKind::EndToEnd), &data, &base, registry, &cfg.scene_id, &opts("final.ckpt"), log)?;
    Ok(PipelineRun { relative, global: Some(global), end_to_end: Some(e2e) })
}

/// Stage through which a variant is trained: relative-only networks need
/// stage 1, global-only stages 1 and 2, fused all three.
pub fn stages_for(mode: Mode) -> StageKind {
    match mode {
        Mode::RelativeOnly => StageKind::RelativePretrain,
        Mode::GlobalOnly => StageKind::GlobalPretrain,
        Mode::Fused => StageKind::EndToEnd,
    }
}

/// Trains and evaluates every `(mode, K)` variant with otherwise identical
/// settings. Rows follow the order of `variants`.
pub fn ablation_sweep(
    variants: &[(Mode, usize)],
    train: &[SequenceRecord],
    test: &[SequenceRecord],
    cfg: &PipelineConfig,
    work_dir: &Path,
    log: &mut dyn FnMut(&IterLog),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for (i, &(mode, k)) in variants.iter().enumerate() {
        let vcfg = PipelineConfig { k, overwrite_scene: true, ..cfg.clone() };
        vcfg.validate()?;
        let registry = SceneRegistry::open(work_dir.join(format!("variant-{i}-{mode}-k{k}")))?;
        let run = run_pipeline(&vcfg, train, &registry, stages_for(mode), None, log)?;
        let out = run.last();
        let evals = test.iter().map(|s| evaluate_sequence(&out.model, &out.store, &out.norm, s, mode)).collect::<Result<Vec<_>>>()?;
        let (drift, median) = mean_reports(&evals);
        rows.push(AblationRow { mode, k, drift, median });
    }
    Ok(rows)
}
