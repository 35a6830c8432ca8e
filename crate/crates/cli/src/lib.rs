//! `fusevo` command line: dataset synthesis, staged training, evaluation,
//! ablation and plot export.
//!
//! Configuration precedence, lowest first: built-in defaults,
//! `FUSEVO_DATA_ROOT` (data root only), the `--config` file, `--set` overrides,
//! then dedicated flags such as `--data-root` and `--seed`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numerical abort.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fusevo::checkpoint::{Checkpoint, SceneRegistry};
use fusevo::dataset::{read_kitti_poses, synth_sequence, write_kitti_sequence, SynthManifest};
use fusevo::metrics::{
    emit_plot_data, format_ablation_table, format_drift_table, format_median_table, kitti_drift, median_pose_errors, TrajectoryEstimate,
};
use fusevo::model::{Mode, VoModel};
use fusevo::pipeline::{ablation_sweep, evaluate_sequence, PipelineConfig};
use fusevo::train::{finetune_end_to_end, pretrain_global, pretrain_relative, IterLog, RunOptions, StageKind, TrainData};

pub const DATA_ROOT_ENV: &str = "FUSEVO_DATA_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] fusevo::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(fusevo::Error::NonFiniteLoss { .. }) => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "fusevo", version, about = "Windowed visual odometry with relative, global and fused pose regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set k=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset root; defaults to $FUSEVO_DATA_ROOT.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory that receives one subdirectory per run.
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic sequences into the data root (KITTI layout).
    Synth(Common),
    /// Stage 1: feature extractor and relative branch.
    PretrainRel {
        #[command(flatten)]
        common: Common,
        /// Continue an interrupted run in this run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: the configured scene's global branch on frozen features.
    PretrainGlob {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint.
        #[arg(long)]
        base: PathBuf,
        /// Scene registry directory.
        #[arg(long)]
        registry: PathBuf,
        /// Replace an existing registry entry.
        #[arg(long)]
        overwrite: bool,
    },
    /// Stage 3: end-to-end refinement of the fused network.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        registry: PathBuf,
    },
    /// Drift and median errors of a checkpoint, or of a KITTI pose file against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with_all = ["pred", "gt"])]
        checkpoint: Option<PathBuf>,
        /// Registry whose `--scene` entry replaces the checkpoint's global branch.
        #[arg(long, requires = "scene")]
        registry: Option<PathBuf>,
        #[arg(long, requires = "registry")]
        scene: Option<String>,
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
    },
    /// Train and evaluate `mode:K` variants under identical settings.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "fused:5,relative_only:5,global_only:5")]
        variants: Vec<String>,
    },
    /// Write a plot table and metrics sidecar for KITTI pose files.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Output table; defaults to `plot.tsv` in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::PretrainRel { .. } => "pretrain-rel",
            Command::PretrainGlob { .. } => "pretrain-glob",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Plot { .. } => "plot",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth(c) => c,
            Command::PretrainRel { common, .. }
            | Command::PretrainGlob { common, .. }
            | Command::Finetune { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::Plot { common, .. } => common,
        }
    }
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut overrides = c.set.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = PipelineConfig::load(c.config.as_deref(), &overrides)?;
    if let Some(root) = &c.data_root {
        cfg.data_root = Some(root.clone());
    } else if cfg.data_root.is_none() {
        cfg.data_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
    }
    Ok(cfg)
}

/// Output directory of one invocation, named by start time, command and seed.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn create(runs: &Path, command: &str, cfg: &PipelineConfig, argv: &[OsString]) -> Result<RunDir> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let base = format!("{stamp}-{command}-seed{}", cfg.seed);
        let mut path = runs.join(&base);
        let mut n = 1;
        while path.exists() {
            n += 1;
            path = runs.join(format!("{base}-{n}"));
        }
        fs::create_dir_all(&path)?;
        let dir = RunDir { path };
        dir.snapshot(cfg, argv)?;
        Ok(dir)
    }

    fn reopen(path: &Path, cfg: &PipelineConfig, argv: &[OsString]) -> Result<RunDir> {
        if !path.is_dir() {
            return Err(fusevo::Error::MissingFile(path.to_path_buf()).into());
        }
        let dir = RunDir { path: path.to_path_buf() };
        let previous = fs::read_to_string(dir.file("config.toml"))?;
        if PipelineConfig::from_toml_with(&previous, &[])? != *cfg {
            return Err(fusevo::Error::Config("resumed run was started with a different configuration".into()).into());
        }
        dir.snapshot(cfg, argv)?;
        Ok(dir)
    }

    fn snapshot(&self, cfg: &PipelineConfig, argv: &[OsString]) -> Result<()> {
        fs::write(self.file("config.toml"), cfg.to_toml())?;
        let line: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
        fs::write(self.file("command.txt"), line.join(" ") + "\n")?;
        Ok(())
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Appends one line per training iteration to `train.log`.
    fn logger(&self) -> Result<impl FnMut(&IterLog)> {
        let mut file = fs::OpenOptions::new().create(true).append(true).open(self.file("train.log"))?;
        Ok(move |l: &IterLog| {
            let _ = writeln!(file, "{l}");
        })
    }
}

fn safe_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn parse_variant(s: &str) -> Result<(Mode, usize)> {
    let bad = || CliError::Usage(format!("variant `{s}` is not MODE:K"));
    let (mode, k) = s.split_once(':').ok_or_else(bad)?;
    let mode = mode.trim().parse::<Mode>().map_err(|_| bad())?;
    let k = k.trim().parse().map_err(|_| bad())?;
    Ok((mode, k))
}

/// Parses `argv` (program name first) and runs the command; returns the exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command, argv: &[OsString]) -> Result<()> {
    let cfg = load_config(command.common())?;
    if let Command::PretrainRel { resume: Some(dir), .. } = &command {
        let run = RunDir::reopen(dir, &cfg, argv)?;
        return pretrain_rel(&cfg, &run, true);
    }
    let run = RunDir::create(&command.common().runs, command.name(), &cfg, argv)?;
    println!("run directory: {}", run.path.display());
    match command {
        Command::Synth(_) => synth(&cfg),
        Command::PretrainRel { .. } => pretrain_rel(&cfg, &run, false),
        Command::PretrainGlob { base, registry, overwrite, .. } => pretrain_glob(&cfg, &run, &base, &registry, overwrite),
        Command::Finetune { base, registry, .. } => finetune(&cfg, &run, &base, &registry),
        Command::Eval { checkpoint: Some(ckpt), registry, scene, .. } => eval_checkpoint(&cfg, &run, &ckpt, registry.as_deref().zip(scene.as_deref())),
        Command::Eval { pred: Some(pred), gt: Some(gt), .. } => eval_files(&run, &pred, &gt),
        Command::Eval { .. } => Err(CliError::Usage("eval needs --checkpoint or --pred with --gt".into())),
        Command::Ablate { variants, .. } => ablate(&cfg, &run, &variants),
        Command::Plot { pred, gt, out, .. } => plot(&cfg, &run, &pred, &gt, out),
    }
}

fn synth(cfg: &PipelineConfig) -> Result<()> {
    let root = cfg.data_root.clone().ok_or_else(|| fusevo::Error::Config("synth needs a data root".into()))?;
    let mut manifest = SynthManifest { sequences: Vec::new() };
    for i in 0..cfg.synth_sequences {
        let params = cfg.synth_params(i);
        let id = format!("{i:02}");
        let seq = synth_sequence(&params)?;
        write_kitti_sequence(&root, &id, &seq, params.image_size)?;
        println!("sequence {id}: {} frames, {:.1} m", seq.len(), seq.path_length());
        manifest.sequences.push((id, params));
    }
    manifest.write(&root.join("synth_manifest.json"))?;
    Ok(())
}

fn train_data(cfg: &PipelineConfig) -> Result<TrainData> {
    let model = cfg.model_config();
    Ok(TrainData::new(&cfg.training_split()?, cfg.k, cfg.window_stride, model.image_size)?)
}

fn report_losses(stage: StageKind, losses: &[fusevo::train::EpochLoss]) {
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("{stage}: {} epochs, loss {:.6} -> {:.6}", losses.len(), first.total, last.total);
    }
}

fn pretrain_rel(cfg: &PipelineConfig, run: &RunDir, resume: bool) -> Result<()> {
    let data = train_data(cfg)?;
    let opts = RunOptions { checkpoint: Some(run.file("relative.ckpt")), resume };
    let out = pretrain_relative(&cfg.model_config(), &cfg.train_config(StageKind::RelativePretrain), &data, &opts, &mut run.logger()?)?;
    report_losses(StageKind::RelativePretrain, &out.state.epoch_losses);
    println!("checkpoint: {}", run.file("relative.ckpt").display());
    Ok(())
}

fn pretrain_glob(cfg: &PipelineConfig, run: &RunDir, base: &Path, registry: &Path, overwrite: bool) -> Result<()> {
    let base = Checkpoint::load(base)?;
    base.check_model(&cfg.model_config())?;
    let registry = SceneRegistry::open(registry)?;
    let data = train_data(cfg)?;
    let opts = RunOptions { checkpoint: Some(run.file("global.ckpt")), resume: false };
    let tc = cfg.train_config(StageKind::GlobalPretrain);
    let out = pretrain_global(&tc, &data, &base, &registry, overwrite || cfg.overwrite_scene, &opts, &mut run.logger()?)?;
    report_losses(StageKind::GlobalPretrain, &out.state.epoch_losses);
    println!("scene `{}` registered in {}", cfg.scene_id, registry.dir().display());
    Ok(())
}

fn finetune(cfg: &PipelineConfig, run: &RunDir, base: &Path, registry: &Path) -> Result<()> {
    let base = Checkpoint::load(base)?;
    let registry = SceneRegistry::open(registry)?;
    let data = train_data(cfg)?;
    let opts = RunOptions { checkpoint: Some(run.file("final.ckpt")), resume: false };
    let tc = cfg.train_config(StageKind::EndToEnd);
    let out = finetune_end_to_end(&cfg.model_config(), &tc, &data, &base, &registry, &cfg.scene_id, &opts, &mut run.logger()?)?;
    report_losses(StageKind::EndToEnd, &out.state.epoch_losses);
    println!("checkpoint: {}", run.file("final.ckpt").display());
    Ok(())
}

fn eval_checkpoint(cfg: &PipelineConfig, run: &RunDir, ckpt: &Path, scene: Option<(&Path, &str)>) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let (model, mut store) = VoModel::build(&ckpt.model)?;
    ckpt.restore(&mut store)?;
    let mut norm = ckpt.norm.clone();
    if let Some((dir, id)) = scene {
        norm = SceneRegistry::open(dir)?.apply(id, &ckpt.model, &mut store)?.norm;
    }
    let seqs = cfg.evaluation_split()?;
    if seqs.is_empty() {
        return Err(fusevo::Error::Config("nothing to evaluate: set eval_sequences or holdout_tail".into()).into());
    }
    let mut report = String::new();
    for &mode in &cfg.eval_modes {
        let mut drift_rows = Vec::new();
        let mut median_rows = Vec::new();
        for seq in &seqs {
            let ev = evaluate_sequence(&model, &store, &norm, seq, mode)?;
            let plot = run.file(&format!("{}_{mode}.tsv", safe_name(&seq.id)));
            emit_plot_data(&ev.trajectory, &seq.gt, &plot, cfg.plot_align)?;
            drift_rows.push((seq.id.clone(), ev.drift));
            median_rows.push((seq.id.clone(), ev.median));
        }
        report.push_str(&format!("# mode {mode}\n"));
        report.push_str(&format_drift_table(&drift_rows));
        report.push_str(&format_median_table(&median_rows));
        report.push('\n');
    }
    fs::write(run.file("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn eval_files(run: &RunDir, pred: &Path, gt: &Path) -> Result<()> {
    let pred = read_kitti_poses(pred)?;
    let gt = read_kitti_poses(gt)?;
    let drift = kitti_drift(&pred, &gt)?;
    let median = median_pose_errors(&pred, &gt)?;
    let text = format!("{}{}", drift.to_key_values(), median.to_key_values());
    fs::write(run.file("report.metrics"), &text)?;
    print!("{text}");
    Ok(())
}

fn ablate(cfg: &PipelineConfig, run: &RunDir, variants: &[String]) -> Result<()> {
    let variants = variants.iter().map(|v| parse_variant(v)).collect::<Result<Vec<_>>>()?;
    let train = cfg.training_split()?;
    let test = cfg.evaluation_split()?;
    let rows = ablation_sweep(&variants, &train, &test, cfg, &run.file("ablation"), &mut run.logger()?)?;
    let table = format_ablation_table(&rows);
    fs::write(run.file("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn plot(cfg: &PipelineConfig, run: &RunDir, pred: &Path, gt: &Path, out: Option<PathBuf>) -> Result<()> {
    let pred = TrajectoryEstimate::new(read_kitti_poses(pred)?, None);
    let gt = read_kitti_poses(gt)?;
    let out = out.unwrap_or_else(|| run.file("plot.tsv"));
    let (drift, median) = emit_plot_data(&pred, &gt, &out, cfg.plot_align)?;
    println!("plot data: {}", out.display());
    print!("{}{}", drift.to_key_values(), median.to_key_values());
    Ok(())
}
