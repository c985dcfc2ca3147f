//! The `gdanet` command-line tool.
//!
//! Every command accepts `--seed` and `--out`, writes a `run.json` manifest
//! into its output directory, and maps failures to stable exit codes
//! (see [`Error::exit_code`]).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::gdm::{default_m, disentangle, spectral_check_with_limit, DEFAULT_SPECTRAL_LIMIT};
use crate::graph::{build_adjacency, GraphConfig};
use crate::model::{count_params, load_checkpoint, save_checkpoint, AdjacencyMode, FusionMode, Gdanet, ModelConfig, Task};
use crate::pointcloud::{
    export_ply, generate_synthetic, load_cloud, CloudFormat, LoadOptions, PointCloud, ShapeFamily, SyntheticSpec,
};
use crate::sgcam::{export_attention, AttentionRecord};
use crate::training::{
    cylinder_segmentation, desk_classification, evaluate, log_csv, robustness_csv, run_ablation, run_robustness,
    train_with, AblationToggles, Control, Dataset, DeskSpec, EvalReport, LrSchedule, OptimizerConfig,
    RobustnessMode, TrainConfig, VoteConfig,
};

/// Parameter count reported for the reference architecture.
pub const REFERENCE_PARAMS: f64 = 0.93e6;

const SPECTRAL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Parser)]
#[command(name = "gdanet", version, about = "Geometry-disentangled attention for point clouds")]
pub struct Cli {
    /// Worker threads (falls back to GDA_THREADS, then all cores).
    #[arg(long, global = true, env = "GDA_THREADS")]
    pub threads: Option<usize>,
    /// Single-threaded, strictly ordered execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a cloud into sharp and gentle variation components.
    Disentangle(DisentangleArgs),
    /// Check the spectrum of I − Ã against 1 − λ(Ã) on random graphs.
    SpectralCheck(SpectralArgs),
    /// Train a network on a synthetic desk-scale dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint with optional voting.
    Eval(EvalArgs),
    /// Train and evaluate one model per ablation row and seed.
    Ablate(AblateArgs),
    /// Evaluate a checkpoint under point dropout, rotation or noise.
    Robustness(RobustnessArgs),
    /// Write one point's attention weights over the sharp and gentle components.
    AttentionExport(AttentionArgs),
    /// Print the parameter count of a model configuration.
    Params(ParamsArgs),
    /// Write synthetic clouds as PLY files.
    GenData(GenDataArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Xyz,
    Ply,
    Off,
}

fn resolve_format(path: &Path, format: Option<FormatArg>) -> CloudFormat {
    let by_ext = || match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ply") => FormatArg::Ply,
        Some("off") => FormatArg::Off,
        _ => FormatArg::Xyz,
    };
    format.unwrap_or_else(by_ext).into()
}

impl From<FormatArg> for CloudFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Xyz => CloudFormat::Xyz,
            FormatArg::Ply => CloudFormat::Ply,
            FormatArg::Off => CloudFormat::Off,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// xyz only.
    Coords,
    /// Every channel of the input.
    Features,
}

#[derive(Debug, Args, Serialize)]
pub struct DisentangleArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Input format; inferred from the extension when absent.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Surface samples drawn from OFF meshes.
    #[arg(long, default_value_t = 1024)]
    pub samples: usize,
    #[arg(long, default_value_t = 20)]
    pub k_graph: usize,
    /// Points per component (default: a quarter of the cloud).
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_enum, default_value = "coords")]
    pub space: Space,
    /// Prefix of the output files (default: `<out>/`).
    #[arg(long)]
    pub out_prefix: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct SpectralArgs {
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub k_graph: usize,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleArg {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    #[arg(long, default_value_t = 512)]
    pub n_points: usize,
    /// Training clouds per class (per split for segmentation).
    #[arg(long, default_value_t = 200)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    /// Seed of the dataset, independent of the model seed.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

impl DataArgs {
    fn spec(&self) -> DeskSpec {
        DeskSpec {
            n_points: self.n_points,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            seed: self.data_seed,
            ..DeskSpec::default()
        }
    }

    fn load(&self, task: Task) -> Result<(Dataset, Dataset)> {
        match task {
            Task::Classification => desk_classification(&self.spec()),
            Task::Segmentation => cylinder_segmentation(&self.spec()),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, value_enum, default_value = "cosine")]
    pub schedule: ScheduleArg,
    /// Disable training-time scaling and translation.
    #[arg(long)]
    pub no_augment: bool,
}

impl OptimArgs {
    fn config(&self, seed: u64, deterministic: bool) -> TrainConfig {
        let optimizer = match self.optimizer {
            OptimizerArg::Adam => OptimizerConfig::Adam {
                lr: self.lr,
                betas: [0.9, 0.999],
                eps: 1e-8,
            },
            OptimizerArg::Sgd => OptimizerConfig::SgdMomentum {
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
        };
        let defaults = TrainConfig::default();
        TrainConfig {
            optimizer,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_schedule: match self.schedule {
                ScheduleArg::Constant => LrSchedule::Constant,
                ScheduleArg::Cosine => LrSchedule::Cosine,
            },
            seed,
            deterministic,
            augment: if self.no_augment { None } else { defaults.augment },
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionArg {
    Both,
    SharpOnly,
    GentleOnly,
    SelfAttention,
    None,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// JSON model configuration; the flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub k_local: Option<usize>,
    #[arg(long)]
    pub k_graph: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    /// Replace the kNN local operators with pointwise MLPs.
    #[arg(long)]
    pub no_knn_local: bool,
    /// Build the block graphs once from xyz instead of per block.
    #[arg(long)]
    pub coords_adjacency: bool,
}

impl ModelArgs {
    fn config(&self, seed: u64) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => ModelConfig::default(),
        };
        if let Some(t) = self.task {
            let task = match t {
                TaskArg::Classification => Task::Classification,
                TaskArg::Segmentation => Task::Segmentation,
            };
            if task != cfg.task {
                cfg.task = task;
                cfg.n_classes = match task {
                    Task::Classification => crate::training::DESK_CLASSES.len(),
                    Task::Segmentation => 2,
                };
            }
        }
        if let Some(k) = self.k_local {
            cfg.k_local = k;
        }
        if let Some(k) = self.k_graph {
            cfg.k_graph = k;
        }
        if self.m.is_some() {
            cfg.m = self.m;
        }
        if let Some(f) = self.fusion {
            cfg.fusion = match f {
                FusionArg::Both => FusionMode::Both,
                FusionArg::SharpOnly => FusionMode::SharpOnly,
                FusionArg::GentleOnly => FusionMode::GentleOnly,
                FusionArg::SelfAttention => FusionMode::SelfAttention,
                FusionArg::None => FusionMode::None,
            };
        }
        if self.no_knn_local {
            cfg.use_knn_local = false;
        }
        if self.coords_adjacency {
            cfg.adjacency = AdjacencyMode::Coords;
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VoteArgs {
    #[arg(long, default_value_t = 1)]
    pub votes: usize,
    /// Uniform scale range of the votes.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [1.0, 1.0])]
    pub scale: Vec<f64>,
}

impl VoteArgs {
    fn config(&self, seed: u64) -> VoteConfig {
        VoteConfig {
            votes: self.votes,
            scale_range: [self.scale[0], self.scale[1]],
            seed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Stop once test accuracy reaches this value (evaluated every epoch).
    #[arg(long)]
    pub target_acc: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub votes: VoteArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub votes: VoteArgs,
    /// Rows as `+`-joined switches from knn, sharp, gentle, self, vote
    /// (`none` for all off), comma separated.
    #[arg(long, value_delimiter = ',', default_value = "none,knn,knn+sharp,knn+gentle,knn+sharp+gentle,knn+self")]
    pub rows: Vec<String>,
    /// Seeds per row (default: --seed, --seed + 1, --seed + 2).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RobustnessArg {
    Dropout,
    RotateZ,
    RotateSo3,
    Jitter,
    Clutter,
}

#[derive(Debug, Args, Serialize)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub mode: RobustnessArg,
    /// Grid values, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct AttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cloud to analyse; a synthetic shape is used when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Input format; inferred from the extension when absent.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long, default_value = "l-bracket")]
    pub shape: String,
    #[arg(long, default_value_t = 512)]
    pub n_points: usize,
    /// Index of the point whose attention is exported.
    #[arg(long, default_value_t = 0)]
    pub anchor: usize,
    #[arg(long, default_value_t = 0)]
    pub block: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value = "plane-with-crease")]
    pub shape: String,
    #[arg(long, default_value_t = 1024)]
    pub n_points: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Store part labels as the per-vertex scalar.
    #[arg(long)]
    pub part_labels: bool,
    #[command(flatten)]
    pub common: Common,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn manifest(command: &str, args: &impl Serialize, common: &Common, extra: Value) -> Result<()> {
    create_dir(&common.out)?;
    let doc = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "args": args,
        "seed": common.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "resolved": extra,
    });
    write(&common.out.join("run.json"), serde_json::to_string_pretty(&doc).expect("manifest serializes"))
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let deterministic = cli.deterministic;
    pool.install(|| match cli.command {
        Command::Disentangle(a) => cmd_disentangle(&a),
        Command::SpectralCheck(a) => cmd_spectral_check(&a),
        Command::Train(a) => cmd_train(&a, deterministic),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a, deterministic),
        Command::Robustness(a) => cmd_robustness(&a),
        Command::AttentionExport(a) => cmd_attention_export(&a),
        Command::Params(a) => cmd_params(&a),
        Command::GenData(a) => cmd_gen_data(&a),
    })
}

pub fn cmd_disentangle(a: &DisentangleArgs) -> Result<()> {
    let opts = LoadOptions {
        off_samples: a.samples,
        seed: a.common.seed,
    };
    let cloud = load_cloud(&a.input, resolve_format(&a.input, a.format), &opts)?;
    let features = match a.space {
        Space::Coords => cloud.coords_tensor::<f64>(),
        Space::Features => cloud.to_tensor::<f64>(),
    };
    let graph = build_adjacency(&features, &GraphConfig::with_k(a.k_graph))?;
    let m = a.m.unwrap_or_else(|| default_m(cloud.n_points()));
    let split = disentangle(&graph, &features, m)?;

    manifest("disentangle", a, &a.common, json!({ "m": m }))?;
    let prefix = match &a.out_prefix {
        Some(p) => p.clone(),
        None => format!("{}/", a.common.out.display()),
    };
    if let Some(parent) = Path::new(&format!("{prefix}x")).parent() {
        create_dir(parent)?;
    }
    let part = |idx: &[usize], name: &str| -> Result<()> {
        let scores: Vec<f64> = idx.iter().map(|&i| split.scores[i]).collect();
        export_ply(&cloud.select(idx)?, Some(&scores), Path::new(&format!("{prefix}{name}")))
    };
    part(split.sharp_idx(), "sharp.ply")?;
    part(split.gentle_idx(), "gentle.ply")?;
    export_ply(&cloud, Some(&split.scores), Path::new(&format!("{prefix}scores.ply")))?;
    write(Path::new(&format!("{prefix}split.json")), split.to_json())?;
    println!("sharp {} gentle {} of {} points", m, m, cloud.n_points());
    Ok(())
}

pub fn cmd_spectral_check(a: &SpectralArgs) -> Result<()> {
    if a.n > DEFAULT_SPECTRAL_LIMIT {
        return Err(Error::Config(format!(
            "spectral check is limited to {DEFAULT_SPECTRAL_LIMIT} points, got {}",
            a.n
        )));
    }
    let k = a.k_graph.min(a.n.saturating_sub(1));
    manifest("spectral-check", a, &a.common, json!({ "k_graph": k }))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let mut failed = 0;
    for trial in 0..a.trials {
        let pts: Vec<f64> = (0..a.n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cloud = PointCloud::new(pts, 3)?;
        let graph = build_adjacency(&cloud.coords_tensor::<f64>(), &GraphConfig::with_k(k))?;
        let report = spectral_check_with_limit(&graph, DEFAULT_SPECTRAL_LIMIT)?;
        let in_range = report
            .eigenvalues_a
            .iter()
            .all(|&l| (-SPECTRAL_TOLERANCE..=1.0 + SPECTRAL_TOLERANCE).contains(&l));
        let pass = report.max_response_error <= SPECTRAL_TOLERANCE && in_range;
        failed += usize::from(!pass);
        println!(
            "trial {trial}: n={} k={k} max_response_error={:.3e} {}",
            a.n,
            report.max_response_error,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} of {} trials failed", a.trials)));
    }
    Ok(())
}

fn report_line(r: &EvalReport) -> String {
    let mut s = format!("accuracy {:.4}", r.overall_accuracy);
    if let (Some(i), Some(c)) = (r.instance_miou, r.class_miou) {
        s.push_str(&format!(" instance_miou {i:.4} class_miou {c:.4}"));
    }
    s
}

pub fn cmd_train(a: &TrainArgs, deterministic: bool) -> Result<()> {
    let seed = a.common.seed;
    let model_cfg = a.model.config(seed)?;
    let train_cfg = a.optim.config(seed, deterministic);
    train_cfg.validate()?;
    manifest(
        "train",
        a,
        &a.common,
        json!({ "model": model_cfg, "train": train_cfg, "data": a.data.spec() }),
    )?;
    let (train_set, test_set) = a.data.load(model_cfg.task)?;
    let (model, mut store) = Gdanet::init::<f32>(model_cfg.clone())?;
    let log = train_with(&model, &mut store, &train_set, &train_cfg, |e, s| {
        let mut line = format!("epoch {} loss {:.5} train_acc {:.4}", e.epoch, e.loss, e.acc);
        let mut stop = false;
        if let Some(target) = a.target_acc {
            let r = evaluate(&model, s, &test_set, &VoteConfig::plain())?;
            line.push_str(&format!(" test_acc {:.4}", r.overall_accuracy));
            stop = r.overall_accuracy >= target;
        }
        eprintln!("{line}");
        Ok(if stop { Control::Stop } else { Control::Continue })
    })?;
    write(&a.common.out.join("train_log.csv"), log_csv(&log))?;
    save_checkpoint(&a.common.out.join("model.ckpt"), &model_cfg, &store)?;
    let report = evaluate(&model, &store, &test_set, &VoteConfig::plain())?;
    write(&a.common.out.join("eval.json"), report.to_json())?;
    println!("{}", report_line(&report));
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (model, store) = load_checkpoint::<f32>(&a.checkpoint)?;
    let votes = a.votes.config(a.common.seed);
    votes.validate()?;
    manifest("eval", a, &a.common, json!({ "model": model.config(), "votes": votes }))?;
    let (_, test_set) = a.data.load(model.config().task)?;
    let report = evaluate(&model, &store, &test_set, &votes)?;
    write(&a.common.out.join("eval.json"), report.to_json())?;
    println!("{}", report_line(&report));
    Ok(())
}

/// Parses an ablation row such as `knn+sharp+gentle`.
pub fn parse_row(s: &str) -> Result<AblationToggles> {
    let mut t = AblationToggles {
        use_knn_local: false,
        use_self_attention: false,
        use_sharp: false,
        use_gentle: false,
        use_voting: false,
    };
    if s.trim() != "none" {
        for part in s.split('+') {
            match part.trim() {
                "knn" => t.use_knn_local = true,
                "sharp" => t.use_sharp = true,
                "gentle" => t.use_gentle = true,
                "self" => t.use_self_attention = true,
                "vote" => t.use_voting = true,
                other => return Err(Error::Config(format!("unknown ablation switch `{other}`"))),
            }
        }
    }
    t.fusion()?;
    Ok(t)
}

pub fn cmd_ablate(a: &AblateArgs, deterministic: bool) -> Result<()> {
    let seed = a.common.seed;
    let rows: Vec<AblationToggles> = a.rows.iter().map(|r| parse_row(r)).collect::<Result<_>>()?;
    let seeds = a.seeds.clone().unwrap_or_else(|| vec![seed, seed + 1, seed + 2]);
    let base = a.model.config(seed)?;
    let train_cfg = a.optim.config(seed, deterministic);
    let votes = a.votes.config(seed);
    manifest(
        "ablate",
        a,
        &a.common,
        json!({ "model": base, "train": train_cfg, "votes": votes, "seeds": seeds, "rows": rows }),
    )?;
    let (train_set, test_set) = a.data.load(base.task)?;
    let table = run_ablation::<f32>(&base, &train_set, &test_set, &rows, &train_cfg, &votes, &seeds)?;
    let csv = table.to_csv();
    write(&a.common.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_robustness(a: &RobustnessArgs) -> Result<()> {
    let (model, store) = load_checkpoint::<f32>(&a.checkpoint)?;
    let mode = match a.mode {
        RobustnessArg::Dropout => RobustnessMode::Dropout,
        RobustnessArg::RotateZ => RobustnessMode::RotateZ,
        RobustnessArg::RotateSo3 => RobustnessMode::RotateSo3,
        RobustnessArg::Jitter => RobustnessMode::Jitter,
        RobustnessArg::Clutter => RobustnessMode::Clutter,
    };
    manifest("robustness", a, &a.common, json!({ "model": model.config() }))?;
    let (_, test_set) = a.data.load(model.config().task)?;
    let curve = run_robustness(&model, &store, &test_set, mode, &a.grid, a.common.seed)?;
    let csv = robustness_csv(&curve);
    write(&a.common.out.join("robustness.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_attention_export(a: &AttentionArgs) -> Result<()> {
    let (model, store) = load_checkpoint::<f32>(&a.checkpoint)?;
    let cloud = match &a.input {
        Some(p) => load_cloud(
            p,
            resolve_format(p, a.format),
            &LoadOptions {
                off_samples: a.n_points,
                seed: a.common.seed,
            },
        )?,
        None => generate_synthetic(&SyntheticSpec {
            shape_family: a.shape.parse::<ShapeFamily>()?,
            n_points: a.n_points,
            seed: a.common.seed,
            part_labels: false,
        })?,
    };
    let cloud = crate::pointcloud::normalize_unit_sphere(&cloud);
    manifest("attention-export", a, &a.common, json!({ "model": model.config() }))?;
    let (_, trace) = match model.config().task {
        Task::Classification => model.forward_classify_traced(&store, &cloud)?,
        Task::Segmentation => model.forward_segment_traced(&store, &cloud, 0)?,
    };
    let block = trace
        .get(a.block)
        .ok_or_else(|| Error::Config(format!("block {} out of range for {} blocks", a.block, trace.len())))?;
    let (Some(split), Some(w_sharp), Some(w_gentle)) = (&block.split, &block.w_sharp, &block.w_gentle) else {
        return Err(Error::Config("attention export needs a model with both sharp and gentle branches".into()));
    };
    let record = AttentionRecord {
        w_sharp: w_sharp.clone(),
        w_gentle: w_gentle.clone(),
    };
    let (sharp, gentle) = export_attention(&record, a.anchor)?;
    let out = &a.common.out;
    export_ply(&cloud.select(split.sharp_idx())?, Some(&sharp), &out.join("attention_sharp.ply"))?;
    export_ply(&cloud.select(split.gentle_idx())?, Some(&gentle), &out.join("attention_gentle.ply"))?;
    let doc = json!({
        "anchor": a.anchor,
        "block": a.block,
        "sharp_idx": split.sharp_idx(),
        "gentle_idx": split.gentle_idx(),
        "w_sharp": sharp,
        "w_gentle": gentle,
    });
    write(&out.join("attention.json"), serde_json::to_string(&doc).expect("serializes"))?;
    println!("exported attention of point {} in block {}", a.anchor, a.block);
    Ok(())
}

pub fn cmd_params(a: &ParamsArgs) -> Result<()> {
    let cfg = a.model.config(a.common.seed)?;
    let (_, store) = Gdanet::init::<f32>(cfg.clone())?;
    let n = count_params(&store);
    manifest("params", a, &a.common, json!({ "model": cfg, "params": n }))?;
    println!("{n}");
    println!("reference: {:.2} M", REFERENCE_PARAMS / 1e6);
    Ok(())
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let family: ShapeFamily = a.shape.parse()?;
    manifest("gen-data", a, &a.common, json!({}))?;
    for i in 0..a.count {
        let spec = SyntheticSpec {
            shape_family: family,
            n_points: a.n_points,
            seed: a.common.seed + i as u64,
            part_labels: a.part_labels,
        };
        let cloud = generate_synthetic(&spec)?;
        let labels: Option<Vec<f64>> = cloud.point_labels().map(|l| l.iter().map(|&v| v as f64).collect());
        let path = a.common.out.join(format!("{}_{i:04}.ply", family.name()));
        export_ply(&cloud, labels.as_deref(), &path)?;
    }
    println!("wrote {} {} clouds to {}", a.count, family.name(), a.common.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_parse() {
        assert_eq!(parse_row("knn+sharp+gentle").unwrap(), AblationToggles::FULL);
        assert_eq!(parse_row("knn").unwrap(), AblationToggles::KNN_ONLY);
        assert!(!parse_row("none").unwrap().use_knn_local);
        assert!(matches!(parse_row("self+sharp"), Err(Error::Config(_))));
        assert!(matches!(parse_row("bogus"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_flags_exit_with_config_code() {
        assert_eq!(main_with_args(["gdanet", "params", "--bogus"]), 3);
        assert_eq!(main_with_args(["gdanet", "nope"]), 3);
    }

    #[test]
    fn every_command_accepts_seed_and_out() {
        use clap::CommandFactory;
        let cmd = Cli::command();
        for sub in cmd.get_subcommands() {
            let names: Vec<_> = sub.get_arguments().map(|a| a.get_id().as_str().to_string()).collect();
            assert!(names.contains(&"seed".to_string()), "{}", sub.get_name());
            assert!(names.contains(&"out".to_string()), "{}", sub.get_name());
        }
    }
}
