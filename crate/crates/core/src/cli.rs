//! The `pcl` command line: `gen`, `train`, `eval`, `clusters` and `score`.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 for data or
//! configuration errors.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::clustering::{supervise, CenterMethod, ClusterCenter, ClusterConfig, Clustering};
use crate::datagen::{generate_synthetic, load_dataset, save_dataset, DatasetManifest, GenConfig};
use crate::error::{PclError, Result};
use crate::losses::RefineLoss;
use crate::metrics::{evaluate, evaluate_detections, DetectionRecord, ImageDetection, MetricsReport, DEFAULT_NMS_THRESHOLD};
use crate::model::{forward_all, write_atomic, ModelParams};
use crate::trainer::{log_to_csv, train, TrainConfig};

/// Environment variable naming the default output directory of `train`.
pub const OUT_DIR_ENV: &str = "PCL_OUT_DIR";

pub const CHECKPOINT_FILE: &str = "model.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "pcl", version, about = "Proposal cluster learning on synthetic proposal features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write checkpoint, log and resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset with groundtruth.
    Eval(EvalArgs),
    /// Dump the proposal clusters that supervise one refined stream.
    Clusters(ClustersArgs),
    /// Score a detections file against a dataset's groundtruth.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub proposals: Option<usize>,
    #[arg(long)]
    pub d_raw: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file with training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of refined streams.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub center_method: Option<CenterMethod>,
    #[arg(long)]
    pub refine_loss: Option<RefineLoss>,
    /// Stages as `iterations:lr`, comma separated, e.g. `2000:1e-3,500:1e-4`.
    #[arg(long)]
    pub lr_schedule: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Freeze supervisions for blocks of this many iterations.
    #[arg(long)]
    pub alternating: Option<usize>,
    #[arg(short, long, env = OUT_DIR_ENV)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_NMS_THRESHOLD)]
    pub nms: f64,
    /// Report path; stdout when omitted.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Also write every detection as JSON lines.
    #[arg(long)]
    pub dump_dets: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClustersArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Refined stream whose supervision is dumped, in 1..=K.
    #[arg(long)]
    pub stream: usize,
    #[arg(long, default_value_t = CenterMethod::Graph)]
    pub center_method: CenterMethod,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub dets: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(PclError),
}

impl From<PclError> for CliError {
    fn from(e: PclError) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => e.fmt(f),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses arguments, runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("pcl: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Clusters(a) => cmd_clusters(&a),
        Command::Score(a) => cmd_score(&a),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PclError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes to `out` atomically, or to stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| PclError::io("<stdout>", e)),
    }
}

pub fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    let mut cfg: GenConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    if let Some(v) = a.images {
        cfg.num_images = v;
    }
    if let Some(v) = a.classes {
        cfg.classes = v;
    }
    if let Some(v) = a.proposals {
        cfg.proposals = v;
    }
    if let Some(v) = a.d_raw {
        cfg.d_raw = v;
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    // the header records the resolved generator settings
    let manifest = generate_synthetic(&cfg)?;
    save_dataset(&manifest, &a.out)?;
    Ok(())
}

/// Parses `iterations:lr` stages separated by commas.
pub fn parse_schedule(text: &str) -> std::result::Result<Vec<(usize, f64)>, String> {
    text.split(',')
        .map(|stage| {
            let (n, lr) = stage
                .split_once(':')
                .ok_or_else(|| format!("schedule stage {stage:?} is not iterations:lr"))?;
            let n = n.trim().parse::<usize>().map_err(|e| format!("{n:?}: {e}"))?;
            let lr = lr.trim().parse::<f64>().map_err(|e| format!("{lr:?}: {e}"))?;
            Ok((n, lr))
        })
        .collect()
}

/// The fully resolved settings of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub classes: usize,
    pub d_raw: usize,
    pub train: TrainConfig,
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.k {
        cfg.refinements = v;
    }
    if let Some(v) = a.center_method {
        cfg.center_method = v;
    }
    if let Some(v) = a.refine_loss {
        cfg.refine_loss = v;
    }
    if let Some(s) = &a.lr_schedule {
        cfg.lr_schedule = parse_schedule(s).map_err(CliError::Usage)?;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.alternating.is_some() {
        cfg.alternating = a.alternating;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let manifest = load_dataset(&a.data)?;
    let images = manifest.training_view();
    let output = train(&images, manifest.num_classes(), &cfg)?;

    fs::create_dir_all(&a.out).map_err(|e| PclError::io(&a.out, e))?;
    let run = RunConfig {
        data: a.data.clone(),
        classes: manifest.num_classes(),
        d_raw: manifest.header.d_raw,
        train: cfg,
    };
    write_atomic(&a.out.join(CONFIG_FILE), to_json(&run)?.as_bytes())?;
    write_atomic(
        &a.out.join(LOG_FILE),
        log_to_csv(&output.log, run.train.refinements).as_bytes(),
    )?;
    output.state.params.save(&a.out.join(CHECKPOINT_FILE))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    model: &'a Path,
    data: &'a Path,
    nms: f64,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    if !(a.nms > 0.0 && a.nms <= 1.0) {
        return Err(CliError::Usage(format!("NMS threshold {} not in (0, 1]", a.nms)));
    }
    let params = ModelParams::load(&a.model)?;
    let manifest = load_dataset(&a.data)?;
    let (report, dets) = evaluate(&params, &manifest, a.nms)?;
    if let Some(path) = &a.dump_dets {
        let mut text = String::new();
        for d in &dets {
            text.push_str(&serde_json::to_string(&DetectionRecord::from(*d)).map_err(PclError::from)?);
            text.push('\n');
        }
        write_atomic(path, text.as_bytes())?;
    }
    let out = EvalOutput {
        model: &a.model,
        data: &a.data,
        nms: a.nms,
        report: &report,
    };
    emit(a.out.as_deref(), &to_json(&out)?)?;
    Ok(())
}

/// One image of a cluster dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageClusters {
    pub image_id: u64,
    pub centers: Vec<ClusterCenter>,
    pub clustering: Clustering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDump {
    pub stream: usize,
    pub center_method: CenterMethod,
    pub clustering: ClusterConfig,
    pub images: Vec<ImageClusters>,
}

/// Clusters supervising refined stream `stream`, rebuilt from the scores of
/// stream `stream - 1` for every image.
pub fn cluster_dump(
    params: &ModelParams,
    manifest: &DatasetManifest,
    stream: usize,
    method: CenterMethod,
    config: &ClusterConfig,
) -> Result<ClusterDump> {
    let k_n = params.refine.len();
    if stream == 0 || stream > k_n {
        return Err(PclError::Config(format!("stream {stream} outside 1..={k_n}")));
    }
    let images = manifest
        .training_view()
        .into_iter()
        .filter(|img| !img.labels.is_empty())
        .map(|img| {
            let outputs = forward_all(img.features, params)?;
            let s = supervise(
                outputs.stream(stream - 1),
                &img.labels,
                &img.proposals,
                config,
                method,
                RefineLoss::Bag,
            )?;
            Ok(ImageClusters {
                image_id: img.image_id,
                centers: s.centers,
                clustering: s.clustering,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ClusterDump {
        stream,
        center_method: method,
        clustering: *config,
        images,
    })
}

pub fn cmd_clusters(a: &ClustersArgs) -> CliResult<()> {
    let params = ModelParams::load(&a.model)?;
    let k_n = params.refine.len();
    if a.stream == 0 || a.stream > k_n {
        return Err(CliError::Usage(format!(
            "--stream {} outside 1..={k_n} for this checkpoint",
            a.stream
        )));
    }
    let manifest = load_dataset(&a.data)?;
    check_compatible(&params, &manifest)?;
    let dump = cluster_dump(&params, &manifest, a.stream, a.center_method, &ClusterConfig::default())?;
    emit(a.out.as_deref(), &to_json(&dump)?)?;
    Ok(())
}

fn check_compatible(params: &ModelParams, manifest: &DatasetManifest) -> Result<()> {
    let dims = params.dims();
    if dims.classes != manifest.num_classes() || dims.d_raw != manifest.header.d_raw {
        return Err(PclError::Config(format!(
            "model expects {} classes / {} raw features, dataset has {} / {}",
            dims.classes,
            dims.d_raw,
            manifest.num_classes(),
            manifest.header.d_raw
        )));
    }
    Ok(())
}

/// Reads a detections JSON-lines file.
pub fn read_detections(path: &Path) -> Result<Vec<ImageDetection>> {
    let file = fs::File::open(path).map_err(|e| PclError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PclError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| PclError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ImageDetection::try_from(rec)?);
    }
    Ok(out)
}

pub fn cmd_score(a: &ScoreArgs) -> CliResult<()> {
    let dets = read_detections(&a.dets)?;
    let manifest = load_dataset(&a.data)?;
    let report = evaluate_detections(&dets, &manifest)?;
    emit(a.out.as_deref(), &to_json(&report)?)?;
    Ok(())
}
