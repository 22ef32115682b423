//! `lowlight` command-line surface.
//!
//! Exit codes: 0 ok, 2 I/O, 3 checkpoint, 4 divergence, 5 gradient check
//! failure, 6 bad argument. Machine-readable results go to stdout as JSON;
//! tables and progress go to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{self, Degradation};
use crate::network::{
    self, load_checkpoint, load_checkpoint_any, save_checkpoint, Model, ModelConfig, Modules, Pair, RunSummary,
    TrainConfig,
};
use crate::objective::{psnr, ssim_metric};
use crate::uad::EntropyGradientReport;
use crate::verify::{self, CheckTarget};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;
pub const EXIT_BAD_ARGUMENT: i32 = 6;
const EXIT_INTERNAL: i32 = 1;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Decode { .. } => EXIT_IO,
        Error::Checkpoint(_) | Error::ConfigMismatch(_) => EXIT_CHECKPOINT,
        Error::Diverged { .. } | Error::NonFinite { .. } => EXIT_DIVERGED,
        Error::InvalidArgument(_) | Error::Shape(_) | Error::Json(_) => EXIT_BAD_ARGUMENT,
        Error::OffTape | Error::NonDeterministic => EXIT_INTERNAL,
    }
}

/// Everything a training run reads besides its data: model, trainer and
/// loss settings, the held-out split and default paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// The last `holdout` manifest pairs are kept out of training and used
    /// for the final PSNR/SSIM summary.
    pub holdout: usize,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::default(), train: TrainConfig::default(), holdout: 2, paths: PathsConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub history: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    /// Applies `--seed` to both model initialisation and the trainer.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(seed) = seed {
            self.model.seed = seed;
            self.train.seed = seed;
        }
        self
    }
}

/// One line of a data manifest. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPair {
    pub low: PathBuf,
    pub high: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("manifest {}: {e}", path.display())))
}

pub fn load_pairs(manifest: &Path) -> Result<Vec<Pair>> {
    let base = manifest.parent().unwrap_or(Path::new(""));
    read_manifest(manifest)?
        .into_iter()
        .map(|p| {
            let low = imageio::load(base.join(&p.low))?;
            let high = imageio::load(base.join(&p.high))?;
            if (low.width(), low.height()) != (high.width(), high.height()) {
                return Err(Error::invalid(format!(
                    "pair {} / {}: {}x{} vs {}x{}",
                    p.low.display(),
                    p.high.display(),
                    low.width(),
                    low.height(),
                    high.width(),
                    high.height()
                )));
            }
            Ok(Pair { low, high })
        })
        .collect()
}

fn split_holdout(mut pairs: Vec<Pair>, holdout: usize) -> Result<(Vec<Pair>, Vec<Pair>)> {
    if pairs.len() <= holdout {
        return Err(Error::invalid(format!(
            "manifest has {} pairs; at least {} needed with holdout {holdout}",
            pairs.len(),
            holdout + 1
        )));
    }
    let held = pairs.split_off(pairs.len() - holdout);
    Ok((pairs, held))
}

fn write_json_line(out: &mut impl std::io::Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n").map_err(|e| Error::io("<output>", e))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    serde_json::to_writer_pretty(&mut lock, value)?;
    lock.write_all(b"\n").map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Parser)]
#[command(name = "lowlight", version, about = "Low-light image enhancement toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance one image with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Build low/high training pairs from a directory of well-lit images.
    Synth(SynthArgs),
    /// Train a model from a data manifest.
    Train(TrainArgs),
    /// Export the bottleneck entropy map and its gradient diagnostic.
    Diagnose(DiagnoseArgs),
    /// Compare backward-pass gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train one model per module-ablation row and tabulate the results.
    Ablate(AblateArgs),
    /// PSNR and SSIM between two images.
    Metrics(MetricsArgs),
    /// Print the default run configuration.
    PrintConfig,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Grayscale PNG of the bottleneck entropy map (`round(255 v)`).
    #[arg(long)]
    pub entropy_out: Option<PathBuf>,
    /// Require the checkpoint to match this run configuration's model.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// PNG/PPM sources; procedural scenes are generated when omitted.
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = Degradation::default().gamma)]
    pub gamma: f64,
    #[arg(long, default_value_t = Degradation::default().scale)]
    pub scale: f64,
    #[arg(long, default_value_t = Degradation::default().noise_sigma)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of procedural scenes (without `--input-dir`).
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Side length of procedural scenes.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Freshly initialised model from `--config`/`--seed` when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: PathBuf,
    /// Reference image; enables the entropy-scale gradient diagnostic.
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// len, g2af, uad, neco, asc, losses or all.
    #[arg(long, default_value = "all")]
    pub module: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = verify::DEFAULT_TOL)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_manifest: Option<PathBuf>,
    #[arg(long, default_value = "baseline,len,neco,uad,asc,full")]
    pub rows: String,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_BAD_ARGUMENT } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Enhance(a) => cmd_enhance(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Metrics(a) => cmd_metrics(&a),
        Command::PrintConfig => {
            print_json(&RunConfig::default())?;
            Ok(EXIT_OK)
        }
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map(RunConfig::load).transpose().map(Option::unwrap_or_default)
}

pub fn cmd_enhance(a: &EnhanceArgs) -> Result<i32> {
    let img = imageio::load(&a.input)?;
    let loaded = match &a.config {
        Some(cfg) => load_checkpoint(&a.checkpoint, &RunConfig::load(cfg)?.model),
        None => load_checkpoint_any(&a.checkpoint),
    };
    // an unreadable checkpoint is a checkpoint failure, not a data I/O one
    let model = loaded.map_err(|e| match e {
        Error::Io { path, source } => Error::Checkpoint(format!("{}: {source}", path.display())),
        other => other,
    })?;
    let (out, entropy) = model.enhance(&img.to_tensor())?;
    imageio::save(&imageio::Image::from_tensor(&out, 0)?, &a.output)?;
    if let Some(path) = &a.entropy_out {
        let map = entropy.ok_or_else(|| Error::invalid("checkpoint has UaD disabled; no entropy map to export"))?;
        imageio::save_heatmap(&map, path)?;
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct SynthSummary {
    pairs: usize,
    manifest: PathBuf,
}

pub fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let degradation = Degradation { gamma: a.gamma, scale: a.scale, noise_sigma: a.sigma };
    let sources: Vec<(String, imageio::Image)> = match &a.input_dir {
        Some(dir) => {
            let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            let mut paths = Vec::new();
            for entry in entries {
                let path = entry.map_err(|e| Error::io(dir, e))?.path();
                let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
                if matches!(ext.as_deref(), Some("png" | "ppm" | "pnm")) {
                    paths.push(path);
                }
            }
            paths.sort();
            paths
                .into_iter()
                .map(|p| {
                    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
                    Ok((stem, imageio::load(&p)?))
                })
                .collect::<Result<_>>()?
        }
        None => (0..a.count)
            .map(|i| (format!("scene{i:04}"), imageio::procedural_scene(a.size, a.size, a.seed.wrapping_add(i as u64))))
            .collect(),
    };
    for sub in ["low", "high"] {
        let d = a.output_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = Vec::with_capacity(sources.len());
    for (i, (stem, high)) in sources.iter().enumerate() {
        let seed = a.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
        let low = imageio::synth_lowlight(high, degradation, seed)?;
        let entry = ManifestPair { low: format!("low/{stem}.png").into(), high: format!("high/{stem}.png").into() };
        imageio::save(&low, a.output_dir.join(&entry.low))?;
        imageio::save(high, a.output_dir.join(&entry.high))?;
        manifest.push(entry);
    }
    let path = a.output_dir.join("manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_file(&path, &bytes)?;
    print_json(&SynthSummary { pairs: manifest.len(), manifest: path })?;
    Ok(EXIT_OK)
}

/// Builds, trains and evaluates a model on `pairs` as configured; shared by
/// `train` and `ablate`.
pub fn run_training(config: &RunConfig, pairs: Vec<Pair>) -> Result<(Model, Vec<network::StepRecord>, RunSummary)> {
    let (train, held) = split_holdout(pairs, config.holdout)?;
    let mut model = Model::build(config.model.clone())?;
    let (history, summary) = network::train_and_evaluate(&mut model, &train, &held, &config.train)?;
    Ok((model, history, summary))
}

fn manifest_path(flag: Option<&PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    flag.or(config.paths.data_manifest.as_ref())
        .cloned()
        .ok_or_else(|| Error::invalid("no data manifest given (--data-manifest or paths.data_manifest)"))
}

pub fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let mut config = load_run_config(a.config.as_deref())?.with_seed(a.seed);
    if let Some(steps) = a.steps {
        config.train.steps = steps;
    }
    let pairs = load_pairs(&manifest_path(a.data_manifest.as_ref(), &config)?)?;
    let out = a.out.as_ref().or(config.paths.checkpoint.as_ref()).cloned();
    let history_path = a.history.as_ref().or(config.paths.history.as_ref()).cloned();
    let (model, history, summary) = run_training(&config, pairs)?;
    if let Some(path) = &history_path {
        let mut buf = Vec::new();
        for record in &history {
            write_json_line(&mut buf, record)?;
        }
        write_file(path, &buf)?;
    }
    if let Some(path) = &out {
        save_checkpoint(&model, path)?;
    }
    print_json(&summary)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct EntropyStats {
    height: usize,
    width: usize,
    mean: f64,
    min: f64,
    max: f64,
}

#[derive(Serialize)]
struct DiagnoseReport {
    entropy: EntropyStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    gradient: Option<Vec<EntropyGradientReport>>,
}

pub fn cmd_diagnose(a: &DiagnoseArgs) -> Result<i32> {
    let img = imageio::load(&a.input)?;
    let model = match &a.checkpoint {
        Some(path) => load_checkpoint_any(path)?,
        None => Model::build(load_run_config(a.config.as_deref())?.with_seed(a.seed).model)?,
    };
    let low = img.to_tensor();
    let (_, entropy) = model.enhance(&low)?;
    let map = entropy.ok_or_else(|| Error::invalid("model has UaD disabled; there is no entropy map"))?;
    imageio::save_heatmap(&map, &a.output)?;
    let [_, _, height, width] = map.dims();
    let entropy = EntropyStats { height, width, mean: map.mean(), min: map.min(), max: map.max() };
    let gradient = match &a.gt {
        Some(gt) => {
            let high = imageio::load(gt)?.to_tensor();
            if high.dims() != low.dims() {
                return Err(Error::invalid(format!("--gt is {:?}, input is {:?}", high.dims(), low.dims())));
            }
            Some(network::entropy_scale_sweep(&model, &low, &high, &verify::ENTROPY_SCALES)?)
        }
        None => None,
    };
    print_json(&DiagnoseReport { entropy, gradient })?;
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let targets = CheckTarget::parse_selection(&a.module)?;
    let report = verify::run_gradcheck(&targets, a.seed, a.tol)?;
    eprint!("{}", report.table());
    print_json(&report)?;
    if report.passed {
        Ok(EXIT_OK)
    } else {
        eprintln!("gradient check failed (tol {:e}): {}", a.tol, report.failures.join(", "));
        Ok(EXIT_GRADCHECK)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub row: String,
    pub modules: Modules,
    pub params: usize,
    pub summary: RunSummary,
}

/// Parses a comma-separated row list, rejecting unknown names before any
/// work starts.
pub fn parse_rows(rows: &str) -> Result<Vec<(String, Modules)>> {
    rows.split(',')
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|r| Ok((r.to_string(), Modules::row(r)?)))
        .collect::<Result<Vec<_>>>()
        .and_then(|v| if v.is_empty() { Err(Error::invalid("no ablation rows given")) } else { Ok(v) })
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<10} {:>8} {:>11} {:>11} {:>10} {:>8}\n",
        "row", "params", "loss_init", "loss_final", "psnr_dB", "ssim"
    );
    for r in rows {
        let s = &r.summary;
        let (p, q) = s.heldout.map(|h| (h.psnr_output, h.ssim_output)).unwrap_or((f64::NAN, f64::NAN));
        out.push_str(&format!(
            "{:<10} {:>8} {:>11.5} {:>11.5} {:>10.3} {:>8.4}\n",
            r.row, r.params, s.initial.loss.total, s.final_train.loss.total, p, q
        ));
    }
    out
}

pub fn run_ablation(config: &RunConfig, pairs: &[Pair], rows: &[(String, Modules)]) -> Result<Vec<AblationRow>> {
    rows.iter()
        .map(|(name, modules)| {
            let mut cfg = config.clone();
            cfg.model.modules = *modules;
            log::info!("ablation row `{name}`");
            let (model, _, summary) = run_training(&cfg, pairs.to_vec())?;
            Ok(AblationRow { row: name.clone(), modules: *modules, params: model.param_count(), summary })
        })
        .collect()
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<i32> {
    let rows = parse_rows(&a.rows)?;
    let mut config = load_run_config(a.config.as_deref())?.with_seed(a.seed);
    if let Some(steps) = a.steps {
        config.train.steps = steps;
    }
    let pairs = load_pairs(&manifest_path(a.data_manifest.as_ref(), &config)?)?;
    let results = run_ablation(&config, &pairs, &rows)?;
    eprint!("{}", ablation_table(&results));
    print_json(&results)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct Metrics {
    psnr: f64,
    ssim: f64,
}

pub fn cmd_metrics(a: &MetricsArgs) -> Result<i32> {
    let pred = imageio::load(&a.pred)?;
    let gt = imageio::load(&a.gt)?;
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        eprintln!(
            "error: size mismatch: {} is {}x{}, {} is {}x{}",
            a.pred.display(),
            pred.width(),
            pred.height(),
            a.gt.display(),
            gt.width(),
            gt.height()
        );
        return Ok(EXIT_IO);
    }
    let (p, g) = (pred.to_tensor(), gt.to_tensor());
    print_json(&Metrics { psnr: psnr(&p, &g)?, ssim: ssim_metric(&p, &g)? })?;
    Ok(EXIT_OK)
}
