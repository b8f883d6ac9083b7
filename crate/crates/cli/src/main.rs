//! `csts`: train, evaluate and inspect audio-visual gaze anticipation models.

mod render;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use csts_core::autograd::set_gradient_sabotage;
use csts_core::data::{
    load_checkpoint, load_clip, load_manifest, load_split, save_checkpoint, synth_generate, ClipManifest, Split, SynthConfig,
    WindowConfig,
};
use csts_core::gradsuite::run_suite;
use csts_core::model::EXPERIMENTS;
use csts_core::train::{ablate, evaluate, train, AblationCell, TrainConfig};
use csts_core::{CstsError, ModelConfig, Precision};

#[derive(Parser, Debug)]
#[command(name = "csts", version, about = "Audio-visual egocentric gaze anticipation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write its checkpoint, step log and test report.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Generate the synthetic cue corpus.
    Synth(SynthArgs),
    /// Compare analytic and finite-difference gradients for every module.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate a grid of experiments and seeds.
    Ablate(AblateArgs),
    /// Write the spatial-fusion audio-to-visual attention of one clip.
    DumpAttn(RenderArgs),
    /// Write predicted heatmaps with the true gaze for one clip.
    RenderPred(RenderArgs),
}

/// Flags every command accepts.
#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config; training config for train/ablate, synth config for
    /// synth, model config for gradcheck. Flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F64 => Precision::F64,
            PrecisionArg::F32 => Precision::F32,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// One of vision-only, s-fusion, t-fusion, sts, csts, linear, bilinear, concat, vanilla-sa.
    #[arg(long, default_value = "csts")]
    experiment: String,
    /// Model preset: desk or paper.
    #[arg(long, default_value = "desk")]
    model: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Binarisation threshold relative to each map's maximum.
    #[arg(long, default_value_t = csts_core::metrics::DEFAULT_GAMMA)]
    gamma: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    cue_validity: Option<f64>,
    #[arg(long)]
    drift: Option<f64>,
    /// Write packed frame files instead of PNG directories.
    #[arg(long)]
    packed: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Entries probed per parameter tensor, largest gradients first.
    #[arg(long, default_value_t = 2)]
    per_tensor: usize,
    /// Fault injection: corrupt the backward pass of the named op.
    #[arg(long, hide = true)]
    sabotage: Option<String>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "vision-only,s-fusion,t-fusion,sts,csts")]
    experiments: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "desk")]
    model: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Clip id from the manifest.
    #[arg(long)]
    clip: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Honours `CSTS_THREADS` as a cap on worker threads.
fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("CSTS_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).with_context(|| format!("CSTS_THREADS must be a positive integer, got '{v}'"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// The error chain, skipping causes whose text an outer layer already shows.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

/// 1 for verification and evaluation failures, 2 for bad configuration,
/// 3 for I/O.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CstsError>() {
            return match c {
                c if c.is_io() => 3,
                CstsError::Config(_) => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
    }
    1
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn run(cmd: Command) -> anyhow::Result<u8> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::DumpAttn(a) => cmd_dump_attn(a),
        Command::RenderPred(a) => cmd_render_pred(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CstsError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CstsError::config(format!("{}: {e}", path.display())).into())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).map_err(|e| CstsError::io(path, e))?;
    Ok(())
}

fn out_dir(common: &Common) -> anyhow::Result<PathBuf> {
    let dir = common.out.clone().ok_or_else(|| usage("--out is required"))?;
    fs::create_dir_all(&dir).map_err(|e| CstsError::io(&dir, e))?;
    Ok(dir)
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

fn train_config(common: &Common) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match &common.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = common.precision {
        cfg.precision = p.into();
    }
    Ok(cfg)
}

fn load_splits(data: &Path, model: &ModelConfig) -> anyhow::Result<(Vec<csts_core::Sample>, Vec<csts_core::Sample>)> {
    let clips = load_manifest(&manifest_path(data))?;
    let window = WindowConfig::default();
    let strip = |v: Vec<(String, csts_core::Sample)>| v.into_iter().map(|(_, s)| s).collect::<Vec<_>>();
    let train_set = strip(load_split(&clips, Split::Train, &window, model)?);
    let test_set = strip(load_split(&clips, Split::Test, &window, model)?);
    Ok((train_set, test_set))
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<u8> {
    let mut cfg = train_config(&a.common)?;
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(epochs, lr, batch_size, alpha, eval_every);
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    let base = ModelConfig::preset(&a.model)?.with_experiment(&a.experiment)?;
    let dir = out_dir(&a.common)?;
    let (train_set, test_set) = load_splits(&a.data, &base)?;
    eprintln!("{} training clips, {} test clips", train_set.len(), test_set.len());

    let log_path = dir.join("metrics.jsonl");
    let file = File::create(&log_path).map_err(|e| CstsError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let started = Instant::now();
    let out = train(&cfg, &base, &train_set, &test_set, Some(&mut log))?;
    log.flush().map_err(|e| CstsError::io(&log_path, e))?;

    save_checkpoint(&dir.join("checkpoint.bin"), &out.model.cfg, &out.store, Some(&out.optimizer))?;
    write_file(&dir.join("train_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    write_file(&dir.join("evals.json"), serde_json::to_string_pretty(&out.evals)?)?;
    if let Some(last) = out.evals.last() {
        write_report(&dir, &last.report)?;
        print!("{}", last.report.table());
    }
    eprintln!("{} steps in {:.1?}", out.log.len(), started.elapsed());
    Ok(0)
}

fn write_report(dir: &Path, report: &csts_core::metrics::EvalReport) -> anyhow::Result<()> {
    write_file(&dir.join("eval.json"), serde_json::to_string_pretty(report)?)?;
    write_file(&dir.join("eval.txt"), report.table())?;
    write_file(&dir.join("per_frame.csv"), report.per_frame_csv())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<u8> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (model, store) = ckpt.load_model()?;
    let clips = load_manifest(&manifest_path(&a.data))?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let samples: Vec<_> = load_split(&clips, split, &WindowConfig::default(), &model.cfg)?.into_iter().map(|(_, s)| s).collect();
    let precision = a.common.precision.map_or(Precision::F64, Into::into);
    let report = evaluate(&model, &store, &samples, a.gamma, precision)?;
    if a.common.out.is_some() {
        write_report(&out_dir(&a.common)?, &report)?;
    }
    print!("{}", report.table());
    Ok(0)
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<u8> {
    let mut cfg: SynthConfig = match &a.common.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.clips {
        cfg.clips = n;
    }
    if let Some(v) = a.cue_validity {
        cfg.cue_validity = v;
    }
    if let Some(d) = a.drift {
        cfg.drift = d;
    }
    cfg.packed |= a.packed;
    let dir = out_dir(&a.common)?;
    let clips = synth_generate(&cfg, &dir)?;
    write_file(&dir.join("synth_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    write_file(&dir.join("truth.json"), serde_json::to_string_pretty(&clips)?)?;
    println!("wrote {} clips to {}", clips.len(), dir.display());
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<u8> {
    let cfg: ModelConfig = match &a.common.config {
        Some(p) => read_json(p)?,
        None => ModelConfig::desk(),
    };
    if let Some(op) = &a.sabotage {
        if !csts_core::autograd::OP_NAMES.contains(&op.as_str()) {
            bail!(usage(format!("unknown op '{op}'")));
        }
    }
    set_gradient_sabotage(a.sabotage.as_deref());
    let started = Instant::now();
    let report = run_suite(&cfg, a.common.seed.unwrap_or(0), a.per_tensor)?;
    set_gradient_sabotage(None);

    println!("{:<18} {:>12}  worst case", "module", "rel error");
    for c in report.worst_by_module() {
        println!("{:<18} {:>12.3e}  {}", c.module, c.max_rel_error, c.name);
    }
    if a.common.out.is_some() {
        let dir = out_dir(&a.common)?;
        write_file(&dir.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
    }
    let failures = report.failures(a.tolerance);
    eprintln!("{} cases in {:.1?}", report.cases.len(), started.elapsed());
    if failures.is_empty() {
        println!("ok: all {} cases below {:e}", report.cases.len(), a.tolerance);
        return Ok(0);
    }
    for c in &failures {
        println!(
            "FAIL {} ({}): rel error {:.3e}, analytic {:.6e}, numeric {:.6e}",
            c.name, c.module, c.max_rel_error, c.analytic, c.numeric
        );
    }
    Ok(1)
}

fn cmd_ablate(a: AblateArgs) -> anyhow::Result<u8> {
    let mut cfg = train_config(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    for e in &a.experiments {
        if !EXPERIMENTS.contains(&e.as_str()) {
            bail!(usage(format!("unknown experiment '{e}'; expected one of {EXPERIMENTS:?}")));
        }
    }
    let base = ModelConfig::preset(&a.model)?;
    let dir = out_dir(&a.common)?;
    let (train_set, test_set) = load_splits(&a.data, &base)?;
    let cells: Vec<AblationCell> = a
        .experiments
        .iter()
        .flat_map(|e| a.seeds.iter().map(move |&seed| AblationCell { experiment: e.clone(), seed }))
        .collect();
    let started = Instant::now();
    let table = ablate(&cells, &cfg, &base, &train_set, &test_set, |row| match (&row.f1, &row.error) {
        (Some(f), _) => eprintln!("{:<12} seed {:<3} f1 {f:.4}  [{:.0?}]", row.experiment, row.seed, started.elapsed()),
        (None, Some(e)) => eprintln!("{:<12} seed {:<3} failed: {e}", row.experiment, row.seed),
        _ => {}
    });
    write_file(&dir.join("ablation.csv"), table.to_csv())?;
    write_file(&dir.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    for (e, f) in table.mean_f1() {
        println!("{e:<12} mean f1 {f:.4}");
    }
    Ok(if table.rows.iter().any(|r| r.error.is_some()) { 1 } else { 0 })
}

fn find_clip(data: &Path, id: &str) -> anyhow::Result<ClipManifest> {
    let clips = load_manifest(&manifest_path(data))?;
    clips.into_iter().find(|c| c.id == id).ok_or_else(|| usage(format!("no clip '{id}' in the manifest")))
}

fn cmd_dump_attn(a: RenderArgs) -> anyhow::Result<u8> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (model, store) = ckpt.load_model()?;
    let clip = find_clip(&a.data, &a.clip)?;
    let sample = load_clip(&clip, None, &WindowConfig::default(), &model.cfg)?;
    let dir = out_dir(&a.common)?;
    let precision = a.common.precision.map_or(Precision::F64, Into::into);
    let written = render::dump_attention(&model, &store, &clip, &sample, precision, &dir)?;
    println!("wrote {} files to {}", written, dir.display());
    Ok(0)
}

fn cmd_render_pred(a: RenderArgs) -> anyhow::Result<u8> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (model, store) = ckpt.load_model()?;
    let clip = find_clip(&a.data, &a.clip)?;
    let sample = load_clip(&clip, None, &WindowConfig::default(), &model.cfg)?;
    let dir = out_dir(&a.common)?;
    let precision = a.common.precision.map_or(Precision::F64, Into::into);
    let written = render::render_predictions(&model, &store, &clip, &sample, precision, &dir)?;
    println!("wrote {} files to {}", written, dir.display());
    Ok(0)
}
