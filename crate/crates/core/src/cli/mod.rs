//! The `mc3d` command line: one subcommand per pipeline stage, each writing
//! a run manifest next to its artifacts.

mod manifest;

pub use manifest::{hash_file, RunManifest, RUN_MANIFEST};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evalkit::{evaluate, gradient_suite, run_ablation, worker_threads, Suite, DEFAULT_THRESHOLD};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::sampler::{BatchRatio, Strategy};
use crate::synthgen::{
    generate_dataset, load_dataset, pooled_overlap_stats, save_dataset, GeneratorParams, OverlapPreset, Role,
};
use crate::trainer::{train_base, train_novel, write_epoch_log, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "mc3d", version, about = "One-shot class-incremental multi-label tract segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData(GenDataArgs),
    /// Histogram of labels per labeled voxel over a dataset.
    OverlapStats(OverlapArgs),
    /// Train the base-step model.
    TrainBase(TrainBaseArgs),
    /// Learn the novel classes from the one-shot subject.
    TrainNovel(TrainNovelArgs),
    /// Dice report of a checkpoint on a subject group.
    Eval(EvalArgs),
    /// Finite-difference checks of every loss and the network.
    Gradcheck(GradcheckArgs),
    /// Ablation matrix over configurations and seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Overlap preset: desk, hcp-like or sparse.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long, default_value_t = 12)]
    pub classes: usize,
    /// Classes held out for the novel step.
    #[arg(long, default_value_t = 4)]
    pub novel: usize,
    /// Volume extent, one value for a cube or `D,H,W`.
    #[arg(long, default_value = "32")]
    pub extent: String,
    /// Number of base-train subjects.
    #[arg(long, default_value_t = 12)]
    pub subjects: usize,
    #[arg(long, default_value_t = 2)]
    pub validation: usize,
    #[arg(long, default_value_t = 4)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OverlapArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the histogram CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Training options shared by both steps.
#[derive(Debug, Args)]
pub struct TrainCommon {
    #[arg(long)]
    pub data: PathBuf,
    /// TOML training config; overrides the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting preset: desk or paper.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainBaseArgs {
    #[command(flatten)]
    pub common: TrainCommon,
}

#[derive(Debug, Args)]
pub struct TrainNovelArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long)]
    pub base_ckpt: PathBuf,
    #[arg(long)]
    pub no_dis: bool,
    #[arg(long)]
    pub no_vc: bool,
    #[arg(long)]
    pub no_dw: bool,
    /// random, balanced or balanced+hard.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// 1/8, 1/4, 1/2 or 1.
    #[arg(long)]
    pub ratio: Option<BatchRatio>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub ns: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Subject group: test, validation, base-train or oneshot.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Overlap preset of the generated datasets.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Seed of the generated dataset.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Comma-separated novel-step seeds; the base model is trained once.
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
    /// components, sampling, ratios or all.
    #[arg(long, default_value = "all")]
    pub suite: Suite,
    /// TOML training config shared by every row.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::OverlapStats(a) => overlap(a),
        Command::TrainBase(a) => train_base_cmd(a),
        Command::TrainNovel(a) => train_novel_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn parse_extent(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("cannot parse extent {s:?}")))?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(Error::Config(format!("extent {s:?} needs one or three values"))),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let params = GeneratorParams {
        seed: a.seed,
        extent: parse_extent(&a.extent)?,
        classes: a.classes,
        preset: OverlapPreset::by_name(&a.preset)?,
        novel_classes: a.novel,
        base_train: a.subjects,
        validation: a.validation,
        test: a.test,
    };
    let data = generate_dataset(&params)?;
    save_dataset(&data.manifest, &data.volumes, &a.out)?;
    let mut m = RunManifest::new("gen-data", None, &params, a.seed, &a.out)?;
    m.record(&a.out, "manifest.json")?;
    m.write()
}

fn overlap(a: &OverlapArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let hist = pooled_overlap_stats(data.volumes.iter().map(|v| &v.labels))?;
    let csv = hist.to_csv();
    print!("{csv}");
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        fs::write(out, &csv).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

/// Preset, then config file, then command-line overrides.
fn resolve(common: &TrainCommon) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            require_file(path, "config file")?;
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let preset = TrainConfig::by_name(&common.preset)?;
            let mut table = toml::Table::try_from(&preset).map_err(|e| Error::Config(e.to_string()))?;
            let file: toml::Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            table.extend(file);
            TrainConfig::from_toml(&table.to_string())?
        }
        None => TrainConfig::by_name(&common.preset)?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(e) = common.epochs {
        cfg.base_epochs = e;
        cfg.novel_epochs = e;
    }
    Ok(cfg)
}

fn write_training(out: &Path, cfg: &TrainConfig, logs: &[crate::trainer::EpochLog], m: &mut RunManifest) -> Result<()> {
    let cfg_path = out.join("train_config.toml");
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    write_epoch_log(&out.join("epoch_log.csv"), logs)?;
    m.record(out, "train_config.toml")?;
    m.record(out, "epoch_log.csv")
}

fn train_base_cmd(a: &TrainBaseArgs) -> Result<()> {
    let cfg = resolve(&a.common)?;
    let data = load_dataset(&a.common.data)?;
    let (model, report) = train_base(&data, &cfg)?;
    let out = &a.common.out;
    create_dir(out)?;
    save_checkpoint(&model, &out.join("base.ckpt"))?;
    let mut m = RunManifest::new("train-base", a.common.config.clone(), &cfg, cfg.seed, out)?;
    m.record(out, "base.ckpt")?;
    write_training(out, &cfg, &report.epochs, &mut m)?;
    m.write()
}

fn train_novel_cmd(a: &TrainNovelArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    cfg.use_dis &= !a.no_dis;
    cfg.use_vc &= !a.no_vc;
    cfg.use_dw &= !a.no_dw;
    if let Some(s) = a.strategy {
        cfg.strategy = s;
    }
    if let Some(r) = a.ratio {
        cfg.ratio = r;
    }
    if let Some(t) = a.theta {
        cfg.theta = t;
    }
    if let Some(n) = a.ns {
        cfg.n_s = n;
    }
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    cfg.validate()?;
    require_file(&a.base_ckpt, "base checkpoint")?;
    let base = load_checkpoint(&a.base_ckpt)?;
    let data = load_dataset(&a.common.data)?;
    let out_run = train_novel(&base, data.oneshot(), &data.manifest.split, &cfg)?;
    let out = &a.common.out;
    create_dir(out)?;
    save_checkpoint(&out_run.model, &out.join("novel.ckpt"))?;
    let mut m = RunManifest::new("train-novel", a.common.config.clone(), &cfg, cfg.seed, out)?;
    m.inputs.insert("base_ckpt".into(), hash_file(&a.base_ckpt)?);
    m.record(out, "novel.ckpt")?;
    write_training(out, &cfg, &out_run.report.epochs, &mut m)?;
    m.write()
}

fn role(name: &str) -> Result<Role> {
    match name {
        "test" => Ok(Role::Test),
        "validation" => Ok(Role::Validation),
        "base-train" => Ok(Role::BaseTrain),
        "oneshot" => Ok(Role::NovelOneshot),
        other => Err(Error::Config(format!(
            "unknown subject group {other:?} (expected test, validation, base-train or oneshot)"
        ))),
    }
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let group = role(&a.split)?;
    require_file(&a.ckpt, "checkpoint")?;
    let model = load_checkpoint(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let subjects = data.by_role(group);
    let report = evaluate(&model, &subjects, &data.manifest.split, a.threshold)?;
    create_dir(&a.out)?;
    report.write(&a.out.join("report.csv"), &a.out.join("report.json"))?;
    print!("{}", report.to_csv());
    let settings = serde_json::json!({ "split": a.split, "threshold": a.threshold });
    let mut m = RunManifest::new("eval", None, &settings, model.meta.seed, &a.out)?;
    m.inputs.insert("ckpt".into(), hash_file(&a.ckpt)?);
    m.record(&a.out, "report.csv")?;
    m.record(&a.out, "report.json")?;
    m.write()
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let results = gradient_suite(a.instances, a.seed)?;
    let mut failed = Vec::new();
    for t in &results {
        let verdict = if t.passed() { "ok" } else { "FAIL" };
        println!(
            "{verdict:4} {:28} instances {:3} max relative error {:.3e} (tolerance {:.0e})",
            t.name, t.instances, t.max_error, t.tolerance
        );
        if !t.passed() {
            failed.push(t.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(',')
        .map(|p| p.trim().parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("cannot parse seed list {s:?}")))?;
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    Ok(seeds)
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let seeds = parse_seeds(&a.seeds)?;
    let generator = GeneratorParams {
        preset: OverlapPreset::by_name(&a.preset)?,
        ..GeneratorParams::desk(a.data_seed)
    };
    let train = match &a.config {
        Some(p) => {
            require_file(p, "config file")?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::desk(),
    };
    let configs = a.suite.configs(&train);
    let matrix = run_ablation(&generator, &train, &configs, &seeds, worker_threads())?;
    create_dir(&a.out)?;
    matrix.write_csv(&a.out.join("ablation.csv"))?;
    print!("{}", matrix.to_csv()?);
    let settings = serde_json::json!({
        "generator": generator,
        "train": train,
        "suite": a.suite.to_string(),
        "configs": configs,
        "seeds": seeds,
    });
    let mut m = RunManifest::new("ablate", a.config.clone(), &settings, seeds[0], &a.out)?;
    m.record(&a.out, "ablation.csv")?;
    m.write()
}
