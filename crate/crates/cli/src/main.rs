mod help;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dualseg::scene::{read_dataset, write_dataset, Dataset, GeneratorConfig, Split};
use dualseg::selfcheck;
use dualseg::tensor::load_checkpoint;
use dualseg::trainer::{evaluate, prepare_split, train, train_prepared, Ablation, EvalReport, RunConfig, TrainData};
use serde::{Deserialize, Serialize};

const EXIT_CONFIG: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;

/// Semi-supervised joint 3D/2D semantic segmentation on synthetic scenes.
#[derive(Parser)]
#[command(name = "dualseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a labeled/unlabeled/val split.
    #[command(after_long_help = help::gen_data_keys())]
    GenData {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// JSON config file (see keys below).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replace the contents of a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the two-branch model; writes metrics.jsonl and checkpoints.
    #[command(after_long_help = help::run_keys())]
    Train {
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run output directory.
        #[arg(long)]
        out: PathBuf,
        /// JSON config file (see keys below).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on one split; prints 3D and 2D metrics as JSON.
    Eval {
        /// Checkpoint manifest (checkpoints/<name>.json of a run).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to score: labeled, unlabeled or val.
        #[arg(long, default_value = "val")]
        split: String,
        /// Also write the metrics JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient, pseudo-label, EMA and projection self-checks.
    Selfcheck,
    /// Train Baseline, Model A, B, C and Full in turn and write a comparison table.
    #[command(after_long_help = help::ablate_keys())]
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

/// gen-data settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenDataConfig {
    seed: u64,
    n_train: usize,
    n_val: usize,
    labeled_ratio: f64,
    generator: GeneratorConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig { seed: 0, n_train: 64, n_val: 16, labeled_ratio: 0.1, generator: GeneratorConfig::default() }
    }
}

/// ablate settings: the shared run config and the seeds to average over.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AblateConfig {
    seeds: Vec<u64>,
    run: RunConfig,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { seeds: vec![0], run: RunConfig::default() }
    }
}

/// A failure with a chosen exit code.
#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn usage(message: String) -> anyhow::Error {
    Exit { code: EXIT_CONFIG, message }.into()
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("config: cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config: {}: {e}", path.display())))
}

fn validate_run(cfg: &RunConfig) -> Result<()> {
    cfg.validate().map_err(|e| usage(e.to_string()))
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| usage(format!("{key}: missing required path (--{key})")))
}

fn existing<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let path = required(value, key)?;
    if !path.exists() {
        return Err(usage(format!("{key}: path {} does not exist", path.display())));
    }
    Ok(path)
}

fn load_dataset(value: &Option<PathBuf>) -> Result<Dataset> {
    let dir = existing(value, "data")?;
    read_dataset(dir).map_err(|e| usage(format!("data: cannot read dataset {}: {e}", dir.display())))
}

/// Creates `dir`, refusing a non-empty one unless `force` clears it.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.next().is_some();
        if non_empty {
            if !force {
                return Err(usage(format!("out: directory {} is not empty (use --force)", dir.display())));
            }
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Maps a library error to the exit code contract.
fn classify(err: dualseg::Error) -> anyhow::Error {
    match err {
        dualseg::Error::Config(m) | dualseg::Error::Argument(m) => usage(m),
        dualseg::Error::NonFinite(m) => {
            Exit { code: EXIT_NON_FINITE, message: format!("non-finite value during training: {m}") }.into()
        }
        other => other.into(),
    }
}

fn gen_data(out: &Path, config: Option<&Path>, force: bool) -> Result<()> {
    let cfg: GenDataConfig = read_config(config)?;
    cfg.generator.validate().map_err(|e| usage(format!("generator.{e}")))?;
    if !(0.0..=1.0).contains(&cfg.labeled_ratio) {
        return Err(usage("labeled_ratio: must lie in [0, 1]".into()));
    }
    if cfg.n_train == 0 {
        return Err(usage("n_train: must be positive".into()));
    }
    prepare_out(out, force)?;
    let ds = Dataset::generate(&cfg.generator, cfg.n_train, cfg.n_val, cfg.labeled_ratio, cfg.seed)
        .map_err(|e| classify(e))?;
    write_dataset(out, &ds)?;
    let labeled = ds.indices(Split::Labeled).len();
    println!("wrote {} scenes ({labeled} labeled) to {}", ds.scenes.len(), out.display());
    Ok(())
}

fn run_train(data: &Option<PathBuf>, out: &Path, config: Option<&Path>, force: bool) -> Result<()> {
    let cfg: RunConfig = read_config(config)?;
    validate_run(&cfg)?;
    let ds = load_dataset(data)?;
    prepare_out(out, force)?;
    write_json(&out.join("config.json"), &cfg)?;
    let result = train(&ds, &cfg, Some(out)).map_err(|e| classify(e))?;
    println!("{}", serde_json::to_string_pretty(&result.final_eval)?);
    Ok(())
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "labeled" => Ok(Split::Labeled),
        "unlabeled" => Ok(Split::Unlabeled),
        "val" => Ok(Split::Val),
        other => Err(usage(format!("split: unknown split {other:?} (labeled, unlabeled, val)"))),
    }
}

fn run_eval(checkpoint: &Option<PathBuf>, data: &Option<PathBuf>, split: &str, out: Option<&Path>) -> Result<()> {
    let split = parse_split(split)?;
    let ckpt_path = existing(checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint(ckpt_path).map_err(|e| usage(format!("checkpoint: {e}")))?;
    let cfg: RunConfig = serde_json::from_value(ckpt.meta.get("run_config").cloned().unwrap_or_default())
        .map_err(|e| usage(format!("checkpoint: run_config: {e}")))?;
    let ds = load_dataset(data)?;
    let scenes = prepare_split(&ds, &cfg, split).map_err(|e| classify(e))?;
    let model = cfg.model(ds.manifest.num_classes);
    let report = evaluate(&model, &ckpt.params.snapshot(), &scenes).map_err(|e| classify(e))?;
    let value = serde_json::json!({
        "checkpoint": ckpt_path.display().to_string(),
        "split": split,
        "scenes": scenes.len(),
        "metrics": [report.metrics_3d, report.metrics_2d],
        "paired_l2": report.paired_l2,
    });
    println!("{}", serde_json::to_string_pretty(&value)?);
    if let Some(path) = out {
        write_json(path, &value)?;
    }
    Ok(())
}

fn run_selfcheck() -> Result<()> {
    let outcomes = selfcheck::run_all(0)?;
    let mut first_failure = None;
    for o in &outcomes {
        match &o.failure {
            None => println!("PASS {} ({} cases)", o.suite, o.cases),
            Some(f) => {
                println!("FAIL {} ({} cases): {f}", o.suite, o.cases);
                first_failure.get_or_insert_with(|| format!("{}: {f}", o.suite));
            }
        }
    }
    match first_failure {
        None => Ok(()),
        Some(f) => Err(Exit { code: 1, message: format!("selfcheck failed: {f}") }.into()),
    }
}

#[derive(Serialize)]
struct ModalityRow {
    #[serde(rename = "mIoU")]
    miou: f64,
    #[serde(rename = "mAcc")]
    macc: f64,
    #[serde(rename = "OA")]
    oa: f64,
    #[serde(rename = "mIoU_per_seed")]
    miou_per_seed: Vec<f64>,
}

#[derive(Serialize)]
struct AblationRow {
    model: String,
    #[serde(flatten)]
    components: Ablation,
    #[serde(rename = "3d")]
    metrics_3d: ModalityRow,
    #[serde(rename = "2d")]
    metrics_2d: ModalityRow,
}

fn modality_row(reports: &[EvalReport], pick: impl Fn(&EvalReport) -> &dualseg::metrics::Metrics) -> ModalityRow {
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&dualseg::metrics::Metrics) -> f64| reports.iter().map(|r| f(pick(r))).sum::<f64>() / n;
    ModalityRow {
        miou: mean(&|m| m.miou),
        macc: mean(&|m| m.macc),
        oa: mean(&|m| m.oa),
        miou_per_seed: reports.iter().map(|r| pick(r).miou).collect(),
    }
}

fn run_ablate(data: &Option<PathBuf>, out: &Path, config: Option<&Path>, force: bool) -> Result<()> {
    let cfg: AblateConfig = read_config(config)?;
    validate_run(&cfg.run)?;
    if cfg.seeds.is_empty() {
        return Err(usage("seeds: must list at least one seed".into()));
    }
    let ds = load_dataset(data)?;
    prepare_out(out, force)?;
    write_json(&out.join("config.json"), &cfg)?;
    let prepared = TrainData::prepare(&ds, &cfg.run).map_err(|e| classify(e))?;
    let mut rows = Vec::new();
    for (name, ablation) in Ablation::LADDER {
        let mut reports = Vec::new();
        for &seed in &cfg.seeds {
            let run = RunConfig { seed, ablation, ..cfg.run.clone() };
            let dir = out.join(name.to_ascii_lowercase().replace(' ', "_")).join(format!("seed{seed}"));
            fs::create_dir_all(&dir)?;
            write_json(&dir.join("config.json"), &run)?;
            log::info!("ablate: {name} seed {seed}");
            let result = train_prepared(&prepared, &run, Some(&dir)).map_err(|e| classify(e))?;
            reports.push(result.final_eval);
        }
        rows.push(AblationRow {
            model: name.to_string(),
            components: ablation,
            metrics_3d: modality_row(&reports, |r| &r.metrics_3d.metrics),
            metrics_2d: modality_row(&reports, |r| &r.metrics_2d.metrics),
        });
    }
    let table = serde_json::json!({ "seeds": cfg.seeds, "rows": rows });
    write_json(&out.join("ablation.json"), &table)?;
    println!("{}", serde_json::to_string_pretty(&table)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, config, force } => gen_data(&out, config.as_deref(), force),
        Command::Train { data, out, config, force } => run_train(&data, &out, config.as_deref(), force),
        Command::Eval { checkpoint, data, split, out } => run_eval(&checkpoint, &data, &split, out.as_deref()),
        Command::Selfcheck => run_selfcheck(),
        Command::Ablate { data, out, config, force } => run_ablate(&data, &out, config.as_deref(), force),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<Exit>().map_or(1, |e| e.code);
            ExitCode::from(code)
        }
    }
}
