//! Command-line front end: dataset generation, training, evaluation,
//! and component ablations.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use tumordet_core::checkpoint::Checkpoint;
use tumordet_core::config::RunConfig;
use tumordet_core::data::synth::{generate_dataset, GenParams};
use tumordet_core::data::Dataset;
use tumordet_core::eval::evaluate;
use tumordet_core::model::Detector;
use tumordet_core::train::train;
use tumordet_core::write_atomic;

/// Environment variable that overrides any `--data` flag.
const DATA_ENV: &str = "TUMORDET_DATA";

#[derive(Parser)]
#[command(
    name = "tumordet",
    version,
    about = "Lesion detection on synthetic grayscale scans"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scan dataset (train and test splits).
    GenData {
        /// Output directory for images, annotations and metadata.
        #[arg(long)]
        out: PathBuf,
        /// Number of training scans.
        #[arg(long)]
        train: usize,
        /// Number of test scans.
        #[arg(long)]
        test: usize,
        /// Generation seed; identical seeds give identical bytes.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a detector and write a checkpoint.
    Train {
        /// Dataset directory (as produced by gen-data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the trained checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured iteration count.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Evaluate a checkpoint and write a report.
    Eval {
        /// Dataset directory (as produced by gen-data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Where to write the report CSV (single data row; leading #
        /// lines document the counting conventions).
        #[arg(long)]
        report: PathBuf,
        /// Optional ROC curve CSV.
        #[arg(long)]
        roc: Option<PathBuf>,
        /// Optional FROC curve CSV.
        #[arg(long)]
        froc: Option<PathBuf>,
        /// Dataset split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate the six component combinations, one CSV row
    /// each: none, pyramid only, fusion only, fusion+dependencies,
    /// pyramid+fusion, all three.
    Ablate {
        /// Dataset directory (as produced by gen-data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the results CSV.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed for every variant.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { out, train, test, seed } => cmd_gen_data(&out, train, test, seed),
        Command::Train { data, config, out, iterations } => {
            cmd_train(data, config.as_deref(), &out, iterations)
        }
        Command::Eval { data, ckpt, report, roc, froc, split } => {
            cmd_eval(data, &ckpt, &report, roc.as_deref(), froc.as_deref(), &split)
        }
        Command::Ablate { data, config, out, seed } => {
            cmd_ablate(data, config.as_deref(), &out, seed)
        }
    }
}

/// The data directory: the environment variable wins over the flag.
fn resolve_data(flag: Option<PathBuf>) -> Result<PathBuf> {
    match std::env::var_os(DATA_ENV).filter(|v| !v.is_empty()) {
        Some(env_dir) => {
            let dir = PathBuf::from(env_dir);
            if let Some(flagged) = &flag {
                if flagged != &dir {
                    eprintln!(
                        "note: {DATA_ENV}={} overrides --data {}",
                        dir.display(),
                        flagged.display()
                    );
                }
            }
            Ok(dir)
        }
        None => flag.context(format!("no dataset directory: pass --data or set {DATA_ENV}")),
    }
}

fn load_config(path: Option<&std::path::Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            RunConfig::from_file(p).with_context(|| format!("loading config {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn cmd_gen_data(out: &std::path::Path, train: usize, test: usize, seed: u64) -> Result<()> {
    let params = GenParams::default();
    let summary = generate_dataset(out, train, test, seed, &params)
        .with_context(|| format!("generating dataset in {}", out.display()))?;
    println!(
        "wrote {} train scans ({} with lesions) and {} test scans ({} with lesions) to {}",
        summary.train_images,
        summary.train_with_lesion,
        summary.test_images,
        summary.test_with_lesion,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    data: Option<PathBuf>,
    config: Option<&std::path::Path>,
    out: &std::path::Path,
    iterations: Option<u64>,
) -> Result<()> {
    let data = resolve_data(data)?;
    let mut cfg = load_config(config)?;
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    let dataset = Dataset::load(&data, "train")
        .with_context(|| format!("loading train split from {}", data.display()))?;

    let stdout = std::io::stdout();
    let model = train(&dataset, &cfg, |event| {
        let mut lock = stdout.lock();
        let _ = writeln!(lock, "{event}");
    })
    .context("training failed")?;

    model
        .to_checkpoint(cfg.iterations)
        .save(out)
        .with_context(|| format!("writing checkpoint {}", out.display()))?;
    println!("saved {} after {} iterations", out.display(), cfg.iterations);
    Ok(())
}

fn cmd_eval(
    data: Option<PathBuf>,
    ckpt_path: &std::path::Path,
    report_path: &std::path::Path,
    roc: Option<&std::path::Path>,
    froc: Option<&std::path::Path>,
    split: &str,
) -> Result<()> {
    let data = resolve_data(data)?;
    let ckpt = Checkpoint::load(ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let model = Detector::from_checkpoint(&ckpt).context("rebuilding model")?;
    let dataset = Dataset::load(&data, split)
        .with_context(|| format!("loading {split} split from {}", data.display()))?;

    let report = evaluate(&model, &dataset).context("evaluation failed")?;
    report
        .save_csv(report_path)
        .with_context(|| format!("writing report {}", report_path.display()))?;
    if let Some(p) = roc {
        report.save_roc_csv(p).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = froc {
        report.save_froc_csv(p).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{}", report.summary());
    Ok(())
}

/// The six component combinations exercised by `ablate`, as
/// (pyramid, fusion, dependencies) switches.
const ABLATION_GRID: [(bool, bool, bool); 6] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (false, true, true),
    (true, true, false),
    (true, true, true),
];

fn cmd_ablate(
    data: Option<PathBuf>,
    config: Option<&std::path::Path>,
    out: &std::path::Path,
    seed: Option<u64>,
) -> Result<()> {
    let data = resolve_data(data)?;
    let mut base = load_config(config)?;
    if let Some(s) = seed {
        base.seed = s;
    }
    let train_set = Dataset::load(&data, "train")
        .with_context(|| format!("loading train split from {}", data.display()))?;
    let test_set = Dataset::load(&data, "test")
        .with_context(|| format!("loading test split from {}", data.display()))?;

    let mut csv = String::from("augmented_pyramid,adaptive_fusion,dependencies_module,accuracy\n");
    for (pyramid, fusion, dependencies) in ABLATION_GRID {
        let mut cfg = base.clone();
        cfg.use_augmented_pyramid = pyramid;
        cfg.use_adaptive_fusion = fusion;
        cfg.use_dc_module = dependencies;
        cfg.dc_on_b = base.dc_on_b && dependencies;
        let label = format!("pyramid={pyramid} fusion={fusion} dependencies={dependencies}");
        eprintln!("training {label} (seed {}, {} iterations)", cfg.seed, cfg.iterations);
        let model =
            train(&train_set, &cfg, |_| {}).with_context(|| format!("training {label}"))?;
        let report = evaluate(&model, &test_set).with_context(|| format!("evaluating {label}"))?;
        let accuracy = report
            .ratios
            .accuracy
            .map_or_else(|| "undefined".to_string(), |v| v.to_string());
        let row = format!("{pyramid},{fusion},{dependencies},{accuracy}\n");
        print!("{row}");
        csv.push_str(&row);
    }
    write_atomic(out, csv.as_bytes()).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}
