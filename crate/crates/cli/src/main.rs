use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ecg_uda::config::Config;
use ecg_uda::fixtures::{generate, FixtureConfig};
use ecg_uda::pipeline::{self, Inputs};

/// Unsupervised domain adaptation for ECG heartbeat classification.
#[derive(Parser)]
#[command(name = "ecg-uda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, resample and segment both domains into segment caches.
    Preprocess(Common),
    /// Stage 1: supervised pre-training on the source.
    Pretrain(Common),
    /// Stage 2: source cluster organization and target centroids.
    Clusters(Common),
    /// Stage 3: adaptation to the target, then evaluation.
    Adapt(Common),
    /// Preprocessing and all three stages.
    Run(Common),
    /// Stage 1 only, evaluated on the target.
    Baseline(Common),
    /// Evaluate a checkpoint on a record directory.
    Eval(EvalArgs),
    /// Write synthetic source and target record directories.
    GenFixtures(FixtureArgs),
}

#[derive(Args)]
struct Common {
    /// Source record directory.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Target record directory.
    #[arg(long)]
    target: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Labeled record directory.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct FixtureArgs {
    /// Domain shift strength of the target.
    #[arg(long, default_value_t = 0.5)]
    shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    source_beats: usize,
    #[arg(long, default_value_t = 2000)]
    target_beats: usize,
    #[arg(long, default_value_t = 360)]
    source_fs: u32,
    #[arg(long, default_value_t = 257)]
    target_fs: u32,
    /// Output directory; receives `source/` and `target/`.
    #[arg(long, default_value = "fixtures")]
    out_dir: PathBuf,
}

/// Config file plus per-key overrides. Flags win over the file.
#[derive(Args)]
struct Settings {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for all artifacts.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<String>,
    /// Channel name to use (default: first channel).
    #[arg(long)]
    channel: Option<String>,
    /// Evaluate on class-duplicated target data (default).
    #[arg(long, overrides_with = "no_augment")]
    augment: bool,
    /// Evaluate on the target as recorded.
    #[arg(long)]
    no_augment: bool,
    /// Also write confusion.png.
    #[arg(long)]
    heatmap: bool,
    #[arg(long)]
    e1: Option<String>,
    #[arg(long)]
    e2: Option<String>,
    #[arg(long)]
    e3: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    gamma1: Option<String>,
    #[arg(long)]
    gamma2: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    beta3: Option<String>,
    #[arg(long)]
    beta4: Option<String>,
    /// Separation margin of the cluster-separating loss.
    #[arg(long)]
    tm: Option<String>,
    /// max | ema
    #[arg(long)]
    dro_mode: Option<String>,
    #[arg(long)]
    dro_eta: Option<String>,
    /// Refresh target centroids after every adaptation epoch (true | false).
    #[arg(long)]
    refresh_centroids: Option<String>,
    /// Extra copies per class, `N,V,S,F`.
    #[arg(long)]
    augment_factors: Option<String>,
    /// inverse | uniform
    #[arg(long)]
    class_weights: Option<String>,
    /// Residual block widths, e.g. `16,32,64`.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    kernel: Option<String>,
    /// Hidden widths of each classifier, e.g. `64,32`.
    #[arg(long)]
    hidden: Option<String>,
    /// Combined-probability threshold for confident predictions.
    #[arg(long)]
    confidence: Option<String>,
    #[arg(long)]
    band_lo: Option<String>,
    #[arg(long)]
    band_hi: Option<String>,
    #[arg(long)]
    target_fs: Option<String>,
    #[arg(long)]
    filter_order: Option<String>,
}

impl Settings {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = Config::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let pairs = [
            ("seed", &self.seed),
            ("channel", &self.channel),
            ("e1", &self.e1),
            ("e2", &self.e2),
            ("e3", &self.e3),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("weight_decay", &self.weight_decay),
            ("alpha", &self.alpha),
            ("gamma1", &self.gamma1),
            ("gamma2", &self.gamma2),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("beta3", &self.beta3),
            ("beta4", &self.beta4),
            ("tm", &self.tm),
            ("dro_mode", &self.dro_mode),
            ("dro_eta", &self.dro_eta),
            ("refresh_centroids", &self.refresh_centroids),
            ("augment_factors", &self.augment_factors),
            ("class_weights", &self.class_weights),
            ("channels", &self.channels),
            ("kernel", &self.kernel),
            ("hidden", &self.hidden),
            ("confidence", &self.confidence),
            ("band_lo", &self.band_lo),
            ("band_hi", &self.band_hi),
            ("target_fs", &self.target_fs),
            ("filter_order", &self.filter_order),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if self.augment {
            cfg.eval_augment = true;
        }
        if self.no_augment {
            cfg.eval_augment = false;
        }
        if self.heatmap {
            cfg.heatmap = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_dir(p: &Option<PathBuf>, what: &str) -> Result<()> {
    if let Some(p) = p {
        anyhow::ensure!(p.is_dir(), "{what} directory {} does not exist", p.display());
    }
    Ok(())
}

fn inputs(c: &Common) -> Result<Inputs> {
    check_dir(&c.source, "source")?;
    check_dir(&c.target, "target")?;
    Ok(Inputs { source: c.source.clone(), target: c.target.clone() })
}

fn print_metrics(m: &Option<ecg_uda::eval::MetricsReport>, out: &Path) {
    match m {
        Some(m) => println!("accuracy {:.2}%  macro-F1 {:.2}%  -> {}", m.overall_accuracy, m.macro_f1(), out.join("metrics.json").display()),
        None => println!("target unlabeled; no metrics written"),
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(c) => {
            let cfg = c.settings.resolve()?;
            let (s, t) = pipeline::preprocess(&inputs(&c)?, &cfg, &c.settings.out_dir)?;
            println!("source: {} segments (rr_mean {})", s.dataset.len(), s.rr_mean);
            if let Some(t) = t {
                println!("target: {} segments", t.dataset.len());
            }
        }
        Command::Pretrain(c) => {
            let cfg = c.settings.resolve()?;
            pipeline::pretrain_stage(&inputs(&c)?, &cfg, &c.settings.out_dir)?;
        }
        Command::Clusters(c) => {
            let cfg = c.settings.resolve()?;
            let (_, _, state) = pipeline::cluster_stage(&inputs(&c)?, &cfg, &c.settings.out_dir)?;
            println!("confident target predictions N,V,S,F: {:?}", state.confident_count);
        }
        Command::Adapt(c) => {
            let cfg = c.settings.resolve()?;
            let (_, _, m) = pipeline::adapt_stage(&inputs(&c)?, &cfg, &c.settings.out_dir)?;
            print_metrics(&m, &c.settings.out_dir);
        }
        Command::Run(c) => {
            let cfg = c.settings.resolve()?;
            let out = pipeline::run(&inputs(&c)?, &cfg, &c.settings.out_dir)?;
            print_metrics(&out.metrics, &c.settings.out_dir);
        }
        Command::Baseline(c) => {
            let cfg = c.settings.resolve()?;
            let (_, m) = pipeline::baseline(&inputs(&c)?, &cfg, &c.settings.out_dir)?;
            print_metrics(&m, &c.settings.out_dir);
        }
        Command::Eval(e) => {
            let cfg = e.settings.resolve()?;
            anyhow::ensure!(e.ckpt.is_file(), "checkpoint {} does not exist", e.ckpt.display());
            anyhow::ensure!(e.data.is_dir(), "data directory {} does not exist", e.data.display());
            let (_, m) = pipeline::evaluate_checkpoint(&e.ckpt, &e.data, &cfg, &e.settings.out_dir)?;
            print_metrics(&Some(m), &e.settings.out_dir);
        }
        Command::GenFixtures(f) => {
            let cfg = FixtureConfig {
                source_beats: f.source_beats,
                target_beats: f.target_beats,
                source_fs: f.source_fs,
                target_fs: f.target_fs,
                shift: f.shift,
                ..Default::default()
            };
            let (s, t) = generate(&cfg, f.seed).write(&f.out_dir).context("writing fixtures")?;
            println!("{}\n{}", s.display(), t.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
