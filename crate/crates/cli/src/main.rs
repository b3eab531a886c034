use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use msmc_cli::config::RunConfig;
use msmc_cli::dataset::{ingest, ingest_manifest, DatasetLayout};
use msmc_cli::run::{
    build_bank_files, evaluate_outputs, make_providers, run_few_shot_batch, run_few_shot_combined, run_zero_shot_batch,
    BatchOutcome,
};
use msmc_cli::synth::{write_dataset, SynthSpec};

/// Zero- and few-shot visual anomaly detection by multi-scale memory comparison.
#[derive(Parser)]
#[command(name = "msmc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score test images against text prompts only.
    Zeroshot(RunArgs),
    /// Build few-shot memory banks from reference images.
    BuildBank(RunArgs),
    /// Score test images against banks; with --build-banks, build them first in memory.
    Test {
        #[command(flatten)]
        run: RunArgs,
        /// Build banks in memory instead of loading them from the output directory.
        #[arg(long)]
        build_banks: bool,
    },
    /// Recompute metrics from the scores and maps of an earlier run.
    Eval(RunArgs),
    /// Print the effective configuration as TOML.
    ExportConfig(ConfigArgs),
    /// Write a synthetic dataset for smoke tests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "disk")]
        category: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        normal: usize,
        #[arg(long, default_value_t = 10)]
        defects: usize,
    },
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the offline mock providers with this seed.
    #[arg(long, conflicts_with = "provider_url")]
    mock_providers: Option<u64>,
    /// Base URL of a model server.
    #[arg(long)]
    provider_url: Option<String>,
    /// Window stride at every scale.
    #[arg(long)]
    stride: Option<usize>,
    /// Reference images per category.
    #[arg(long)]
    shots: Option<usize>,
    /// Row cap per bank.
    #[arg(long)]
    capacity: Option<usize>,
    /// Few-shot scoring without text terms.
    #[arg(long)]
    text_free: bool,
    /// Worker threads; 0 uses one per core.
    #[arg(long)]
    workers: Option<usize>,
    /// Bank subsampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Sweep every distinct pixel score instead of quantile thresholds.
    #[arg(long)]
    exact_seg: bool,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset root in the train/test/ground_truth layout.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    data: Option<PathBuf>,
    /// JSON manifest listing references and test images.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Restrict to these categories (repeatable).
    #[arg(long)]
    category: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.mock_providers {
            cfg.provider.url = None;
            cfg.provider.mock_seed = seed;
        }
        if let Some(url) = &self.provider_url {
            cfg.provider.url = Some(url.clone());
        }
        if let Some(s) = self.stride {
            cfg.windows.stride_small = s;
            cfg.windows.stride_middle = s;
        }
        if let Some(k) = self.shots {
            cfg.bank.shots = k;
        }
        if let Some(c) = self.capacity {
            cfg.bank.capacity = c;
        }
        if self.text_free {
            cfg.fewshot.text_free = true;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(s) = self.seed {
            cfg.bank.seed = s;
        }
        if self.exact_seg {
            cfg.eval.seg_thresholds = 0;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunArgs {
    fn layout(&self) -> anyhow::Result<DatasetLayout> {
        match (&self.data, &self.manifest) {
            (Some(root), None) => ingest(root, &self.category),
            (None, Some(manifest)) => ingest_manifest(manifest, &self.category),
            _ => bail!("exactly one of --data and --manifest is required"),
        }
    }
}

fn report(outcome: &BatchOutcome, out: &Path) {
    let m = &outcome.metrics.mean;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} images scored, {} failed; mean F1-cls {}, AUROC-cls {}, F1-seg {}",
        outcome.processed,
        outcome.errors.len(),
        fmt(m.f1_cls),
        fmt(m.auroc_cls),
        fmt(m.f1_seg)
    );
    println!("outputs in {}", out.display());
}

fn write_config_snapshot(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let path = out.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Zeroshot(args) => {
            let cfg = args.config.resolve()?;
            let layout = args.layout()?;
            let providers = make_providers(&cfg)?;
            write_config_snapshot(&cfg, &args.out)?;
            report(&run_zero_shot_batch(&layout, &cfg, &providers, &args.out)?, &args.out);
        }
        Command::BuildBank(args) => {
            let cfg = args.config.resolve()?;
            let layout = args.layout()?;
            let providers = make_providers(&cfg)?;
            build_bank_files(&layout, &cfg, &providers, &args.out)?;
            println!("banks for {} categories in {}", layout.categories.len(), args.out.display());
        }
        Command::Test { run, build_banks } => {
            let cfg = run.config.resolve()?;
            let layout = run.layout()?;
            let providers = make_providers(&cfg)?;
            write_config_snapshot(&cfg, &run.out)?;
            let outcome = if build_banks {
                run_few_shot_combined(&layout, &cfg, &providers, &run.out)?
            } else {
                run_few_shot_batch(&layout, &cfg, &providers, &run.out)?
            };
            report(&outcome, &run.out);
        }
        Command::Eval(args) => {
            let cfg = args.config.resolve()?;
            let layout = args.layout()?;
            let metrics = evaluate_outputs(&layout, &cfg, &args.out)?;
            println!("{}", metrics.to_json()?);
        }
        Command::ExportConfig(args) => {
            print!("{}", args.resolve()?.to_toml());
        }
        Command::Synth {
            out,
            category,
            seed,
            normal,
            defects,
        } => {
            let spec = SynthSpec {
                category,
                seed,
                normal_tests: normal,
                defect_tests: defects,
                ..SynthSpec::default()
            };
            write_dataset(&out, &spec)?;
            println!("synthetic dataset in {}", out.display());
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
