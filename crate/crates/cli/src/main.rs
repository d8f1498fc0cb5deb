use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use pfa_cli::config::{PipelineConfig, RegularizerKind};
use pfa_cli::corpus::{write_corpus, CorpusSpec};
use pfa_cli::pipeline::RunSummary;
use pfa_cli::{curate, evaluate, pipeline, ConfigError};
use pfa_core::fusion::PamSource;
use pfa_core::synth::SynthConfig;

/// Promote scribble annotations to dense predicted full annotations.
#[derive(Parser)]
#[command(name = "pfa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replace scribble classes with ground truth and drop images missing a class.
    Curate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        num_classes: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train per-image local forests and write their probability maps.
    Features {
        #[command(flatten)]
        run: RunArgs,
        /// Also write the filter bank in use (FBK1 format).
        #[arg(long)]
        export_bank: Option<PathBuf>,
    },
    /// Produce PFAs for every manifest image and a run report.
    Promote {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a directory of label maps against ground truth.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        num_classes: usize,
        /// Write per-class IoUs as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Full gap, remaining gap and gap reduction from three mIoU values (percent).
    Gap {
        #[arg(long)]
        full: f64,
        #[arg(long)]
        weak: f64,
        #[arg(long)]
        strategy: f64,
    },
    /// Generate a synthetic corpus with manifest and starter config.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        num_classes: usize,
        /// Number of images whose scribbles miss a ground-truth class.
        #[arg(long, default_value_t = 0)]
        deficient: usize,
        /// Fraction of scribble pixels given a wrong class.
        #[arg(long, default_value_t = 0.0)]
        swap_rate: f64,
    },
}

/// Config file plus overrides for its most common fields.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// local, global or combined.
    #[arg(long, value_parser = parse_source)]
    source: Option<PamSource>,
    #[arg(long, value_enum)]
    regularizer: Option<RegularizerKind>,
    #[arg(long)]
    w_local: Option<f64>,
}

fn parse_source(s: &str) -> Result<PamSource, String> {
    match s {
        "local" => Ok(PamSource::Local),
        "global" => Ok(PamSource::Global),
        "combined" | "comb" => Ok(PamSource::Combined),
        _ => Err(format!("unknown source {s:?}; expected local, global or combined")),
    }
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(dir) = &self.output_dir {
            cfg.run.output_dir = dir.clone();
        }
        if let Some(w) = self.workers {
            cfg.run.workers = w;
        }
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(s) = self.source {
            cfg.fusion.source = s;
        }
        if let Some(r) = self.regularizer {
            cfg.regularizer.kind = r;
        }
        if let Some(w) = self.w_local {
            cfg.fusion.w_local = w;
        }
        Ok(cfg)
    }
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run_outcome(summary: RunSummary) -> ExitCode {
    eprintln!(
        "{} ok, {} failed, {} reused; report: {}",
        summary.num_ok,
        summary.num_failed,
        summary.num_cached,
        summary.report.display()
    );
    if summary.all_ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Curate { manifest, num_classes, out_dir } => {
            print_json(&curate::curate(&manifest, num_classes, &out_dir)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Features { run, export_bank } => {
            Ok(run_outcome(pipeline::features(&run.load()?, export_bank.as_deref())?))
        }
        Command::Promote { run } => Ok(run_outcome(pipeline::promote(&run.load()?)?)),
        Command::Evaluate { pred_dir, gt_dir, num_classes, csv } => {
            let report = evaluate::evaluate(&pred_dir, &gt_dir, num_classes)?;
            if let Some(path) = csv {
                std::fs::write(&path, pfa_core::eval::per_class_csv(&report, None))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            print_json(&report)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gap { full, weak, strategy } => {
            let report = pfa_core::gap_report(full, weak, strategy).map_err(|e| ConfigError(e.into()))?;
            print_json(&report)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { out_dir, images, seed, num_classes, deficient, swap_rate } => {
            let spec = CorpusSpec {
                images,
                seed,
                synth: SynthConfig { num_classes, ..Default::default() },
                deficient,
                swap_rate,
            };
            let manifest = write_corpus(&out_dir, &spec)?;
            eprintln!("wrote {}", manifest.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
