use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sbi_lmc::pipeline::{emit_plot_data, run_pipeline, run_stage, ExperimentConfig, PlotKind, RunDir, Stage};
use sbi_lmc::Error;

#[derive(Parser)]
#[command(name = "sbi-lmc", version, about = "Likelihood-free posterior sampling with learned scores")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; replaces `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Observed data and the localization pool and proposal.
    Localize(RunArgs),
    /// Reference tables.
    Tables(RunArgs),
    /// Score network training.
    Train(RunArgs),
    /// Langevin sampling.
    Sample(RunArgs),
    /// Posterior metrics.
    Evaluate(RunArgs),
    /// Every stage in order.
    Pipeline(RunArgs),
    /// CSV data for plots from a finished run.
    PlotData {
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// density_1d, credible_band or score_field.
        #[arg(long)]
        kind: String,
    },
}

fn load(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn single_stage(args: &RunArgs, stage: Stage) -> Result<()> {
    let cfg = load(args)?;
    let dir = RunDir::new(&cfg.output_dir);
    std::fs::create_dir_all(&dir.root)?;
    std::fs::write(dir.config(), cfg.to_json()?)?;
    if !dir.observed().exists() || stage == Stage::Localization {
        run_stage(&cfg, Stage::Data, &dir)?;
    }
    let rec = run_stage(&cfg, stage, &dir)?;
    println!("{}: {:?}, {} simulator calls", stage.name(), rec.status, rec.simulator_calls);
    for o in &rec.outputs {
        println!("  {}", dir.root.join(o).display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Localize(a) => single_stage(&a, Stage::Localization),
        Command::Tables(a) => single_stage(&a, Stage::Tables),
        Command::Train(a) => single_stage(&a, Stage::Training),
        Command::Sample(a) => single_stage(&a, Stage::Sampling),
        Command::Evaluate(a) => single_stage(&a, Stage::Evaluation),
        Command::Pipeline(a) => {
            let cfg = load(&a)?;
            let root = run_pipeline(&cfg)?;
            println!("run directory: {}", root.display());
            Ok(())
        }
        Command::PlotData { out, kind } => {
            for p in emit_plot_data(&out, PlotKind::parse(&kind)?)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<Error>() {
                Some(Error::Stage { stage, source }) => eprintln!("error in stage `{stage}`: {source}"),
                _ => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}
