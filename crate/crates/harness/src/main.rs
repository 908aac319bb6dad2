use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mlr_core::bench::{lifelong_metrics, SuccessMatrix};
use mlr_harness::{
    dump_embeddings, exit_code, run_ablation, run_experiment, run_pretrain, AblationKind, ExperimentConfig,
    MetricsSummary, PretrainCache,
};

#[derive(Parser)]
#[command(name = "mlr", version, about = "Lifelong imitation learning with latent replay and feature adjustment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lifelong.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain on the base tasks for every seed.
    Pretrain(ConfigArgs),
    /// Pretrain, then run every lifelong stage for every seed.
    Lifelong(ConfigArgs),
    /// Run one ablation grid.
    Ablate {
        /// buffer_probability, alpha_sweep, cosine_vs_angle, pair_fraction or reference_mode_stub
        #[arg(long)]
        kind: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Dump evaluation-time global latents and references of a stage checkpoint.
    DumpEmbeddings {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// 0 selects the pretrained checkpoint.
        #[arg(long)]
        stage: usize,
    },
    /// Recompute FWT/NBT/AUC from a success-matrix CSV.
    Metrics {
        #[arg(long)]
        csv: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cache = PretrainCache::default();
    match cli.command {
        Command::Pretrain(args) => {
            let dir = run_pretrain(&args.load()?, &mut cache)?;
            println!("{}", dir.display());
        }
        Command::Lifelong(args) => {
            let summary = run_experiment(&args.load()?, &mut cache)?;
            println!("{}", serde_json::to_string_pretty(&summary.metrics)?);
            eprintln!("run directory: {}", summary.run_dir.display());
        }
        Command::Ablate { kind, config } => {
            let kind: AblationKind = kind.parse()?;
            let table = run_ablation(kind, &config.load()?, &mut cache)?;
            print!("{}", table.to_csv());
        }
        Command::DumpEmbeddings { run_dir, seed, stage } => {
            let path = dump_embeddings(&run_dir, seed, stage)?;
            println!("{}", path.display());
        }
        Command::Metrics { csv } => {
            let text = std::fs::read_to_string(&csv)
                .map_err(mlr_core::Error::from)
                .with_context(|| format!("reading {}", csv.display()))?;
            let matrix = SuccessMatrix::from_csv(&text)?;
            let m = lifelong_metrics(&matrix)?;
            let summary = MetricsSummary::from_seeds(&[], &[m], matrix.len());
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
