use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfrg::cli::{self, ConfigArgs};
use cfrg::dataset::TileSpec;

#[derive(Parser)]
#[command(name = "cfrg", version, about = "Coarse-to-fine anomaly detection with recovery guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Category to process; repeatable.
    #[arg(long = "category")]
    categories: Vec<String>,
    /// Use the small random backbones.
    #[arg(long)]
    desk_scale: bool,
    /// Override a configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl From<Common> for ConfigArgs {
    fn from(c: Common) -> Self {
        ConfigArgs {
            config: c.config,
            seed: c.seed,
            categories: c.categories,
            desk_scale: c.desk_scale,
            overrides: c.overrides,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Tile large images into overlapping windows.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1024)]
        max_side: u32,
        #[arg(long, default_value_t = 0.2)]
        overlap: f64,
        #[arg(long, default_value_t = 0.2)]
        min_keep: f64,
    },
    /// Train one model per category.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint of the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute metrics from a checkpoint or from prediction dumps.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory written by `infer`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Proceed when the checkpoint's config hash differs.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write anomaly maps and image scores.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file or directory; defaults to the categories' test splits.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate the six ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> cfrg::Result<()> {
    match cmd {
        Command::Preprocess { input, output, max_side, overlap, min_keep } => {
            let spec = TileSpec { max_side, overlap_fraction: overlap, min_keep_fraction: min_keep };
            let m = cli::run_preprocess(&input, &output, spec)?;
            println!("wrote {} tiles to {}", m.entries.len(), output.display());
        }
        Command::Train { common, resume } => {
            let cfg = cli::resolve_config(&common.into())?;
            for p in cli::run_train(&cfg, resume.as_deref())? {
                println!("{}", p.display());
            }
        }
        Command::Eval { common, checkpoint, predictions, force, output } => {
            let cfg = cli::resolve_config(&common.into())?;
            let out = output.unwrap_or_else(|| cfg.train.output_dir.clone());
            for r in cli::run_eval(&cfg, checkpoint.as_deref(), predictions.as_deref(), force, &out)? {
                println!("{}", r.csv_row());
            }
        }
        Command::Infer { common, checkpoint, input, output, force } => {
            let cfg = cli::resolve_config(&common.into())?;
            let n = cli::run_infer(&cfg, &checkpoint, force, input.as_deref(), &output)?;
            println!("wrote {n} predictions to {}", output.display());
        }
        Command::Ablate { common, seeds, output } => {
            let cfg = cli::resolve_config(&common.into())?;
            let out = output.unwrap_or_else(|| cfg.train.output_dir.clone());
            print!("{}", cli::run_ablate(&cfg, &seeds, &out)?.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
