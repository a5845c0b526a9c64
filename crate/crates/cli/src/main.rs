use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smat::run::{self, RunError};
use smat::seqio::PointFormat;
use smat::tracker::TemplateStrategy;

/// Single-object tracking in point clouds with a multi-scale attention
/// Siamese network.
#[derive(Parser)]
#[command(name = "smat", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (a file path for `generate`).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes checkpoint.json, metrics.ndjson and config.txt.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// One-pass evaluation; writes results.ndjson and summary.txt.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<TemplateStrategy>,
    },
    /// Success against target point count; writes sweep.tsv and sweep.svg.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every `ablate.variants` entry; writes ablation.tsv.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Write the configured synthetic training set as a sequence file.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "text", value_parser = parse_format)]
        format: PointFormat,
    },
}

fn parse_strategy(s: &str) -> Result<TemplateStrategy, String> {
    s.parse().map_err(|e: smat::tracker::TrackError| e.to_string())
}

fn parse_format(s: &str) -> Result<PointFormat, String> {
    s.parse().map_err(|e: smat::seqio::SeqIoError| e.to_string())
}

fn execute(cmd: Cmd) -> Result<(), RunError> {
    match cmd {
        Cmd::Train { common, checkpoint } => {
            let cfg = run::load_config(common.config.as_deref())?;
            let r = run::cmd_train(&cfg, common.seed, &common.out, checkpoint.as_deref())?;
            if let Some(last) = r.records.last() {
                println!("step {} loss {:.4} cls {:.4} l1 {:.4}", last.step, last.loss, last.cls, last.l1);
            }
            println!("checkpoint {}", r.checkpoint.display());
        }
        Cmd::Eval {
            common,
            checkpoint,
            strategy,
        } => {
            let cfg = run::load_config(common.config.as_deref())?;
            print!("{}", run::cmd_eval(&cfg, &checkpoint, strategy, &common.out)?.table());
        }
        Cmd::Sweep { common, checkpoint } => {
            let cfg = run::load_config(common.config.as_deref())?;
            let t = run::cmd_sweep(&cfg, &checkpoint, &common.out)?;
            print!("{}", t.table());
            if let Some(rho) = t.spearman() {
                println!("spearman {rho:.4}");
            }
        }
        Cmd::Ablate { common } => {
            let cfg = run::load_config(common.config.as_deref())?;
            print!("{}", run::cmd_ablate(&cfg, common.seed, Some(&common.out))?.table());
        }
        Cmd::Generate { common, format } => {
            let cfg = run::load_config(common.config.as_deref())?;
            let n = run::cmd_generate(&cfg, &common.out, format)?;
            println!("wrote {n} sequences to {}", common.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
