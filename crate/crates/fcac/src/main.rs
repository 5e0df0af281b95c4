use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use fcac::config;
use fcac::pipeline;
use fcac::plot::{plot_curves, Curve};

/// Few-shot class-incremental audio classification experiments.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; built-in defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set rets.t=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or extract features and write the session schedules.
    Prepare(ConfigArgs),
    /// Train the base model and write a checkpoint.
    Train(ConfigArgs),
    /// Evaluate the checkpoint on every trial seed.
    Eval(ConfigArgs),
    /// Train and evaluate the proposed pipeline, its ablations and finetuning.
    Ablate(ConfigArgs),
    /// Draw accuracy-vs-session curves from report or aggregate files.
    Plot {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(short, long, default_value = "accuracy.svg")]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => {
            let cfg = config::load(a.config.as_deref(), &a.overrides)?;
            let (_, summary) = pipeline::prepare(&cfg)?;
            println!(
                "{} samples in {} sessions ({} extracted, {} cached)",
                summary.samples,
                summary.sessions.len(),
                summary.extracted,
                summary.cached
            );
        }
        Command::Train(a) => {
            let cfg = config::load(a.config.as_deref(), &a.overrides)?;
            let data = pipeline::load_dataset(&cfg)?;
            let ckpt = pipeline::train(&cfg, &data)?;
            match &ckpt.last_record {
                Some(r) => println!("trained {} iterations, final loss {:.6}", ckpt.trainer.iteration, r.loss),
                None => println!("trained {} iterations", ckpt.trainer.iteration),
            }
        }
        Command::Eval(a) => {
            let cfg = config::load(a.config.as_deref(), &a.overrides)?;
            let data = pipeline::load_dataset(&cfg)?;
            let ckpt = pipeline::load_checkpoint(&cfg, &data)?;
            let agg = pipeline::eval(&cfg, &data, &ckpt)?;
            for s in &agg.seeds {
                println!("seed {}: AA {:.4} PD {:.4}", s.seed, s.aa, s.pd);
            }
            println!("mean: AA {:.4} PD {:.4}", agg.mean_aa, agg.mean_pd);
        }
        Command::Ablate(a) => {
            let cfg = config::load(a.config.as_deref(), &a.overrides)?;
            let data = pipeline::load_dataset(&cfg)?;
            for row in pipeline::ablate(&cfg, &data)? {
                println!("{:<10} AA {:.4} PD {:.4}", row.variant, row.mean_aa, row.mean_pd);
            }
        }
        Command::Plot { reports, output } => {
            let curves = reports
                .iter()
                .map(|p| pipeline::read_curve(p).map(|(label, accuracy)| Curve { label, accuracy }))
                .collect::<Result<Vec<_>>>()?;
            plot_curves(&curves, &output)?;
            println!("wrote {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
