//! Thin command-line front end: `profile` meters a block and prints a JSON
//! report, `train` runs the toy task. All substance lives in the library;
//! see the crate examples for programmatic use.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sparsetune::{run_profile, run_train, ProfileSpec, Result, TrainSpec};

#[derive(Parser)]
#[command(name = "sparsetune", version, about = "Sparse fine-tuning of Transformer blocks at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Meter arithmetic cost, peak bytes and kept attention entries for one block or module.
    Profile(ProfileArgs),
    /// Train the toy shifted-copy task under a tuning mode.
    Train(TrainArgs),
}

#[derive(Args)]
struct ProfileArgs {
    /// Preset name (try --name list) or path to a geometry file.
    #[arg(long, default_value = "opt-2048")]
    name: String,
    /// Tuning mode: full, lora or sparse.
    #[arg(long, default_value = "sparse")]
    tuning: String,
    /// What to measure: block, attention or ffn.
    #[arg(long, default_value = "block")]
    module: String,
    /// Adapter rank.
    #[arg(long = "d_lora", default_value_t = 16)]
    d_lora: usize,
    #[arg(long = "seq_length", default_value_t = 512)]
    seq_length: usize,
    #[arg(long = "batch_size", default_value_t = 16)]
    batch_size: usize,
    /// Include the backward pass in the measurement.
    #[arg(long)]
    backward: bool,
    /// Apply a causal mask.
    #[arg(long)]
    causal: bool,
    /// Fraction of key positions each query keeps.
    #[arg(long, default_value_t = 0.125)]
    lambda: f64,
    /// Fraction of feed-forward groups each token activates.
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Tuning mode: full, lora or sparse.
    #[arg(long, default_value = "full")]
    tuning: String,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    #[arg(long = "batch_size", default_value_t = 8)]
    batch_size: usize,
    #[arg(long = "seq_length", default_value_t = 64)]
    seq_length: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Fraction of key positions each query keeps (sparse mode).
    #[arg(long, default_value_t = 0.125)]
    lambda: f64,
    /// Fraction of feed-forward groups each token activates (sparse mode).
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    /// Weight of the routing balance penalty.
    #[arg(long = "balance_weight", default_value_t = 0.01)]
    balance_weight: f64,
    /// Adapter rank.
    #[arg(long = "d_lora", default_value_t = 8)]
    d_lora: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Progress line cadence; 0 silences progress.
    #[arg(long = "log_every", default_value_t = 50)]
    log_every: u64,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Profile(a) => {
            if a.name == "list" {
                for name in sparsetune::PRESET_NAMES {
                    println!("{name}");
                }
                return Ok(());
            }
            let spec = ProfileSpec {
                name: a.name,
                tuning: a.tuning.parse()?,
                module: a.module.parse()?,
                d_lora: a.d_lora,
                seq_length: a.seq_length,
                batch_size: a.batch_size,
                backward: a.backward,
                causal: a.causal,
                lambda: a.lambda,
                beta: a.beta,
                seed: a.seed,
            };
            let start = Instant::now();
            let report = run_profile(&spec)?;
            eprintln!("profiled {} in {:.2?} (wall clock stays out of the report)", report.preset, start.elapsed());
            let json = report.to_json();
            match a.out {
                Some(path) => std::fs::write(path, json + "\n")?,
                None => println!("{json}"),
            }
        }
        Cmd::Train(a) => {
            let mut spec = TrainSpec {
                mode: a.tuning.parse()?,
                steps: a.steps,
                batch_size: a.batch_size,
                seq_length: a.seq_length,
                lr: a.lr,
                seed: a.seed,
                log_every: (a.log_every > 0).then_some(a.log_every),
                ..TrainSpec::default()
            };
            spec.cfg.rank = a.d_lora;
            spec.sparsity.lambda = a.lambda;
            spec.sparsity.beta = a.beta;
            spec.sparsity.balance_weight = a.balance_weight;
            let start = Instant::now();
            let out = run_train(&spec)?;
            eprintln!("trained {} steps in {:.2?}", a.steps, start.elapsed());
            println!(
                "loss {:.4} -> {:.4} (tail mean {:.4})",
                out.initial_loss(),
                out.final_loss(),
                out.tail_mean_loss(20)
            );
        }
    }
    Ok(())
}
