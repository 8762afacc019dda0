use std::path::PathBuf;
use std::process::ExitCode;

use anableps_core::abrn::Ablation;
use anableps_core::harness::{run_experiment, ExperimentConfig, Mode, Outcome};
use anableps_core::Error;
use clap::Parser;

/// Trace-driven real-time video bitrate control experiments.
#[derive(Debug, Parser)]
#[command(name = "anableps", version)]
struct Args {
    /// simulate, train-cbpn, train-abrn, evaluate, compare or gen-traces
    #[arg(required_unless_present = "print_config")]
    mode: Option<String>,
    /// TOML experiment configuration; defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the top-level seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated policy names (gcc, fixed-N, oracle, random, anableps, anableps-c, anableps-s)
    #[arg(long)]
    policy: Option<String>,
    /// Predictor ablation used by train-abrn and the plain `anableps` policy
    #[arg(long, value_parser = ["full", "s", "c"])]
    ablation: Option<String>,
    /// Prints the effective configuration as TOML and exits
    #[arg(long)]
    print_config: bool,
}

fn config(args: &Args) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.paths.output_dir = out.clone();
    }
    if let Some(list) = &args.policy {
        cfg.policy.names = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if let Some(a) = &args.ablation {
        cfg.policy.ablation = a.parse::<Ablation>()?;
    }
    Ok(cfg)
}

fn run(args: &Args) -> Result<(), Error> {
    let cfg = config(args)?;
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let mode: Mode = args.mode.as_deref().unwrap_or_default().parse()?;
    match run_experiment(mode, &cfg)? {
        Outcome::Report(report) => {
            print!("{}", report.to_csv());
            if report.anchor.is_some() {
                print!("{}", report.relative_table());
            }
            println!("outputs written to {}", cfg.paths.output_dir.display());
        }
        Outcome::Cbpn(r) => {
            if let Some(t) = &r.test {
                println!("held-out MAD {:.4}  CR {:.4}", t.mad, t.cr);
            }
            if let Some(b) = r.test_last_target_mad {
                println!("last-target MAD {b:.4}");
            }
            println!("checkpoint {}", cfg.cbpn_path().display());
        }
        Outcome::Abrn {
            updates,
            final_reward,
            seed,
            validation,
        } => {
            if validation.len() > 1 {
                let scores: Vec<String> = validation.iter().map(|v| format!("{v:.4}")).collect();
                println!("validation reward per candidate [{}], kept seed {seed}", scores.join(", "));
            }
            println!("{updates} updates, final smoothed reward {final_reward:.4}");
            println!("checkpoint {}", cfg.abrn_path(cfg.policy.ablation).display());
        }
        Outcome::Corpus(paths) => println!("wrote {} files", paths.len()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
