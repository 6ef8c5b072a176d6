//! `certmark`: embed, certify, attack, verify and report on certifiable
//! trigger-set watermarks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod run;
mod tables;

use commands::{AttackArgs, CertifyArgs, VerifyArgs};
use config::{ExperimentConfig, Overrides};
use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "certmark", version, about = "Certifiable trigger-set watermarks for small classifiers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML); defaults to <out>/config.toml when present
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed; every nested seed is derived from it
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for parallel sections
    #[arg(long, global = true, value_name = "N", env = "CERTMARK_JOBS")]
    jobs: Option<usize>,
    /// Run directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Print the resolved config and exit
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split the data, optionally train a zero-noise baseline, embed the watermark
    Embed,
    /// Certify the trigger-set accuracy of a checkpoint over a radius grid
    Certify {
        /// Checkpoint to certify [default: <out>/model.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report path [default: report.json beside the checkpoint]
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Monte Carlo samples
        #[arg(long)]
        n: Option<u64>,
        #[arg(long)]
        confidence: Option<f64>,
        /// Comma-separated ascending radii
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        radii: Option<Vec<f64>>,
    },
    /// Run removal attacks against a checkpoint
    Attack {
        /// finetune, distill-hard, distill-soft, pgd, prune, shift or quantize;
        /// without it every configured attack runs
        #[arg(long)]
        kind: Option<String>,
        /// Directory name under <out>/attacks
        #[arg(long)]
        name: Option<String>,
        /// Checkpoint to attack [default: <out>/model.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        reg_lambda: Option<f32>,
        /// l2 radius for pgd
        #[arg(long)]
        radius: Option<f64>,
        /// Strength for prune, shift and quantize
        #[arg(long)]
        magnitude: Option<f64>,
        #[arg(long)]
        pgd_steps: Option<usize>,
    },
    /// Check attacked checkpoints against a certificate; exit 1 on any violation
    Verify {
        /// Attacked checkpoints [default: every <out>/attacks/*/model.ckpt]
        attacked: Vec<PathBuf>,
        /// Certificate [default: <out>/report.json]
        #[arg(long)]
        report: Option<PathBuf>,
        /// The certified checkpoint [default: <out>/model.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Monte Carlo samples per attacked model [default: the report's]
        #[arg(long)]
        n: Option<u64>,
    },
    /// Print the certificate, l2 and attack tables of a run directory
    Report {
        /// Run directory [default: --out]
        dir: Option<PathBuf>,
    },
}

fn init_pool(jobs: Option<usize>) -> CliResult<()> {
    match jobs {
        Some(0) => Err(CliError::usage("--jobs must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::failure(format!("thread pool: {e}"))),
        None => Ok(()),
    }
}

fn execute(cli: Cli) -> CliResult<ExitCode> {
    let common = cli.common;
    init_pool(common.jobs)?;
    let overrides = Overrides { seed: common.seed, out: common.out.clone() };
    if let Command::Report { dir } = &cli.command {
        let root = dir.clone().or(common.out).unwrap_or_else(|| ExperimentConfig::default().out);
        if common.dry_run {
            println!("report {}", root.display());
            return Ok(ExitCode::SUCCESS);
        }
        tables::report(&root)?;
        return Ok(ExitCode::SUCCESS);
    }
    let cfg = ExperimentConfig::resolve(common.config.as_deref(), &overrides)?;
    if common.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(ExitCode::SUCCESS);
    }
    match cli.command {
        Command::Embed => commands::embed(&cfg)?,
        Command::Certify { checkpoint, report, sigma, n, confidence, radii } => {
            commands::certify(&cfg, &CertifyArgs { checkpoint, report, sigma, n, confidence, radii })?
        }
        Command::Attack { kind, name, checkpoint, lr, epochs, reg_lambda, radius, magnitude, pgd_steps } => {
            let args = AttackArgs { kind, name, checkpoint, lr, epochs, reg_lambda, radius, magnitude, pgd_steps };
            commands::attack(&cfg, &args)?
        }
        Command::Verify { attacked, report, checkpoint, n } => {
            if !commands::verify(&cfg, &VerifyArgs { report, checkpoint, n, attacked })? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("certmark: {e}");
            ExitCode::from(e.code)
        }
    }
}
