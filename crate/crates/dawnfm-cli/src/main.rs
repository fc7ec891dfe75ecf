use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dawnfm_cli::config::ExperimentConfig;
use dawnfm_cli::pipeline::{self, OpKind};

#[derive(Parser)]
#[command(name = "dawnfm", version, about = "Flow-matching solvers for linear inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a velocity model from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (falls back to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from an existing checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample the posterior for ground-truth images with synthesized noise.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// DWNT tensor (image or stack) or IDX file of ground truth.
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "noise-pct")]
        noise_pct: f64,
        /// Ensemble size M.
        #[arg(long)]
        ensemble: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score reconstructions against ground truth into a CSV.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// JSON operator config.
        #[arg(long)]
        operator: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Train the duathlon toy model and sample its posterior.
    ToyDuathlon {
        /// Observed total time.
        #[arg(long)]
        b: f64,
        #[arg(long = "noise-pct")]
        noise_pct: f64,
        /// Number of prior and posterior samples.
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run adjoint and spectral diagnostics for a forward operator.
    OpTest {
        #[arg(long)]
        operator: OperatorArg,
        #[arg(long, default_value_t = 16)]
        side: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OperatorArg {
    Blur,
    Radon,
    Sum,
}

fn run() -> dawnfm::Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out, resume } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| dawnfm::DawnError::Config(
                    "no output directory: pass --out or set output_dir".into(),
                ))?;
            let outputs = pipeline::run_train(&cfg, &out, resume.as_deref())?;
            if let Some((epoch, _, loss)) = outputs.losses.last() {
                println!(
                    "trained to epoch {}: total {:.6} velocity {:.6} misfit {:.6}",
                    epoch + 1,
                    loss.total,
                    loss.velocity_term,
                    loss.misfit_term
                );
            }
            println!("final checkpoint: {}", outputs.final_checkpoint.display());
            Ok(true)
        }
        Command::Infer {
            checkpoint,
            input,
            noise_pct,
            ensemble,
            seed,
            out,
        } => {
            let outputs = pipeline::run_infer(&checkpoint, &input, noise_pct, ensemble, seed, &out)?;
            println!(
                "wrote {} posterior ensembles (M = {ensemble}) to {}",
                outputs.per_image.len(),
                out.display()
            );
            Ok(true)
        }
        Command::Eval {
            pred,
            truth,
            operator,
            csv,
        } => {
            let outputs = pipeline::run_eval(&pred, &truth, &operator, &csv)?;
            println!(
                "evaluated {} images: mean psnr {:.3}, mean ssim {:.4} -> {}",
                outputs.rows.len(),
                outputs.mean.psnr,
                outputs.mean.ssim,
                csv.display()
            );
            Ok(true)
        }
        Command::ToyDuathlon {
            b,
            noise_pct,
            samples,
            out,
        } => {
            let outputs = pipeline::run_toy(b, noise_pct, samples, Some(&out))?;
            let mean = &outputs.posterior.mean;
            println!(
                "posterior over (bike, run) for b = {b}: mean ({:.4}, {:.4}), sigma = {:.4}",
                mean.data()[0],
                mean.data()[1],
                outputs.sigma
            );
            println!("sample CSVs in {}", out.display());
            Ok(true)
        }
        Command::OpTest { operator, side } => {
            let kind = match operator {
                OperatorArg::Blur => OpKind::Blur,
                OperatorArg::Radon => OpKind::Radon,
                OperatorArg::Sum => OpKind::Sum,
            };
            let report = pipeline::run_optest(kind, side)?;
            print!("{}", report.render());
            Ok(report.passed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
