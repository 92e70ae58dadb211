//! `wavetone`: train, apply, and verify the wavelet-domain photo enhancer.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, unknown
//! subcommand, a gradient-check filter that matches nothing), 2 on runtime
//! failures (missing files, corrupt checkpoints, diverged training, failed
//! gradient checks).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use wavetone::checkpoint::load_checkpoint;
use wavetone::config::parse_config;
use wavetone::dataset::{load_dataset, load_png, save_png};
use wavetone::gradcheck;
use wavetone::train::{enhance_image, evaluate, pipeline_from_checkpoint, train};
use wavetone::{Error, Result};

#[derive(Parser)]
#[command(name = "wavetone", version, about = "Wavelet-domain photo enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as described by a config file.
    Train {
        /// Path to a `key = value` run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the run seed (highest precedence; see also WAVEN_SEED).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Enhance a single PNG with a trained checkpoint.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PNG (8-bit RGB, any size).
        #[arg(long)]
        input: PathBuf,
        /// Output PNG path; written atomically.
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a checkpoint on paired directories and write a metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        target_dir: PathBuf,
        /// Destination CSV (`id,psnr_db,ssim,delta_e`, mean row last).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 64-bit gradient-check suite and print per-case results.
    Gradcheck {
        /// Only run cases whose name contains this substring.
        #[arg(long)]
        op: Option<String>,
    },
}

/// Seed precedence: `--seed` flag, then the `WAVEN_SEED` environment
/// variable, then whatever the config file says.
fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("WAVEN_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidArg(format!("WAVEN_SEED must be an unsigned integer, got `{v}`"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Error::InvalidArg("WAVEN_SEED is not valid UTF-8".into()))
        }
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{stem}.tmp-{}", std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train { config, seed } => {
            let text = std::fs::read_to_string(&config)?;
            let mut config = parse_config(&text)?;
            if let Some(seed) = resolve_seed(seed)? {
                config.seed = seed;
            }
            let outcome = train::<f32>(&config)?;
            if let Some(last) = outcome.breakdowns.last() {
                println!("step {}: {last}", outcome.breakdowns.len());
            }
            println!(
                "trained {} steps (seed {}); checkpoint: {}  loss log: {}",
                config.steps,
                config.seed,
                outcome.final_checkpoint.display(),
                outcome.loss_log.display()
            );
            Ok(0)
        }
        Command::Enhance {
            checkpoint,
            input,
            output,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let pipeline = pipeline_from_checkpoint::<f32>(&ckpt)?;
            let img = load_png::<f32>(&input)?;
            let out = enhance_image(&pipeline, &img)?;
            save_png(&output, &out)?;
            println!("wrote {}", output.display());
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            input_dir,
            target_dir,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let pipeline = pipeline_from_checkpoint::<f32>(&ckpt)?;
            let ds = load_dataset::<f32>(&input_dir, &target_dir, None)?;
            let report = evaluate(&pipeline, &ds.train)?;
            write_atomic(&out, &report.to_csv())?;
            let m = &report.mean;
            println!(
                "{} images: psnr_db={:.3} ssim={:.4} delta_e={:.3}  ({})",
                report.rows.len(),
                m.psnr_db,
                m.ssim,
                m.delta_e,
                out.display()
            );
            Ok(0)
        }
        Command::Gradcheck { op } => {
            let reports = gradcheck::run_suite(op.as_deref())?;
            if reports.is_empty() {
                eprintln!(
                    "no gradient-check case matches `{}`; available: {}",
                    op.as_deref().unwrap_or(""),
                    gradcheck::suite_names().join(", ")
                );
                return Ok(1);
            }
            let mut failures = 0;
            for report in &reports {
                println!("{report}");
                if !report.passed() {
                    failures += 1;
                }
            }
            if failures > 0 {
                eprintln!("{failures} of {} cases FAILED", reports.len());
                return Ok(2);
            }
            println!(
                "all {} cases passed (tolerance {:.0e})",
                reports.len(),
                gradcheck::GRADCHECK_TOLERANCE
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive as clap "errors" but are successes.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
