//! Command-line entry points: synthetic data generation, dataset splitting,
//! training, inference, metric evaluation, and gradient checking.
//!
//! Exit codes: 0 success, 1 validation failure (bad inputs or
//! configuration), 2 numerical failure (non-finite loss or a failed
//! gradient check).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use camograft::checks::{run_gradcheck, CheckScope};
use camograft::data::{split_dataset, DatasetIndex};
use camograft::metrics::{evaluate_dirs, EMeasureMode};
use camograft::synth::{synth_generate, SynthConfig};
use camograft::train::{infer, train, TrainConfig};
use camograft::Error;

#[derive(Parser)]
#[command(name = "camograft", version, about = "Toy-scale camouflaged-object segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic camouflage dataset with exact masks.
    Synth {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Square image size in pixels.
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (images/, masks/, index.json).
        #[arg(long)]
        out: PathBuf,
        /// Foreground brightness offset in [0, 1].
        #[arg(long, default_value_t = 0.6)]
        contrast: f64,
    },
    /// Re-split an existing dataset index into train and test.
    Split {
        /// Path to index.json.
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a JSON configuration.
    Train {
        /// Configuration file mirroring the training config fields.
        #[arg(long)]
        config: PathBuf,
        /// Dataset index; overrides `data_index` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write prediction maps for every PNG in a directory.
    Infer {
        /// checkpoint.bin produced by train (config.json must sit next to it).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate prediction maps against ground-truth masks.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// CSV report path.
        #[arg(long)]
        out: PathBuf,
        /// Enhanced-alignment scalar: adaptive, mean, or max.
        #[arg(long, default_value = "adaptive")]
        e_mode: String,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        /// ops, modules, full, or negative (a corrupted-gradient self-test
        /// that must fail).
        #[arg(long)]
        scope: String,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { n, size, seed, out, contrast } => {
            let cfg = SynthConfig::new(n, size, seed, contrast)?;
            let index = synth_generate(&cfg, &out)?;
            println!("wrote {} samples under {}", index.entries.len(), out.display());
        }
        Command::Split { index, ratio, seed } => {
            let mut idx = DatasetIndex::load(&index)?;
            split_dataset(&mut idx, ratio, seed)?;
            idx.save()?;
            let train_n = idx.entries_of(camograft::data::Split::Train).len();
            let test_n = idx.entries_of(camograft::data::Split::Test).len();
            println!("split {}: {train_n} train / {test_n} test", index.display());
        }
        Command::Train { config, data, out } => {
            let cfg = TrainConfig::from_json_file(&config)?;
            let index_path = data
                .or_else(|| cfg.data_index.as_ref().map(PathBuf::from))
                .ok_or_else(|| Error::Invalid("no dataset: pass --data or set data_index".into()))?;
            let out_dir = out
                .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
                .ok_or_else(|| Error::Invalid("no output: pass --out or set out_dir".into()))?;
            let index = DatasetIndex::load(&index_path)?;
            let report = train(&cfg, &index, &out_dir)?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint {}",
                report.steps,
                report.final_loss,
                report.checkpoint.display()
            );
        }
        Command::Infer { ckpt, input, out } => {
            let outputs = infer(&ckpt, &input, &out)?;
            println!("wrote {} prediction maps to {}", outputs.len(), out.display());
        }
        Command::Eval { pred_dir, gt_dir, out, e_mode } => {
            let mode = match e_mode.as_str() {
                "adaptive" => EMeasureMode::Adaptive,
                "mean" => EMeasureMode::Mean,
                "max" => EMeasureMode::Max,
                other => return Err(Error::Invalid(format!("unknown e-mode {other:?}"))),
            };
            let report = evaluate_dirs(&pred_dir, &gt_dir, mode)?;
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            std::fs::write(&out, &buf)?;
            println!(
                "evaluated {} images: MAE {:.4}, S {:.4}, E {:.4}, wFm {:.4} -> {}",
                report.count,
                report.mean_mae,
                report.mean_s,
                report.mean_e,
                report.mean_wfm,
                out.display()
            );
        }
        Command::Gradcheck { scope, seed } => {
            let scope: CheckScope = scope.parse()?;
            let reports = run_gradcheck(scope, seed)?;
            let mut failures = 0usize;
            for r in &reports {
                println!(
                    "{} {}: max rel err {:.3e}, max abs err {:.3e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.op_name,
                    r.max_rel_error,
                    r.max_abs_error
                );
                failures += usize::from(!r.passed);
            }
            if failures > 0 {
                return Err(Error::Numerical(format!(
                    "{failures} of {} gradient checks failed",
                    reports.len()
                )));
            }
            println!("all {} gradient checks passed", reports.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Numerical(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
