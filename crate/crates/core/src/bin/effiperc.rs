use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use effiperc_core::extract::{voxelize, PointCloud, VoxelConfig};
use effiperc_core::harness::bench::{bench, BenchConfig};
use effiperc_core::harness::gradcheck::{gradcheck, OPS, TOLERANCE};
use effiperc_core::harness::train::{ablate, robustness_suite, to_csv, train};
use effiperc_core::harness::ExperimentConfig;
use effiperc_core::{Error, Result};

#[derive(Parser)]
#[command(name = "effiperc", version, about = "Sparse perception building blocks and toy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Voxelize a float32 (x, y, z, intensity) scan and print point statistics.
    Voxelize {
        scan: PathBuf,
        /// Experiment config whose `extractor.voxel` table is used; the KITTI grid when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks, one row per op.
    Gradcheck {
        /// Restrict to one op.
        #[arg(long, value_name = "NAME")]
        op: Option<String>,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the configured toy model and write per-epoch metrics.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Train all four SDS/GSA combinations.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the table to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate one trained model under clean and corrupted inputs.
    Robust {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        sigma: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time sparse convolution against densify-then-convolve.
    Bench {
        #[arg(long, default_value_t = 64)]
        extent: usize,
        #[arg(long, default_value_t = 0.01)]
        density: f64,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn emit(csv: &str, out: Option<&Path>) -> Result<()> {
    std::io::stdout().write_all(csv.as_bytes())?;
    if let Some(p) = out {
        std::fs::write(p, csv)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Voxelize { scan, config } => {
            let vc = match config {
                Some(p) => ExperimentConfig::load(p)?.extractor.voxel,
                None => VoxelConfig::kitti(),
            };
            let pc = PointCloud::load_bin(&scan)?;
            let vb = voxelize(&pc, &vc)?;
            let e = vb.extent;
            let s = vb.stats;
            println!("grid (D, H, W): {} x {} x {}", e.d, e.h, e.w);
            println!("non-empty voxels: {}", vb.len());
            println!("points total: {}", s.total);
            println!("points retained: {}", s.retained);
            println!("points dropped: {}", s.dropped);
            println!("points out of range: {}", s.out_of_range);
            let max_per_voxel = vb.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
            println!("max points per voxel: {max_per_voxel} (limit {})", vc.max_points);
        }
        Command::Gradcheck { op, instances, seed } => {
            if let Some(name) = &op {
                if !OPS.contains(&name.as_str()) {
                    return Err(Error::Config(format!("unknown op {name:?}; known ops: {}", OPS.join(", "))));
                }
            }
            let reports = gradcheck(op.as_deref(), instances, seed)?;
            emit(&to_csv(&reports)?, None)?;
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check above {TOLERANCE:e} for: {}", failed.join(", "))));
            }
        }
        Command::TrainToy { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let outcome = train(&cfg)?;
            outcome.metrics.write_csv(&out)?;
            if let Some(last) = outcome.metrics.last() {
                eprintln!(
                    "epoch {}: loss {:.4}, mIoU {:.4}, accuracy {:.4}, {:.2} ms/step",
                    last.epoch, last.train_loss, last.eval_miou, last.eval_accuracy, last.step_ms
                );
            }
            eprintln!("wrote {}", out.display());
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(config.as_deref())?;
            emit(&to_csv(&ablate(&cfg)?)?, out.as_deref())?;
        }
        Command::Robust { config, sigma, out } => {
            let cfg = load_config(config.as_deref())?;
            emit(&to_csv(&robustness_suite(&cfg, sigma)?)?, out.as_deref())?;
        }
        Command::Bench { extent, density, channels, seed } => {
            if extent == 0 || channels == 0 || !(density > 0.0 && density <= 1.0) {
                return Err(Error::Config("bench needs extent >= 1, channels >= 1 and density in (0, 1]".into()));
            }
            let cfg = BenchConfig { extent, density, channels, seed, ..BenchConfig::default() };
            emit(&to_csv(&bench(&cfg)?)?, None)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
