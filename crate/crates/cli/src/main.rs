use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sogclr::harness::config::parse_override;
use sogclr::harness::metrics::{emit_metrics, MetricsFormat};
use sogclr::harness::train::{train, train_bimodal, PairedProblem, Problem, TrainRun};
use sogclr::harness::{gradcheck, sweep_batch_size, OptimizerKind, RunConfig};
use sogclr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sogclr",
    version,
    about = "Desk-scale global contrastive learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    config: PathBuf,
    /// Override a config key, e.g. `--set optimizer.eta=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let overrides = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        RunConfig::load(&self.config, &overrides)
    }
}

#[derive(Args)]
struct TrainOutputs {
    /// Metrics file; format from `--format` or the extension.
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    format: Option<MetricsFormat>,
    /// Directory for the final encoder and optimizer checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset described by a config as CSV.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Write paired image/text rows instead of labeled points.
        #[arg(long)]
        paired: bool,
    },
    /// Train and write metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: TrainOutputs,
    },
    /// Plateau gradient norm per batch size, averaged over seeds.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        batch_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Summary CSV.
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-cell metrics CSVs.
        #[arg(long)]
        metrics_dir: Option<PathBuf>,
    },
    /// Compare every analytic gradient with finite differences.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Two-way training on synthetic paired data.
    BimodalTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: TrainOutputs,
    },
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_run(run: &TrainRun, out: &TrainOutputs) -> Result<()> {
    let format = out
        .format
        .unwrap_or_else(|| MetricsFormat::from_path(&out.metrics));
    emit_metrics(&run.records, &out.metrics, format)?;
    if let Some(dir) = &out.checkpoint_dir {
        create_dir(dir)?;
        let names: &[&str] = if run.encoders.len() == 2 {
            &["encoder_image.ckpt", "encoder_text.ckpt"]
        } else {
            &["encoder.ckpt"]
        };
        for (enc, name) in run.encoders.iter().zip(names) {
            enc.save(&dir.join(name))?;
        }
        write_file(&dir.join("optimizer.ckpt"), run.state_checkpoint.as_bytes())?;
    }
    if let Some(last) = run.records.last() {
        let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6e}"));
        eprintln!(
            "step {}: objective {} grad_norm_sq {}",
            last.step,
            show(last.objective_value),
            show(last.oracle_grad_norm_sq)
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { cfg, out, paired } => {
            let cfg = cfg.load()?;
            let f = std::fs::File::create(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            if paired {
                PairedProblem::from_config(&cfg)?.ds.write_csv(f)?;
            } else {
                Problem::from_config(&cfg)?.ds.write_csv(f)?;
            }
        }
        Command::Train { cfg, out } => write_run(&train(&cfg.load()?)?, &out)?,
        Command::BimodalTrain { cfg, out } => {
            let mut cfg = cfg.load()?;
            cfg.optimizer.kind = OptimizerKind::BimodalSogclr;
            write_run(&train_bimodal(&cfg)?, &out)?;
        }
        Command::Sweep {
            cfg,
            batch_sizes,
            seeds,
            out,
            metrics_dir,
        } => {
            let result = sweep_batch_size(&cfg.load()?, &batch_sizes, &seeds)?;
            let mut buf = Vec::new();
            result.write_csv(&mut buf)?;
            write_file(&out, &buf)?;
            if let Some(dir) = metrics_dir {
                create_dir(&dir)?;
                for cell in &result.cells {
                    let path = dir.join(format!("b{}_seed{}.csv", cell.batch_size, cell.seed));
                    emit_metrics(&cell.records, &path, MetricsFormat::Csv)?;
                }
            }
            for row in &result.rows {
                println!(
                    "B={:<5} plateau {:.4e} ± {:.2e}",
                    row.batch_size, row.mean, row.std
                );
            }
        }
        Command::Gradcheck { cfg } => {
            let report = gradcheck(&cfg.load()?)?;
            print!("{report}");
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
