use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use shiftnet_cli::commands::{self, EvalSource};
use shiftnet_cli::config::{self, Domain};

#[derive(Parser)]
#[command(
    name = "shiftnet",
    about = "Multiplication-less networks: architecture search, training, and fixed-point \
             evaluation in the power-of-two shift domain",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Shift,
    Real,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Domain {
        match d {
            DomainArg::Shift => Domain::Shift,
            DomainArg::Real => Domain::Real,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Two-phase architecture search; emits genotype JSON and metrics CSV.
    Search {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["toy", "paper-cifar"])]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an instantiated genotype from scratch.
    Train {
        /// Genotype JSON path or `builtin:<name>`.
        #[arg(long)]
        genotype: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["toy", "paper-cifar"])]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Weight domain: shift (power-of-two) or real (control).
        #[arg(long, value_enum)]
        domain: Option<DomainArg>,
    },
    /// Evaluate a shift checkpoint on the fixed-point path.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX image file (with --labels); otherwise use --config.
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
        /// Config whose [data] block supplies the evaluation set.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quantize a real-domain checkpoint to nearest shift weights.
    Quantize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-layer error report CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time matched dense-multiply vs shift/flip/add matrix kernels.
    Bench {
        /// Comma-separated square sizes.
        #[arg(long, default_value = "64,128,256", value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print or write a genotype as canonical JSON or a table.
    ExportGenotype {
        /// Genotype JSON path or `builtin:<name>`.
        #[arg(long)]
        genotype: String,
        #[arg(long, default_value = "table", value_parser = ["table", "json"])]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    // SHIFTNAS_THREADS bounds worker parallelism for the kernels.
    shiftnet::set_global_threads(None);
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Search {
            config,
            preset,
            seed,
            out,
        } => {
            let cfg = config::resolve_search_config(
                preset.as_deref(),
                config.as_deref(),
                seed,
                out.as_deref(),
            )?;
            let summary = commands::cmd_search(&cfg)?;
            println!("genotype: {}", summary.genotype_path.display());
            println!("metrics:  {}", summary.metrics_path.display());
            if let Some(last) = summary.metrics.last() {
                println!("final val_acc: {:.4}", last.val_acc);
            }
            println!("{}", summary.genotype.to_table());
        }
        Command::Train {
            genotype,
            config,
            preset,
            seed,
            out,
            domain,
        } => {
            let cfg = config::resolve_train_config(
                preset.as_deref(),
                config.as_deref(),
                seed,
                out.as_deref(),
                genotype.as_deref(),
                domain.map(Into::into),
            )?;
            let outcome = commands::cmd_train(&cfg)?;
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("metrics:    {}", outcome.metrics_path.display());
            if let Some(acc) = outcome.final_test_acc {
                println!("final test accuracy: {:.4}", acc);
            }
        }
        Command::Eval {
            checkpoint,
            images,
            labels,
            config,
            seed,
            batch_size,
            out,
        } => {
            let source = match (images, labels, config) {
                (Some(i), Some(l), _) => EvalSource::Idx {
                    images: i,
                    labels: l,
                    normalize_mean: vec![0.5],
                    normalize_std: vec![0.5],
                },
                (None, None, Some(cfg_path)) => {
                    let cfg: config::TrainConfig = config::load_config_file(&cfg_path)?;
                    EvalSource::Spec {
                        spec: cfg.data,
                        seed: seed.unwrap_or(cfg.seed),
                    }
                }
                _ => anyhow::bail!("eval needs --images/--labels or --config"),
            };
            let outcome = commands::cmd_eval(&checkpoint, &source, batch_size)?;
            println!(
                "top-1 accuracy: {:.4} over {} samples",
                outcome.top1, outcome.samples
            );
            println!(
                "ops: {} shifts, {} flips, {} adds, {} weight multiplications",
                outcome.counts.shifts,
                outcome.counts.flips,
                outcome.counts.adds,
                outcome.counts.weight_mults
            );
            println!("prediction hash: {}", outcome.prediction_hash);
            if let Some(p) = out {
                let report = serde_json::json!({
                    "top1": outcome.top1,
                    "samples": outcome.samples,
                    "shifts": outcome.counts.shifts,
                    "flips": outcome.counts.flips,
                    "adds": outcome.counts.adds,
                    "weight_mults": outcome.counts.weight_mults,
                    "prediction_hash": outcome.prediction_hash,
                });
                std::fs::write(&p, serde_json::to_string_pretty(&report)?)?;
                println!("report: {}", p.display());
            }
        }
        Command::Quantize { input, out, report } => {
            let outcome = commands::cmd_quantize(&input, &out, report.as_deref())?;
            println!("wrote {}", outcome.output.display());
            println!(
                "compression ratio vs 32-bit floats: {:.2}x",
                outcome.compression_ratio
            );
            for l in &outcome.layers {
                println!(
                    "  {:<40} {:>8} weights  max|err| {:.6}  mean|err| {:.6}",
                    l.name, l.count, l.max_abs_err, l.mean_abs_err
                );
            }
        }
        Command::Bench {
            sizes,
            reps,
            seed,
            out,
        } => {
            let rows = commands::cmd_bench(&sizes, reps, seed, out.as_deref())?;
            println!(
                "{:>6} {:>12} {:>12} {:>14} {:>12} {:>12}",
                "size", "dense_ms", "shift_ms", "dense_mults", "shift_mults", "shift_adds"
            );
            for r in &rows {
                println!(
                    "{:>6} {:>12.3} {:>12.3} {:>14} {:>12} {:>12}",
                    r.size,
                    r.dense_ms,
                    r.shift_ms,
                    r.dense_counts.weight_mults,
                    r.shift_counts.weight_mults,
                    r.shift_counts.adds
                );
            }
            println!(
                "note: software timings only; op counts are the hardware-relevant signal"
            );
        }
        Command::ExportGenotype {
            genotype,
            format,
            out,
        } => {
            let text = commands::cmd_export(&genotype, &format, out.as_deref())?;
            if out.is_none() {
                print!("{text}");
            }
        }
    }
    Ok(())
}
