use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dmsn_core::eval::{evaluate_checkpoint, write_report, EvalOptions, FusionMode, FusionOptions};
use dmsn_core::synth_data::{generate_dataset, load_dataset, save_dataset, toy_specs};
use dmsn_core::trainer::{run_training, TrainConfig};

#[derive(Parser)]
#[command(name = "dmsn", version, about = "Multi-source domain-adaptive detection on a toy corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    Union,
    ScoreAverage,
}

#[derive(Subcommand)]
enum Command {
    /// Write the three-domain toy corpus as `<out>/train` and `<out>/test`.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Training images per domain.
        #[arg(long, default_value_t = 200)]
        images: usize,
        /// Test images per domain.
        #[arg(long, default_value_t = 50)]
        test_images: usize,
        /// The test split uses `seed + 1`, matching in-memory generation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the full training schedule.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Domain to score; defaults to the run's target domain.
        #[arg(long)]
        domain: Option<u32>,
        #[arg(long, value_enum, default_value = "union")]
        fusion: Fusion,
        #[arg(long, default_value_t = 0.5)]
        fusion_iou: f64,
        /// Weight score-average fusion by the checkpoint's source weights.
        #[arg(long)]
        beta_weights: bool,
        /// Score classes without ground truth as AP 0.
        #[arg(long)]
        include_empty_classes: bool,
    },
    /// Plots and a markdown summary for every run under a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate {
            out,
            images,
            test_images,
            seed,
        } => {
            for (split, n, s) in [("train", images, seed), ("test", test_images, seed.wrapping_add(1))] {
                let data = generate_dataset(&toy_specs(n), s)?;
                let manifest = save_dataset(&data, &out.join(split))?;
                log::info!("wrote {}", manifest.display());
            }
        }
        Command::Train { config, out, resume } => {
            let cfg = TrainConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let summary = run_training(&cfg, &out, resume.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if summary.failed() {
                bail!(
                    "{} of {} steps faulted (limit {})",
                    summary.faulted_steps,
                    summary.steps,
                    cfg.max_fault_fraction
                );
            }
        }
        Command::Eval {
            ckpt,
            data,
            split,
            out,
            domain,
            fusion,
            fusion_iou,
            beta_weights,
            include_empty_classes,
        } => {
            let dataset = load_dataset(&data.join(&split))
                .with_context(|| format!("loading split {split} under {}", data.display()))?;
            let options = EvalOptions {
                fusion: FusionOptions {
                    mode: match fusion {
                        Fusion::Union => FusionMode::Union,
                        Fusion::ScoreAverage => FusionMode::ScoreAverage,
                    },
                    iou_threshold: fusion_iou,
                    weights: None,
                },
                include_empty_classes,
                beta_weights,
                ..EvalOptions::default()
            };
            let report = evaluate_checkpoint(&ckpt, &dataset, domain, &options)?;
            report.save(&out)?;
            println!("mAP {:.4}", report.map);
            for (name, ap) in report.class_names.iter().zip(&report.per_class_ap) {
                match ap {
                    Some(v) => println!("  {name:<10} {v:.4}"),
                    None => println!("  {name:<10} (no ground truth)"),
                }
            }
            for (s, m) in report.subnets.iter().zip(&report.per_subnet_map) {
                println!("  subnet {s}: {m:.4}");
            }
        }
        Command::Report { runs } => {
            let r = write_report(&runs)?;
            println!("{} ({} runs, {} plots)", r.markdown.display(), r.runs.len(), r.plots.len());
        }
    }
    Ok(())
}
