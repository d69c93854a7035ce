//! Command-line entry point for the alignment workbench.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cgvlm_core::checkpoint::load_checkpoint;
use cgvlm_core::config::{Objective, TrainConfig};
use cgvlm_core::data::build_splits;
use cgvlm_core::projector::ProjectorVariant;
use cgvlm_core::train::{diagnose, evaluate, finetune, mean_contrast, pretrain_align};

#[derive(Parser)]
#[command(name = "cgvlm", about = "Two-stage vision-language alignment workbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateKind {
    Objective,
    Alpha,
    Projector,
    Fraction,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (images + manifests).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4096)]
        pretrain: usize,
        #[arg(long, default_value_t = 1024)]
        instruct: usize,
    },
    /// Stage 1: train the projector with the configured objective.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Stage 2: instruction-tune from a stage-1 checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
    },
    /// Exact-match answer accuracy and retrieval over an eval manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Manifest file name within the data directory.
        #[arg(long, default_value = "eval.jsonl")]
        manifest: String,
    },
    /// Similarity maps, contrast scores and retrieval diagnostics.
    Diagnose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "eval.jsonl")]
        manifest: String,
    },
    /// Scripted desk-scale ablation grids.
    Ablate {
        #[arg(value_enum)]
        kind: AblateKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Optimization budget for every stage-2 run in the grid.
        #[arg(long, default_value_t = 240)]
        tune_steps: usize,
        /// Stage-2 learning rate for the grid (desk-scale models need
        /// a far larger rate than the full-scale default).
        #[arg(long, default_value_t = 2e-3)]
        tune_lr: f64,
        /// Stage-1 learning rate for the grid.
        #[arg(long, default_value_t = 1e-3)]
        align_lr: f64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { out, seed, pretrain, instruct } => {
            let files = build_splits(&out, pretrain, instruct, seed)?;
            println!("pretrain manifest: {}", files.pretrain.display());
            println!("instruct manifests: {}", files.instruct_100.display());
            println!("                    {}", files.instruct_010.display());
            println!("                    {}", files.instruct_001.display());
            println!("eval manifest: {}", files.eval.display());
        }
        Command::Pretrain { config } => {
            let config = TrainConfig::load(&config)?;
            if config.stage != cgvlm_core::model::Stage::Align {
                bail!("pretrain requires a config with stage = \"align\"");
            }
            let result = pretrain_align(&config)?;
            let last = result.reports.last().context("no steps ran")?;
            println!("checkpoint: {}", result.checkpoint.display());
            println!("metrics: {}", result.metrics_csv.display());
            println!(
                "final step: gen {:.4} con {:.4} cg {:.4} tau {:.3}",
                last.gen_loss, last.con_loss, last.cg_loss, last.tau
            );
        }
        Command::Finetune { config, init } => {
            let config = TrainConfig::load(&config)?;
            if config.stage != cgvlm_core::model::Stage::Tune {
                bail!("finetune requires a config with stage = \"tune\"");
            }
            let result = finetune(&config, &init)?;
            println!("checkpoint: {}", result.checkpoint.display());
            println!("metrics: {}", result.metrics_csv.display());
            if let Some(last) = result.losses.last() {
                println!("final tune loss: {last:.4}");
            }
        }
        Command::Eval { ckpt, data, out, manifest } => {
            let model = load_checkpoint(&ckpt)?.restore_model()?;
            let metrics = evaluate(&model, &data, &data.join(manifest), Some(&out))?;
            println!(
                "answer accuracy: {:.4} ({}/{})",
                metrics.answer_accuracy, metrics.correct_turns, metrics.total_turns
            );
            println!(
                "retrieval i2t {:.4} t2i {:.4} over {} batches",
                metrics.retrieval_i2t, metrics.retrieval_t2i, metrics.retrieval_batches
            );
        }
        Command::Diagnose { ckpt, data, out, manifest } => {
            let loaded = load_checkpoint(&ckpt)?;
            let step = loaded.step;
            let model = loaded.restore_model()?;
            let report = diagnose(&model, &data, &data.join(manifest), Some(&out), step)?;
            println!(
                "retrieval i2t {:.4} t2i {:.4} | margin {:.4} | mean contrast {:.4}",
                report.image_to_text,
                report.text_to_image,
                report.mean_margin,
                mean_contrast(&report)
            );
            println!("report written to {}", out.display());
        }
        Command::Ablate { kind, data, out, seeds, tune_steps, tune_lr, align_lr } => {
            run_ablation(kind, &data, &out, seeds, tune_steps, tune_lr, align_lr)?;
        }
    }
    Ok(())
}

fn run_ablation(
    kind: AblateKind,
    data: &std::path::Path,
    out: &std::path::Path,
    seeds: u64,
    tune_steps: usize,
    tune_lr: f64,
    align_lr: f64,
) -> Result<()> {
    use cgvlm_core::ablate::{run_cell, AblationCell};

    std::fs::create_dir_all(out)?;
    let mut rows = String::from(
        "variant,seed,fraction,align_gen,align_con,retrieval_i2t,answer_accuracy,mean_contrast\n",
    );
    let cells: Vec<(String, AblationCell)> = match kind {
        AblateKind::Objective => [Objective::Cg, Objective::Gen, Objective::Con]
            .into_iter()
            .map(|objective| {
                (objective.to_string(), AblationCell {
                    objective,
                    ..AblationCell::new(align_lr, tune_lr, tune_steps)
                })
            })
            .collect(),
        AblateKind::Alpha => [0.5, 1.0, 2.0]
            .into_iter()
            .map(|alpha| {
                (format!("alpha{alpha}"), AblationCell {
                    alpha,
                    ..AblationCell::new(align_lr, tune_lr, tune_steps)
                })
            })
            .collect(),
        AblateKind::Projector => [ProjectorVariant::Mlp2Gelu, ProjectorVariant::Linear]
            .into_iter()
            .map(|projector| {
                (projector.to_string(), AblationCell {
                    projector,
                    ..AblationCell::new(align_lr, tune_lr, tune_steps)
                })
            })
            .collect(),
        AblateKind::Fraction => [1.0, 0.10, 0.01]
            .into_iter()
            .map(|fraction| {
                (format!("frac{fraction}"), AblationCell {
                    fraction,
                    ..AblationCell::new(align_lr, tune_lr, tune_steps)
                })
            })
            .collect(),
    };

    for (label, cell) in &cells {
        for seed in 0..seeds {
            let outcome = run_cell(data, &out.join(format!("{label}_s{seed}")), seed, cell)?;
            println!(
                "{label} seed {seed}: retrieval {:.3} accuracy {:.3} contrast {:.3}",
                outcome.retrieval_i2t, outcome.answer_accuracy, outcome.mean_contrast
            );
            rows.push_str(&format!(
                "{label},{seed},{},{},{},{},{},{}\n",
                cell.fraction,
                outcome.align_gen,
                outcome.align_con,
                outcome.retrieval_i2t,
                outcome.answer_accuracy,
                outcome.mean_contrast
            ));
        }
    }
    std::fs::write(out.join("ablation.csv"), rows)?;
    println!("grid summary: {}", out.join("ablation.csv").display());
    Ok(())
}
