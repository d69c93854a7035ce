//! Desk-scale ablation cells: one alignment run, one tuning run and
//! the evaluation probes, bundled so the CLI grid driver and the
//! acceptance suite share the exact same recipe.
//!
//! Stage-2 runs in a grid get a fixed optimization budget
//! (`tune_steps`) regardless of data fraction, cycling their manifest
//! as needed; comparisons across fractions are then at equal compute.
//! Desk-scale learning rates replace the full-scale defaults, which
//! are tied to large pretrained models.

use std::path::{Path, PathBuf};

use crate::config::{Objective, TrainConfig};
use crate::projector::ProjectorVariant;
use crate::train::{diagnose, evaluate, finetune, mean_contrast, pretrain_align, TrainError};

#[derive(Debug, Clone, Copy)]
pub struct AblationCell {
    pub objective: Objective,
    pub alpha: f64,
    pub projector: ProjectorVariant,
    pub fraction: f64,
    pub align_lr: f64,
    pub tune_lr: f64,
    pub tune_steps: usize,
    pub align_epochs: usize,
}

impl AblationCell {
    pub fn new(align_lr: f64, tune_lr: f64, tune_steps: usize) -> Self {
        Self {
            objective: Objective::Cg,
            alpha: 1.0,
            projector: ProjectorVariant::Mlp2Gelu,
            fraction: 0.10,
            align_lr,
            tune_lr,
            tune_steps,
            align_epochs: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub align_gen: f64,
    pub align_con: f64,
    pub align_cg: f64,
    pub retrieval_i2t: f64,
    pub retrieval_t2i: f64,
    pub mean_contrast: f64,
    pub answer_accuracy: f64,
    pub align_checkpoint: PathBuf,
    pub tune_checkpoint: PathBuf,
}

pub fn align_config(data_dir: &Path, out_dir: &Path, seed: u64, cell: &AblationCell) -> TrainConfig {
    let mut config =
        TrainConfig::align_defaults(data_dir.to_path_buf(), out_dir.to_path_buf(), seed);
    config.objective = cell.objective;
    config.alpha = cell.alpha;
    config.learning_rate = cell.align_lr;
    config.epochs = cell.align_epochs;
    config.model.projector = cell.projector;
    config
}

pub fn tune_config(data_dir: &Path, out_dir: &Path, seed: u64, cell: &AblationCell) -> TrainConfig {
    let mut config =
        TrainConfig::tune_defaults(data_dir.to_path_buf(), out_dir.to_path_buf(), seed);
    config.data_fraction = cell.fraction;
    config.learning_rate = cell.tune_lr;
    config.max_steps = Some(cell.tune_steps);
    config.model.projector = cell.projector;
    config
}

/// Full align → diagnose → tune → evaluate pipeline for one cell.
pub fn run_cell(
    data_dir: &Path,
    out_dir: &Path,
    seed: u64,
    cell: &AblationCell,
) -> Result<AblationOutcome, TrainError> {
    let align = pretrain_align(&align_config(data_dir, out_dir, seed, cell))?;
    let last = align.reports.last().expect("alignment ran at least one step");

    let eval_manifest = data_dir.join("eval.jsonl");
    let report = diagnose(&align.model, data_dir, &eval_manifest, None, align.reports.len())?;

    let tune = finetune(&tune_config(data_dir, out_dir, seed, cell), &align.checkpoint)?;
    let metrics = evaluate(&tune.model, data_dir, &eval_manifest, None)?;

    Ok(AblationOutcome {
        align_gen: last.gen_loss,
        align_con: last.con_loss,
        align_cg: last.cg_loss,
        retrieval_i2t: report.image_to_text,
        retrieval_t2i: report.text_to_image,
        mean_contrast: mean_contrast(&report),
        answer_accuracy: metrics.answer_accuracy,
        align_checkpoint: align.checkpoint,
        tune_checkpoint: tune.checkpoint,
    })
}
