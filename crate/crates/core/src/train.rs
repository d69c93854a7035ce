//! Training orchestration: stage-1 alignment, stage-2 instruction
//! tuning, and evaluation. Runs are single-threaded and fully seeded,
//! so identical configs produce bit-identical checkpoints and metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::config::{ConfigError, Objective, TrainConfig};
use crate::data::{load_record_image, DataError, DatasetManifest, SampleRecord};
use crate::diagnostics::{retrieval_accuracy, DiagnosticsError};
use crate::instruct::{
    greedy_decode, pack_dialogue, DialogueError, DialogueTurn, PackedDialogue,
};
use crate::lm::TokenSequence;
use crate::model::{ModelVars, Stage, VlmModel};
use crate::objectives::{cg_loss, pool_descriptor, similarity_matrix, AlignSample};
use crate::optim::{clip_global_norm, Adam, AdamHyper};
use crate::schedule::lr_schedule;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::vision::VisionError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("text error: {0}")]
    Text(#[from] crate::lm::TextError),
    #[error("empty dataset at {0}")]
    EmptyDataset(PathBuf),
}

type Result<T> = std::result::Result<T, TrainError>;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

/// Loads the pretraining pool: cached frozen patch features plus
/// tokenized captions.
pub fn load_align_samples(model: &VlmModel, config: &TrainConfig) -> Result<Vec<AlignSample>> {
    let path = config.data_dir.join("pretrain.jsonl");
    if !path.exists() {
        return Err(ConfigError::MissingManifest(path).into());
    }
    let manifest = DatasetManifest::load(&path, "pretrain", 1.0, config.seed)?;
    if manifest.records.is_empty() {
        return Err(TrainError::EmptyDataset(path));
    }
    let mut samples = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let image = load_record_image(&config.data_dir, record)?;
        let caption_text = record.caption.clone().unwrap_or_default();
        samples.push(AlignSample {
            features: model.encode_image(&image)?,
            caption: TokenSequence::caption(&caption_text)?,
            has_image: record.image.is_some(),
        });
    }
    Ok(samples)
}

/// One instruction-tuning sample with cached features.
pub struct TuneSample {
    pub features: Tensor,
    pub packed: PackedDialogue,
}

pub fn load_tune_samples(
    model: &VlmModel,
    data_dir: &Path,
    manifest_path: &Path,
    seed: u64,
) -> Result<Vec<TuneSample>> {
    if !manifest_path.exists() {
        return Err(ConfigError::MissingManifest(manifest_path.to_path_buf()).into());
    }
    let manifest = DatasetManifest::load(manifest_path, "instruct", 1.0, seed)?;
    if manifest.records.is_empty() {
        return Err(TrainError::EmptyDataset(manifest_path.to_path_buf()));
    }
    let mut samples = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let image = load_record_image(data_dir, record)?;
        let turns: Vec<DialogueTurn> = record.turns.iter().map(|t| t.to_turn()).collect();
        samples.push(TuneSample {
            features: model.encode_image(&image)?,
            packed: pack_dialogue(&turns)?,
        });
    }
    Ok(samples)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
    order.shuffle(&mut rng);
    order
}

/// Pulls clipped gradients for every stage-trainable parameter.
fn collect_grads(tape: &Tape, vars: &ModelVars, stage: Stage, clip: f64) -> Vec<(String, Tensor)> {
    let mut grads: Vec<(String, Tensor)> = Vec::new();
    vars.visit(&mut |name, v| {
        if VlmModel::is_trainable(name, stage) {
            let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(v.shape()));
            grads.push((name.to_string(), g));
        }
    });
    clip_global_norm(&mut grads, clip);
    grads
}

pub struct AlignRunResult {
    pub model: VlmModel,
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub reports: Vec<crate::objectives::AlignmentLossReport>,
}

/// Stage 1: trains the projector and the temperature against the
/// configured objective for `epochs` passes (or `max_steps` steps)
/// over the pretraining pool.
pub fn pretrain_align(config: &TrainConfig) -> Result<AlignRunResult> {
    ensure_dir(&config.out_dir)?;
    let mut model = VlmModel::init(config.seed, config.model.clone());
    let samples = load_align_samples(&model, config)?;
    let steps_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = config.max_steps.unwrap_or(config.epochs * steps_per_epoch).max(1);

    let mut opt = Adam::new(AdamHyper::default());
    let mut reports = Vec::with_capacity(total_steps);
    let mut csv = String::from("step,gen_loss,con_loss,cg_loss,tau,alpha,con_literal\n");

    let mut step = 0usize;
    'training: for epoch in 0.. {
        if step >= total_steps {
            break;
        }
        let order = epoch_order(samples.len(), config.seed, epoch);
        for chunk in order.chunks(config.batch_size) {
            if step >= total_steps {
                break 'training;
            }
            let batch: Vec<AlignSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let tape = Tape::new();
            let vars = model.bind(&tape, Stage::Align);
            let (terms, report) =
                cg_loss(&tape, &vars, &batch, config.alpha, config.symmetric_contrastive)?;
            let root = match config.objective {
                Objective::Cg => &terms.cg,
                Objective::Gen => &terms.gen,
                Objective::Con => &terms.con,
            };
            tape.backward(root)?;
            let grads = collect_grads(&tape, &vars, Stage::Align, config.grad_clip);
            let lr = lr_schedule(step, total_steps, config.learning_rate, config.warmup_ratio);
            update_params(&mut model, &mut opt, &grads, Stage::Align, lr);
            model.clamp_tau();

            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                step,
                report.gen_loss,
                report.con_loss,
                report.cg_loss,
                report.tau,
                report.alpha,
                report.con_literal
            ));
            reports.push(report);
            step += 1;
        }
    }

    let checkpoint = config.out_dir.join("align.ckpt");
    save_checkpoint(&checkpoint, &model, &opt.state, config, step)?;
    let metrics_csv = config.out_dir.join("align_metrics.csv");
    write_file(&metrics_csv, &csv)?;
    Ok(AlignRunResult { model, checkpoint, metrics_csv, reports })
}

fn update_params(
    model: &mut VlmModel,
    opt: &mut Adam,
    grads: &[(String, Tensor)],
    stage: Stage,
    lr: f64,
) {
    let gmap: BTreeMap<&str, &Tensor> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
    opt.begin_step();
    // The optimizer is disjoint from the model, so updating inside the
    // visitor closure is a clean split borrow.
    let opt_cell = std::cell::RefCell::new(opt);
    model.visit_mut(&mut |name, t| {
        if VlmModel::is_trainable(name, stage) {
            if let Some(g) = gmap.get(name) {
                opt_cell.borrow_mut().update(lr, name, t, g);
            }
        }
    });
}

pub struct TuneRunResult {
    pub model: VlmModel,
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub losses: Vec<f64>,
}

/// Stage 2: restores a stage-1 checkpoint and tunes the projector plus
/// the language model on the configured instruction fraction.
pub fn finetune(config: &TrainConfig, init_checkpoint: &Path) -> Result<TuneRunResult> {
    ensure_dir(&config.out_dir)?;
    let loaded = load_checkpoint(init_checkpoint)?;
    if loaded.stage() != Stage::Align {
        return Err(ConfigError::StageMismatch { expected: Stage::Align, found: loaded.stage() }
            .into());
    }
    let mut model = loaded.restore_model()?;
    let manifest_path = config.instruct_manifest()?;
    let samples = load_tune_samples(&model, &config.data_dir, &manifest_path, config.seed)?;
    let steps_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = config.max_steps.unwrap_or(config.epochs * steps_per_epoch).max(1);

    // Fresh optimizer: stage 2 trains a different parameter set.
    let mut opt = Adam::new(AdamHyper::default());
    let mut losses = Vec::with_capacity(total_steps);
    let mut csv = String::from("step,tune_loss,lr\n");

    let mut step = 0usize;
    'training: for epoch in 0.. {
        if step >= total_steps {
            break;
        }
        let order = epoch_order(samples.len(), config.seed.wrapping_add(1), epoch);
        for chunk in order.chunks(config.batch_size) {
            if step >= total_steps {
                break 'training;
            }
            let tape = Tape::new();
            let vars = model.bind(&tape, Stage::Tune);
            let mut loss_sum: Option<crate::tensor::Var> = None;
            for &i in chunk {
                let sample = &samples[i];
                let l = crate::instruct::tune_loss(&vars, &tape, &sample.features, &sample.packed)?;
                loss_sum = Some(match loss_sum {
                    Some(acc) => acc.add(&l)?,
                    None => l,
                });
            }
            let loss = loss_sum.expect("non-empty chunk").scale(1.0 / chunk.len() as f64);
            tape.backward(&loss)?;
            let grads = collect_grads(&tape, &vars, Stage::Tune, config.grad_clip);
            let lr = lr_schedule(step, total_steps, config.learning_rate, config.warmup_ratio);
            update_params(&mut model, &mut opt, &grads, Stage::Tune, lr);

            csv.push_str(&format!("{},{},{}\n", step, loss.item(), lr));
            losses.push(loss.item());
            step += 1;
        }
    }

    let checkpoint = config.out_dir.join("tune.ckpt");
    save_checkpoint(&checkpoint, &model, &opt.state, config, step)?;
    let metrics_csv = config.out_dir.join("tune_metrics.csv");
    write_file(&metrics_csv, &csv)?;
    Ok(TuneRunResult { model, checkpoint, metrics_csv, losses })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    /// Exact-match accuracy of greedy-decoded answers over all turns.
    pub answer_accuracy: f64,
    pub correct_turns: usize,
    pub total_turns: usize,
    /// In-batch retrieval top-1 over full batches of the eval pool.
    pub retrieval_i2t: f64,
    pub retrieval_t2i: f64,
    pub retrieval_batches: usize,
}

pub const RETRIEVAL_BATCH: usize = 32;

/// Exact-match answer accuracy and in-batch retrieval metrics over an
/// eval manifest. When `out_dir` is given, decoded transcripts land in
/// `transcripts.txt` and the metrics in `eval_metrics.csv`.
pub fn evaluate(
    model: &VlmModel,
    data_dir: &Path,
    manifest_path: &Path,
    out_dir: Option<&Path>,
) -> Result<EvalMetrics> {
    let manifest = DatasetManifest::load(manifest_path, "eval", 1.0, 0)?;
    if manifest.records.is_empty() {
        return Err(TrainError::EmptyDataset(manifest_path.to_path_buf()));
    }

    let mut transcript = String::new();
    let mut correct = 0usize;
    let mut total = 0usize;
    for record in &manifest.records {
        if record.turns.is_empty() {
            continue;
        }
        let image = load_record_image(data_dir, record)?;
        let features = model.encode_image(&image)?;
        let tape = Tape::new();
        let vars = model.bind(&tape, Stage::Tune);
        let mut history: Vec<DialogueTurn> = Vec::new();
        for turn in &record.turns {
            let gold = turn.to_turn();
            let predicted = greedy_decode(&vars, &tape, &features, &history, &gold.query)?;
            let hit = predicted == gold.response;
            correct += hit as usize;
            total += 1;
            transcript.push_str(&format!(
                "id {} | q: {} | gold: {} | pred: {} | {}\n",
                record.id,
                gold.query,
                gold.response,
                predicted,
                if hit { "ok" } else { "miss" }
            ));
            history.push(gold);
        }
    }

    let (i2t, t2i, batches) = eval_retrieval(model, data_dir, &manifest.records)?;

    let metrics = EvalMetrics {
        answer_accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        correct_turns: correct,
        total_turns: total,
        retrieval_i2t: i2t,
        retrieval_t2i: t2i,
        retrieval_batches: batches,
    };

    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        write_file(&dir.join("transcripts.txt"), &transcript)?;
        let csv = format!(
            "answer_accuracy,correct_turns,total_turns,retrieval_i2t,retrieval_t2i,retrieval_batches\n{},{},{},{},{},{}\n",
            metrics.answer_accuracy,
            metrics.correct_turns,
            metrics.total_turns,
            metrics.retrieval_i2t,
            metrics.retrieval_t2i,
            metrics.retrieval_batches
        );
        write_file(&dir.join("eval_metrics.csv"), &csv)?;
    }
    Ok(metrics)
}

/// Mean contrast score over every object concept of one record: for
/// each scene object, the caption columns spelling its color and shape
/// words are scored against the object's patch and averaged.
fn record_concept_contrasts(
    model: &VlmModel,
    data_dir: &Path,
    record: &SampleRecord,
) -> Result<Option<(crate::diagnostics::SimilarityMap, Vec<(String, f64)>)>> {
    let (Some(scene), Some(caption)) = (&record.scene, &record.caption) else {
        return Ok(None);
    };
    let image = load_record_image(data_dir, record)?;
    let features = model.encode_image(&image)?;
    let tape = Tape::new();
    let vars = model.bind(&tape, Stage::Align);
    let z = vars.project_features(&tape, &features)?.value();

    let tokens = TokenSequence::caption(caption)?;
    let content = tokens.content_positions();
    let embeddings = vars.lm.embed_tokens(tokens.ids())?.value();
    let labels: Vec<String> = content
        .iter()
        .map(|&pos| crate::lm::decode_text(&[tokens.ids()[pos]]))
        .collect();
    let grid = (model.config.image_h / model.config.encoder.patch_size,
                model.config.image_w / model.config.encoder.patch_size);
    let map = crate::diagnostics::similarity_map(&z, &embeddings, &content, grid, labels)?;

    // Caption bytes are exactly the content tokens, in order, so a
    // byte offset in the caption text is a column in the map.
    let mut contrasts = Vec::new();
    for object in scene.objects() {
        let phrase = format!("{} {}", object.color.word(), object.shape.word());
        let Some(start) = caption.find(&phrase) else {
            continue;
        };
        let columns: Vec<usize> = (start..start + phrase.len())
            .filter(|&i| caption.as_bytes()[i] != b' ')
            .collect();
        let mut sum = 0.0;
        for &col in &columns {
            sum += crate::diagnostics::contrast_score(&map, col, &[object.cell])?;
        }
        contrasts.push((phrase, sum / columns.len() as f64));
    }
    Ok(Some((map, contrasts)))
}

/// Alignment diagnostics over an eval manifest: retrieval, similarity
/// margins, per-concept contrast scores, and PGM similarity maps for
/// the first few scenes. Files land in `out_dir` when given.
pub fn diagnose(
    model: &VlmModel,
    data_dir: &Path,
    manifest_path: &Path,
    out_dir: Option<&Path>,
    step: usize,
) -> Result<crate::diagnostics::AlignmentReport> {
    let manifest = DatasetManifest::load(manifest_path, "eval", 1.0, 0)?;
    let (i2t, t2i, _) = eval_retrieval(model, data_dir, &manifest.records)?;

    // Mean margin over the first retrieval batch.
    let paired: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| r.image.is_some() && r.caption.is_some())
        .collect();
    let mean_margin = if paired.len() >= 2 {
        let take = paired.len().min(RETRIEVAL_BATCH);
        let tape = Tape::new();
        let vars = model.bind(&tape, Stage::Align);
        let tau = vars.tau();
        let mut descriptors = Vec::new();
        let mut captions = Vec::new();
        for record in &paired[..take] {
            let image = load_record_image(data_dir, record)?;
            let features = model.encode_image(&image)?;
            let z = vars.project_features(&tape, &features)?;
            descriptors.push(pool_descriptor(&z)?);
            let tokens = TokenSequence::caption(record.caption.as_deref().unwrap_or_default())?;
            let embeddings = vars.lm.embed_tokens(tokens.ids())?;
            captions.push((embeddings, tokens.content_positions()));
        }
        let s = similarity_matrix(&descriptors, &captions, &tau)?.value();
        crate::diagnostics::mean_diagonal_margin(&s)?
    } else {
        0.0
    };

    let mut concept_contrast = Vec::new();
    let mut maps = Vec::new();
    for record in &manifest.records {
        if let Some((map, contrasts)) = record_concept_contrasts(model, data_dir, record)? {
            if maps.len() < 8 {
                maps.push((format!("{:05}", record.id), map));
            }
            concept_contrast.extend(contrasts);
        }
        if concept_contrast.len() >= 96 {
            break;
        }
    }

    let report = crate::diagnostics::AlignmentReport {
        step,
        image_to_text: i2t,
        text_to_image: t2i,
        mean_margin,
        concept_contrast,
    };
    if let Some(dir) = out_dir {
        crate::diagnostics::emit_report(std::slice::from_ref(&report), &maps, dir)?;
    }
    Ok(report)
}

/// Mean of the per-concept contrast scores in a report.
pub fn mean_contrast(report: &crate::diagnostics::AlignmentReport) -> f64 {
    if report.concept_contrast.is_empty() {
        return 0.0;
    }
    report.concept_contrast.iter().map(|(_, v)| v).sum::<f64>()
        / report.concept_contrast.len() as f64
}

/// In-batch retrieval over consecutive full batches of image-bearing
/// eval records, averaged. Partial trailing batches are dropped so the
/// metric is comparable across runs.
pub fn eval_retrieval(
    model: &VlmModel,
    data_dir: &Path,
    records: &[SampleRecord],
) -> Result<(f64, f64, usize)> {
    let paired: Vec<&SampleRecord> = records
        .iter()
        .filter(|r| r.image.is_some() && r.caption.is_some())
        .collect();
    let mut i2t_sum = 0.0;
    let mut t2i_sum = 0.0;
    let mut batches = 0usize;
    for chunk in paired.chunks(RETRIEVAL_BATCH) {
        if chunk.len() < RETRIEVAL_BATCH {
            break;
        }
        let tape = Tape::new();
        let vars = model.bind(&tape, Stage::Align);
        let tau = vars.tau();
        let mut descriptors = Vec::with_capacity(chunk.len());
        let mut captions = Vec::with_capacity(chunk.len());
        for record in chunk {
            let image = load_record_image(data_dir, record)?;
            let features = model.encode_image(&image)?;
            let z = vars.project_features(&tape, &features)?;
            descriptors.push(pool_descriptor(&z)?);
            let tokens = TokenSequence::caption(record.caption.as_deref().unwrap_or_default())?;
            let embeddings = vars.lm.embed_tokens(tokens.ids())?;
            captions.push((embeddings, tokens.content_positions()));
        }
        let s = similarity_matrix(&descriptors, &captions, &tau)?.value();
        let (i2t, t2i) = retrieval_accuracy(&s)?;
        i2t_sum += i2t;
        t2i_sum += t2i;
        batches += 1;
    }
    if batches == 0 {
        return Ok((0.0, 0.0, 0));
    }
    Ok((i2t_sum / batches as f64, t2i_sum / batches as f64, batches))
}
