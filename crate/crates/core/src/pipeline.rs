//! Training loop: forward, masking losses, SGD with cosine-annealed rate,
//! JSON-lines logging and versioned checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{
    activation_head, activation_head_backward, baseline_bce_loss_and_grad, baseline_logits,
    baseline_logits_backward, ActivationMaps, Gradients, Resampler, TinyCnn, ARCH_TAG,
};
use crate::datamodel::{Image, LabelVector, LossSelection, Objective, PromptBook, TrainConfig};
use crate::error::{shape, validation, ClimsError, Result};
use crate::losses::{self, LossBreakdown, TextBank};
use crate::matcher::Matcher;

/// Parameters, optimizer state and progress counters of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: TinyCnn,
    /// Momentum buffers in [`TinyCnn::param_slices`] order.
    pub velocity: Vec<Vec<f64>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub total_steps: u64,
    /// Shuffling and augmentation for epoch `e` derive from `(seed, e)`.
    pub seed: u64,
    pub config_hash: String,
    pub objective: Objective,
}

impl TrainState {
    pub fn init(config: &TrainConfig, num_classes: usize, dataset_len: usize) -> Self {
        let model = TinyCnn::new(num_classes, config.seed);
        let velocity = model
            .param_slices()
            .iter()
            .map(|s| vec![0.0; s.len()])
            .collect();
        Self {
            model,
            velocity,
            epoch: 0,
            step: 0,
            total_steps: (config.epochs * steps_per_epoch(dataset_len, config.batch_size)) as u64,
            seed: config.seed,
            config_hash: config.hash(),
            objective: config.objective,
        }
    }

    /// SHA-256 over parameter and velocity bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in self.model.param_slices() {
            for v in s {
                h.update(v.to_le_bytes());
            }
        }
        for s in &self.velocity {
            for v in s {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn steps_per_epoch(dataset_len: usize, batch_size: usize) -> usize {
    dataset_len.div_ceil(batch_size.max(1))
}

/// Cosine-annealed learning rate, evaluated per step.
pub fn lr_at(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(validation(format!(
            "step {step} exceeds total {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// `v = momentum * v + g; p -= lr * v + lr * weight_decay * p`.
pub fn apply_sgd(
    params: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v + lr * weight_decay * *p;
    }
}

/// Images already cropped and flipped, with their dataset indices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Vec<Image>,
    pub labels: Vec<LabelVector>,
}

enum StepObjective<'a> {
    Matching(losses::Objective<'a>),
    Classification,
}

/// Loss and parameter gradient of one image.
fn image_gradient(
    model: &TinyCnn,
    image: &Image,
    labels: &LabelVector,
    objective: &StepObjective<'_>,
) -> Result<(LossBreakdown, Gradients)> {
    let (z, cache) = model.forward_train(image)?;
    let (breakdown, dw, dz) = match objective {
        StepObjective::Matching(obj) => {
            let p = activation_head(&z, &model.head)?;
            let rs = Resampler::new((p.height(), p.width()), (image.height(), image.width()));
            let p_up = ActivationMaps(rs.apply(&p.0));
            let (breakdown, _, grad) = obj.image_loss(image, labels, &p_up, true)?;
            let grad_small = rs.adjoint(&grad.expect("gradient requested"));
            let (dw, dz) = activation_head_backward(&z, &model.head, &p, &grad_small)?;
            (breakdown, dw, dz)
        }
        StepObjective::Classification => {
            let logits = baseline_logits(&z, &model.head)?;
            let (loss, gl) = baseline_bce_loss_and_grad(&logits, labels)?;
            let (dw, dz) = baseline_logits_backward(&z, &model.head, &gl)?;
            let breakdown = LossBreakdown {
                otm: 0.0,
                btm: 0.0,
                cbs: 0.0,
                reg: 0.0,
                total: loss,
                areas: Vec::new(),
            };
            (breakdown, dw, dz)
        }
    };
    let mut grads = model.backward(&cache, &dz);
    grads.head = dw;
    Ok((breakdown, grads))
}

/// Batch-mean loss and gradient; per-image work may run in parallel but the
/// reduction is always in batch order.
fn batch_gradient(
    model: &TinyCnn,
    batch: &Batch,
    objective: &StepObjective<'_>,
) -> Result<(LossBreakdown, Gradients)> {
    if batch.images.is_empty() || batch.images.len() != batch.labels.len() {
        return Err(shape("batch is empty or images and labels differ in count"));
    }
    let parts: Vec<(LossBreakdown, Gradients)> = batch
        .images
        .par_iter()
        .zip(batch.labels.par_iter())
        .map(|(img, y)| image_gradient(model, img, y, objective))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = Gradients::zeros_like(model);
    let mut breakdowns = Vec::with_capacity(parts.len());
    for (b, g) in parts {
        sum.add_assign(&g);
        breakdowns.push(b);
    }
    sum.scale(1.0 / batch.images.len() as f64);
    Ok((LossBreakdown::mean(&breakdowns), sum))
}

struct StepContext<'a> {
    objective: StepObjective<'a>,
}

impl<'a> StepContext<'a> {
    fn new(config: &TrainConfig, bank: &'a TextBank, matcher: &'a dyn Matcher) -> Self {
        let objective = match config.objective {
            Objective::Matching(selection) => StepObjective::Matching(losses::Objective {
                matcher,
                bank,
                weights: config.loss_weights,
                selection,
                clamp_epsilon: config.similarity_clamp_epsilon,
            }),
            Objective::Classification => StepObjective::Classification,
        };
        Self { objective }
    }
}

fn step_with(
    state: &mut TrainState,
    batch: &Batch,
    ctx: &StepContext<'_>,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if let Some(img) = batch
        .images
        .iter()
        .find(|i| i.height() != config.crop_size || i.width() != config.crop_size)
    {
        return Err(shape(format!(
            "batch image {}x{} does not match crop size {}",
            img.height(),
            img.width(),
            config.crop_size
        )));
    }
    let lr = lr_at(
        state.step,
        state.total_steps,
        config.effective_learning_rate(),
    )?;
    let (breakdown, grads) = batch_gradient(&state.model, batch, &ctx.objective)?;
    if !breakdown.is_finite() {
        return Err(ClimsError::NonFinite(format!(
            "step {} lr {lr:e} batch indices {:?}: otm {} btm {} cbs {} reg {} total {}",
            state.step,
            batch.indices,
            breakdown.otm,
            breakdown.btm,
            breakdown.cbs,
            breakdown.reg,
            breakdown.total
        )));
    }
    let grad_slices = grads.slices();
    for ((p, v), g) in state
        .model
        .param_slices_mut()
        .into_iter()
        .zip(state.velocity.iter_mut())
        .zip(grad_slices)
    {
        apply_sgd(p, v, g, lr, config.momentum, config.weight_decay);
    }
    state.step += 1;
    Ok(breakdown)
}

fn check_classes(book: &PromptBook, class_names: &[String], state: &TrainState) -> Result<()> {
    if book.class_names() != class_names {
        return Err(validation(format!(
            "dataset classes {class_names:?} differ from prompt book classes {:?}",
            book.class_names()
        )));
    }
    if state.model.num_classes() != class_names.len() {
        return Err(validation(format!(
            "model has {} classes, dataset has {}",
            state.model.num_classes(),
            class_names.len()
        )));
    }
    Ok(())
}

/// One optimizer step on an augmented batch.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    book: &PromptBook,
    matcher: &dyn Matcher,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if let Some(y) = batch
        .labels
        .iter()
        .find(|y| y.num_classes() != book.num_classes())
    {
        return Err(validation(format!(
            "labels have {} classes, prompt book has {}",
            y.num_classes(),
            book.num_classes()
        )));
    }
    let bank = TextBank::new(book, matcher)?;
    let ctx = StepContext::new(config, &bank, matcher);
    step_with(state, batch, &ctx, config)
}

/// Seeded order and augmentation for one epoch.
pub fn epoch_batches(
    images: &[Image],
    labels: &[LabelVector],
    config: &TrainConfig,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let c = config.crop_size;
    order
        .chunks(config.batch_size)
        .map(|idx| {
            let mut batch = Batch {
                indices: idx.to_vec(),
                images: Vec::with_capacity(idx.len()),
                labels: Vec::with_capacity(idx.len()),
            };
            for &i in idx {
                let img = &images[i];
                if img.height() < c || img.width() < c {
                    return Err(validation(format!(
                        "image {i} is {}x{}, smaller than crop size {c}",
                        img.height(),
                        img.width()
                    )));
                }
                let top = rng.gen_range(0..=img.height() - c);
                let left = rng.gen_range(0..=img.width() - c);
                let mut out = img.crop(top, left, c, c)?;
                if rng.gen_bool(0.5) {
                    out = out.flip_horizontal();
                }
                batch.images.push(out);
                batch.labels.push(labels[i].clone());
            }
            Ok(batch)
        })
        .collect()
}

/// Options beyond the config that steer one invocation of [`train`].
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<TrainState>,
    /// Stop once this many epochs are complete; `Some(0)` only writes the
    /// initial checkpoint. The schedule still spans `config.epochs`.
    pub stop_after_epoch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub state: TrainState,
    /// Mean breakdown of each epoch run in this invocation.
    pub epoch_means: Vec<LossBreakdown>,
}

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    step: u64,
    lr: f64,
    otm: f64,
    btm: f64,
    cbs: f64,
    reg: f64,
    total: f64,
    mean_area: f64,
}

pub const LOG_FILE: &str = "train_log.jsonl";

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("epoch-{epoch:03}.ckpt"))
}

/// Thread pool sized by `CLIMS_NUM_WORKERS` when set.
fn worker_pool() -> Result<Option<rayon::ThreadPool>> {
    match std::env::var("CLIMS_NUM_WORKERS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| validation(format!("CLIMS_NUM_WORKERS={v:?} is not a count")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| validation(e.to_string()))?;
            Ok(Some(pool))
        }
        Err(_) => Ok(None),
    }
}

/// Runs the configured epochs, writing a checkpoint after each and one log
/// line per step.
#[allow(clippy::too_many_arguments)]
pub fn train(
    config: &TrainConfig,
    images: &[Image],
    labels: &[LabelVector],
    class_names: &[String],
    book: &PromptBook,
    matcher: &dyn Matcher,
    out_dir: &Path,
    options: TrainOptions,
) -> Result<TrainSummary> {
    config.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(validation(
            "dataset is empty or images and labels differ in count",
        ));
    }
    let state = match options.resume {
        Some(s) => s,
        None => TrainState::init(config, class_names.len(), images.len()),
    };
    check_classes(book, class_names, &state)?;
    let stop = options
        .stop_after_epoch
        .unwrap_or(config.epochs)
        .min(config.epochs);
    match worker_pool()? {
        Some(pool) => {
            pool.install(|| run_epochs(config, images, labels, book, matcher, out_dir, state, stop))
        }
        None => run_epochs(config, images, labels, book, matcher, out_dir, state, stop),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    config: &TrainConfig,
    images: &[Image],
    labels: &[LabelVector],
    book: &PromptBook,
    matcher: &dyn Matcher,
    out_dir: &Path,
    mut state: TrainState,
    stop: usize,
) -> Result<TrainSummary> {
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| ClimsError::io(&ckpt_dir, e))?;
    let bank = TextBank::new(book, matcher)?;
    let ctx = StepContext::new(config, &bank, matcher);
    let log_path = out_dir.join(LOG_FILE);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| ClimsError::io(&log_path, e))?;
    let mut checkpoint = checkpoint_path(out_dir, state.epoch);
    if state.epoch == 0 {
        save_checkpoint(&state, &checkpoint)?;
    }
    let mut epoch_means = Vec::new();
    while state.epoch < stop {
        let batches = epoch_batches(images, labels, config, state.seed, state.epoch)?;
        let mut parts = Vec::with_capacity(batches.len());
        for batch in &batches {
            let lr = lr_at(
                state.step,
                state.total_steps,
                config.effective_learning_rate(),
            )?;
            let b = step_with(&mut state, batch, &ctx, config)?;
            let line = LogLine {
                epoch: state.epoch,
                step: state.step,
                lr,
                otm: b.otm,
                btm: b.btm,
                cbs: b.cbs,
                reg: b.reg,
                total: b.total,
                mean_area: b.mean_area(),
            };
            writeln!(log, "{}", serde_json::to_string(&line)?)
                .map_err(|e| ClimsError::io(&log_path, e))?;
            parts.push(b);
        }
        state.epoch += 1;
        epoch_means.push(LossBreakdown::mean(&parts));
        checkpoint = checkpoint_path(out_dir, state.epoch);
        save_checkpoint(&state, &checkpoint)?;
    }
    Ok(TrainSummary {
        checkpoint,
        state,
        epoch_means,
    })
}

const MAGIC: &[u8; 8] = b"CLIMSCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: String,
    config_hash: String,
    objective: Vec<String>,
    epoch: usize,
    step: u64,
    total_steps: u64,
    seed: u64,
    shapes: Vec<Vec<usize>>,
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> ClimsError {
    ClimsError::Format(format!("{}: {msg}", path.display()))
}

/// Layout: magic, `u32` version, `u64` header length, JSON header, then
/// parameters and velocities as little-endian `f64`.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        arch: ARCH_TAG.to_owned(),
        config_hash: state.config_hash.clone(),
        objective: state
            .objective
            .names()
            .into_iter()
            .map(str::to_owned)
            .collect(),
        epoch: state.epoch,
        step: state.step,
        total_steps: state.total_steps,
        seed: state.seed,
        shapes: state.model.param_shapes(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for s in state.model.param_slices() {
        for v in s {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for s in &state.velocity {
        for v in s {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| ClimsError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ClimsError::io(path, e))
}

#[derive(Clone, Debug)]
pub struct LoadedCheckpoint {
    pub state: TrainState,
    pub warnings: Vec<String>,
}

/// Reads a checkpoint. A config hash differing from `expected_config_hash`
/// is reported as a warning, not an error.
pub fn load_checkpoint(
    path: &Path,
    expected_config_hash: Option<&str>,
) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| ClimsError::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "not a checkpoint (bad magic bytes)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(format_err(
            path,
            format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20usize.saturating_add(hlen))
        .ok_or_else(|| format_err(path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)
        .map_err(|e| format_err(path, format!("corrupt header: {e}")))?;
    if header.arch != ARCH_TAG {
        return Err(format_err(
            path,
            format!("architecture {:?}, expected {ARCH_TAG:?}", header.arch),
        ));
    }
    let counts: Vec<usize> = header.shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = counts.iter().sum();
    let data = &bytes[20 + hlen..];
    if data.len() != 2 * total * 8 {
        return Err(format_err(
            path,
            format!(
                "expected {} payload bytes, found {}",
                2 * total * 8,
                data.len()
            ),
        ));
    }
    let mut floats = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |n: usize| -> Vec<f64> { floats.by_ref().take(n).collect() };
    let params: Vec<Vec<f64>> = counts.iter().map(|&n| take(n)).collect();
    let velocity: Vec<Vec<f64>> = counts.iter().map(|&n| take(n)).collect();
    let model = TinyCnn::from_params(&header.shapes, params)?;
    let objective = Objective::parse(&header.objective)
        .map_err(|e| format_err(path, format!("objective: {e}")))?;
    let mut warnings = Vec::new();
    if let Some(expected) = expected_config_hash {
        if expected != header.config_hash {
            warnings.push(format!(
                "{}: config hash {} differs from current config {}",
                path.display(),
                header.config_hash,
                expected
            ));
        }
    }
    Ok(LoadedCheckpoint {
        state: TrainState {
            model,
            velocity,
            epoch: header.epoch,
            step: header.step,
            total_steps: header.total_steps,
            seed: header.seed,
            config_hash: header.config_hash,
            objective,
        },
        warnings,
    })
}

/// Losses selected by a matching objective; `None` for the baseline.
pub fn selection_of(objective: &Objective) -> Option<LossSelection> {
    match objective {
        Objective::Matching(s) => Some(*s),
        Objective::Classification => None,
    }
}
