//! Optimization: soft-Dice training with Adam and plateau halving, and
//! self-supervised pre-training followed by full fine-tuning.

mod adam;
mod gradcheck;
mod sampling;
mod scheduler;

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use gradcheck::{check_model_gradients, ModelGradCheck};
pub use sampling::{
    center_patch, make_denoising_example, make_inpainting_example, noise_variance, sample_training_block,
    BlockSampler,
};
pub use scheduler::{lr_schedule, PlateauScheduler};

use crate::data::LoadedVolume;
use crate::error::{Error, Result};
use crate::losses::{mse_loss, one_hot, soft_dice, DICE_EPS};
use crate::model::{checkpoint, init_pretraining_head, init_segmentation_head, network, Model, ModelWeights, Weights};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainTask {
    #[default]
    None,
    Denoising,
    Inpainting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs of segmentation training.
    pub max_epochs: usize,
    /// Epochs of the pre-training phase; defaults to `max_epochs`.
    pub pretrain_epochs: Option<usize>,
    /// Blocks drawn per epoch; an epoch is `ceil(blocks_per_epoch / batch_size)` steps.
    pub blocks_per_epoch: usize,
    /// Size of the fixed validation block set.
    pub val_blocks: usize,
    pub seed: u64,
    pub snr_db: f64,
    pub pretrain_task: PretrainTask,
    /// Fraction of blocks forced to contain foreground in their center patch.
    pub fg_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            batch_size: 10,
            lr: 1e-4,
            max_epochs: 20,
            pretrain_epochs: None,
            blocks_per_epoch: 200,
            val_blocks: 20,
            seed: 0,
            snr_db: 10.0,
            pretrain_task: PretrainTask::None,
            fg_fraction: 0.5,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        // lr = 0 is allowed: it freezes the parameters.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !self.snr_db.is_finite() {
            return fail(format!("snr_db must be finite, got {}", self.snr_db));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return fail(format!("fg_fraction must be in [0, 1], got {}", self.fg_fraction));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return fail("Adam betas must be in [0, 1) and eps positive".into());
        }
        if self.blocks_per_epoch == 0 || self.val_blocks == 0 {
            return fail("blocks_per_epoch and val_blocks must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.blocks_per_epoch.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub best: Model,
    /// Weights after the last epoch.
    pub last: Model,
    pub best_epoch: usize,
    pub stats: Vec<EpochStats>,
    /// Mini-batch loss of every optimization step, in order.
    pub step_losses: Vec<f64>,
    /// Validation loss before the first step.
    pub initial_val_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Objective {
    Segmentation,
    Reconstruction(PretrainTask),
}

enum Target {
    Labels(Vec<u8>),
    Patch(Tensor),
}

struct Example {
    input: Tensor,
    target: Target,
}

fn samplers(volumes: &[LoadedVolume], model: &Model, objective: Objective) -> Result<Vec<BlockSampler>> {
    volumes
        .iter()
        .map(|v| {
            let mask = match objective {
                Objective::Segmentation => Some(v.labeled_mask()?),
                Objective::Reconstruction(_) => None,
            };
            if let Some(m) = mask {
                m.check_classes(model.hp.classes)?;
            }
            BlockSampler::new(&v.image, mask, &model.hp)
        })
        .collect()
}

fn draw_example<R: Rng>(
    sampler: &BlockSampler,
    model: &Model,
    objective: Objective,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Example> {
    Ok(match objective {
        Objective::Segmentation => {
            let (block, labels) = sampler.sample(rng, cfg.fg_fraction);
            Example {
                input: block,
                target: Target::Labels(labels.expect("segmentation samplers carry labels")),
            }
        }
        Objective::Reconstruction(task) => {
            let (block, _) = sampler.sample(rng, 0.0);
            let (input, target) = match task {
                PretrainTask::Denoising => make_denoising_example(&block, &model.hp, cfg.snr_db, rng)?,
                PretrainTask::Inpainting => make_inpainting_example(&block, &model.hp)?,
                PretrainTask::None => return Err(Error::Config("reconstruction needs a pre-training task".into())),
            };
            Example {
                input,
                target: Target::Patch(target),
            }
        }
    })
}

/// Records the forward pass of one example. Weights enter as parameters
/// (tracked) or inputs (untracked).
fn forward<'w>(model: &'w Model, tape: &mut Tape<'w>, ex: &Example, track: bool) -> Result<(Weights<Var>, Var)> {
    let vars = model
        .weights
        .map(|_, t| if track { tape.param(t) } else { tape.input(t) });
    let enc = network::encode_block(tape, &ex.input, &vars, &model.hp)?;
    let out = match ex.target {
        Target::Labels(_) => {
            let head = vars
                .seg_head
                .clone()
                .ok_or_else(|| Error::Config("model has no segmentation head".into()))?;
            let y = network::segmentation_head(tape, enc.tokens, &head, &model.hp)?;
            network::center_probabilities(tape, y, &model.hp)?
        }
        Target::Patch(ref target) => {
            let head = vars
                .pretrain_head
                .clone()
                .ok_or_else(|| Error::Config("model has no pre-training head".into()))?;
            let y = network::pretraining_head(tape, enc.tokens, &head, &model.hp)?;
            mse_loss(tape, y, target)?
        }
    };
    Ok((vars, out))
}

fn sum_gradients(mut parts: Vec<ModelWeights>) -> ModelWeights {
    let mut total = parts.remove(0);
    for p in &parts {
        total = total.zip_map(p, |_, a, b| {
            let mut s = a.clone();
            s.add_assign(b);
            s
        });
    }
    total
}

/// Batch loss and, when `grads` is set, its gradient with respect to every
/// weight tensor. Segmentation uses one soft Dice over all center-patch
/// voxels of the batch; reconstruction averages per-block squared error.
fn batch_loss(model: &Model, batch: &[Example], grads: bool) -> Result<(f64, Option<ModelWeights>)> {
    let passes: Vec<(Tape<'_>, Weights<Var>, Var)> = batch
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let (vars, out) = forward(model, &mut tape, ex, grads)?;
            Ok((tape, vars, out))
        })
        .collect::<Result<_>>()?;
    let b = batch.len();

    let (loss, seeds): (f64, Vec<Tensor>) = match batch[0].target {
        Target::Labels(_) => {
            let classes = model.hp.classes;
            let mut probs = Vec::new();
            let mut labels = Vec::new();
            for ((tape, _, out), ex) in passes.iter().zip(batch) {
                probs.extend_from_slice(tape.value(*out).data());
                if let Target::Labels(l) = &ex.target {
                    labels.extend_from_slice(l);
                }
            }
            let target = one_hot(&labels, classes)?;
            let (loss, grad) = soft_dice(&probs, target.data(), classes, DICE_EPS)?;
            let per = probs.len() / b;
            let seeds = grad
                .chunks(per)
                .map(|g| Tensor::from_parts(vec![per / classes, classes], g.to_vec()))
                .collect();
            (loss, seeds)
        }
        Target::Patch(_) => {
            let loss = passes.iter().map(|(t, _, out)| t.value(*out).data()[0]).sum::<f64>() / b as f64;
            (loss, vec![Tensor::scalar(1.0 / b as f64); b])
        }
    };
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("loss became {loss}")));
    }
    if !grads {
        return Ok((loss, None));
    }
    let parts: Vec<ModelWeights> = passes
        .par_iter()
        .zip(seeds)
        .map(|((tape, vars, out), seed)| {
            let g = tape.backward_from(*out, seed)?;
            Ok(vars.map(|_, v| g.get_or_zeros(tape, *v)))
        })
        .collect::<Result<_>>()?;
    Ok((loss, Some(sum_gradients(parts))))
}

fn validation_loss(model: &Model, val: &[Example], batch_size: usize) -> Result<f64> {
    let losses = val
        .chunks(batch_size)
        .map(|chunk| batch_loss(model, chunk, false).map(|(l, _)| l))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn append_stats(path: &Path, stats: &EpochStats) -> Result<()> {
    let fresh = !path.exists() || path.metadata().map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(stats)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Where a training phase writes its epoch log and best checkpoint.
#[derive(Clone, Debug)]
pub struct PhaseOutput {
    pub stats_csv: PathBuf,
    pub checkpoint: PathBuf,
}

impl PhaseOutput {
    pub fn in_dir(dir: &Path, prefix: &str) -> Self {
        PhaseOutput {
            stats_csv: dir.join(format!("{prefix}epochs.csv")),
            checkpoint: dir.join(format!("{prefix}best.atsg")),
        }
    }
}

fn run_phase(
    mut model: Model,
    train: &[LoadedVolume],
    val: &[LoadedVolume],
    cfg: &TrainConfig,
    objective: Objective,
    epochs: usize,
    out: Option<&PhaseOutput>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs at least one training and one validation volume (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    let train_samplers = samplers(train, &model, objective)?;
    let val_samplers = samplers(val, &model, objective)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let val_set = (0..cfg.val_blocks)
        .map(|i| draw_example(&val_samplers[i % val_samplers.len()], &model, objective, cfg, &mut val_rng))
        .collect::<Result<Vec<_>>>()?;

    let diverged = |e: Error| -> Error {
        if !e.is_numeric() {
            return e;
        }
        let saved = out
            .filter(|o| o.checkpoint.exists())
            .map_or_else(|| "no checkpoint saved".to_string(), |o| format!("last good checkpoint: {}", o.checkpoint.display()));
        Error::Diverged(format!("{e}; {saved}"))
    };

    let initial_val_loss = validation_loss(&model, &val_set, cfg.batch_size).map_err(diverged)?;
    let mut state = AdamState::new(&model.weights);
    let mut scheduler = PlateauScheduler::new(cfg.lr);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut stats = Vec::with_capacity(epochs);
    let mut step_losses = Vec::new();
    let adam = cfg.adam();

    for epoch in 1..=epochs {
        let lr = scheduler.lr();
        let mut epoch_loss = 0.0;
        for _ in 0..cfg.steps_per_epoch() {
            let batch = (0..cfg.batch_size)
                .map(|_| {
                    let v = rng.random_range(0..train_samplers.len());
                    draw_example(&train_samplers[v], &model, objective, cfg, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = batch_loss(&model, &batch, true).map_err(diverged)?;
            adam_step(&mut model.weights, &grads.expect("requested"), &mut state, lr, &adam).map_err(diverged)?;
            step_losses.push(loss);
            epoch_loss += loss;
        }
        let val_loss = validation_loss(&model, &val_set, cfg.batch_size).map_err(diverged)?;
        let record = EpochStats {
            epoch,
            train_loss: epoch_loss / cfg.steps_per_epoch() as f64,
            val_loss,
            lr,
        };
        log::info!(
            "epoch {epoch}: train {:.6} val {:.6} lr {:.3e}",
            record.train_loss,
            record.val_loss,
            lr
        );
        if scheduler.step(val_loss) {
            best = model.clone();
            best_epoch = epoch;
            if let Some(o) = out {
                checkpoint::save(&o.checkpoint, &best)?;
            }
        }
        if let Some(o) = out {
            append_stats(&o.stats_csv, &record)?;
        }
        stats.push(record);
    }
    if epochs == 0 {
        if let Some(o) = out {
            checkpoint::save(&o.checkpoint, &best)?;
        }
    }
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch,
        stats,
        step_losses,
        initial_val_loss,
    })
}

/// Trains `model` for segmentation with soft Dice. The returned `best` model
/// is the one with the lowest validation loss.
pub fn train(
    model: Model,
    train: &[LoadedVolume],
    val: &[LoadedVolume],
    cfg: &TrainConfig,
    out: Option<&PhaseOutput>,
) -> Result<TrainOutcome> {
    if model.weights.seg_head.is_none() {
        return Err(Error::Config("model has no segmentation head".into()));
    }
    run_phase(model, train, val, cfg, Objective::Segmentation, cfg.max_epochs, out)
}

/// Self-supervised phase only: encoder plus a fresh pre-training head,
/// trained on squared error. The segmentation head is removed.
pub fn pretrain(
    mut model: Model,
    unlabeled: &[LoadedVolume],
    val: &[LoadedVolume],
    cfg: &TrainConfig,
    out: Option<&PhaseOutput>,
) -> Result<TrainOutcome> {
    if cfg.pretrain_task == PretrainTask::None {
        return Err(Error::Config("pre-training needs pretrain_task = denoising or inpainting".into()));
    }
    model.weights.seg_head = None;
    if model.weights.pretrain_head.is_none() {
        model.weights.pretrain_head = Some(init_pretraining_head(&model.hp, cfg.seed ^ 0x0050_5245));
    }
    let epochs = cfg.pretrain_epochs.unwrap_or(cfg.max_epochs);
    run_phase(
        model,
        unlabeled,
        val,
        cfg,
        Objective::Reconstruction(cfg.pretrain_task),
        epochs,
        out,
    )
}

/// Replaces any pre-training head by a freshly initialized segmentation head.
pub fn attach_segmentation_head(mut model: Model, seed: u64) -> Model {
    model.weights.pretrain_head = None;
    model.weights.seg_head = Some(init_segmentation_head(&model.hp, seed));
    model
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub pretrain: TrainOutcome,
    pub finetune: TrainOutcome,
}

/// Pre-trains on `unlabeled`, then fine-tunes every parameter on the labeled
/// volumes with a new segmentation head, fresh optimizer state and the
/// initial learning rate. Pre-training validation uses the images of `val`.
pub fn pretrain_then_finetune(
    model: Model,
    unlabeled: &[LoadedVolume],
    train_set: &[LoadedVolume],
    val: &[LoadedVolume],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    let phase1 = out_dir.map(|d| PhaseOutput::in_dir(d, "pretrain_"));
    let phase2 = out_dir.map(|d| PhaseOutput::in_dir(d, ""));
    let pre = pretrain(model, unlabeled, val, cfg, phase1.as_ref())?;
    let start = attach_segmentation_head(pre.best.clone(), cfg.seed ^ 0x0053_4547);
    let fine = train(start, train_set, val, cfg, phase2.as_ref())?;
    Ok(PretrainOutcome {
        pretrain: pre,
        finetune: fine,
    })
}
