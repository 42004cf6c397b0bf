//! Training loop: class-weighted loss with L2 penalty, plateau decay, early
//! stopping, per-epoch checkpoints with best-5 retention, and checkpoint
//! averaging with batch-norm re-estimation.

pub mod checkpoint;
pub mod grid;
pub mod scheduler;

use std::time::Instant;

use crate::adam::{adam_step, AdamState};
use crate::data::augment::AugmentConfig;
use crate::data::manifest::{ViewKind, NUM_CLASSES};
use crate::data::stream::{PreparedImages, TrainEntry};
use crate::error::{Error, Result};
use crate::labels::{ClassWeights, ResolvedLabels};
use crate::model::Model;
use crate::rng::{derive_seed_n, rng_from};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub use checkpoint::{average_checkpoints, Checkpoint, CheckpointMeta, NamedTensor};
pub use grid::{grid_search, GridOutcome, GridPoint};
pub use scheduler::{EarlyStopper, PlateauScheduler};

pub const BEST_CHECKPOINTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub view: ViewKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            l2_lambda: 1e-5,
            batch_size: 16,
            max_epochs: 30,
            plateau_factor: 0.1,
            plateau_patience: 3,
            early_stop_patience: 10,
            min_delta: 1e-4,
            seed: 0,
            view: ViewKind::Frontal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau factor {} outside (0, 1)",
                self.plateau_factor
            )));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch budget must be positive".into()));
        }
        if self.initial_lr <= 0.0 || self.l2_lambda < 0.0 {
            return Err(Error::Config("learning rate must be positive, lambda non-negative".into()));
        }
        Ok(())
    }
}

/// One evaluation split: prepared images, the entries to draw, and the
/// resolved labels aligned with the record list behind the entries.
pub struct Split<'a> {
    pub images: &'a PreparedImages,
    pub entries: &'a [TrainEntry],
    pub labels: &'a ResolvedLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochStats>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                e.epoch, e.train_loss, e.val_loss, e.lr, e.seconds
            ));
        }
        out
    }

    /// Equality over the deterministic columns (wall time excluded).
    pub fn numeric_eq(&self, other: &RunLog) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_loss.to_bits() == b.val_loss.to_bits()
                    && a.lr.to_bits() == b.lr.to_bits()
            })
    }
}

pub struct TrainOutcome {
    /// Lowest-validation-loss checkpoints, at most [`BEST_CHECKPOINTS`],
    /// sorted by (val_loss, epoch).
    pub best: Vec<Checkpoint>,
    pub log: RunLog,
    pub mean_pixel: f64,
}

fn gather_rows(labels: &ResolvedLabels, entries: &[TrainEntry]) -> (Tensor, Tensor) {
    let n = entries.len();
    let mut targets = Vec::with_capacity(n * NUM_CLASSES);
    let mut mask = Vec::with_capacity(n * NUM_CLASSES);
    for e in entries {
        targets.extend_from_slice(labels.target_row(e.study_idx));
        mask.extend_from_slice(labels.mask_row(e.study_idx));
    }
    (
        Tensor::new(vec![n, NUM_CLASSES], targets).expect("target rows"),
        Tensor::new(vec![n, NUM_CLASSES], mask).expect("mask rows"),
    )
}

/// Mean weighted data loss over a split in eval mode (no penalty term).
pub fn dataset_loss(
    model: &Model,
    split: &Split,
    weights: &ClassWeights,
    mean_pixel: f64,
    batch_size: usize,
) -> Result<f64> {
    let clean = AugmentConfig::identity();
    let mut total = 0.0;
    let mut cells = 0usize;
    for batch in split.entries.chunks(batch_size) {
        let images = split.images.load_batch(batch, &clean, mean_pixel, 0, 0)?;
        let mut tape = Tape::new();
        let trace = model.forward_eval(&mut tape, images)?;
        let (targets, mask) = gather_rows(split.labels, batch);
        let loss = tape.weighted_bce_loss(trace.probs, &targets, &weights.w, &mask)?;
        let count = mask.data().iter().filter(|&&m| m == 1.0).count();
        total += tape.value(loss).item() * count as f64;
        cells += count;
    }
    if cells == 0 {
        return Err(Error::Config("split has no unmasked cells".into()));
    }
    Ok(total / cells as f64)
}

/// Per-entry class probabilities in eval mode.
pub fn predict_probs(
    model: &Model,
    images: &PreparedImages,
    entries: &[TrainEntry],
    mean_pixel: f64,
    batch_size: usize,
) -> Result<Vec<[f64; NUM_CLASSES]>> {
    let clean = AugmentConfig::identity();
    let mut out = Vec::with_capacity(entries.len());
    for batch in entries.chunks(batch_size) {
        let tensor = images.load_batch(batch, &clean, mean_pixel, 0, 0)?;
        let mut tape = Tape::new();
        let trace = model.forward_eval(&mut tape, tensor)?;
        for row in tape.value(trace.probs).data().chunks(NUM_CLASSES) {
            let mut probs = [0.0; NUM_CLASSES];
            probs.copy_from_slice(row);
            out.push(probs);
        }
    }
    Ok(out)
}

/// One optimizer step on one batch. Returns (loss with penalty, unmasked
/// cell count).
fn train_step(
    model: &mut Model,
    state: &mut AdamState,
    images: &PreparedImages,
    batch: &[TrainEntry],
    labels: &ResolvedLabels,
    weights: &ClassWeights,
    aug: &AugmentConfig,
    cfg: &TrainConfig,
    lr: f64,
    epoch: usize,
    dropout_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f64, usize)> {
    let input = images.load_batch(batch, aug, images.mean_pixel, cfg.seed, epoch as u64)?;
    let mut tape = Tape::new();
    let trace = model.forward_train(&mut tape, input, dropout_rng)?;
    let (targets, mask) = gather_rows(labels, batch);
    let data_loss = tape.weighted_bce_loss(trace.probs, &targets, &weights.w, &mask)?;
    let weight_nodes: Vec<_> = model
        .params()
        .iter()
        .zip(&trace.param_nodes)
        .filter(|(p, _)| p.kind.is_weight())
        .map(|(_, &n)| n)
        .collect();
    let penalty = tape.l2_penalty(&weight_nodes, cfg.l2_lambda)?;
    let loss = tape.add_scalars(data_loss, penalty)?;

    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Divergence { epoch });
    }
    tape.backward(loss)?;

    let grads: Vec<Tensor> = trace
        .param_nodes
        .iter()
        .zip(model.params())
        .map(|(&node, p)| {
            tape.grad(node)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
        })
        .collect();
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    let mut param_refs: Vec<&mut Tensor> =
        model.params_mut().iter_mut().map(|p| &mut p.value).collect();
    adam_step(&mut param_refs, &grad_refs, state, lr)?;

    let count = mask.data().iter().filter(|&&m| m == 1.0).count();
    Ok((loss_value, count))
}

/// Full training run. Deterministic for a fixed config: batch order,
/// augmentation draws, and dropout all derive from `cfg.seed`.
pub fn train(
    model: &mut Model,
    train_split: &Split,
    val_split: &Split,
    weights: &ClassWeights,
    aug: &AugmentConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_callback(model, train_split, val_split, weights, aug, cfg, |_, _| Ok(false))
}

/// As [`train`], with a per-epoch hook. Returning `Ok(true)` ends the run
/// after the current epoch (its checkpoint is still retained).
pub fn train_with_callback(
    model: &mut Model,
    train_split: &Split,
    val_split: &Split,
    weights: &ClassWeights,
    aug: &AugmentConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &Model) -> Result<bool>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    let mean_pixel = train_split.images.mean_pixel;

    // studies excluded by the label policy never enter a batch
    let entries: Vec<TrainEntry> = train_split
        .entries
        .iter()
        .filter(|e| train_split.labels.is_retained(e.study_idx))
        .copied()
        .collect();
    if entries.is_empty() {
        return Err(Error::Config("no trainable entries after label resolution".into()));
    }

    let shapes: Vec<&[usize]> = model.params().iter().map(|p| p.value.shape()).collect();
    let mut state = AdamState::new(&shapes);
    let mut plateau =
        PlateauScheduler::new(cfg.initial_lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_delta);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience, cfg.min_delta);

    let mut log = RunLog::default();
    let mut best: Vec<Checkpoint> = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let lr = plateau.lr();

        let mut order = entries.clone();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_from(derive_seed_n(cfg.seed, &[0x5u64, epoch as u64])));
        let mut dropout_rng = rng_from(derive_seed_n(cfg.seed, &[0xDu64, epoch as u64]));

        let mut loss_sum = 0.0;
        let mut cell_sum = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, cells) = train_step(
                model,
                &mut state,
                train_split.images,
                batch,
                train_split.labels,
                weights,
                aug,
                cfg,
                lr,
                epoch,
                &mut dropout_rng,
            )?;
            loss_sum += loss * cells as f64;
            cell_sum += cells;
        }
        let train_loss = loss_sum / cell_sum as f64;
        let val_loss = dataset_loss(model, val_split, weights, mean_pixel, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }

        let stats = EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log.epochs.push(stats.clone());

        best.push(Checkpoint::from_model(
            model,
            Some(&state),
            cfg.view,
            mean_pixel,
            epoch as u64,
            Some(val_loss),
        ));
        best.sort_by(|a, b| {
            let la = a.meta.val_loss.expect("set above");
            let lb = b.meta.val_loss.expect("set above");
            la.partial_cmp(&lb)
                .expect("finite losses")
                .then(a.meta.epoch.cmp(&b.meta.epoch))
        });
        best.truncate(BEST_CHECKPOINTS);

        plateau.step(val_loss);
        let requested_stop = on_epoch(&stats, model)?;
        if stopper.step(val_loss) || requested_stop {
            break;
        }
    }

    Ok(TrainOutcome { best, log, mean_pixel })
}

/// Re-estimate all batch-norm running statistics with one stat-collection
/// pass over the given entries (loaded clean).
pub fn recalibrate_bn(
    model: &mut Model,
    images: &PreparedImages,
    entries: &[TrainEntry],
    mean_pixel: f64,
    batch_size: usize,
) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::Config("cannot recalibrate on zero entries".into()));
    }
    let clean = AugmentConfig::identity();
    let mut accums = model.bn_accums();
    for batch in entries.chunks(batch_size) {
        let input = images.load_batch(batch, &clean, mean_pixel, 0, 0)?;
        let mut tape = Tape::new();
        model.forward_collect(&mut tape, input, &mut accums)?;
    }
    model.set_bn_from_accums(&accums)
}

/// Average the best checkpoints into one model and refresh its batch-norm
/// statistics over the training stream.
pub fn build_averaged_model(
    checkpoints: &[Checkpoint],
    images: &PreparedImages,
    entries: &[TrainEntry],
    batch_size: usize,
) -> Result<(Model, Checkpoint)> {
    let averaged = average_checkpoints(checkpoints)?;
    let mut model = averaged.to_model()?;
    let mean_pixel = averaged.meta.mean_pixel;
    recalibrate_bn(&mut model, images, entries, mean_pixel, batch_size)?;
    let view = averaged.meta.view_kind()?;
    let snapshot = Checkpoint::from_model(&model, None, view, mean_pixel, 0, None);
    Ok((model, snapshot))
}
