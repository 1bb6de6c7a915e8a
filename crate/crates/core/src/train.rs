//! Offline multi-task training and per-task test-time training.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ExamplePair, Task, TaskSet};
use crate::geometry::{place_input, place_target, sample_view, ColorPerm, Dihedral, ViewSampling, ViewTransform};
use crate::infer::{predict_view, single_view_geometry};
use crate::nn::{lr_at, AdamState, LrSchedule, NnError};
use crate::vit::{training_step, LossMask, ModelError, TrainingSample, VitConfig, VitModel};

pub const NUM_AUX_TASKS: usize = 51;
pub const NUM_AUX_COLOR_PERMS: usize = 10;
pub const DEFAULT_AUX_SEED: u64 = 0x5eed_a0c5;

/// Dihedral elements used for auxiliary tasks, in index order.
pub const AUX_DIHEDRALS: [Dihedral; 5] = [Dihedral::FlipH, Dihedral::FlipV, Dihedral::Rot90, Dihedral::Rot180, Dihedral::Rot270];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{needed} task embeddings needed, model has {have}")]
    TooFewTaskEmbeddings { needed: usize, have: usize },
    #[error("task `{task_id}` has no demo pairs to train on")]
    NoDemos { task_id: String },
    #[error("inference pair of `{task_id}` reached a gradient step")]
    LineageViolation { task_id: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub scale_aug: bool,
    pub translate_aug: bool,
    pub max_scale: usize,
    /// Scale used when `scale_aug` is off.
    pub fixed_scale: usize,
    pub loss_mask: LossMask,
    /// Validate every this many epochs (and after the last); 0 disables.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::offline()
    }
}

impl TrainConfig {
    pub fn offline() -> TrainConfig {
        TrainConfig {
            epochs: 100,
            warmup_epochs: 10,
            batch_size: 32,
            base_lr: 3e-4,
            seed: 0,
            scale_aug: true,
            translate_aug: true,
            max_scale: 8,
            fixed_scale: 1,
            loss_mask: LossMask::default(),
            validate_every: 10,
        }
    }

    pub fn ttt() -> TrainConfig {
        TrainConfig { batch_size: 8, validate_every: 0, ..TrainConfig::offline() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.epochs > 0 && (self.warmup_epochs == 0 || self.warmup_epochs >= self.epochs) {
            return Err(TrainError::Config(format!(
                "need 0 < warmup_epochs ({}) < epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::Config("base_lr must be positive".into()));
        }
        if self.max_scale == 0 || self.fixed_scale == 0 {
            return Err(TrainError::Config("scales must be positive".into()));
        }
        Ok(())
    }

    pub fn view_sampling(&self, canvas_size: usize) -> ViewSampling {
        ViewSampling {
            canvas_size,
            max_scale: self.max_scale,
            scale_aug: self.scale_aug,
            fixed_scale: self.fixed_scale,
            translate_aug: self.translate_aug,
        }
    }
}

/// A flipped/rotated, color-permuted replica of a task with its own embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AuxTask {
    pub aux_index: usize,
    pub dihedral: Dihedral,
    pub color: ColorPerm,
}

impl AuxTask {
    pub const IDENTITY: AuxTask = AuxTask { aux_index: 0, dihedral: Dihedral::Identity, color: ColorPerm::IDENTITY };

    pub fn view(&self) -> ViewTransform {
        ViewTransform::identity().with_symmetry(self.dihedral, self.color)
    }

    pub fn transform_pair(&self, p: &ExamplePair) -> ExamplePair {
        let v = self.view();
        ExamplePair { input: v.transform_grid(&p.input), output: v.transform_grid(&p.output) }
    }
}

/// The identity task followed by every (flip/rotation, color permutation)
/// combination. Color permutation 0 is the identity; the other nine are
/// distinct random permutations drawn from `seed`.
pub fn build_aux_tasks(seed: u64) -> Vec<AuxTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perms = vec![ColorPerm::IDENTITY];
    while perms.len() < NUM_AUX_COLOR_PERMS {
        let p = ColorPerm::random(&mut rng);
        if !perms.contains(&p) {
            perms.push(p);
        }
    }
    let mut out = vec![AuxTask::IDENTITY];
    for &d in &AUX_DIHEDRALS {
        for &c in &perms {
            out.push(AuxTask { aux_index: out.len(), dihedral: d, color: c });
        }
    }
    out
}

/// Where a training pair came from; only demonstrations may be trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lineage {
    Demo,
    Infer,
}

#[derive(Debug, Clone)]
pub struct PoolItem {
    pub pair: ExamplePair,
    pub task_index: usize,
    pub task_id: Arc<str>,
    pub lineage: Lineage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub samples: usize,
    /// Pairs that could not be placed on the canvas or had an empty loss mask.
    pub skipped: usize,
    /// Single-view exact match on held-back inference pairs, when measured.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_exact: Option<f64>,
}

/// Per-epoch callback: metrics and the model as of the end of the epoch.
pub type Observer<'a> = dyn FnMut(&EpochMetrics, &VitModel) + 'a;

/// Seeded streams: shuffling, view sampling and dropout draw independently.
struct Streams {
    shuffle: ChaCha8Rng,
    views: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Streams {
        let stream = |k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Streams { shuffle: stream(1), views: stream(2), dropout: stream(3) }
    }
}

fn place_pair(item: &PoolItem, vs: &ViewSampling, rng: &mut ChaCha8Rng) -> Option<TrainingSample> {
    let (x, y) = (&item.pair.input, &item.pair.output);
    let view = match sample_view(rng, x.shape(), Some(y.shape()), vs) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("{}: skipping pair: {e}", item.task_id);
            return None;
        }
    };
    Some(TrainingSample {
        input: place_input(x, &view, vs.canvas_size).ok()?,
        target: place_target(y, &view, vs.canvas_size).ok()?,
        task_index: item.task_index,
    })
}

/// Runs `cfg.epochs` epochs over `pool` with a fresh scale/translation view
/// per sample and per epoch. `validate` is called on the cadence of
/// `cfg.validate_every`.
pub fn run_epochs(
    model: &mut VitModel,
    adam: &mut AdamState,
    pool: &[PoolItem],
    cfg: &TrainConfig,
    mut validate: Option<&mut dyn FnMut(&VitModel) -> f64>,
    observer: &mut Observer<'_>,
) -> Result<Vec<EpochMetrics>, TrainError> {
    cfg.validate()?;
    if let Some(bad) = pool.iter().find(|p| p.lineage != Lineage::Demo) {
        return Err(TrainError::LineageViolation { task_id: bad.task_id.to_string() });
    }
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if pool.is_empty() {
        return Err(TrainError::Config("training pool is empty".into()));
    }
    let have = model.config().num_task_embeddings;
    if let Some(max) = pool.iter().map(|p| p.task_index).max() {
        if max >= have {
            return Err(TrainError::TooFewTaskEmbeddings { needed: max + 1, have });
        }
    }
    let steps_per_epoch = pool.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule::new(cfg.base_lr, cfg.warmup_epochs, cfg.epochs, steps_per_epoch)?;
    let vs = cfg.view_sampling(model.config().canvas_size);
    let mut rngs = Streams::new(cfg.seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut step = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rngs.shuffle);
        let (mut loss_sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingSample> =
                chunk.iter().filter_map(|&i| place_pair(&pool[i], &vs, &mut rngs.views)).collect();
            skipped += chunk.len() - batch.len();
            lr = lr_at(&schedule, step)?;
            step += 1;
            if batch.is_empty() {
                continue;
            }
            match training_step(model, adam, &batch, lr as f32, cfg.loss_mask, Some(&mut rngs.dropout)) {
                Ok(out) => {
                    loss_sum += out.loss * out.used as f64;
                    used += out.used;
                    skipped += out.skipped;
                }
                Err(ModelError::EmptyBatch) => skipped += batch.len(),
                Err(e) => return Err(e.into()),
            }
        }
        let last = epoch + 1 == cfg.epochs;
        let val_exact = match validate.as_deref_mut() {
            Some(f) if cfg.validate_every > 0 && ((epoch + 1) % cfg.validate_every == 0 || last) => Some(f(model)),
            _ => None,
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            mean_loss: if used > 0 { loss_sum / used as f64 } else { f64::NAN },
            lr,
            samples: used,
            skipped,
            val_exact,
        };
        log::info!(
            "epoch {}/{} loss {:.4} lr {:.2e}{}",
            m.epoch,
            cfg.epochs,
            m.mean_loss,
            m.lr,
            m.val_exact.map(|v| format!(" val {:.3}", v)).unwrap_or_default()
        );
        observer(&m, model);
        history.push(m);
    }
    Ok(history)
}

/// All demonstration pairs of a task set, tagged with the task's index.
pub fn demo_pool(data: &TaskSet) -> Vec<PoolItem> {
    let mut pool = Vec::with_capacity(data.demo_pair_count());
    for (ti, task) in data.tasks().iter().enumerate() {
        let id: Arc<str> = Arc::from(task.task_id.as_str());
        pool.extend(task.demo.iter().map(|p| PoolItem {
            pair: p.clone(),
            task_index: ti,
            task_id: id.clone(),
            lineage: Lineage::Demo,
        }));
    }
    pool
}

/// Single-view exact match of the identity-frame prediction on every
/// inference pair that carries a ground-truth output.
pub fn validation_exact_match(model: &VitModel, data: &TaskSet, cfg: &TrainConfig) -> f64 {
    let vs = cfg.view_sampling(model.config().canvas_size);
    let (mut hits, mut total) = (0usize, 0usize);
    for (ti, task) in data.tasks().iter().enumerate() {
        for pair in &task.infer {
            let Some(truth) = &pair.output else { continue };
            total += 1;
            let Some(view) = single_view_geometry(&task.demo, &pair.input, &AuxTask::IDENTITY, &vs) else { continue };
            if let Ok(pred) = predict_view(model, ti, &pair.input, &AuxTask::IDENTITY, &view) {
                hits += usize::from(&pred == truth);
            }
        }
    }
    if total == 0 {
        f64::NAN
    } else {
        hits as f64 / total as f64
    }
}

/// Result of offline training.
pub struct Trained {
    pub model: VitModel,
    pub adam: AdamState,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains one model jointly on the demonstration pairs of every task, each
/// task conditioned on its own embedding (the task's position in `data`).
pub fn train_offline(
    data: &TaskSet,
    model_cfg: &VitConfig,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<Trained, TrainError> {
    if model_cfg.num_task_embeddings < data.len() {
        return Err(TrainError::TooFewTaskEmbeddings { needed: data.len(), have: model_cfg.num_task_embeddings });
    }
    let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = VitModel::new(model_cfg.clone(), &mut init)?;
    let mut adam = AdamState::new(model.params());
    let pool = demo_pool(data);
    let mut val = |m: &VitModel| validation_exact_match(m, data, cfg);
    let metrics = run_epochs(&mut model, &mut adam, &pool, cfg, Some(&mut val), observer)?;
    Ok(Trained { model, adam, metrics })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TttScope {
    /// Fine-tune every parameter.
    #[default]
    Full,
    /// Only the task embeddings move.
    EmbeddingsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TttConfig {
    pub train: TrainConfig,
    pub scope: TttScope,
    /// Seed of the color permutations behind the auxiliary tasks.
    pub aux_seed: u64,
    /// Number of auxiliary tasks used, taken from the front of the list.
    pub num_aux: usize,
}

impl Default for TttConfig {
    fn default() -> Self {
        TttConfig { train: TrainConfig::ttt(), scope: TttScope::Full, aux_seed: DEFAULT_AUX_SEED, num_aux: NUM_AUX_TASKS }
    }
}

impl TttConfig {
    pub fn aux_tasks(&self) -> Result<Vec<AuxTask>, TrainError> {
        if self.num_aux == 0 || self.num_aux > NUM_AUX_TASKS {
            return Err(TrainError::Config(format!("num_aux must be in 1..={NUM_AUX_TASKS}")));
        }
        let mut aux = build_aux_tasks(self.aux_seed);
        aux.truncate(self.num_aux);
        Ok(aux)
    }
}

/// A model fine-tuned for one task. Embedding row `embed_offset + a` belongs
/// to auxiliary task `a`. Jointly adapted tasks share one model.
#[derive(Clone)]
pub struct AdaptedModel {
    pub task_id: String,
    pub model: Arc<VitModel>,
    pub aux: Vec<AuxTask>,
    pub embed_offset: usize,
    pub metrics: Vec<EpochMetrics>,
}

impl AdaptedModel {
    /// Wraps an offline model for prediction on the training task at `task_index`.
    pub fn from_offline(task_id: impl Into<String>, model: Arc<VitModel>, task_index: usize) -> AdaptedModel {
        AdaptedModel { task_id: task_id.into(), model, aux: vec![AuxTask::IDENTITY], embed_offset: task_index, metrics: Vec::new() }
    }

    pub fn task_index(&self, aux: &AuxTask) -> usize {
        self.embed_offset + aux.aux_index
    }
}

fn aux_pool(task: &Task, aux: &[AuxTask], offset: usize) -> Vec<PoolItem> {
    let id: Arc<str> = Arc::from(task.task_id.as_str());
    let mut pool = Vec::with_capacity(task.demo.len() * aux.len());
    for a in aux {
        for p in &task.demo {
            pool.push(PoolItem {
                pair: a.transform_pair(p),
                task_index: offset + a.aux_index,
                task_id: id.clone(),
                lineage: Lineage::Demo,
            });
        }
    }
    pool
}

fn prepare_ttt_model(base: &VitModel, rows: usize, cfg: &TttConfig) -> VitModel {
    let mut model = base.clone();
    let mut init = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    init.set_stream(4);
    model.reset_task_embeddings(rows, &mut init);
    let embed = model.task_embed_id();
    let ps = model.params_mut();
    ps.set_all_trainable(cfg.scope == TttScope::Full);
    ps.param_mut(embed).trainable = true;
    model
}

/// Adapts a copy of `base` to one task: fresh embeddings for every auxiliary
/// task, a fresh optimizer, and training on each demo pair under each
/// auxiliary transform.
pub fn test_time_train(
    base: &VitModel,
    task: &Task,
    cfg: &TttConfig,
    observer: &mut Observer<'_>,
) -> Result<AdaptedModel, TrainError> {
    if task.demo.is_empty() {
        return Err(TrainError::NoDemos { task_id: task.task_id.clone() });
    }
    let aux = cfg.aux_tasks()?;
    let mut model = prepare_ttt_model(base, aux.len(), cfg);
    let mut adam = AdamState::new(model.params());
    let pool = aux_pool(task, &aux, 0);
    let metrics = run_epochs(&mut model, &mut adam, &pool, &cfg.train, None, observer)?;
    Ok(AdaptedModel { task_id: task.task_id.clone(), model: Arc::new(model), aux, embed_offset: 0, metrics })
}

/// Adapts a single model to several tasks at once; task `t` owns embedding
/// rows `t * aux.len() ..`.
pub fn joint_test_time_train(
    base: &VitModel,
    tasks: &[&Task],
    cfg: &TttConfig,
    observer: &mut Observer<'_>,
) -> Result<Vec<AdaptedModel>, TrainError> {
    if let Some(t) = tasks.iter().find(|t| t.demo.is_empty()) {
        return Err(TrainError::NoDemos { task_id: t.task_id.clone() });
    }
    let aux = cfg.aux_tasks()?;
    let mut model = prepare_ttt_model(base, aux.len() * tasks.len().max(1), cfg);
    let mut adam = AdamState::new(model.params());
    let pool: Vec<PoolItem> = tasks.iter().enumerate().flat_map(|(t, task)| aux_pool(task, &aux, t * aux.len())).collect();
    let metrics = run_epochs(&mut model, &mut adam, &pool, &cfg.train, None, observer)?;
    let model = Arc::new(model);
    Ok(tasks
        .iter()
        .enumerate()
        .map(|(t, task)| AdaptedModel {
            task_id: task.task_id.clone(),
            model: model.clone(),
            aux: aux.clone(),
            embed_offset: t * aux.len(),
            metrics: metrics.clone(),
        })
        .collect())
}

/// Observer that does nothing.
pub fn no_observer() -> impl FnMut(&EpochMetrics, &VitModel) {
    |_, _| {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn aux_tasks_layout() {
        let aux = build_aux_tasks(7);
        assert_eq!(aux.len(), NUM_AUX_TASKS);
        assert_eq!(aux[0], AuxTask::IDENTITY);
        let distinct: HashSet<_> = aux.iter().map(|a| (a.dihedral, a.color)).collect();
        assert_eq!(distinct.len(), NUM_AUX_TASKS);
        for (i, a) in aux.iter().enumerate() {
            assert_eq!(a.aux_index, i);
        }
        assert_eq!(aux[1].dihedral, Dihedral::FlipH);
        assert!(aux[1].color.is_identity());
        assert_eq!(aux[50].dihedral, Dihedral::Rot270);
        assert_eq!(build_aux_tasks(7), aux);
        assert_ne!(build_aux_tasks(8), aux);
    }

    #[test]
    fn schedule_constraints() {
        let mut c = TrainConfig::offline();
        assert!(c.validate().is_ok());
        c.warmup_epochs = 100;
        assert!(c.validate().is_err());
        c.epochs = 0;
        assert!(c.validate().is_ok());
    }
}
