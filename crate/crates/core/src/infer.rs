//! Single- and multi-view prediction, exact-match voting, pass@k and
//! task-set evaluation.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ExamplePair, Grid, Task, TaskSet};
use crate::geometry::{decode_prediction, place_input, sample_view, DecodeFailure, GeometryError, ViewSampling, ViewTransform};
use crate::train::{joint_test_time_train, test_time_train, AdaptedModel, AuxTask, TttConfig};
use crate::vit::{ModelError, VitModel};

/// The k values reported in every pass@k curve.
pub const PASS_AT_K: [usize; 9] = [1, 2, 5, 10, 20, 50, 100, 200, 300];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("decode failed: {0:?}")]
    Decode(DecodeFailure),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferError {
    #[error("all {views} views failed to produce a grid")]
    AllViewsFailed { views: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that maps an input grid to a predicted grid under a view.
pub trait Predictor: Sync {
    fn predict(&self, task_index: usize, x: &Grid, view: &ViewTransform) -> Result<Grid, PredictError>;
}

impl Predictor for VitModel {
    fn predict(&self, task_index: usize, x: &Grid, view: &ViewTransform) -> Result<Grid, PredictError> {
        let canvas = place_input(x, view, self.config().canvas_size)?;
        let probs = self.predict_probs(&canvas, task_index)?;
        decode_prediction(&probs, view).map_err(PredictError::Decode)
    }
}

/// Predicts `x` in the frame of `aux` at the scale/offset of `geom`, and maps
/// the decoded grid back to the original frame.
pub fn predict_view<P: Predictor + ?Sized>(
    model: &P,
    task_index: usize,
    x: &Grid,
    aux: &AuxTask,
    geom: &ViewTransform,
) -> Result<Grid, PredictError> {
    let view = geom.with_symmetry(aux.dihedral, aux.color);
    model.predict(task_index, x, &view)
}

/// Output shape guess for an inference input: each side scaled by the
/// largest output/input ratio among the demonstrations, rounded up.
pub fn estimate_output_shape(demos: &[ExamplePair], x: &Grid) -> (usize, usize) {
    let ratio = |f: fn((usize, usize)) -> usize| {
        demos
            .iter()
            .map(|p| f(p.output.shape()) as f64 / f(p.input.shape()) as f64)
            .fold(1.0f64, f64::max)
    };
    let (rr, cr) = (ratio(|s| s.0), ratio(|s| s.1));
    (((x.rows() as f64) * rr).ceil() as usize, ((x.cols() as f64) * cr).ceil() as usize)
}

/// Samples scale and offset for predicting `x` in the frame of `aux`,
/// leaving room for the estimated output; falls back to fitting the input
/// alone when the estimate does not fit.
pub fn view_geometry<R: Rng + ?Sized>(
    rng: &mut R,
    demos: &[ExamplePair],
    x: &Grid,
    aux: &AuxTask,
    vs: &ViewSampling,
) -> Option<ViewTransform> {
    let in_shape = aux.dihedral.transformed_shape(x.shape());
    let out_shape = aux.dihedral.transformed_shape(estimate_output_shape(demos, x));
    sample_view(rng, in_shape, Some(out_shape), vs)
        .or_else(|_| sample_view(rng, in_shape, None, vs))
        .ok()
        .map(|v| v.with_symmetry(aux.dihedral, aux.color))
}

/// Deterministic single view used for validation.
pub fn single_view_geometry(demos: &[ExamplePair], x: &Grid, aux: &AuxTask, vs: &ViewSampling) -> Option<ViewTransform> {
    view_geometry(&mut ChaCha8Rng::seed_from_u64(0), demos, x, aux, vs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Geometric (scale, offset) draws per auxiliary frame.
    pub views_per_aux: usize,
    /// Auxiliary frames used, from the front of the adapted model's list.
    pub num_aux: usize,
    pub seed: u64,
    pub max_scale: usize,
    pub scale_aug: bool,
    pub translate_aug: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { views_per_aux: 10, num_aux: crate::train::NUM_AUX_TASKS, seed: 0, max_scale: 8, scale_aug: true, translate_aug: true }
    }
}

impl InferConfig {
    /// One identity-frame view.
    pub fn single_view(&self) -> InferConfig {
        InferConfig { views_per_aux: 1, num_aux: 1, ..self.clone() }
    }

    fn sampling(&self, canvas_size: usize) -> ViewSampling {
        ViewSampling {
            canvas_size,
            max_scale: self.max_scale,
            scale_aug: self.scale_aug,
            fixed_scale: 1,
            translate_aug: self.translate_aug,
        }
    }
}

/// A prediction mapped back to the original frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub grid: Grid,
    pub view_index: usize,
    pub aux_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteEntry {
    pub grid: Grid,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct VoteTally {
    /// By count, descending; ties keep first-occurrence order.
    pub ranked: Vec<VoteEntry>,
    pub total_views: usize,
    pub failures: usize,
}

impl VoteTally {
    /// Zero-based rank of `truth`, if any candidate equals it.
    pub fn rank_of(&self, truth: &Grid) -> Option<usize> {
        self.ranked.iter().position(|e| &e.grid == truth)
    }

    pub fn top(&self) -> Option<&Grid> {
        self.ranked.first().map(|e| &e.grid)
    }
}

/// Groups identical grids and ranks the groups by size.
pub fn majority_vote(candidates: &[Grid]) -> VoteTally {
    let mut slot: HashMap<&Grid, usize> = HashMap::new();
    let mut ranked: Vec<VoteEntry> = Vec::new();
    for g in candidates {
        match slot.get(g) {
            Some(&i) => ranked[i].count += 1,
            None => {
                slot.insert(g, ranked.len());
                ranked.push(VoteEntry { grid: g.clone(), count: 1 });
            }
        }
    }
    // Stable sort keeps first-occurrence order among equal counts.
    ranked.sort_by(|a, b| b.count.cmp(&a.count));
    VoteTally { ranked, total_views: candidates.len(), failures: 0 }
}

pub fn pass_at_k(tally: &VoteTally, truth: &Grid, k: usize) -> bool {
    tally.ranked.iter().take(k).any(|e| &e.grid == truth)
}

/// Predicts under `views_per_aux` geometric draws for each auxiliary frame
/// and votes. View `a * views_per_aux + j` draws its geometry from stream
/// `a * views_per_aux + j` of `cfg.seed`, so the result does not depend on
/// evaluation order.
pub fn multi_view_candidates<P: Predictor + ?Sized>(
    model: &P,
    canvas_size: usize,
    aux: &[AuxTask],
    embed_offset: usize,
    demos: &[ExamplePair],
    x: &Grid,
    cfg: &InferConfig,
) -> (Vec<Candidate>, usize) {
    let vs = cfg.sampling(canvas_size);
    let mut out = Vec::new();
    let mut failures = 0;
    let frames = &aux[..cfg.num_aux.min(aux.len())];
    for (a_pos, a) in frames.iter().enumerate() {
        for j in 0..cfg.views_per_aux {
            let view_index = a_pos * cfg.views_per_aux + j;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(view_index as u64);
            let result = match view_geometry(&mut rng, demos, x, a, &vs) {
                Some(geom) => predict_view(model, embed_offset + a.aux_index, x, a, &geom),
                None => Err(PredictError::Geometry(GeometryError::NoFeasibleView {
                    rows: x.rows(),
                    cols: x.cols(),
                    canvas: canvas_size,
                })),
            };
            match result {
                Ok(grid) => out.push(Candidate { grid, view_index, aux_index: a.aux_index }),
                Err(PredictError::Model(e)) => {
                    log::error!("view {view_index}: {e}");
                    failures += 1;
                }
                Err(e) => {
                    log::debug!("view {view_index}: {e}");
                    failures += 1;
                }
            }
        }
    }
    (out, failures)
}

pub fn multi_view_infer(adapted: &AdaptedModel, demos: &[ExamplePair], x: &Grid, cfg: &InferConfig) -> Result<VoteTally, InferError> {
    let model: &VitModel = &adapted.model;
    let (cands, failures) =
        multi_view_candidates(model, model.config().canvas_size, &adapted.aux, adapted.embed_offset, demos, x, cfg);
    tally_candidates(&cands, failures)
}

pub fn tally_candidates(cands: &[Candidate], failures: usize) -> Result<VoteTally, InferError> {
    let grids: Vec<Grid> = cands.iter().map(|c| c.grid.clone()).collect();
    let mut tally = majority_vote(&grids);
    tally.total_views += failures;
    tally.failures = failures;
    if tally.ranked.is_empty() {
        return Err(InferError::AllViewsFailed { views: tally.total_views });
    }
    Ok(tally)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Test-time train a separate copy per task.
    #[default]
    Independent,
    /// One test-time-trained copy shared by all tasks.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ttt: TttConfig,
    pub infer: InferConfig,
    pub mode: AdaptMode,
    /// Identity frame, one view, pass@1 only.
    pub single_view: bool,
    /// Largest k of the reported curve.
    pub max_k: usize,
    /// Tasks test-time trained concurrently (independent mode).
    pub jobs: usize,
    /// Top candidates kept per input in the report.
    pub keep_top: usize,
    pub record_timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ttt: TttConfig::default(),
            infer: InferConfig::default(),
            mode: AdaptMode::Independent,
            single_view: false,
            max_k: 2,
            jobs: 1,
            keep_top: 2,
            record_timing: true,
        }
    }
}

impl EvalConfig {
    pub fn ks(&self) -> Vec<usize> {
        if self.single_view {
            return vec![1];
        }
        let mut ks: Vec<usize> = PASS_AT_K.iter().copied().filter(|&k| k <= self.max_k.max(1)).collect();
        if !ks.contains(&self.max_k) && self.max_k > 0 {
            ks.push(self.max_k);
        }
        ks
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputResult {
    /// Zero-based rank of the ground truth among the voted candidates.
    pub truth_rank: Option<usize>,
    pub distinct_candidates: usize,
    pub total_views: usize,
    pub failures: usize,
    pub top: Vec<VoteEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub pass_at_1: bool,
    pub pass_at_2: bool,
    pub inputs: Vec<InputResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

impl TaskResult {
    /// All-or-nothing over the task's inference inputs.
    pub fn solved_at(&self, k: usize) -> bool {
        self.error.is_none() && !self.inputs.is_empty() && self.inputs.iter().all(|i| i.truth_rank.is_some_and(|r| r < k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskResult>,
    /// Percentage of tasks solved at each k.
    pub pass_at_k: BTreeMap<usize, f64>,
    /// Percentage of individual inference inputs whose top candidate is correct.
    pub per_input_pass_at_1: f64,
    pub num_tasks: usize,
    pub num_failed_tasks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
    /// Filled in by the caller with the full run configuration.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn pass_at(&self, k: usize) -> Option<f64> {
        self.pass_at_k.get(&k).copied()
    }
}

fn score_task(adapted: &AdaptedModel, task: &Task, cfg: &EvalConfig) -> Vec<InputResult> {
    let infer = if cfg.single_view { cfg.infer.single_view() } else { cfg.infer.clone() };
    task.infer
        .iter()
        .map(|pair| {
            let result = multi_view_infer(adapted, &task.demo, &pair.input, &infer);
            match result {
                Ok(tally) => InputResult {
                    truth_rank: pair.output.as_ref().and_then(|t| tally.rank_of(t)),
                    distinct_candidates: tally.ranked.len(),
                    total_views: tally.total_views,
                    failures: tally.failures,
                    top: tally.ranked.iter().take(cfg.keep_top).cloned().collect(),
                    error: None,
                },
                Err(e) => InputResult {
                    truth_rank: None,
                    distinct_candidates: 0,
                    total_views: match e {
                        InferError::AllViewsFailed { views } => views,
                        _ => 0,
                    },
                    failures: 0,
                    top: Vec::new(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

fn task_result(task: &Task, inputs: Vec<InputResult>, error: Option<String>, started: Option<Instant>) -> TaskResult {
    let mut r = TaskResult {
        task_id: task.task_id.clone(),
        pass_at_1: false,
        pass_at_2: false,
        inputs,
        error,
        seconds: started.map(|t| t.elapsed().as_secs_f64()),
    };
    r.pass_at_1 = r.solved_at(1);
    r.pass_at_2 = r.solved_at(2);
    r
}

fn eval_independent(base: &VitModel, task: &Task, cfg: &EvalConfig) -> TaskResult {
    let started = cfg.record_timing.then(Instant::now);
    match test_time_train(base, task, &cfg.ttt, &mut |_, _| {}) {
        Ok(adapted) => task_result(task, score_task(&adapted, task, cfg), None, started),
        Err(e) => {
            log::error!("{}: test-time training failed: {e}", task.task_id);
            task_result(task, Vec::new(), Some(e.to_string()), started)
        }
    }
}

/// Adapts `base` to every task, predicts every inference input with
/// multi-view voting and scores against the ground truth. Failures are
/// recorded per task and never stop the sweep.
pub fn evaluate_taskset(base: &VitModel, tasks: &TaskSet, cfg: &EvalConfig) -> EvalReport {
    let started = cfg.record_timing.then(Instant::now);
    let results: Vec<TaskResult> = match cfg.mode {
        AdaptMode::Independent if cfg.jobs > 1 => {
            let jobs = cfg.jobs.min(tasks.len().max(1));
            let mut slots: Vec<Option<TaskResult>> = vec![None; tasks.len()];
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..jobs)
                    .map(|w| {
                        s.spawn(move || {
                            tasks
                                .tasks()
                                .iter()
                                .enumerate()
                                .skip(w)
                                .step_by(jobs)
                                .map(|(i, t)| (i, eval_independent(base, t, cfg)))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                for h in handles {
                    for (i, r) in h.join().expect("evaluation worker panicked") {
                        slots[i] = Some(r);
                    }
                }
            });
            slots.into_iter().map(|r| r.expect("every task evaluated")).collect()
        }
        AdaptMode::Independent => tasks.tasks().iter().map(|t| eval_independent(base, t, cfg)).collect(),
        AdaptMode::Joint => {
            let refs: Vec<&Task> = tasks.tasks().iter().collect();
            match joint_test_time_train(base, &refs, &cfg.ttt, &mut |_, _| {}) {
                Ok(adapted) => adapted
                    .iter()
                    .zip(tasks.tasks())
                    .map(|(a, t)| task_result(t, score_task(a, t, cfg), None, None))
                    .collect(),
                Err(e) => tasks.tasks().iter().map(|t| task_result(t, Vec::new(), Some(e.to_string()), None)).collect(),
            }
        }
    };
    summarize(results, &cfg.ks(), started)
}

/// Scores the offline model directly on its own training tasks' inference
/// pairs (identity frame of each task's own embedding).
pub fn evaluate_offline(model: Arc<VitModel>, tasks: &TaskSet, cfg: &EvalConfig) -> EvalReport {
    let started = cfg.record_timing.then(Instant::now);
    let results = tasks
        .tasks()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let a = AdaptedModel::from_offline(t.task_id.clone(), model.clone(), i);
            task_result(t, score_task(&a, t, cfg), None, None)
        })
        .collect();
    summarize(results, &cfg.ks(), started)
}

fn summarize(tasks: Vec<TaskResult>, ks: &[usize], started: Option<Instant>) -> EvalReport {
    let n = tasks.len();
    let pct = |c: usize, of: usize| if of == 0 { 0.0 } else { 100.0 * c as f64 / of as f64 };
    let pass_at_k = ks.iter().map(|&k| (k, pct(tasks.iter().filter(|t| t.solved_at(k)).count(), n))).collect();
    let inputs: Vec<&InputResult> = tasks.iter().flat_map(|t| t.inputs.iter()).collect();
    let per_input = pct(inputs.iter().filter(|i| i.truth_rank == Some(0)).count(), inputs.len());
    EvalReport {
        num_failed_tasks: tasks.iter().filter(|t| t.error.is_some()).count(),
        num_tasks: n,
        tasks,
        pass_at_k,
        per_input_pass_at_1: per_input,
        seconds: started.map(|t| t.elapsed().as_secs_f64()),
        config: serde_json::Value::Null,
    }
}
