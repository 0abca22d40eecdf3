//! The continual training loop: per-task router creation, count reset,
//! batched AdamW training with a per-iteration hook, post-task freezing,
//! autoencoder fitting, checkpointing and evaluation on every task.

mod checkpoint;
mod model;

use std::fs;
use std::path::Path;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngStates, CHECKPOINT_VERSION};
pub use model::{encode, similarity_loss, EncodeCache, Model, ModelConfig, ModelGrads};

use crate::error::{Error, Result};
use crate::evaluator::{accuracy, AccuracyMatrix, FreezeHeatmap, Routing};
use crate::inference::{train_autoencoder, AutoencoderConfig, TaskAutoencoder, ThresholdRule, AUTOENCODER_STREAM};
use crate::merge::{freeze_topk, reset_counts, IterationHook, MergeConfig, MergeEvent, MergeHook, NoHooks};
use crate::moe::Route;
use crate::numerics::{AdamW, Rng};
use crate::tasks::{sample_batch, LabeledSample, SuiteConfig, Task, TaskSequence};

pub const MODEL_STREAM: u64 = 2;
pub const BATCH_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub merge_cycle: usize,
    pub merge_enabled: bool,
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub temperature: f64,
    pub width: usize,
    pub hidden: usize,
    pub depth: usize,
    pub rank: usize,
    pub ln_eps: f64,
    pub autoencoder: AutoencoderConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            n_experts: 8,
            top_k: 2,
            merge_cycle: 25,
            merge_enabled: true,
            batch: 16,
            iterations: 400,
            lr: 5e-3,
            weight_decay: 0.01,
            label_smoothing: 0.1,
            temperature: 0.07,
            width: 32,
            hidden: 64,
            depth: 2,
            rank: 4,
            ln_eps: 1e-5,
            autoencoder: AutoencoderConfig::default(),
            seed: 0,
        }
    }

    /// Sizes used for the full-scale benchmark.
    pub fn full_scale() -> Self {
        Self {
            n_experts: 55,
            merge_cycle: 100,
            batch: 64,
            iterations: 1000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top-k must satisfy 1 <= k <= N_E, got k={} N_E={}",
                self.top_k, self.n_experts
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.rank == 0 || self.rank >= self.width {
            return Err(Error::Config(format!(
                "expert rank must satisfy 1 <= r < width, got r={} width={}",
                self.rank, self.width
            )));
        }
        if !(self.lr > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("lr and temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} is outside [0, 1)", self.label_smoothing)));
        }
        self.merge().validate()
    }

    pub fn merge(&self) -> MergeConfig {
        MergeConfig {
            cycle: self.merge_cycle,
            k_freeze: self.top_k,
            enabled: self.merge_enabled,
        }
    }

    pub fn model(&self, d_in: usize, n_classes: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            width: self.width,
            hidden: self.hidden,
            depth: self.depth,
            n_experts: self.n_experts,
            rank: self.rank,
            top_k: self.top_k,
            n_classes,
            temperature: self.temperature,
            ln_eps: self.ln_eps,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// Everything the loop mutates. A checkpoint is a snapshot of this.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub model: Model,
    pub autoencoders: Vec<TaskAutoencoder>,
    /// Continues the model-init stream; draws fresh routers.
    pub init_rng: Rng,
    pub batch_rng: Rng,
    pub ae_rng: Rng,
    pub tasks_done: usize,
}

impl TrainerState {
    pub fn new(cfg: &TrainConfig, suite: &SuiteConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = Rng::new(cfg.seed, MODEL_STREAM);
        let model = Model::init(&cfg.model(suite.d_in, suite.pool), &mut init_rng)?;
        Ok(Self {
            model,
            autoencoders: Vec::new(),
            init_rng,
            batch_rng: Rng::new(cfg.seed, BATCH_STREAM),
            ae_rng: Rng::new(cfg.seed, AUTOENCODER_STREAM),
            tasks_done: 0,
        })
    }

    /// Oracle routing for tasks with a router, adapter-free otherwise.
    pub fn oracle_accuracy(&self, task: &Task) -> Result<f64> {
        accuracy(&self.model, task, &Routing::Oracle)
    }

    pub fn inferred_accuracy(&self, task: &Task) -> Result<f64> {
        accuracy(
            &self.model,
            task,
            &Routing::Inferred {
                autoencoders: &self.autoencoders,
                rule: ThresholdRule::PerTask,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    /// Batch loss at every iteration.
    pub losses: Vec<f64>,
    pub merges: Vec<MergeEvent>,
    /// Experts newly frozen in each block at the end of the task.
    pub frozen: Vec<Vec<usize>>,
    /// Selection counts per block at the end of the task.
    pub counts: Vec<Vec<u64>>,
    pub threshold: f64,
}

impl TaskLog {
    /// Tab-separated run-log lines for this task.
    pub fn lines(&self, frozen_totals: &[usize]) -> Vec<String> {
        let mut out = Vec::with_capacity(self.merges.len() + self.frozen.len() + 2);
        out.push(format!("task_start\t{}", self.task));
        out.extend(self.merges.iter().map(ToString::to_string));
        for (b, (idx, total)) in self.frozen.iter().zip(frozen_totals).enumerate() {
            let list: Vec<String> = idx.iter().map(ToString::to_string).collect();
            let list = if list.is_empty() { "-".to_string() } else { list.join(",") };
            out.push(format!("freeze\t{}\t{b}\t{list}\t{total}", self.task));
        }
        out.push(format!("autoencoder\t{}\t{}", self.task, self.threshold));
        out
    }
}

/// One forward/backward/AdamW step on `batch`, counting selections.
/// Returns the batch loss before the update.
pub(crate) fn train_step(
    model: &mut Model,
    batch: &[&LabeledSample],
    categories: &[usize],
    route: Route,
    cfg: &TrainConfig,
    hp: &AdamW,
    train_backbone: bool,
) -> Result<f64> {
    let mut feats = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for s in batch {
        let (f, c) = model.forward_train(&s.features, route)?;
        feats.push(f);
        caches.push(c);
        labels.push(s.label);
    }
    let (loss, dfeats) = similarity_loss(&feats, &labels, categories, model, cfg.label_smoothing)?;
    let mut grads = ModelGrads::zeros_like(model);
    for (c, d) in caches.iter().zip(&dfeats) {
        model.backward(c, d, &mut grads)?;
    }
    model.apply_grads(&grads, hp, train_backbone)?;
    Ok(loss)
}

/// Trains `task` in place: new router, one count reset, `iterations`
/// batches with `hook` after each optimizer step, then freezing and the
/// task's autoencoder.
pub fn train_task<H: IterationHook>(
    state: &mut TrainerState,
    task: &Task,
    cfg: &TrainConfig,
    hook: &mut H,
) -> Result<TaskLog> {
    let t = task.spec.id;
    let model = &mut state.model;
    model.add_router(t, &mut state.init_rng)?;
    for blk in &mut model.blocks {
        reset_counts(blk);
    }
    let train_backbone = state.tasks_done == 0;
    let hp = cfg.optimizer();
    let route = if model.blocks.is_empty() { Route::AdapterFree } else { Route::Task(t) };
    let cats = &task.spec.categories;

    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut merges = Vec::new();
    for it in 1..=cfg.iterations {
        let batch = sample_batch(task, cfg.batch, &mut state.batch_rng)?;
        losses.push(train_step(model, &batch, cats, route, cfg, &hp, train_backbone)?);
        merges.extend(hook.after_iteration(t, it, &mut model.blocks)?);
    }

    let counts = model.blocks.iter().map(|b| b.counter.counts.clone()).collect();
    let frozen = model
        .blocks
        .iter_mut()
        .map(|b| freeze_topk(b, cfg.top_k))
        .collect();

    let data: Vec<Vec<f64>> = task.train.iter().map(|s| s.features.clone()).collect();
    let ae = train_autoencoder(t, &data, &cfg.autoencoder, &mut state.ae_rng)?;
    let threshold = ae.threshold;
    state.autoencoders.push(ae);
    state.tasks_done += 1;
    debug!(
        "task {t}: final loss {:.4}, threshold {threshold:.3e}",
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(TaskLog {
        task: t,
        losses,
        merges,
        frozen,
        counts,
        threshold,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub suite: SuiteConfig,
    pub config: TrainConfig,
    /// Rows evaluated with autoencoder task inference.
    pub accuracy: AccuracyMatrix,
    /// Rows evaluated with the true task id (adapter-free for unseen tasks).
    pub oracle_accuracy: AccuracyMatrix,
    pub heatmap: FreezeHeatmap,
    pub log: Vec<String>,
    pub task_logs: Vec<TaskLog>,
    pub checkpoints: Vec<Checkpoint>,
}

impl RunResult {
    fn empty(suite: &TaskSequence, cfg: &TrainConfig) -> Self {
        let names = suite.task_names();
        Self {
            suite: suite.config.clone(),
            config: cfg.clone(),
            accuracy: AccuracyMatrix::new(names.clone()),
            oracle_accuracy: AccuracyMatrix::new(names),
            heatmap: FreezeHeatmap::new(cfg.depth),
            log: Vec::new(),
            task_logs: Vec::new(),
            checkpoints: Vec::new(),
        }
    }

    pub fn final_checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }
}

/// Post-task evaluation of `state` on every task of the suite, one task per
/// worker. Returns `(inferred, oracle)` rows.
pub fn evaluate_all(state: &TrainerState, suite: &TaskSequence) -> Result<(Vec<f64>, Vec<f64>)> {
    let pairs = suite
        .tasks
        .par_iter()
        .map(|t| Ok((state.inferred_accuracy(t)?, state.oracle_accuracy(t)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

pub const BACKBONE_NOTE: &str = "note\tbackbone trains during the first task only";

/// Trains every task of `suite` in order with the merge hook selected by
/// `cfg.merge_enabled`. With `out`, each checkpoint and the run artifacts
/// are written as soon as a task completes.
pub fn run_sequence(suite: &TaskSequence, cfg: &TrainConfig, out: Option<&Path>) -> Result<RunResult> {
    let state = TrainerState::new(cfg, &suite.config)?;
    let mut hook = MergeHook(cfg.merge());
    continue_sequence(state, RunResult::empty(suite, cfg), suite, cfg, &mut hook, out)
}

/// Same as [`run_sequence`] with an explicit per-iteration hook.
pub fn run_sequence_with<H: IterationHook>(
    suite: &TaskSequence,
    cfg: &TrainConfig,
    hook: &mut H,
    out: Option<&Path>,
) -> Result<RunResult> {
    let state = TrainerState::new(cfg, &suite.config)?;
    continue_sequence(state, RunResult::empty(suite, cfg), suite, cfg, hook, out)
}

/// The plain baseline: identical loop with no per-iteration hook.
pub fn run_baseline(suite: &TaskSequence, cfg: &TrainConfig, out: Option<&Path>) -> Result<RunResult> {
    run_sequence_with(suite, cfg, &mut NoHooks, out)
}

/// Continues a run from a saved checkpoint. The checkpoint's configuration
/// must match `cfg` and `suite`.
pub fn resume_sequence(checkpoint: &Checkpoint, suite: &TaskSequence, cfg: &TrainConfig, out: Option<&Path>) -> Result<RunResult> {
    if &checkpoint.config != cfg || checkpoint.suite != suite.config {
        return Err(Error::Config("checkpoint configuration differs from the requested run".into()));
    }
    let mut result = RunResult::empty(suite, cfg);
    for row in &checkpoint.accuracy_rows {
        result.accuracy.push_row(row.clone())?;
    }
    for row in &checkpoint.oracle_rows {
        result.oracle_accuracy.push_row(row.clone())?;
    }
    for row in &checkpoint.heatmap_rows {
        result.heatmap.push_row(row.clone())?;
    }
    result.log = checkpoint.log.clone();
    let state = checkpoint.state();
    let mut hook = MergeHook(cfg.merge());
    continue_sequence(state, result, suite, cfg, &mut hook, out)
}

fn continue_sequence<H: IterationHook>(
    mut state: TrainerState,
    mut result: RunResult,
    suite: &TaskSequence,
    cfg: &TrainConfig,
    hook: &mut H,
    out: Option<&Path>,
) -> Result<RunResult> {
    if suite.is_empty() {
        return Err(Error::Config("the suite has no tasks".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if state.tasks_done == 0 {
        result.log.push(BACKBONE_NOTE.to_string());
    }
    for task in &suite.tasks[state.tasks_done..] {
        info!("training {} ({} iterations)", task.name(), cfg.iterations);
        let tlog = train_task(&mut state, task, cfg, hook)?;
        let totals: Vec<usize> = state.model.blocks.iter().map(|b| b.frozen_count()).collect();
        result.log.extend(tlog.lines(&totals));
        result.heatmap.push_row(totals)?;

        let (inferred, oracle) = evaluate_all(&state, suite)?;
        info!("{} row: {:?}", task.name(), inferred);
        result.accuracy.push_row(inferred)?;
        result.oracle_accuracy.push_row(oracle)?;
        result.task_logs.push(tlog);

        let ckpt = Checkpoint::capture(&state, &result);
        if let Some(dir) = out {
            save_checkpoint(&ckpt, &dir.join(format!("checkpoint_{:02}", state.tasks_done)))?;
            crate::evaluator::export_report(&result, dir)?;
        }
        result.checkpoints.push(ckpt);
    }
    Ok(result)
}
