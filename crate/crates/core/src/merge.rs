//! Selection-count bookkeeping, periodic expert merging and post-task
//! freezing.
//!
//! Every `cycle` iterations of a task, each block overwrites its
//! least-selected trainable expert with the elementwise mean of its two
//! most-selected experts. At the end of a task the `k` most-selected experts
//! of each block are frozen for good.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{top_k_indices, MoEBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeConfig {
    /// Merge every `cycle` iterations (1-based).
    pub cycle: usize,
    pub k_freeze: usize,
    pub enabled: bool,
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycle == 0 {
            return Err(Error::Config("merge cycle must be at least 1".into()));
        }
        if self.k_freeze == 0 {
            return Err(Error::Config("k_freeze must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sources `t1`, `t2` and overwrite target `b1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeTriplet {
    pub t1: usize,
    pub t2: usize,
    pub b1: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub task: usize,
    pub iteration: usize,
    pub block: usize,
    pub sources: Option<(usize, usize)>,
    pub target: Option<usize>,
    pub applied: bool,
}

impl fmt::Display for MergeEvent {
    /// `merge  task  iteration  block  t1  t2  b1  applied`, tab separated;
    /// missing indices print as `-`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        write!(
            f,
            "merge\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.task,
            self.iteration,
            self.block,
            opt(self.sources.map(|s| s.0)),
            opt(self.sources.map(|s| s.1)),
            opt(self.target),
            self.applied
        )
    }
}

/// Zero the selection counts of a block.
pub fn reset_counts(blk: &mut MoEBlock) {
    blk.counter.reset();
}

/// Picks the two most-selected experts (over all experts, frozen included)
/// and the least-selected non-frozen expert outside those two. Ties resolve
/// to the lower index. `None` when no valid target exists.
pub fn select_merge_triplet(counts: &[u64], frozen: &[bool]) -> Option<MergeTriplet> {
    debug_assert_eq!(counts.len(), frozen.len());
    if counts.len() < 3 {
        return None;
    }
    let top = top_k_indices(counts, 2);
    let (t1, t2) = (top[0], top[1]);
    let b1 = (0..counts.len())
        .filter(|&i| !frozen[i] && i != t1 && i != t2)
        .min_by_key(|&i| (counts[i], i))?;
    Some(MergeTriplet { t1, t2, b1 })
}

/// `ε_b1 ← (ε_t1 + ε_t2) / 2` for both factors; the target's optimizer
/// moments restart from zero. Counts and all other experts are untouched.
pub fn merge_step(blk: &mut MoEBlock, triplet: MergeTriplet) -> Result<()> {
    let MergeTriplet { t1, t2, b1 } = triplet;
    let n = blk.n_experts();
    if t1 >= n || t2 >= n || b1 >= n {
        return Err(Error::Argument(format!("merge indices {triplet:?} out of range for {n} experts")));
    }
    if b1 == t1 || b1 == t2 || t1 == t2 {
        return Err(Error::Policy(format!("merge triplet {triplet:?} is not distinct")));
    }
    if blk.experts[b1].frozen {
        return Err(Error::Policy(format!("expert {b1} is frozen and cannot be a merge target")));
    }
    let mean = |a: &crate::numerics::Matrix, b: &crate::numerics::Matrix| {
        let data = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x + y) / 2.0)
            .collect();
        crate::numerics::Matrix::from_vec(a.rows(), a.cols(), data)
    };
    let down = mean(&blk.experts[t1].down.value, &blk.experts[t2].down.value)?;
    let up = mean(&blk.experts[t1].up.value, &blk.experts[t2].up.value)?;
    let target = &mut blk.experts[b1];
    target.down.value = down;
    target.up.value = up;
    target.down.state.reset();
    target.up.state.reset();
    Ok(())
}

/// Runs the merge on every block when `iteration` is a multiple of the
/// cycle. `iteration` counts batches from 1 within the current task.
pub fn maybe_merge(
    task: usize,
    iteration: usize,
    cfg: &MergeConfig,
    blocks: &mut [MoEBlock],
) -> Result<Vec<MergeEvent>> {
    if !cfg.enabled || cfg.cycle == 0 || iteration % cfg.cycle != 0 {
        return Ok(Vec::new());
    }
    let mut events = Vec::with_capacity(blocks.len());
    for (b, blk) in blocks.iter_mut().enumerate() {
        let choice = select_merge_triplet(&blk.counter.counts, &blk.frozen_mask());
        let event = match choice {
            Some(tr) => {
                merge_step(blk, tr)?;
                MergeEvent {
                    task,
                    iteration,
                    block: b,
                    sources: Some((tr.t1, tr.t2)),
                    target: Some(tr.b1),
                    applied: true,
                }
            }
            None => {
                let top = top_k_indices(&blk.counter.counts, 2);
                MergeEvent {
                    task,
                    iteration,
                    block: b,
                    sources: (top.len() == 2).then(|| (top[0], top[1])),
                    target: None,
                    applied: false,
                }
            }
        };
        events.push(event);
    }
    Ok(events)
}

/// Freezes the `k` most-selected experts of the block (ties to the lower
/// index). Experts never selected during the task are not frozen. Returns
/// the indices chosen this call.
pub fn freeze_topk(blk: &mut MoEBlock, k: usize) -> Vec<usize> {
    let chosen: Vec<usize> = top_k_indices(&blk.counter.counts, k.min(blk.n_experts()))
        .into_iter()
        .filter(|&i| blk.counter.counts[i] > 0)
        .collect();
    for &i in &chosen {
        blk.experts[i].frozen = true;
    }
    chosen
}

/// Called after every optimizer step of the training loop.
pub trait IterationHook {
    fn after_iteration(
        &mut self,
        task: usize,
        iteration: usize,
        blocks: &mut [MoEBlock],
    ) -> Result<Vec<MergeEvent>>;
}

/// The frequency-based merge.
#[derive(Clone, Copy, Debug)]
pub struct MergeHook(pub MergeConfig);

impl IterationHook for MergeHook {
    fn after_iteration(
        &mut self,
        task: usize,
        iteration: usize,
        blocks: &mut [MoEBlock],
    ) -> Result<Vec<MergeEvent>> {
        maybe_merge(task, iteration, &self.0, blocks)
    }
}

/// No per-iteration work at all: the plain baseline training loop.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoHooks;

impl IterationHook for NoHooks {
    #[inline(always)]
    fn after_iteration(&mut self, _: usize, _: usize, _: &mut [MoEBlock]) -> Result<Vec<MergeEvent>> {
        Ok(Vec::new())
    }
}
