//! Experts, per-task routers, top-k gating and the residual MoE block.

mod block;
mod expert;
mod gate;

pub use block::{
    block_backward, block_forward, BlockCache, BlockConfig, BlockGrads, ExpertGrads, MoEBlock,
    Route, Router, RouterGrads, SelectionCounter,
};
pub use expert::{expert_forward, Expert};
pub use gate::{topk_gate, GateResult};

pub(crate) use gate::top_k_indices;

/// `counts[i] += 1` for each `i` in `selected`.
pub fn record_usage(counter: &mut SelectionCounter, selected: &[usize]) -> crate::Result<()> {
    counter.record_usage(selected)
}
