use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::expert::Expert;
use super::gate::{topk_gate, GateResult};
use crate::error::{Error, Result};
use crate::numerics::{
    gelu, gelu_grad, layer_norm_backward, layer_norm_cached, random_normal, AdamW, Matrix, Param,
    Rng,
};

/// Per-task linear router producing one logit per expert.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    pub task: usize,
    /// `d × N_E`
    pub weight: Param,
    /// `1 × N_E`
    pub bias: Param,
}

impl Router {
    pub fn init(task: usize, width: usize, n_experts: usize, rng: &mut Rng) -> Self {
        Self {
            task,
            weight: Param::new(random_normal(width, n_experts, 1.0 / (width as f64).sqrt(), rng)),
            bias: Param::new(Matrix::zeros(1, n_experts)),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut l = self.weight.value.matvec_t(x)?;
        for (v, b) in l.iter_mut().zip(self.bias.value.as_slice()) {
            *v += b;
        }
        Ok(l)
    }
}

/// How many times each expert of a block has been selected.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionCounter {
    pub counts: Vec<u64>,
}

impl SelectionCounter {
    pub fn new(n_experts: usize) -> Self {
        Self {
            counts: vec![0; n_experts],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    /// `+1` for each selected expert of one sample.
    pub fn record_usage(&mut self, selected: &[usize]) -> Result<()> {
        if selected.is_empty() {
            return Err(Error::Argument("a gate must select at least one expert".into()));
        }
        if let Some(&bad) = selected.iter().find(|&&i| i >= self.counts.len()) {
            return Err(Error::Argument(format!(
                "expert index {bad} out of range for {} experts",
                self.counts.len()
            )));
        }
        for (pos, i) in selected.iter().enumerate() {
            if selected[..pos].contains(i) {
                return Err(Error::Argument(format!("expert {i} selected twice")));
            }
        }
        for &i in selected {
            self.counts[i] += 1;
        }
        Ok(())
    }
}

/// Which router gates the experts on a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    Task(usize),
    /// All gate weights zero: main path and residuals only.
    AdapterFree,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub width: usize,
    pub hidden: usize,
    pub n_experts: usize,
    pub rank: usize,
    pub top_k: usize,
    pub ln_eps: f64,
}

/// Residual block: `x + MLP(LN(x)) + Σ_k W_k · expert_k(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MoEBlock {
    pub ln_gamma: Param,
    pub ln_beta: Param,
    /// `h × d`
    pub w1: Param,
    pub b1: Param,
    /// `d × h`
    pub w2: Param,
    pub b2: Param,
    pub experts: Vec<Expert>,
    pub routers: BTreeMap<usize, Router>,
    pub counter: SelectionCounter,
    pub top_k: usize,
    pub ln_eps: f64,
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BlockCache {
    pub route: Route,
    pub input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: f64,
    normed: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
    pub gate: Option<GateResult>,
    /// `(down·x, up·down·x)` for each selected expert, in `gate.selected` order.
    expert_values: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertGrads {
    pub down: Matrix,
    pub up: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterGrads {
    pub task: usize,
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Gradients for one block. Experts that were not selected, or are frozen,
/// have `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads {
    pub ln_gamma: Matrix,
    pub ln_beta: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub experts: Vec<Option<ExpertGrads>>,
    pub router: Option<RouterGrads>,
}

impl BlockGrads {
    pub fn zeros_like(blk: &MoEBlock) -> Self {
        Self {
            ln_gamma: Matrix::zeros(1, blk.width()),
            ln_beta: Matrix::zeros(1, blk.width()),
            w1: Matrix::zeros(blk.w1.value.rows(), blk.w1.value.cols()),
            b1: Matrix::zeros(1, blk.hidden()),
            w2: Matrix::zeros(blk.w2.value.rows(), blk.w2.value.cols()),
            b2: Matrix::zeros(1, blk.width()),
            experts: vec![None; blk.experts.len()],
            router: None,
        }
    }
}

impl MoEBlock {
    pub fn init(cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.top_k == 0 || cfg.top_k > cfg.n_experts {
            return Err(Error::Argument(format!(
                "top-k must satisfy 1 <= k <= N_E, got k={} N_E={}",
                cfg.top_k, cfg.n_experts
            )));
        }
        let (d, h) = (cfg.width, cfg.hidden);
        let w1 = random_normal(h, d, 1.0 / (d as f64).sqrt(), rng);
        let w2 = random_normal(d, h, 1.0 / (h as f64).sqrt(), rng);
        let experts = (0..cfg.n_experts)
            .map(|_| Expert::init(d, cfg.rank, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ln_gamma: Param::new(Matrix::filled(1, d, 1.0)),
            ln_beta: Param::new(Matrix::zeros(1, d)),
            w1: Param::new(w1),
            b1: Param::new(Matrix::zeros(1, h)),
            w2: Param::new(w2),
            b2: Param::new(Matrix::zeros(1, d)),
            experts,
            routers: BTreeMap::new(),
            counter: SelectionCounter::new(cfg.n_experts),
            top_k: cfg.top_k,
            ln_eps: cfg.ln_eps,
        })
    }

    pub fn width(&self) -> usize {
        self.ln_gamma.value.cols()
    }

    pub fn hidden(&self) -> usize {
        self.b1.value.cols()
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn add_router(&mut self, task: usize, rng: &mut Rng) -> Result<()> {
        if self.routers.contains_key(&task) {
            return Err(Error::State(format!("router for task {task} already exists")));
        }
        let r = Router::init(task, self.width(), self.n_experts(), rng);
        self.routers.insert(task, r);
        Ok(())
    }

    pub fn frozen_mask(&self) -> Vec<bool> {
        self.experts.iter().map(|e| e.frozen).collect()
    }

    pub fn frozen_count(&self) -> usize {
        self.experts.iter().filter(|e| e.frozen).count()
    }

    /// Forward pass without side effects.
    pub fn forward(&self, x: &[f64], route: Route) -> Result<(Vec<f64>, BlockCache)> {
        let d = self.width();
        if x.len() != d {
            return Err(Error::Dimension {
                op: "block_forward",
                left: (d, 1),
                right: (x.len(), 1),
            });
        }
        let (normed, xhat, inv_std) = layer_norm_cached(
            x,
            self.ln_gamma.value.as_slice(),
            self.ln_beta.value.as_slice(),
            self.ln_eps,
        )?;
        let mut pre_act = self.w1.value.matvec(&normed)?;
        for (z, b) in pre_act.iter_mut().zip(self.b1.value.as_slice()) {
            *z += b;
        }
        let act: Vec<f64> = pre_act.iter().map(|&z| gelu(z)).collect();
        let mut out = self.w2.value.matvec(&act)?;
        for ((o, b), xi) in out.iter_mut().zip(self.b2.value.as_slice()).zip(x) {
            *o += b + xi;
        }

        let mut gate = None;
        let mut expert_values = Vec::new();
        if let Route::Task(t) = route {
            let router = self
                .routers
                .get(&t)
                .ok_or_else(|| Error::Lookup(format!("no router for task {t}")))?;
            let g = topk_gate(&router.logits(x)?, self.top_k)?;
            for (e, w) in g.selected_weights() {
                let (h, y) = self.experts[e].forward_cached(x)?;
                for (o, v) in out.iter_mut().zip(&y) {
                    *o += w * v;
                }
                expert_values.push((h, y));
            }
            gate = Some(g);
        }

        let cache = BlockCache {
            route,
            input: x.to_vec(),
            xhat,
            inv_std,
            normed,
            pre_act,
            act,
            gate,
            expert_values,
        };
        Ok((out, cache))
    }

    /// Training-mode forward: identical output, and the selected experts are
    /// counted.
    pub fn forward_train(&mut self, x: &[f64], route: Route) -> Result<(Vec<f64>, BlockCache)> {
        let (out, cache) = self.forward(x, route)?;
        if let Some(g) = &cache.gate {
            self.counter.record_usage(&g.selected)?;
        }
        Ok((out, cache))
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂x`.
    ///
    /// The discrete top-k choice is treated as constant; gradient reaches the
    /// router only through the softmax over the selected logits.
    pub fn backward_into(
        &self,
        cache: &BlockCache,
        upstream: &[f64],
        grads: &mut BlockGrads,
    ) -> Result<Vec<f64>> {
        let d = self.width();
        if upstream.len() != d || cache.input.len() != d {
            return Err(Error::Dimension {
                op: "block_backward",
                left: (d, 1),
                right: (upstream.len(), 1),
            });
        }
        let x = &cache.input;
        let mut dx = upstream.to_vec();

        // dense path
        grads.w2.add_outer(1.0, upstream, &cache.act);
        for (g, u) in grads.b2.as_mut_slice().iter_mut().zip(upstream) {
            *g += u;
        }
        let dact = self.w2.value.matvec_t(upstream)?;
        let dpre: Vec<f64> = dact
            .iter()
            .zip(&cache.pre_act)
            .map(|(da, &z)| da * gelu_grad(z))
            .collect();
        grads.w1.add_outer(1.0, &dpre, &cache.normed);
        for (g, v) in grads.b1.as_mut_slice().iter_mut().zip(&dpre) {
            *g += v;
        }
        let dnormed = self.w1.value.matvec_t(&dpre)?;
        let (dln, dgamma, dbeta) =
            layer_norm_backward(&dnormed, &cache.xhat, cache.inv_std, self.ln_gamma.value.as_slice());
        for (g, v) in grads.ln_gamma.as_mut_slice().iter_mut().zip(&dgamma) {
            *g += v;
        }
        for (g, v) in grads.ln_beta.as_mut_slice().iter_mut().zip(&dbeta) {
            *g += v;
        }
        for (a, b) in dx.iter_mut().zip(&dln) {
            *a += b;
        }

        // experts and gate
        if let (Route::Task(t), Some(gate)) = (cache.route, &cache.gate) {
            let router = self
                .routers
                .get(&t)
                .ok_or_else(|| Error::Lookup(format!("no router for task {t}")))?;
            let mut dgate = Vec::with_capacity(gate.selected.len());
            for (slot, (e, w)) in gate.selected_weights().enumerate() {
                let (h, y) = &cache.expert_values[slot];
                let expert = &self.experts[e];
                dgate.push(crate::numerics::dot(upstream, y));
                // ∂/∂h of w·up·h
                let dh: Vec<f64> = expert.up.value.matvec_t(upstream)?.into_iter().map(|v| v * w).collect();
                let dxe = expert.down.value.matvec_t(&dh)?;
                for (a, b) in dx.iter_mut().zip(&dxe) {
                    *a += b;
                }
                if !expert.frozen {
                    let eg = grads.experts[e].get_or_insert_with(|| ExpertGrads {
                        down: Matrix::zeros(expert.rank(), d),
                        up: Matrix::zeros(d, expert.rank()),
                    });
                    eg.up.add_outer(w, upstream, h);
                    eg.down.add_outer(1.0, &dh, x);
                }
            }
            // softmax over selected logits
            let mean: f64 = gate
                .selected_weights()
                .zip(&dgate)
                .map(|((_, w), dg)| w * dg)
                .sum();
            let rg = grads.router.get_or_insert_with(|| RouterGrads {
                task: t,
                weight: Matrix::zeros(d, self.n_experts()),
                bias: Matrix::zeros(1, self.n_experts()),
            });
            if rg.task != t {
                return Err(Error::State(format!(
                    "gradient buffer holds router {} but cache routed through {t}",
                    rg.task
                )));
            }
            for ((e, w), dg) in gate.selected_weights().zip(&dgate) {
                let dlogit = w * (dg - mean);
                rg.bias.as_mut_slice()[e] += dlogit;
                for i in 0..d {
                    let v = rg.weight.get(i, e) + x[i] * dlogit;
                    rg.weight.set(i, e, v);
                    dx[i] += router.weight.value.get(i, e) * dlogit;
                }
            }
        }
        Ok(dx)
    }

    /// Fresh gradients for one cached forward pass.
    pub fn backward(&self, cache: &BlockCache, upstream: &[f64]) -> Result<(BlockGrads, Vec<f64>)> {
        let mut grads = BlockGrads::zeros_like(self);
        let dx = self.backward_into(cache, upstream, &mut grads)?;
        Ok((grads, dx))
    }

    /// AdamW update from accumulated gradients. Frozen experts are never
    /// touched; the dense path only when `train_backbone` is set.
    pub fn apply_grads(&mut self, grads: &BlockGrads, hp: &AdamW, train_backbone: bool) -> Result<()> {
        if train_backbone {
            self.ln_gamma.update(&grads.ln_gamma, hp)?;
            self.ln_beta.update(&grads.ln_beta, hp)?;
            self.w1.update(&grads.w1, hp)?;
            self.b1.update(&grads.b1, hp)?;
            self.w2.update(&grads.w2, hp)?;
            self.b2.update(&grads.b2, hp)?;
        }
        for (expert, g) in self.experts.iter_mut().zip(&grads.experts) {
            if let (Some(g), false) = (g, expert.frozen) {
                expert.down.update(&g.down, hp)?;
                expert.up.update(&g.up, hp)?;
            }
        }
        if let Some(rg) = &grads.router {
            let router = self
                .routers
                .get_mut(&rg.task)
                .ok_or_else(|| Error::Lookup(format!("no router for task {}", rg.task)))?;
            router.weight.update(&rg.weight, hp)?;
            router.bias.update(&rg.bias, hp)?;
        }
        Ok(())
    }
}

/// Forward through `blk`, counting expert selections when `train` is set.
pub fn block_forward(
    blk: &mut MoEBlock,
    x: &[f64],
    task: usize,
    train: bool,
) -> Result<(Vec<f64>, GateResult)> {
    let (out, cache) = if train {
        blk.forward_train(x, Route::Task(task))?
    } else {
        blk.forward(x, Route::Task(task))?
    };
    let gate = cache.gate.expect("task route always produces a gate");
    Ok((out, gate))
}

/// Gradients for a cached forward. `cache = None` is a state error.
pub fn block_backward(
    blk: &MoEBlock,
    cache: Option<&BlockCache>,
    upstream: &[f64],
) -> Result<(BlockGrads, Vec<f64>)> {
    let cache = cache.ok_or_else(|| Error::State("block_backward called without a forward cache".into()))?;
    blk.backward(cache, upstream)
}
