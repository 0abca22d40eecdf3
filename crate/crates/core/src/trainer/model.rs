//! The image-encoder analog: input projection, a stack of MoE blocks and an
//! L2-normalized output, scored against fixed class embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{BlockCache, BlockConfig, BlockGrads, MoEBlock, Route};
use crate::numerics::{dot, norm, random_normal, softmax, AdamW, Matrix, Param, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub width: usize,
    pub hidden: usize,
    pub depth: usize,
    pub n_experts: usize,
    pub rank: usize,
    pub top_k: usize,
    /// Size of the global label space.
    pub n_classes: usize,
    pub temperature: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            width: self.width,
            hidden: self.hidden,
            n_experts: self.n_experts,
            rank: self.rank,
            top_k: self.top_k,
            ln_eps: self.ln_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    /// `width × d_in`
    pub input_w: Param,
    /// `1 × width`
    pub input_b: Param,
    pub blocks: Vec<MoEBlock>,
    /// One unit-norm row per global class. Never trained.
    pub class_embeddings: Matrix,
    pub temperature: f64,
}

/// Forward values kept for [`Model::backward`].
#[derive(Clone, Debug)]
pub struct EncodeCache {
    input: Vec<f64>,
    blocks: Vec<BlockCache>,
    /// Output before normalization.
    raw: Vec<f64>,
    raw_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub input_w: Matrix,
    pub input_b: Matrix,
    pub blocks: Vec<BlockGrads>,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            input_w: Matrix::zeros(model.input_w.value.rows(), model.input_w.value.cols()),
            input_b: Matrix::zeros(1, model.width()),
            blocks: model.blocks.iter().map(BlockGrads::zeros_like).collect(),
        }
    }
}

impl Model {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.d_in == 0 || cfg.width == 0 || cfg.n_classes == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(cfg.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", cfg.temperature)));
        }
        let input_w = random_normal(cfg.width, cfg.d_in, 1.0 / (cfg.d_in as f64).sqrt(), rng);
        let blocks = (0..cfg.depth)
            .map(|_| MoEBlock::init(&cfg.block(), rng))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::Argument(m) => Error::Config(m),
                other => other,
            })?;
        let mut class_embeddings = random_normal(cfg.n_classes, cfg.width, 1.0, rng);
        for c in 0..cfg.n_classes {
            let row = class_embeddings.row_mut(c);
            let n = norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self {
            input_w: Param::new(input_w),
            input_b: Param::new(Matrix::zeros(1, cfg.width)),
            blocks,
            class_embeddings,
            temperature: cfg.temperature,
        })
    }

    pub fn width(&self) -> usize {
        self.input_w.value.rows()
    }

    pub fn d_in(&self) -> usize {
        self.input_w.value.cols()
    }

    pub fn add_router(&mut self, task: usize, rng: &mut Rng) -> Result<()> {
        for blk in &mut self.blocks {
            blk.add_router(task, rng)?;
        }
        Ok(())
    }

    /// Whether every block has a router for `task`. Vacuously true for a
    /// blockless model.
    pub fn has_router(&self, task: usize) -> bool {
        self.blocks.iter().all(|b| b.routers.contains_key(&task))
    }

    fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in() {
            return Err(Error::Dimension {
                op: "encode",
                left: (self.d_in(), 1),
                right: (x.len(), 1),
            });
        }
        let mut h = self.input_w.value.matvec(x)?;
        for (v, b) in h.iter_mut().zip(self.input_b.value.as_slice()) {
            *v += b;
        }
        Ok(h)
    }

    fn finish(input: &[f64], blocks: Vec<BlockCache>, raw: Vec<f64>) -> Result<(Vec<f64>, EncodeCache)> {
        let raw_norm = norm(&raw);
        if !(raw_norm > 0.0) || !raw_norm.is_finite() {
            return Err(Error::Numeric(format!("cannot normalize a feature of norm {raw_norm}")));
        }
        let feature = raw.iter().map(|v| v / raw_norm).collect();
        let cache = EncodeCache {
            input: input.to_vec(),
            blocks,
            raw,
            raw_norm,
        };
        Ok((feature, cache))
    }

    /// Side-effect-free forward pass.
    pub fn forward(&self, x: &[f64], route: Route) -> Result<(Vec<f64>, EncodeCache)> {
        let mut h = self.project(x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (out, cache) = blk.forward(&h, route)?;
            caches.push(cache);
            h = out;
        }
        Self::finish(x, caches, h)
    }

    /// Forward pass that counts expert selections in every block.
    pub fn forward_train(&mut self, x: &[f64], route: Route) -> Result<(Vec<f64>, EncodeCache)> {
        let mut h = self.project(x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &mut self.blocks {
            let (out, cache) = blk.forward_train(&h, route)?;
            caches.push(cache);
            h = out;
        }
        Self::finish(x, caches, h)
    }

    /// Unit-norm feature for `x`.
    pub fn features(&self, x: &[f64], route: Route) -> Result<Vec<f64>> {
        Ok(self.forward(x, route)?.0)
    }

    /// Accumulates gradients of a loss with feature gradient `dfeature`.
    /// Returns `∂L/∂x`.
    pub fn backward(&self, cache: &EncodeCache, dfeature: &[f64], grads: &mut ModelGrads) -> Result<Vec<f64>> {
        let z: Vec<f64> = cache.raw.iter().map(|v| v / cache.raw_norm).collect();
        let zd = dot(&z, dfeature);
        let mut dh: Vec<f64> = dfeature
            .iter()
            .zip(&z)
            .map(|(g, zi)| (g - zi * zd) / cache.raw_norm)
            .collect();
        for (blk, (bc, bg)) in self
            .blocks
            .iter()
            .zip(cache.blocks.iter().zip(grads.blocks.iter_mut()))
            .rev()
        {
            dh = blk.backward_into(bc, &dh, bg)?;
        }
        grads.input_w.add_outer(1.0, &dh, &cache.input);
        for (g, v) in grads.input_b.as_mut_slice().iter_mut().zip(&dh) {
            *g += v;
        }
        self.input_w.value.matvec_t(&dh)
    }

    /// AdamW step on every parameter group that received a gradient. The
    /// input projection and the dense block path only move when
    /// `train_backbone` is set.
    pub fn apply_grads(&mut self, grads: &ModelGrads, hp: &AdamW, train_backbone: bool) -> Result<()> {
        if train_backbone {
            self.input_w.update(&grads.input_w, hp)?;
            self.input_b.update(&grads.input_b, hp)?;
        }
        for (blk, g) in self.blocks.iter_mut().zip(&grads.blocks) {
            blk.apply_grads(g, hp, train_backbone)?;
        }
        Ok(())
    }

    /// Class in `categories` whose embedding is most similar to `feature`
    /// (ties to the earlier entry).
    pub fn predict(&self, feature: &[f64], categories: &[usize]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for &c in categories {
            let s = dot(feature, self.class_embeddings.row(c));
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        best.map(|(c, _)| c)
    }
}

/// Feature for `x` routed through task `task`'s routers; `train` counts
/// expert selections.
pub fn encode(model: &mut Model, x: &[f64], task: usize, train: bool) -> Result<Vec<f64>> {
    let route = if model.blocks.is_empty() { Route::AdapterFree } else { Route::Task(task) };
    if train {
        Ok(model.forward_train(x, route)?.0)
    } else {
        Ok(model.forward(x, route)?.0)
    }
}

/// Label-smoothed cross-entropy of `feature · e_c / τ` over `categories`,
/// averaged over the batch. Returns the loss and `∂L/∂feature` per sample.
pub fn similarity_loss(
    features: &[Vec<f64>],
    labels: &[usize],
    categories: &[usize],
    model: &Model,
    smoothing: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Argument(format!(
            "{} features for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Argument(format!("label smoothing {smoothing} is outside [0, 1)")));
    }
    if categories.iter().any(|&c| c >= model.class_embeddings.rows()) {
        return Err(Error::Data("category outside the class-embedding table".into()));
    }
    let n = categories.len();
    let off = if n > 1 { smoothing / (n - 1) as f64 } else { 0.0 };
    let on = if n > 1 { 1.0 - smoothing } else { 1.0 };
    let inv_b = 1.0 / features.len() as f64;
    let tau = model.temperature;

    let mut loss = 0.0;
    let mut dfeatures = Vec::with_capacity(features.len());
    for (f, &y) in features.iter().zip(labels) {
        let target = categories
            .iter()
            .position(|&c| c == y)
            .ok_or_else(|| Error::Data(format!("label {y} is not in the task's category set")))?;
        let logits: Vec<f64> = categories
            .iter()
            .map(|&c| dot(f, model.class_embeddings.row(c)) / tau)
            .collect();
        let p = softmax(&logits)?;
        let mut df = vec![0.0; f.len()];
        for (i, (&c, &pi)) in categories.iter().zip(&p).enumerate() {
            let q = if i == target { on } else { off };
            if q > 0.0 {
                loss -= q * pi.ln() * inv_b;
            }
            let g = (pi - q) * inv_b / tau;
            for (d, e) in df.iter_mut().zip(model.class_embeddings.row(c)) {
                *d += g * e;
            }
        }
        dfeatures.push(df);
    }
    Ok((loss, dfeatures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            d_in: 5,
            width: 8,
            hidden: 16,
            depth: 2,
            n_experts: 4,
            rank: 2,
            top_k: 2,
            n_classes: 6,
            temperature: 0.5,
            ln_eps: 1e-5,
        }
    }

    fn randomized(seed: u64) -> Model {
        let mut rng = Rng::new(seed, 2);
        let mut m = Model::init(&small_config(), &mut rng).unwrap();
        m.add_router(0, &mut rng).unwrap();
        for blk in &mut m.blocks {
            for e in &mut blk.experts {
                e.up.value = random_normal(8, 2, 0.3, &mut rng);
            }
        }
        m
    }

    #[test]
    fn depth_zero_is_normalized_projection() {
        let cfg = ModelConfig { depth: 0, ..small_config() };
        let mut m = Model::init(&cfg, &mut Rng::new(0, 2)).unwrap();
        let x = [0.3, -1.0, 2.0, 0.5, 0.1];
        let f = encode(&mut m, &x, 0, false).unwrap();
        let p = m.input_w.value.matvec(&x).unwrap();
        let n = norm(&p);
        for (a, b) in f.iter().zip(&p) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_blocks_are_residual_identities() {
        let mut m = randomized(1);
        for blk in &mut m.blocks {
            blk.w2.value.fill(0.0);
            for e in &mut blk.experts {
                e.up.value.fill(0.0);
            }
        }
        let x = [1.0, 0.0, -2.0, 0.5, 0.5];
        let f = encode(&mut m, &x, 0, false).unwrap();
        let p = m.input_w.value.matvec(&x).unwrap();
        let n = norm(&p);
        for (a, b) in f.iter().zip(&p) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_norm_output_and_unit_embeddings() {
        let mut m = randomized(2);
        let mut rng = Rng::new(9, 0);
        for _ in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| rng.normal() * 3.0).collect();
            let f = encode(&mut m, &x, 0, false).unwrap();
            assert!((norm(&f) - 1.0).abs() < 1e-9);
        }
        for c in 0..m.class_embeddings.rows() {
            assert!((norm(m.class_embeddings.row(c)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn training_encode_counts_and_eval_does_not() {
        let mut m = randomized(3);
        encode(&mut m, &[1.0; 5], 0, false).unwrap();
        assert!(m.blocks.iter().all(|b| b.counter.total() == 0));
        encode(&mut m, &[1.0; 5], 0, true).unwrap();
        assert!(m.blocks.iter().all(|b| b.counter.total() == 2));
        assert!(matches!(encode(&mut m, &[1.0; 5], 3, false), Err(Error::Lookup(_))));
    }

    #[test]
    fn perfect_match_loss_vanishes() {
        let mut m = randomized(4);
        m.temperature = 1e-3;
        let f = m.class_embeddings.row(2).to_vec();
        let (loss, _) = similarity_loss(&[f], &[2], &[0, 2, 5], &m, 0.0).unwrap();
        assert!(loss < 1e-9, "{loss}");
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        let m = randomized(5);
        let (loss, _) = similarity_loss(&[vec![0.0; 8]], &[1], &[0, 1, 3, 4], &m, 0.0).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        // smoothing does not move the uniform case
        let (loss, _) = similarity_loss(&[vec![0.0; 8]], &[1], &[0, 1, 3, 4], &m, 0.1).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_outside_category_set_is_data_error() {
        let m = randomized(6);
        assert!(matches!(
            similarity_loss(&[vec![0.0; 8]], &[5], &[0, 1], &m, 0.1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let m = randomized(7);
        let mut rng = Rng::new(1, 0);
        let feats: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        let labels = [0, 3, 4, 3];
        let cats = [0, 3, 4];
        let (_, grads) = similarity_loss(&feats, &labels, &cats, &m, 0.1).unwrap();
        let at = Matrix::from_rows(&feats).unwrap();
        let num = finite_diff_grad(
            |p| {
                let rows: Vec<Vec<f64>> = (0..p.rows()).map(|r| p.row(r).to_vec()).collect();
                Ok(similarity_loss(&rows, &labels, &cats, &m, 0.1)?.0)
            },
            &at,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&Matrix::from_rows(&grads).unwrap(), &num) < 1e-6);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let m = randomized(8);
        let mut rng = Rng::new(2, 0);
        let xs: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let labels = [1, 2, 1];
        let cats = [1, 2, 5];
        let loss_of = |m: &Model| -> Result<f64> {
            let feats = xs
                .iter()
                .map(|x| m.features(x, Route::Task(0)))
                .collect::<Result<Vec<_>>>()?;
            Ok(similarity_loss(&feats, &labels, &cats, m, 0.1)?.0)
        };
        let mut grads = ModelGrads::zeros_like(&m);
        let mut caches = Vec::new();
        let mut feats = Vec::new();
        for x in &xs {
            let (f, c) = m.forward(x, Route::Task(0)).unwrap();
            feats.push(f);
            caches.push(c);
        }
        let (_, df) = similarity_loss(&feats, &labels, &cats, &m, 0.1).unwrap();
        for (c, d) in caches.iter().zip(&df) {
            m.backward(c, d, &mut grads).unwrap();
        }
        let num = finite_diff_grad(
            |w| {
                let mut p = m.clone();
                p.input_w.value = w.clone();
                loss_of(&p)
            },
            &m.input_w.value,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&grads.input_w, &num) < 1e-4);
        let num = finite_diff_grad(
            |w| {
                let mut p = m.clone();
                p.blocks[0].routers.get_mut(&0).unwrap().weight.value = w.clone();
                loss_of(&p)
            },
            &m.blocks[0].routers[&0].weight.value,
            1e-5,
        )
        .unwrap();
        let rg = grads.blocks[0].router.as_ref().unwrap();
        assert!(relative_error(&rg.weight, &num) < 1e-4);
    }

    #[test]
    fn prediction_picks_most_similar_class() {
        let m = randomized(9);
        let f = m.class_embeddings.row(4).to_vec();
        assert_eq!(m.predict(&f, &[0, 4, 5]), Some(4));
        assert_eq!(m.predict(&f, &[]), None);
    }
}
