//! Inference-time task identification with one linear autoencoder per task.
//!
//! An input is assigned to the task whose autoencoder reconstructs it best.
//! If even the best reconstruction error is above threshold the input is
//! out of distribution and is classified by the adapter-free path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{random_normal, AdamW, Matrix, OptimizerState, Rng};

/// Seed stream reserved for autoencoder initialization.
pub const AUTOENCODER_STREAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub bottleneck: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Quantile of the training losses used as the OOD threshold.
    pub threshold_quantile: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            bottleneck: 8,
            epochs: 300,
            lr: 0.01,
            threshold_quantile: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskAutoencoder {
    pub task: usize,
    /// `a × d_in`
    pub encoder: Matrix,
    /// `d_in × a`
    pub decoder: Matrix,
    pub trained: bool,
    pub threshold: f64,
}

impl TaskAutoencoder {
    pub fn init(task: usize, d_in: usize, bottleneck: usize, rng: &mut Rng) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= d_in {
            return Err(Error::Config(format!(
                "autoencoder bottleneck must satisfy 1 <= a < d_in, got a={bottleneck}, d_in={d_in}"
            )));
        }
        Ok(Self {
            task,
            encoder: random_normal(bottleneck, d_in, 1.0 / (d_in as f64).sqrt(), rng),
            decoder: random_normal(d_in, bottleneck, 1.0 / (bottleneck as f64).sqrt(), rng),
            trained: false,
            threshold: f64::INFINITY,
        })
    }

    pub fn d_in(&self) -> usize {
        self.encoder.cols()
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decoder.matvec(&self.encoder.matvec(x)?)
    }

    /// Mean squared reconstruction error over the coordinates of `x`.
    pub fn loss(&self, x: &[f64]) -> Result<f64> {
        let y = self.reconstruct(x)?;
        Ok(y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
    }

    pub fn mean_loss(&self, data: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for x in data {
            total += self.loss(x)?;
        }
        Ok(total / data.len().max(1) as f64)
    }

    /// Mean loss and its gradients `(∂/∂encoder, ∂/∂decoder)` over `data`.
    pub(crate) fn loss_and_grads(&self, data: &[Vec<f64>]) -> Result<(f64, Matrix, Matrix)> {
        let d = self.d_in() as f64;
        let n = data.len() as f64;
        let mut genc = Matrix::zeros(self.encoder.rows(), self.encoder.cols());
        let mut gdec = Matrix::zeros(self.decoder.rows(), self.decoder.cols());
        let mut loss = 0.0;
        let scale = 2.0 / (n * d);
        for x in data {
            let h = self.encoder.matvec(x)?;
            let y = self.decoder.matvec(&h)?;
            let r: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
            loss += r.iter().map(|v| v * v).sum::<f64>();
            gdec.add_outer(scale, &r, &h);
            let dh = self.decoder.matvec_t(&r)?;
            genc.add_outer(scale, &dh, x);
        }
        Ok((loss / (n * d), genc, gdec))
    }
}

/// Nearest-rank quantile of `values` (`q` in `(0, 1]`).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Full-batch AdamW on the mean squared reconstruction error. The threshold
/// is the configured quantile of the per-sample training losses.
pub fn train_autoencoder(
    task: usize,
    data: &[Vec<f64>],
    cfg: &AutoencoderConfig,
    rng: &mut Rng,
) -> Result<TaskAutoencoder> {
    let first = data
        .first()
        .ok_or_else(|| Error::Data(format!("no training data for the task {task} autoencoder")))?;
    let mut ae = TaskAutoencoder::init(task, first.len(), cfg.bottleneck, rng)?;
    let hp = AdamW {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut enc_state = OptimizerState::for_param(&ae.encoder);
    let mut dec_state = OptimizerState::for_param(&ae.decoder);
    for _ in 0..cfg.epochs {
        let (_, genc, gdec) = ae.loss_and_grads(data)?;
        crate::numerics::adamw_step(&mut ae.encoder, &genc, &mut enc_state, &hp)?;
        crate::numerics::adamw_step(&mut ae.decoder, &gdec, &mut dec_state, &hp)?;
    }
    let losses = data.iter().map(|x| ae.loss(x)).collect::<Result<Vec<_>>>()?;
    ae.threshold = quantile(&losses, cfg.threshold_quantile);
    ae.trained = true;
    Ok(ae)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskChoice {
    Task(usize),
    OutOfDistribution,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdRule {
    /// One threshold for every autoencoder.
    Fixed(f64),
    /// Each autoencoder's own training-time threshold.
    PerTask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskIdDecision {
    pub chosen: TaskChoice,
    /// `(task, loss)` for every autoencoder, in input order.
    pub losses: Vec<(usize, f64)>,
    pub threshold: f64,
}

/// Picks the autoencoder with the smallest reconstruction loss (ties to the
/// lower task id). Out of distribution iff that loss is strictly above the
/// threshold.
pub fn infer_task(x: &[f64], autoencoders: &[TaskAutoencoder], rule: ThresholdRule) -> Result<TaskIdDecision> {
    if autoencoders.is_empty() {
        return Err(Error::State("task inference needs at least one autoencoder".into()));
    }
    let mut losses = Vec::with_capacity(autoencoders.len());
    let mut best: Option<(usize, f64, f64)> = None;
    for ae in autoencoders {
        if !ae.trained {
            return Err(Error::State(format!("autoencoder for task {} is untrained", ae.task)));
        }
        let l = ae.loss(x)?;
        losses.push((ae.task, l));
        let better = match best {
            None => true,
            Some((t, bl, _)) => l < bl || (l == bl && ae.task < t),
        };
        if better {
            best = Some((ae.task, l, ae.threshold));
        }
    }
    let (task, loss, own) = best.expect("non-empty");
    let threshold = match rule {
        ThresholdRule::Fixed(t) => t,
        ThresholdRule::PerTask => own,
    };
    let chosen = if loss > threshold {
        TaskChoice::OutOfDistribution
    } else {
        TaskChoice::Task(task)
    };
    Ok(TaskIdDecision {
        chosen,
        losses,
        threshold,
    })
}
