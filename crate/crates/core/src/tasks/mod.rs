//! Synthetic task-incremental classification suites.
//!
//! Every global class owns a latent prototype. A task picks a category set
//! from the class pool and observes its classes through a task-specific
//! orthogonal transform plus shift:
//!
//! ```text
//! x = Q_t (p_c + σ·n) + s_t,   n ~ N(0, I)
//! ```
//!
//! Category sets share a common core of `round(overlap × classes_per_task)`
//! classes, so every pair of tasks overlaps in exactly that many classes.

mod io;

use serde::{Deserialize, Serialize};

pub use io::{export_suite, import_suite};

use crate::error::{Error, Result};
use crate::numerics::{random_normal, Matrix, Rng};

/// Seed stream reserved for suite generation.
pub const SUITE_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub tasks: usize,
    pub d_in: usize,
    pub pool: usize,
    pub classes_per_task: usize,
    /// Norm of every class prototype.
    pub separation: f64,
    /// Fraction of each category set shared with every other task.
    pub overlap: f64,
    /// Per-coordinate standard deviation σ.
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the per-task shift entries.
    pub shift_scale: f64,
    /// Reuse the first task's transform for every task.
    pub shared_transform: bool,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            d_in: 32,
            pool: 20,
            classes_per_task: 5,
            separation: 3.0,
            overlap: 0.4,
            noise: 0.1,
            train_per_class: 200,
            test_per_class: 100,
            shift_scale: 0.5,
            shared_transform: false,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    /// Number of classes every pair of tasks shares.
    pub fn overlap_count(&self) -> usize {
        (self.overlap * self.classes_per_task as f64).round() as usize
    }

    /// Distinct classes the suite draws from the pool.
    pub fn classes_needed(&self) -> usize {
        let m = self.overlap_count();
        if self.tasks == 0 {
            return 0;
        }
        m + self.tasks * (self.classes_per_task - m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(Error::Config("a suite needs at least one task".into()));
        }
        if self.d_in == 0 {
            return Err(Error::Config("d_in must be positive".into()));
        }
        if self.classes_per_task == 0 || self.classes_per_task > self.pool {
            return Err(Error::Config(format!(
                "classes per task ({}) must be in 1..={} (pool size)",
                self.classes_per_task, self.pool
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap fraction {} is outside [0, 1]", self.overlap)));
        }
        if self.classes_needed() > self.pool {
            return Err(Error::Config(format!(
                "overlap {} with {} tasks of {} classes needs {} distinct classes but the pool has {}",
                self.overlap,
                self.tasks,
                self.classes_per_task,
                self.classes_needed(),
                self.pool
            )));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.separation > 0.0 && self.shift_scale >= 0.0) {
            return Err(Error::Config("noise and shift must be >= 0 and separation > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: usize,
    /// Global class ids, ascending.
    pub categories: Vec<usize>,
    /// Orthogonal `d_in × d_in`.
    pub transform: Matrix,
    pub shift: Vec<f64>,
    pub noise: f64,
    pub train_count: usize,
    pub test_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Task {
    pub fn name(&self) -> String {
        format!("task_{}", self.spec.id + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub config: SuiteConfig,
    /// One prototype per global class, `pool × d_in`.
    pub prototypes: Matrix,
    pub tasks: Vec<Task>,
}

impl TaskSequence {
    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(Task::name).collect()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// column signs fixed by `diag(R) > 0`.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> Matrix {
    let g = random_normal(n, n, 1.0, rng);
    let qr = nalgebra::DMatrix::from_row_slice(n, n, g.as_slice()).qr();
    let (q, r) = (qr.q(), qr.r());
    let mut out = Matrix::zeros(n, n);
    for j in 0..n {
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out.set(i, j, q[(i, j)] * sign);
        }
    }
    out
}

/// `max |QᵀQ − I|`.
pub fn orthogonality_defect(q: &Matrix) -> f64 {
    let qtq = q.transpose().matmul(q).expect("square");
    let mut worst = 0.0_f64;
    for i in 0..q.cols() {
        for j in 0..q.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((qtq.get(i, j) - target).abs());
        }
    }
    worst
}

fn observe(spec: &TaskSpec, prototype: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    let latent: Vec<f64> = prototype.iter().map(|p| p + spec.noise * rng.normal()).collect();
    let mut x = spec.transform.matvec(&latent)?;
    for (v, s) in x.iter_mut().zip(&spec.shift) {
        *v += s;
    }
    Ok(x)
}

/// Builds the full suite deterministically from `cfg.seed`.
pub fn generate_suite(cfg: &SuiteConfig) -> Result<TaskSequence> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed, SUITE_STREAM);
    let d = cfg.d_in;

    let mut prototypes = random_normal(cfg.pool, d, 1.0, &mut rng);
    for c in 0..cfg.pool {
        let row = prototypes.row_mut(c);
        let n = crate::numerics::norm(row);
        row.iter_mut().for_each(|v| *v *= cfg.separation / n);
    }

    let mut order: Vec<usize> = (0..cfg.pool).collect();
    rng.shuffle(&mut order);
    let m = cfg.overlap_count();
    let fresh = cfg.classes_per_task - m;
    let core = &order[..m];

    let mut tasks: Vec<Task> = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let mut categories: Vec<usize> = core.to_vec();
        categories.extend_from_slice(&order[m + t * fresh..m + (t + 1) * fresh]);
        categories.sort_unstable();

        let (transform, shift) = match (cfg.shared_transform, tasks.first()) {
            (true, Some(first)) => (first.spec.transform.clone(), first.spec.shift.clone()),
            _ => {
                let q = random_orthogonal(d, &mut rng);
                let s = (0..d).map(|_| rng.normal() * cfg.shift_scale).collect();
                (q, s)
            }
        };
        let spec = TaskSpec {
            id: t,
            train_count: categories.len() * cfg.train_per_class,
            test_count: categories.len() * cfg.test_per_class,
            categories,
            transform,
            shift,
            noise: cfg.noise,
        };
        let mut train = Vec::with_capacity(spec.train_count);
        let mut test = Vec::with_capacity(spec.test_count);
        for &c in &spec.categories {
            for _ in 0..cfg.train_per_class {
                train.push(LabeledSample {
                    features: observe(&spec, prototypes.row(c), &mut rng)?,
                    label: c,
                });
            }
            for _ in 0..cfg.test_per_class {
                test.push(LabeledSample {
                    features: observe(&spec, prototypes.row(c), &mut rng)?,
                    label: c,
                });
            }
        }
        tasks.push(Task { spec, train, test });
    }
    Ok(TaskSequence {
        config: cfg.clone(),
        prototypes,
        tasks,
    })
}

/// `batch` samples drawn uniformly with replacement from the train split.
pub fn sample_batch<'a>(task: &'a Task, batch: usize, rng: &mut Rng) -> Result<Vec<&'a LabeledSample>> {
    if batch == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    if task.train.is_empty() {
        return Err(Error::State(format!("task {} has an empty train split", task.spec.id)));
    }
    Ok((0..batch).map(|_| &task.train[rng.index(task.train.len())]).collect())
}

/// Nearest-prototype classifier in latent space: inverts the task transform
/// and picks the closest prototype among the task's classes.
pub fn nearest_prototype_accuracy(suite: &TaskSequence, task: &Task, split: &[LabeledSample]) -> Result<f64> {
    let qt = task.spec.transform.transpose();
    let mut correct = 0usize;
    for s in split {
        let centered: Vec<f64> = s.features.iter().zip(&task.spec.shift).map(|(x, sh)| x - sh).collect();
        let z = qt.matvec(&centered)?;
        let best = task
            .spec
            .categories
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da: f64 = suite.prototypes.row(a).iter().zip(&z).map(|(p, v)| (p - v).powi(2)).sum();
                let db: f64 = suite.prototypes.row(b).iter().zip(&z).map(|(p, v)| (p - v).powi(2)).sum();
                da.total_cmp(&db)
            })
            .expect("non-empty category set");
        if best == s.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / split.len().max(1) as f64)
}
