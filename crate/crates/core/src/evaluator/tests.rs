use proptest::prelude::*;

use super::*;
use crate::inference::{train_autoencoder, AutoencoderConfig};
use crate::numerics::Rng;
use crate::tasks::{generate_suite, SuiteConfig};
use crate::trainer::{Model, ModelConfig};

fn names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("task_{i}")).collect()
}

fn fixture(method: &str) -> AccuracyMatrix {
    reference_fixtures()
        .into_iter()
        .find(|f| f.method == method)
        .unwrap()
        .accuracy_matrix()
}

const DTD: usize = 3;
const CIFAR: usize = 2;
const CALTECH: usize = 1;
const SUN: usize = 10;

#[test]
fn transfer_cross_checks() {
    let t = metric_transfer(&fixture("merge"));
    assert!((t.per_task[DTD].unwrap() - (44.7 + 35.7 + 38.8) / 3.0).abs() < 1e-12);
    assert_eq!(round1(t.per_task[DTD].unwrap()), 39.7);
    let t = metric_transfer(&fixture("MA"));
    assert!((t.per_task[CIFAR].unwrap() - 68.2).abs() < 1e-12);
    assert_eq!(t.per_task[0], None);
}

#[test]
fn average_cross_checks() {
    let a = metric_average(&fixture("MA"));
    let cifar = [68.2, 68.2, 87.5, 87.2, 87.3, 87.2, 87.3, 87.1, 86.8, 86.8, 86.6];
    assert!((a.per_task[CIFAR].unwrap() - cifar.iter().sum::<f64>() / 11.0).abs() < 1e-9);
    assert_eq!(round1(a.per_task[CIFAR].unwrap()), 83.7);
    assert!((a.per_task[CALTECH].unwrap() - 93.05).abs() < 0.01);
    assert_eq!(round1(a.per_task[CALTECH].unwrap()), 93.1);
}

#[test]
fn last_cross_checks() {
    assert_eq!(metric_last(&fixture("merge")).per_task[SUN], Some(79.8));
    assert_eq!(round1(metric_last(&fixture("MA")).mean.unwrap()), 85.0);
}

#[test]
fn reference_fixtures_reproduce_published_metrics() {
    let r = verify_reference_fixtures();
    assert!(r.passed(), "{}", r.render());
    // 2 methods × 3 metrics × (11 tasks + mean)
    assert_eq!(r.checks.len(), 72);
    let mean = |m: &str, metric: &str| {
        r.checks
            .iter()
            .find(|c| c.method == m && c.metric == metric && c.cell == "mean")
            .unwrap()
            .got
            .unwrap()
    };
    assert_eq!(round1(mean("merge", "transfer")), 68.6);
    assert_eq!(round1(mean("MA", "transfer")), 68.4);
    assert_eq!(round1(mean("MA", "average")), 76.6);
    // 935.6 / 11 = 85.05..., the reference table prints 85.0
    assert!((mean("merge", "last") - 85.0).abs() <= FIXTURE_TOLERANCE);
}

#[test]
fn perturbed_fixture_names_the_cell() {
    let mut sets = reference_fixtures();
    sets[0].matrix[10][DTD] += 5.0;
    let r = verify_fixtures(&sets);
    assert!(!r.passed());
    let failed: Vec<_> = r.failures().collect();
    assert!(failed.iter().any(|c| c.metric == "last" && c.cell == "DTD" && c.method == "MA"));
    assert!(r.render().contains("FAIL MA last DTD: expected 77.1, got 82.1"));
}

#[test]
fn render_is_stable() {
    assert_eq!(verify_reference_fixtures().render(), verify_reference_fixtures().render());
}

#[test]
fn single_task_metrics() {
    let m = AccuracyMatrix::from_rows(names(1), vec![vec![42.0]]).unwrap();
    let r = MetricReport::compute(&m);
    assert_eq!(r.transfer.per_task, vec![None]);
    assert_eq!(r.transfer.mean, None);
    assert_eq!(r.last.per_task, vec![Some(42.0)]);
    assert_eq!(r.average.mean, Some(42.0));
}

#[test]
fn partial_matrix_uses_completed_rows() {
    let m = AccuracyMatrix::from_rows(names(3), vec![vec![10.0, 20.0, 30.0], vec![40.0, 50.0, 60.0]]).unwrap();
    let r = MetricReport::compute(&m);
    assert_eq!(r.transfer.per_task, vec![None, Some(20.0), Some(45.0)]);
    assert_eq!(r.average.per_task, vec![Some(25.0), Some(35.0), Some(45.0)]);
    assert_eq!(r.last.per_task, vec![Some(40.0), Some(50.0), Some(60.0)]);
    assert!(!m.is_complete());
}

#[test]
fn matrix_rejects_bad_rows() {
    let mut m = AccuracyMatrix::new(names(2));
    assert!(m.push_row(vec![1.0]).is_err());
    assert!(matches!(m.push_row(vec![1.0, 101.0]), Err(Error::Data(_))));
    m.push_row(vec![1.0, 2.0]).unwrap();
    m.push_row(vec![1.0, 2.0]).unwrap();
    assert!(matches!(m.push_row(vec![1.0, 2.0]), Err(Error::State(_))));
}

#[test]
fn half_up_rounding() {
    assert_eq!(round1(83.65), 83.7);
    assert_eq!(round1(39.7333), 39.7);
    assert_eq!(round1(68.6127), 68.6);
    assert_eq!(round1(0.05), 0.1);
}

#[test]
fn heatmap_must_not_decrease() {
    let mut h = FreezeHeatmap::new(2);
    h.push_row(vec![1, 2]).unwrap();
    h.push_row(vec![1, 3]).unwrap();
    assert!(matches!(h.push_row(vec![0, 3]), Err(Error::State(_))));
    assert!(h.push_row(vec![1]).is_err());
    assert!(h.is_monotone());
}

fn square(max_t: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_t).prop_flat_map(|t| prop::collection::vec(prop::collection::vec(0.0f64..=100.0, t), t))
}

proptest! {
    #[test]
    fn metrics_match_loop_oracle(rows in square(8)) {
        let t = rows.len();
        let m = AccuracyMatrix::from_rows(names(t), rows.clone()).unwrap();
        let r = MetricReport::compute(&m);
        for j in 0..t {
            let mut s = 0.0;
            for row in &rows[..j] {
                s += row[j];
            }
            let expect = if j == 0 { None } else { Some(s / j as f64) };
            match (expect, r.transfer.per_task[j]) {
                (None, None) => {}
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                _ => prop_assert!(false),
            }
            let mut s = 0.0;
            for row in &rows {
                s += row[j];
            }
            prop_assert!((s / t as f64 - r.average.per_task[j].unwrap()).abs() < 1e-9);
            prop_assert_eq!(r.last.per_task[j], Some(rows[t - 1][j]));
        }
    }

    #[test]
    fn constant_matrix_gives_constant_metrics(t in 1usize..8, c in 0.0f64..=100.0) {
        let m = AccuracyMatrix::from_rows(names(t), vec![vec![c; t]; t]).unwrap();
        let r = MetricReport::compute(&m);
        for (_, block) in r.blocks() {
            for v in block.per_task.iter().flatten() {
                prop_assert!((v - c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn transfer_ignores_row_order_above(rows in square(8), seed in any::<u64>()) {
        let t = rows.len();
        let base = metric_transfer(&AccuracyMatrix::from_rows(names(t), rows.clone()).unwrap());
        for j in 1..t {
            let mut shuffled = rows.clone();
            Rng::new(seed, 0).shuffle(&mut shuffled[..j]);
            let after = metric_transfer(&AccuracyMatrix::from_rows(names(t), shuffled).unwrap());
            prop_assert!((after.per_task[j].unwrap() - base.per_task[j].unwrap()).abs() < 1e-9);
        }
    }
}

fn tiny_suite() -> crate::tasks::TaskSequence {
    generate_suite(&SuiteConfig {
        tasks: 2,
        d_in: 8,
        pool: 10,
        classes_per_task: 5,
        overlap: 0.0,
        train_per_class: 40,
        test_per_class: 40,
        ..SuiteConfig::default()
    })
    .unwrap()
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_in: 8,
        width: 6,
        hidden: 8,
        depth: 1,
        n_experts: 3,
        rank: 2,
        top_k: 1,
        n_classes: 10,
        temperature: 0.1,
        ln_eps: 1e-5,
    }
}

fn tiny_model() -> Model {
    Model::init(&tiny_model_config(), &mut Rng::new(0, 2)).unwrap()
}

#[test]
fn perfect_features_score_100() {
    // a depth-0 identity model whose inputs are exactly the class embeddings
    let cfg = ModelConfig {
        d_in: 4,
        width: 4,
        hidden: 4,
        depth: 0,
        n_experts: 2,
        rank: 1,
        top_k: 1,
        n_classes: 3,
        temperature: 0.1,
        ln_eps: 1e-5,
    };
    let mut m = Model::init(&cfg, &mut Rng::new(1, 2)).unwrap();
    m.input_w.value = crate::numerics::Matrix::identity(4);
    let mut suite = tiny_suite();
    let task = &mut suite.tasks[0];
    task.spec.categories = vec![0, 1, 2];
    task.test = (0..3)
        .map(|c| LabeledSample {
            features: m.class_embeddings.row(c).to_vec(),
            label: c,
        })
        .collect();
    assert_eq!(accuracy(&m, task, &Routing::Oracle).unwrap(), 100.0);
}

#[test]
fn random_model_is_near_chance() {
    // 5 balanced classes, 200 samples: binomial sd of the rate is ~2.8 points
    let suite = tiny_suite();
    let mut total = 0.0;
    for seed in 0..20 {
        let cfg = ModelConfig { depth: 0, ..tiny_model_config() };
        let m = Model::init(&cfg, &mut Rng::new(seed, 2)).unwrap();
        total += accuracy(&m, &suite.tasks[0], &Routing::Oracle).unwrap();
    }
    let mean = total / 20.0;
    assert!((mean - 20.0).abs() < 10.0, "{mean}");
}

#[test]
fn oracle_and_inferred_agree_when_inference_is_right() {
    let suite = tiny_suite();
    let mut m = tiny_model();
    let mut rng = Rng::new(0, 2);
    m.add_router(0, &mut rng).unwrap();
    m.add_router(1, &mut rng).unwrap();
    let cfg = AutoencoderConfig { bottleneck: 6, epochs: 400, ..AutoencoderConfig::default() };
    let aes: Vec<_> = suite
        .tasks
        .iter()
        .map(|t| {
            let data: Vec<Vec<f64>> = t.train.iter().map(|s| s.features.clone()).collect();
            train_autoencoder(t.spec.id, &data, &cfg, &mut Rng::new(t.spec.id as u64, 4)).unwrap()
        })
        .collect();
    let rule = ThresholdRule::Fixed(f64::INFINITY);
    for t in &suite.tasks {
        let (hit, _) = task_identification_rates(&aes, &t.test, t.spec.id, rule).unwrap();
        assert_eq!(hit, 1.0);
        let inferred = accuracy(&m, t, &Routing::Inferred { autoencoders: &aes, rule }).unwrap();
        assert_eq!(inferred, accuracy(&m, t, &Routing::Oracle).unwrap());
    }
}

#[test]
fn empty_split_is_data_error() {
    let mut suite = tiny_suite();
    suite.tasks[0].test.clear();
    assert!(matches!(accuracy(&tiny_model(), &suite.tasks[0], &Routing::Oracle), Err(Error::Data(_))));
}
