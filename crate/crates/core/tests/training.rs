use std::cell::Cell;

use maflow::data::Dataset;
use maflow::flow::base_noise;
use maflow::targets::{exact_neg_log_z, Energy, IsingSpec};
use maflow::trainer::{
    metrics_file_name, train, Checkpoint, MetricsRow, Objective, Target, TrainConfig, TrainOptions,
    METRICS_HEADER,
};
use maflow::{Error, GroupKind};
use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_points(n: usize, seed: u64) -> Array2<f64> {
    let mut x = base_noise(n, 2, &mut ChaCha8Rng::seed_from_u64(seed));
    x.column_mut(0).mapv_inplace(|v| 0.5 * v + 1.0);
    x
}

fn small_nll() -> TrainConfig {
    TrainConfig {
        hidden: 8,
        steps: 5,
        batch: 16,
        epochs: 4,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    }
}

/// Loss and gradient-norm columns; the wall-time column is excluded.
fn numeric(rows: &[MetricsRow]) -> Vec<(u64, u64, u64, u64)> {
    rows.iter()
        .map(|r| (r.epoch, r.step, r.loss.to_bits(), r.grad_norm.to_bits()))
        .collect()
}

#[test]
fn zero_epochs_returns_initial_checkpoint() {
    let x = toy_points(32, 0);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_nll()
    };
    let report = train(
        &cfg,
        Target::Points(x.view()),
        None,
        TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(report.checkpoint, Checkpoint::initial(&cfg, 2).unwrap());
    assert!(report.metrics.is_empty());
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let x = toy_points(64, 1);
    let cfg = small_nll();
    let a = train(
        &cfg,
        Target::Points(x.view()),
        None,
        TrainOptions::default(),
    )
    .unwrap();
    let b = train(
        &cfg,
        Target::Points(x.view()),
        None,
        TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(numeric(&a.metrics), numeric(&b.metrics));
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    let other = TrainConfig { seed: 9, ..cfg };
    let c = train(
        &other,
        Target::Points(x.view()),
        None,
        TrainOptions::default(),
    )
    .unwrap();
    assert_ne!(numeric(&a.metrics), numeric(&c.metrics));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let x = toy_points(48, 2);
    let full_cfg = TrainConfig {
        epochs: 10,
        ..small_nll()
    };
    let half_cfg = TrainConfig {
        epochs: 5,
        ..small_nll()
    };
    let full = train(
        &full_cfg,
        Target::Points(x.view()),
        None,
        TrainOptions::default(),
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let half = train(
        &half_cfg,
        Target::Points(x.view()),
        None,
        TrainOptions {
            checkpoint_path: Some(path.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, half.checkpoint);
    let rest = train(
        &full_cfg,
        Target::Points(x.view()),
        Some(loaded),
        TrainOptions::default(),
    )
    .unwrap();

    assert_eq!(rest.checkpoint.to_bytes(), full.checkpoint.to_bytes());
    let mut joined = half.metrics.clone();
    joined.extend(rest.metrics);
    assert_eq!(numeric(&joined), numeric(&full.metrics));
}

#[test]
fn resume_rejects_changed_hyperparameters() {
    let x = toy_points(16, 3);
    let cfg = TrainConfig {
        epochs: 1,
        ..small_nll()
    };
    let r = train(
        &cfg,
        Target::Points(x.view()),
        None,
        TrainOptions::default(),
    )
    .unwrap();
    let changed = TrainConfig {
        learning_rate: 0.5,
        epochs: 2,
        ..small_nll()
    };
    let err = train(
        &changed,
        Target::Points(x.view()),
        Some(r.checkpoint),
        TrainOptions::default(),
    );
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn metrics_csv_is_append_only_and_named_by_config() {
    let x = toy_points(32, 4);
    let cfg = TrainConfig {
        epochs: 2,
        ..small_nll()
    };
    let dir = tempfile::tempdir().unwrap();
    let opts = || TrainOptions {
        metrics_dir: Some(dir.path().to_path_buf()),
        run_tag: "toy".into(),
        ..Default::default()
    };
    let a = train(&cfg, Target::Points(x.view()), None, opts()).unwrap();
    let file = a.metrics_file.clone().unwrap();
    assert_eq!(
        file.file_name().unwrap().to_str().unwrap(),
        metrics_file_name(&cfg, "toy")
    );
    train(&cfg, Target::Points(x.view()), None, opts()).unwrap();
    let text = std::fs::read_to_string(&file).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 1 + 2 * a.metrics.len());
    assert_eq!(lines.iter().filter(|l| **l == METRICS_HEADER).count(), 1);
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(first.len(), 5);
    assert_eq!(first[2].parse::<f64>().unwrap(), a.metrics[0].loss);
}

#[test]
fn mismatched_objective_and_dimension_are_rejected() {
    let x = toy_points(8, 5);
    let spec = IsingSpec::new(2, 0.3).unwrap();
    let cfg = small_nll();
    assert!(matches!(
        train(&cfg, Target::Energy(&spec), None, TrainOptions::default()),
        Err(Error::Config(_))
    ));
    let var = TrainConfig {
        objective: Objective::Variational,
        ..small_nll()
    };
    assert!(train(
        &var,
        Target::Points(x.view()),
        None,
        TrainOptions::default()
    )
    .is_err());
    let ck = Checkpoint::initial(&var, 3).unwrap();
    assert!(matches!(
        train(
            &var,
            Target::Energy(&spec),
            Some(ck),
            TrainOptions::default()
        ),
        Err(Error::Shape(_))
    ));
    let raw = Dataset::new(Array2::zeros((2, 4)), maflow::data::Space::UnitInterval);
    assert!(train(
        &cfg,
        Target::Images {
            raw: &raw,
            lambda: 1e-6
        },
        None,
        TrainOptions::default()
    )
    .is_err());
}

/// Quadratic energy that turns NaN after a number of evaluations.
struct Fragile {
    calls: Cell<usize>,
    limit: usize,
}

impl Energy for Fragile {
    fn dim(&self) -> usize {
        2
    }

    fn energy(&self, x: ArrayView1<f64>) -> f64 {
        self.calls.set(self.calls.get() + 1);
        if self.calls.get() > self.limit {
            f64::NAN
        } else {
            0.5 * x.dot(&x)
        }
    }

    fn energy_grad(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.to_owned()
    }
}

#[test]
fn non_finite_loss_aborts_with_last_good_checkpoint() {
    let cfg = TrainConfig {
        objective: Objective::Variational,
        epochs: 10,
        steps_per_epoch: 2,
        checkpoint_every: 1,
        ..small_nll()
    };
    // three full epochs (two steps of `batch` samples each), then NaN
    let energy = Fragile {
        calls: Cell::new(0),
        limit: 3 * 2 * cfg.batch + 5,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let err = train(
        &cfg,
        Target::Energy(&energy),
        None,
        TrainOptions {
            checkpoint_path: Some(path.clone()),
            ..Default::default()
        },
    )
    .unwrap_err();
    match err {
        Error::Aborted {
            epoch,
            last_good,
            cause,
            ..
        } => {
            assert_eq!(epoch, 3);
            assert_eq!(last_good.epoch, 3);
            assert_eq!(last_good.step, 6);
            assert!(matches!(*cause, Error::NonFinite { .. }));
            assert_eq!(Checkpoint::load(&path).unwrap(), *last_good);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn one_dimensional_gaussian_is_learned_to_its_entropy() {
    // data with empirical variance exactly e, so the best Gaussian fit has
    // NLL equal to the entropy ½ln(2πe) + ½
    let mut x = base_noise(1000, 1, &mut ChaCha8Rng::seed_from_u64(6));
    let mean = x.mean().unwrap();
    x.mapv_inplace(|v| v - mean);
    let var = x.mapv(|v| v * v).mean().unwrap();
    let e = std::f64::consts::E;
    x.mapv_inplace(|v| v * (e / var).sqrt());
    let entropy = 0.5 * (2.0 * std::f64::consts::PI * e).ln() + 0.5;

    let cfg = TrainConfig {
        hidden: 16,
        epsilon: 0.1,
        steps: 10,
        batch: 100,
        epochs: 200,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let report = train(
        &cfg,
        Target::Points(x.view()),
        None,
        TrainOptions::default(),
    )
    .unwrap();
    let last_epoch: Vec<f64> = report
        .metrics
        .iter()
        .rev()
        .take(10)
        .map(|r| r.loss)
        .collect();
    let nll = last_epoch.iter().sum::<f64>() / last_epoch.len() as f64;
    assert!((nll - entropy).abs() < 0.01, "nll {nll}, entropy {entropy}");
}

#[test]
fn ising_loss_stays_above_the_exact_bound() {
    let spec = IsingSpec::new(4, IsingSpec::CRITICAL_COUPLING).unwrap();
    let exact = exact_neg_log_z(&spec).unwrap().neg_ln_z;
    let cfg = TrainConfig {
        hidden: 32,
        epochs: 150,
        learning_rate: 1e-2,
        ..TrainConfig::ising()
    };
    assert_eq!(cfg.symmetry, GroupKind::IsingFull);
    let report = train(&cfg, Target::Energy(&spec), None, TrainOptions::default()).unwrap();
    for r in &report.metrics {
        assert!(
            r.loss >= exact - 5.0 * r.std_err,
            "step {}: {} < {}",
            r.step,
            r.loss,
            exact
        );
    }
    let mean = |rows: &[MetricsRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    let m = &report.metrics;
    assert!(mean(&m[m.len() - 20..]) < mean(&m[..20]));
}
