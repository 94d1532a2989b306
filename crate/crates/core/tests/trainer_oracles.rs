mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sddr::model_api::{build, coef, CoefType, Model, ModelSpec, PenaltyKind};
use sddr::trainer::{
    cross_validate, evaluate, fit, fit_with_penalty, make_folds, validation_rows, CustomPenalty, Folds, Optimizer,
    TrainConfig, TrainError,
};

use common::{frame, heteroscedastic, normals, ols, toy, uniform};

fn linear_model(n: usize, seed: u64) -> (Model, sddr::data::DataFrame, Vec<f64>) {
    let (df, y) = toy(seed, n);
    let spec = ModelSpec::new("normal", &[("loc", "~ 1 + x"), ("scale", "~ 1")]).unwrap();
    (build(&y, &df, &spec).unwrap(), df, y)
}

#[test]
fn full_batch_fit_reaches_least_squares() {
    let (mut model, df, y) = linear_model(200, 3);
    let cfg = TrainConfig {
        epochs: 3000,
        batch_size: 200,
        optimizer: Optimizer::adam(0.05),
        ..TrainConfig::default()
    };
    let h = fit(&mut model, &df, &y, &cfg).unwrap();
    assert!(h.final_loss() < h.initial_loss);
    let x = df.numeric("x").unwrap();
    let design = DMatrix::from_fn(200, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    let beta = ols(&design, &y);
    let lin = coef(&model, CoefType::Linear, 1).unwrap();
    assert!((lin["(Intercept)"][0] - beta[0]).abs() < 1e-4);
    assert!((lin["x"][0] - beta[1]).abs() < 1e-4);
    // ML scale is the root mean squared residual
    let rss = (DVector::from_column_slice(&y) - &design * &beta).norm_squared();
    let sigma = coef(&model, CoefType::Linear, 2).unwrap()["(Intercept)"][0].exp();
    assert!((sigma - (rss / 200.0).sqrt()).abs() < 1e-4);
}

#[test]
fn every_optimizer_lowers_the_loss() {
    for opt in [Optimizer::adam(0.01), Optimizer::sgd(0.05, 0.9), Optimizer::rmsprop(0.01), Optimizer::adadelta(1.0, 0.0)] {
        let (mut model, df, y) = linear_model(100, 4);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 100,
            optimizer: opt.clone(),
            ..TrainConfig::default()
        };
        let h = fit(&mut model, &df, &y, &cfg).unwrap();
        assert!(h.final_loss() < h.initial_loss, "{opt:?}");
    }
}

#[test]
fn early_stopping_invariants() {
    let (df, y) = heteroscedastic(5, 300);
    let spec = ModelSpec::new("normal", &[("loc", "~ 1 + s(x, df = 8)"), ("scale", "~ 1 + z")]).unwrap();
    let mut model = build(&y, &df, &spec).unwrap();
    let cfg = TrainConfig {
        epochs: 400,
        batch_size: 16,
        optimizer: Optimizer::adam(0.05),
        validation_split: 0.25,
        early_stopping: true,
        patience: 3,
        seed: 2,
        ..TrainConfig::default()
    };
    let h = fit(&mut model, &df, &y, &cfg).unwrap();
    let val = h.val_loss.clone().unwrap();
    assert_eq!(val.len(), h.stop_epoch);
    assert_eq!(h.loss.len(), h.stop_epoch);
    let argmin = val.iter().enumerate().fold((0, f64::INFINITY), |a, (i, &v)| if v < a.1 { (i, v) } else { a }).0;
    assert_eq!(h.best_epoch, argmin + 1);
    if h.stopped_early {
        assert_eq!(h.stop_epoch - h.best_epoch, cfg.patience);
    }
    // the model holds the weights of the best epoch
    let n_val = validation_rows(300, 0.25);
    let rows: Vec<usize> = (300 - n_val..300).collect();
    let v = evaluate(&model, &df.select_rows(&rows), &y[300 - n_val..]).unwrap();
    assert!((v - val[h.best_epoch - 1]).abs() < 1e-12);
}

#[test]
fn training_is_deterministic_given_the_seed() {
    let run = |seed| {
        let (mut model, df, y) = linear_model(120, 6);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            seed,
            ..TrainConfig::default()
        };
        let h = fit(&mut model, &df, &y, &cfg).unwrap();
        (model.store.values, h.loss)
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1).0, run(2).0);
}

#[test]
fn penalty_is_the_scaled_quadratic_form() {
    let n = 80;
    let x = uniform(7, n, 0.0, 1.0);
    let z = uniform(8, n, -1.0, 1.0);
    let w = uniform(9, n, -1.0, 1.0);
    let df = frame(&[("x", x), ("z", z), ("w", w)]);
    let y = normals(10, n);
    let spec = ModelSpec::new(
        "normal",
        &[("loc", "~ 1 + s(x, df = 5) + ridge(z, la = 0.7) + lasso(w, la = 0.4)"), ("scale", "~ 1")],
    )
    .unwrap();
    let mut model = build(&y, &df, &spec).unwrap();
    let noise = normals(11, model.store.len());
    model.store.values.copy_from_slice(&noise);
    let mut oracle = 0.0;
    for t in &model.formulas[0].structured {
        let u = DVector::from_column_slice(model.store.get(t.slot));
        oracle += match &t.penalty {
            PenaltyKind::Smooth { penalty, lambda, .. } => lambda * (u.transpose() * penalty * &u)[(0, 0)],
            PenaltyKind::Ridge { la } => la * u.norm_squared(),
            PenaltyKind::Lasso { la } => {
                let v = DVector::from_column_slice(model.store.get(t.slot_v.unwrap()));
                la * (u.norm_squared() + v.norm_squared()) / 2.0
            }
            PenaltyKind::None => 0.0,
        };
    }
    for s in [0.0, 0.01, 1.0 / n as f64, 3.0] {
        model.sp_scale = s;
        assert!((model.penalty() - s * oracle).abs() < 1e-12 * oracle.abs().max(1.0));
    }
    let design = model.design(&df).unwrap();
    let parts = model.objective(&design, &y, false, 0, None).unwrap();
    assert!((parts.total - parts.nll - parts.penalty).abs() < 1e-15);
}

struct Anchor {
    index: usize,
    target: f64,
    weight: f64,
}

impl CustomPenalty for Anchor {
    fn value_and_grad(&self, model: &Model, grads: &mut [f64]) -> f64 {
        let d = model.store.values[self.index] - self.target;
        grads[self.index] += 2.0 * self.weight * d;
        self.weight * d * d
    }
}

#[test]
fn custom_penalty_pulls_its_weight() {
    let (mut model, df, y) = linear_model(100, 12);
    let slot = model.formulas[0].structured[1].slot;
    let anchor = Anchor {
        index: slot.offset,
        target: -3.0,
        weight: 1e3,
    };
    let cfg = TrainConfig {
        epochs: 400,
        batch_size: 100,
        optimizer: Optimizer::adam(0.05),
        ..TrainConfig::default()
    };
    fit_with_penalty(&mut model, &df, &y, &cfg, Some(&anchor)).unwrap();
    assert!((coef(&model, CoefType::Linear, 1).unwrap()["x"][0] + 3.0).abs() < 0.05);
}

struct Broken;

impl CustomPenalty for Broken {
    fn value_and_grad(&self, _: &Model, _: &mut [f64]) -> f64 {
        f64::NAN
    }
}

#[test]
fn nonfinite_loss_is_reported() {
    let (mut model, df, y) = linear_model(50, 13);
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let err = fit_with_penalty(&mut model, &df, &y, &cfg, Some(&Broken)).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { epoch: 1, batch: 1, .. }), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn k_folds_partition_rows(n in 2usize..200, k in 2usize..10, seed in 0u64..100) {
        prop_assume!(k <= n);
        let folds = make_folds(&Folds::K(k), n, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = vec![0; n];
        for (train, test) in &folds {
            prop_assert_eq!(train.len() + test.len(), n);
            prop_assert!(test.len() == n / k || test.len() == n / k + 1);
            test.iter().for_each(|&r| seen[r] += 1);
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }
}

#[test]
fn fold_errors() {
    assert!(make_folds(&Folds::K(1), 10, 0).is_err());
    assert!(make_folds(&Folds::K(11), 10, 0).is_err());
    assert!(make_folds(&Folds::Explicit(vec![(vec![0, 1], vec![1])]), 5, 0).is_err());
    assert!(make_folds(&Folds::Explicit(vec![(vec![0, 1], vec![7])]), 5, 0).is_err());
    assert!(make_folds(&Folds::Explicit(vec![(vec![], vec![1])]), 5, 0).is_err());
}

#[test]
fn cross_validation_summary() {
    let (df, y) = toy(14, 90);
    let spec = ModelSpec::new("normal", &[("loc", "~ 1 + x"), ("scale", "~ 1")]).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 16,
        seed: 3,
        ..TrainConfig::default()
    };
    let cv = cross_validate(&spec, &df, &y, &Folds::K(3), &cfg).unwrap();
    assert_eq!(cv.test_sizes, vec![30, 30, 30]);
    assert_eq!(cv.mean_val_loss.len(), 8);
    let mean3 = cv.folds.iter().map(|h| h.val_loss.as_ref().unwrap()[2]).sum::<f64>() / 3.0;
    assert!((cv.mean_val_loss[2] - mean3).abs() < 1e-12);
    let best = cv.mean_val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(cv.mean_val_loss[cv.best_epoch - 1], best);
    let again = cross_validate(&spec, &df, &y, &Folds::K(3), &cfg).unwrap();
    assert_eq!(cv, again);
}
