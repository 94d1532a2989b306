//! Penalized maximum-likelihood training: optimizers, minibatch epochs,
//! validation, early stopping and cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataFrame;
use crate::model_api::{build, mix_seed, Design, Model, ModelError, ModelSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss in epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyTrainingSplit,
    #[error("invalid folds: {0}")]
    Folds(String),
    #[error("member {index} failed: {source}")]
    Member {
        index: usize,
        #[source]
        source: Box<TrainError>,
    },
}

fn default_lr_adam() -> f64 {
    0.001
}
fn default_lr_sgd() -> f64 {
    0.01
}
fn default_lr_adadelta() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-7
}
fn default_rho_rms() -> f64 {
    0.9
}
fn default_rho_adadelta() -> f64 {
    0.95
}

/// Update rule with its hyperparameters. Every rule decays its learning
/// rate as `lr / (1 + decay · t)`, `t` counting previous steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Adam {
        #[serde(default = "default_lr_adam")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        epsilon: f64,
        #[serde(default)]
        decay: f64,
    },
    Sgd {
        #[serde(default = "default_lr_sgd")]
        lr: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        decay: f64,
    },
    Rmsprop {
        #[serde(default = "default_lr_adam")]
        lr: f64,
        #[serde(default = "default_rho_rms")]
        rho: f64,
        #[serde(default = "default_eps")]
        epsilon: f64,
        #[serde(default)]
        decay: f64,
    },
    Adadelta {
        #[serde(default = "default_lr_adadelta")]
        lr: f64,
        #[serde(default = "default_rho_adadelta")]
        rho: f64,
        #[serde(default = "default_eps")]
        epsilon: f64,
        #[serde(default)]
        decay: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(default_lr_adam())
    }
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
            decay: 0.0,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer::Sgd { lr, momentum, decay: 0.0 }
    }

    pub fn rmsprop(lr: f64) -> Self {
        Optimizer::Rmsprop {
            lr,
            rho: default_rho_rms(),
            epsilon: default_eps(),
            decay: 0.0,
        }
    }

    pub fn adadelta(lr: f64, decay: f64) -> Self {
        Optimizer::Adadelta {
            lr,
            rho: default_rho_adadelta(),
            epsilon: default_eps(),
            decay,
        }
    }

    fn lr_decay(&self) -> (f64, f64) {
        match *self {
            Optimizer::Adam { lr, decay, .. }
            | Optimizer::Sgd { lr, decay, .. }
            | Optimizer::Rmsprop { lr, decay, .. }
            | Optimizer::Adadelta { lr, decay, .. } => (lr, decay),
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let (lr, decay) = self.lr_decay();
        if !(lr > 0.0 && lr.is_finite()) || !(decay >= 0.0 && decay.is_finite()) {
            return Err(TrainError::Config(format!("optimizer needs lr > 0 and decay >= 0, got {lr}, {decay}")));
        }
        Ok(())
    }
}

/// Per-value optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
        }
    }
}

/// Applies one update of `opt` to `params`.
pub fn optimizer_step(opt: &Optimizer, state: &mut OptimizerState, params: &mut [f64], grads: &[f64]) {
    debug_assert_eq!(params.len(), grads.len());
    let (lr0, decay) = opt.lr_decay();
    let lr = lr0 / (1.0 + decay * state.steps as f64);
    state.steps += 1;
    let t = state.steps as i32;
    match *opt {
        Optimizer::Adam {
            beta1, beta2, epsilon, ..
        } => {
            let lr_t = lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
            for i in 0..params.len() {
                let g = grads[i];
                state.first[i] = beta1 * state.first[i] + (1.0 - beta1) * g;
                state.second[i] = beta2 * state.second[i] + (1.0 - beta2) * g * g;
                params[i] -= lr_t * state.first[i] / (state.second[i].sqrt() + epsilon);
            }
        }
        Optimizer::Sgd { momentum, .. } => {
            for i in 0..params.len() {
                state.first[i] = momentum * state.first[i] - lr * grads[i];
                params[i] += state.first[i];
            }
        }
        Optimizer::Rmsprop { rho, epsilon, .. } => {
            for i in 0..params.len() {
                let g = grads[i];
                state.second[i] = rho * state.second[i] + (1.0 - rho) * g * g;
                params[i] -= lr * g / (state.second[i].sqrt() + epsilon);
            }
        }
        Optimizer::Adadelta { rho, epsilon, .. } => {
            // `second` accumulates squared gradients, `first` squared updates.
            for i in 0..params.len() {
                let g = grads[i];
                state.second[i] = rho * state.second[i] + (1.0 - rho) * g * g;
                let update = g * (state.first[i] + epsilon).sqrt() / (state.second[i] + epsilon).sqrt();
                params[i] -= lr * update;
                state.first[i] = rho * state.first[i] + (1.0 - rho) * update * update;
            }
        }
    }
}

fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    32
}
fn default_patience() -> usize {
    5
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub validation_split: f64,
    #[serde(default)]
    pub early_stopping: bool,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Multiplier of the built-in penalties; `None` means `1 / n`.
    #[serde(default)]
    pub sp_scale: Option<f64>,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            optimizer: Optimizer::default(),
            validation_split: 0.0,
            early_stopping: false,
            patience: default_patience(),
            seed: 0,
            sp_scale: None,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_split) {
            return Err(TrainError::Config(format!(
                "validation_split {} outside [0, 1)",
                self.validation_split
            )));
        }
        if let Some(s) = self.sp_scale {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(TrainError::Config(format!("sp_scale {s} must be finite and >= 0")));
            }
        }
        self.optimizer.validate()
    }
}

/// Extra penalty on the weights, added unscaled to every batch loss.
pub trait CustomPenalty: Sync {
    /// Returns the penalty and adds its gradient to `grads`.
    fn value_and_grad(&self, model: &Model, grads: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitHistory {
    /// Full objective before the first update.
    pub initial_loss: f64,
    /// Mean batch loss per epoch.
    pub loss: Vec<f64>,
    /// Inference-mode objective on the validation rows per epoch.
    pub val_loss: Option<Vec<f64>>,
    /// 1-based epoch whose weights the model holds.
    pub best_epoch: usize,
    /// 1-based last epoch run.
    pub stop_epoch: usize,
    pub stopped_early: bool,
}

impl FitHistory {
    pub fn epochs_run(&self) -> usize {
        self.loss.len()
    }

    /// Final training loss.
    pub fn final_loss(&self) -> f64 {
        *self.loss.last().expect("at least one epoch")
    }
}

fn full_objective(
    model: &Model,
    design: &Design,
    y: &[f64],
    penalty: Option<&dyn CustomPenalty>,
) -> Result<f64, ModelError> {
    let parts = model.objective(design, y, false, 0, None)?;
    let extra = match penalty {
        Some(p) => p.value_and_grad(model, &mut model.store.zeros_like()),
        None => 0.0,
    };
    Ok(parts.total + extra)
}

/// Inference-mode objective of `model` on `data`.
pub fn evaluate(model: &Model, data: &DataFrame, y: &[f64]) -> Result<f64, ModelError> {
    let design = model.design(data)?;
    full_objective(model, &design, y, None)
}

/// Number of trailing validation rows for `n` observations.
pub fn validation_rows(n: usize, split: f64) -> usize {
    (split * n as f64).floor() as usize
}

/// Fits `model` to `(data, y)`; the last `⌊validation_split · n⌋` rows are
/// held out for validation.
pub fn fit(model: &mut Model, data: &DataFrame, y: &[f64], cfg: &TrainConfig) -> Result<FitHistory, TrainError> {
    fit_with_penalty(model, data, y, cfg, None)
}

pub fn fit_with_penalty(
    model: &mut Model,
    data: &DataFrame,
    y: &[f64],
    cfg: &TrainConfig,
    penalty: Option<&dyn CustomPenalty>,
) -> Result<FitHistory, TrainError> {
    cfg.validate()?;
    let n = data.nrows();
    if y.len() != n {
        return Err(ModelError::ResponseLength { got: y.len(), expected: n }.into());
    }
    let design = model.design(data)?;
    let n_val = validation_rows(n, cfg.validation_split);
    if n_val >= n {
        return Err(TrainError::EmptyTrainingSplit);
    }
    if n_val == 0 {
        return fit_design(model, &design, y, None, cfg, penalty);
    }
    let train: Vec<usize> = (0..n - n_val).collect();
    let val: Vec<usize> = (n - n_val..n).collect();
    let train_design = design.select(&train);
    let val_design = design.select(&val);
    fit_design(
        model,
        &train_design,
        &y[..n - n_val],
        Some((&val_design, &y[n - n_val..])),
        cfg,
        penalty,
    )
}

/// Fits on `train` and monitors `val`; `validation_split` is ignored.
pub fn fit_split(
    model: &mut Model,
    train: (&DataFrame, &[f64]),
    val: (&DataFrame, &[f64]),
    cfg: &TrainConfig,
) -> Result<FitHistory, TrainError> {
    cfg.validate()?;
    let td = model.design(train.0)?;
    let vd = model.design(val.0)?;
    fit_design(model, &td, train.1, Some((&vd, val.1)), cfg, None)
}

/// Core loop over materialized designs.
pub fn fit_design(
    model: &mut Model,
    train: &Design,
    y: &[f64],
    val: Option<(&Design, &[f64])>,
    cfg: &TrainConfig,
    penalty: Option<&dyn CustomPenalty>,
) -> Result<FitHistory, TrainError> {
    cfg.validate()?;
    let n = train.nrows;
    if n == 0 {
        return Err(TrainError::EmptyTrainingSplit);
    }
    if y.len() != n {
        return Err(ModelError::ResponseLength { got: y.len(), expected: n }.into());
    }
    model.sp_scale = cfg.sp_scale.unwrap_or(1.0 / model.n_train as f64);
    let initial_loss = full_objective(model, train, y, penalty)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(model.store.len());
    let mut grads = model.store.zeros_like();
    let mut order: Vec<usize> = (0..n).collect();
    let full_batch = cfg.batch_size >= n;
    let mut loss = Vec::with_capacity(cfg.epochs);
    let mut val_loss = val.map(|_| Vec::with_capacity(cfg.epochs));
    let mut best = (f64::INFINITY, 0usize, model.store.values.clone());
    let mut stopped_early = false;
    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle && !full_batch {
            order.shuffle(&mut rng);
        }
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = mix_seed(cfg.seed, step);
            step += 1;
            let selected;
            let (design, yb): (&Design, Vec<f64>) = if full_batch {
                (train, y.to_vec())
            } else {
                selected = train.select(chunk);
                (&selected, chunk.iter().map(|&i| y[i]).collect())
            };
            let parts = model
                .objective(design, &yb, true, batch_seed, Some(&mut grads))
                .map_err(|e| match e {
                    ModelError::NonFiniteLoss(detail) => TrainError::NonFinite {
                        epoch,
                        batch: b + 1,
                        detail,
                    },
                    other => other.into(),
                })?;
            let extra = match penalty {
                Some(p) => p.value_and_grad(model, &mut grads),
                None => 0.0,
            };
            let total = parts.total + extra;
            if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b + 1,
                    detail: if total.is_finite() { "gradient".into() } else { "custom penalty".into() },
                });
            }
            optimizer_step(&cfg.optimizer, &mut state, &mut model.store.values, &grads);
            sum += total;
            batches += 1;
        }
        loss.push(sum / batches as f64);
        let monitored = match (val, val_loss.as_mut()) {
            (Some((vd, vy)), Some(curve)) => {
                let v = full_objective(model, vd, vy, penalty).map_err(|e| match e {
                    ModelError::NonFiniteLoss(detail) => TrainError::NonFinite {
                        epoch,
                        batch: 0,
                        detail: format!("validation: {detail}"),
                    },
                    other => other.into(),
                })?;
                curve.push(v);
                v
            }
            _ => loss[epoch - 1],
        };
        if monitored < best.0 {
            best = (monitored, epoch, model.store.values.clone());
        } else if cfg.early_stopping && epoch - best.1 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let stop_epoch = loss.len();
    let best_epoch = if cfg.early_stopping {
        model.store.values = best.2;
        best.1
    } else {
        stop_epoch
    };
    let history = FitHistory {
        initial_loss,
        loss,
        val_loss,
        best_epoch,
        stop_epoch,
        stopped_early,
    };
    model.history = Some(history.clone());
    Ok(history)
}

/// Caps worker threads at `SDDR_THREADS` when set.
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var("SDDR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Folds {
    /// `k` contiguous blocks after one seeded shuffle.
    K(usize),
    /// Explicit `(train, test)` row indices.
    Explicit(Vec<(Vec<usize>, Vec<usize>)>),
}

/// `(train, test)` row sets of every fold.
pub fn make_folds(folds: &Folds, n: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>, TrainError> {
    match folds {
        Folds::K(k) => {
            if *k < 2 || *k > n {
                return Err(TrainError::Folds(format!("{k} folds for {n} rows")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut out = Vec::with_capacity(*k);
            for f in 0..*k {
                let lo = f * n / k;
                let hi = (f + 1) * n / k;
                let test = order[lo..hi].to_vec();
                let train = order[..lo].iter().chain(&order[hi..]).copied().collect();
                out.push((train, test));
            }
            Ok(out)
        }
        Folds::Explicit(list) => {
            if list.is_empty() {
                return Err(TrainError::Folds("no folds given".into()));
            }
            for (i, (train, test)) in list.iter().enumerate() {
                if train.is_empty() || test.is_empty() {
                    return Err(TrainError::Folds(format!("fold {} has an empty side", i + 1)));
                }
                if let Some(r) = train.iter().chain(test).find(|&&r| r >= n) {
                    return Err(TrainError::Folds(format!("fold {}: row {r} out of range ({n} rows)", i + 1)));
                }
                let mut seen = vec![false; n];
                train.iter().for_each(|&r| seen[r] = true);
                if let Some(r) = test.iter().find(|&&r| seen[r]) {
                    return Err(TrainError::Folds(format!("fold {}: row {r} in both train and test", i + 1)));
                }
            }
            Ok(list.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub folds: Vec<FitHistory>,
    pub test_sizes: Vec<usize>,
    /// Per-epoch means over folds, up to the shortest fold history.
    pub mean_loss: Vec<f64>,
    pub mean_val_loss: Vec<f64>,
    /// 1-based epoch minimizing `mean_val_loss`.
    pub best_epoch: usize,
}

/// Rebuilds and fits the model once per fold, validating on the test rows.
pub fn cross_validate(
    spec: &ModelSpec,
    data: &DataFrame,
    y: &[f64],
    folds: &Folds,
    cfg: &TrainConfig,
) -> Result<CvResult, TrainError> {
    cfg.validate()?;
    let sets = make_folds(folds, data.nrows(), cfg.seed)?;
    let run = |(train, test): &(Vec<usize>, Vec<usize>)| -> Result<FitHistory, TrainError> {
        let td = data.select_rows(train);
        let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let vd = data.select_rows(test);
        let vy: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        let mut model = build(&ty, &td, spec)?;
        fit_split(&mut model, (&td, &ty), (&vd, &vy), cfg)
    };
    let results: Vec<Result<FitHistory, TrainError>> = thread_pool().install(|| sets.par_iter().map(run).collect());
    let histories = results
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| TrainError::Member {
                index: i + 1,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let len = histories.iter().map(FitHistory::epochs_run).min().unwrap_or(0);
    let k = histories.len() as f64;
    let mean = |f: &dyn Fn(&FitHistory) -> &[f64]| -> Vec<f64> {
        (0..len).map(|e| histories.iter().map(|h| f(h)[e]).sum::<f64>() / k).collect()
    };
    let mean_loss = mean(&|h| &h.loss);
    let mean_val_loss = mean(&|h| h.val_loss.as_deref().expect("cv validates every fold"));
    let best_epoch = mean_val_loss
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc })
        .0
        + 1;
    Ok(CvResult {
        folds: histories,
        test_sizes: sets.iter().map(|s| s.1.len()).collect(),
        mean_loss,
        mean_val_loss,
        best_epoch,
    })
}
