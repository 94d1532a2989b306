//! Deep ensembles: independently initialized and trained copies of a model
//! combined into a uniform mixture.

use rayon::prelude::*;

use super::{build, predict_distribution, Model, ModelSpec};
use crate::data::DataFrame;
use crate::families::{FittedDistribution, MixtureDistribution};
use crate::model_api::ModelError;
use crate::trainer::{fit, thread_pool, FitHistory, TrainConfig, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<Model>,
    pub histories: Vec<FitHistory>,
    pub seeds: Vec<u64>,
}

/// Trains `n_ensemble` members with seeds `seed + i` (initialization and
/// batch order both).
pub fn ensemble(
    spec: &ModelSpec,
    data: &DataFrame,
    y: &[f64],
    n_ensemble: usize,
    cfg: &TrainConfig,
) -> Result<EnsembleModel, TrainError> {
    if n_ensemble < 2 {
        return Err(TrainError::Config(format!("an ensemble needs at least 2 members, got {n_ensemble}")));
    }
    let seeds: Vec<u64> = (0..n_ensemble as u64).map(|i| spec.seed.wrapping_add(i)).collect();
    ensemble_with_seeds(spec, data, y, &seeds, cfg)
}

/// Trains one member per seed; the seed offsets both `spec.seed` and
/// `cfg.seed` by the same amount as in [`ensemble`].
pub fn ensemble_with_seeds(
    spec: &ModelSpec,
    data: &DataFrame,
    y: &[f64],
    seeds: &[u64],
    cfg: &TrainConfig,
) -> Result<EnsembleModel, TrainError> {
    cfg.validate()?;
    let train = |&seed: &u64| -> Result<(Model, FitHistory), TrainError> {
        let offset = seed.wrapping_sub(spec.seed);
        let member_spec = spec.clone().seed(seed);
        let member_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(offset),
            ..cfg.clone()
        };
        let mut model = build(y, data, &member_spec)?;
        let history = fit(&mut model, data, y, &member_cfg)?;
        Ok((model, history))
    };
    let results: Vec<_> = thread_pool().install(|| seeds.par_iter().map(train).collect());
    let mut members = Vec::with_capacity(seeds.len());
    let mut histories = Vec::with_capacity(seeds.len());
    for (i, r) in results.into_iter().enumerate() {
        let (m, h) = r.map_err(|e| TrainError::Member {
            index: i + 1,
            source: Box::new(e),
        })?;
        members.push(m);
        histories.push(h);
    }
    Ok(EnsembleModel {
        members,
        histories,
        seeds: seeds.to_vec(),
    })
}

impl EnsembleModel {
    /// Fitted distribution of every member at the rows of `data`.
    pub fn member_distributions(&self, data: &DataFrame) -> Result<Vec<FittedDistribution>, ModelError> {
        self.members.iter().map(|m| predict_distribution(m, data)).collect()
    }
}

/// Uniform mixture of the member distributions at the rows of `data`.
pub fn get_ensemble_distribution(ens: &EnsembleModel, data: &DataFrame) -> Result<MixtureDistribution, ModelError> {
    Ok(MixtureDistribution::uniform(ens.member_distributions(data)?)?)
}
