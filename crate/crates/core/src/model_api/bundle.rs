//! Self-contained JSON persistence of a built or fitted model.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{CompiledFormula, Model, ModelError, ModelSpec, PenaltyOptions};
use crate::compute_graph::{NetworkSpec, ParamStore};
use crate::families::{FamilyDescriptor, FamilySpec};
use crate::formula::FormulaSet;
use crate::orthogonalization::OzOptions;
use crate::trainer::FitHistory;

pub const SCHEMA_VERSION: u32 = 1;

/// Serialized model: formulas, family, encoders (knots, constraint
/// transforms, penalties, λ), and all weights as base64 little-endian f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub schema_version: u32,
    pub family: FamilyDescriptor,
    pub formulas: FormulaSet,
    pub networks: IndexMap<String, NetworkSpec>,
    pub penalty: PenaltyOptions,
    pub orthog: OzOptions,
    pub seed: u64,
    pub compiled: Vec<CompiledFormula>,
    pub store: ParamStore,
    pub sp_scale: f64,
    pub n_train: usize,
    pub history: Option<FitHistory>,
}

impl Bundle {
    pub fn from_model(model: &Model) -> Result<Self, ModelError> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            family: model.spec.family.descriptor()?,
            formulas: model.spec.formulas.clone(),
            networks: model.spec.networks.clone(),
            penalty: model.spec.penalty.clone(),
            orthog: model.spec.orthog,
            seed: model.spec.seed,
            compiled: model.formulas.clone(),
            store: model.store.clone(),
            sp_scale: model.sp_scale,
            n_train: model.n_train,
            history: model.history.clone(),
        })
    }

    pub fn into_model(self) -> Result<Model, ModelError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ModelError::Bundle(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let family = FamilySpec::from_descriptor(&self.family)?;
        Ok(Model {
            spec: ModelSpec {
                formulas: self.formulas,
                family,
                networks: self.networks,
                penalty: self.penalty,
                orthog: self.orthog,
                seed: self.seed,
            },
            formulas: self.compiled,
            store: self.store,
            sp_scale: self.sp_scale,
            n_train: self.n_train,
            history: self.history,
        })
    }
}

/// JSON text of `model`.
pub fn save_bundle(model: &Model) -> Result<String, ModelError> {
    serde_json::to_string_pretty(&Bundle::from_model(model)?).map_err(|e| ModelError::Bundle(e.to_string()))
}

pub fn load_bundle(json: &str) -> Result<Model, ModelError> {
    let bundle: Bundle = serde_json::from_str(json).map_err(|e| ModelError::Bundle(e.to_string()))?;
    bundle.into_model()
}
