//! Model assembly and queries: build additive predictors from formulas and
//! data, evaluate them, and report coefficients, partial effects,
//! predictions and log scores.

mod bundle;
mod design;
mod ensemble;
mod refit;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{linspace, BasisError};
use crate::compute_graph::{init_params, GraphError, Network, NetworkSpec, ParamStore, Slot, Tape};
use crate::data::{DataError, DataFrame};
use crate::families::{make_family, FamilyError, FamilySpec, FittedDistribution};
use crate::formula::{parse_formula, FormulaError, FormulaSet, NamedFormula, Term};
use crate::orthogonalization::{build_oz_plans, OrthoError, OzOptions, OzOrigin, Projector};
use crate::trainer::FitHistory;

pub use bundle::{load_bundle, save_bundle, Bundle, SCHEMA_VERSION};
pub use design::{network_encoder, structured_encoder, Encoder, TermEncoder};
pub use ensemble::{ensemble, ensemble_with_seeds, get_ensemble_distribution, EnsembleModel};
pub use refit::{last_layer_refit, Band, RefitResult};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ortho(#[from] OrthoError),
    #[error("network '{0}' is used in a formula but not defined")]
    UnknownNetwork(String),
    #[error("network '{0}' is defined twice")]
    DuplicateNetwork(String),
    #[error("formula '{0}' has no terms; a predictor needs at least one")]
    EmptyPredictor(String),
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("parameter index {index} outside 1..{k}")]
    ParamIndex { index: usize, k: usize },
    #[error("column '{column}' has a non-finite value in row {row}")]
    NonFinite { column: String, row: usize },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("{got} responses for {expected} rows")]
    ResponseLength { got: usize, expected: usize },
    #[error("not supported: {0}")]
    NotSupported(String),
    #[error("bundle error: {0}")]
    Bundle(String),
}

fn default_df() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyOptions {
    #[serde(default = "default_df")]
    pub df_default: f64,
    #[serde(default)]
    pub hat1: bool,
}

impl Default for PenaltyOptions {
    fn default() -> Self {
        Self {
            df_default: default_df(),
            hat1: false,
        }
    }
}

/// Everything needed to build a model from data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub formulas: FormulaSet,
    pub family: FamilySpec,
    pub networks: IndexMap<String, NetworkSpec>,
    pub penalty: PenaltyOptions,
    pub orthog: OzOptions,
    pub seed: u64,
}

impl ModelSpec {
    /// One formula per distribution parameter, in parameter order.
    pub fn new(family: &str, formulas: &[(&str, &str)]) -> Result<Self, ModelError> {
        Self::with_family(make_family(family)?, formulas)
    }

    pub fn with_family(family: FamilySpec, formulas: &[(&str, &str)]) -> Result<Self, ModelError> {
        let named = formulas
            .iter()
            .map(|(name, text)| {
                Ok(NamedFormula {
                    name: name.to_string(),
                    formula: parse_formula(text)?,
                })
            })
            .collect::<Result<Vec<_>, FormulaError>>()?;
        let formulas = if named.len() == family.n_params() {
            FormulaSet::new(named, family.n_params())?
        } else {
            FormulaSet {
                formulas: named,
                mapping: Vec::new(),
            }
        };
        Ok(Self {
            formulas,
            family,
            networks: IndexMap::new(),
            penalty: PenaltyOptions::default(),
            orthog: OzOptions::default(),
            seed: 0,
        })
    }

    /// Sets the formula → parameter mapping (1-based parameter indices).
    pub fn mapping(mut self, mapping: &[Vec<usize>]) -> Result<Self, ModelError> {
        let formulas = std::mem::take(&mut self.formulas.formulas);
        self.formulas = FormulaSet::with_mapping(formulas, mapping, self.family.n_params())?;
        Ok(self)
    }

    pub fn network(mut self, spec: NetworkSpec) -> Result<Self, ModelError> {
        if self.networks.contains_key(&spec.name) {
            return Err(ModelError::DuplicateNetwork(spec.name));
        }
        self.networks.insert(spec.name.clone(), spec);
        Ok(self)
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Column names read by any term or `%OZ%` constraint.
    pub fn variables(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut push = |v: &str| {
            if !out.iter().any(|o| o == v) {
                out.push(v.to_string());
            }
        };
        for f in &self.formulas.formulas {
            for t in &f.formula.terms {
                t.variables().into_iter().for_each(&mut push);
                if let Term::Orthogonalized { against, .. } = t {
                    against.iter().flat_map(Term::variables).for_each(&mut push);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltyKind {
    None,
    Smooth {
        #[serde(with = "crate::linalg::matrix_b64")]
        penalty: DMatrix<f64>,
        lambda: f64,
        df_target: Option<f64>,
    },
    Ridge {
        la: f64,
    },
    Lasso {
        la: f64,
    },
}

/// A structured term with its coefficient slot(s). Coefficients form a
/// `p × m` matrix, `m` being the number of parameters the formula feeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredTerm {
    pub label: String,
    pub term: Term,
    pub encoder: TermEncoder,
    pub coef_names: Vec<String>,
    pub penalty: PenaltyKind,
    pub slot: Slot,
    /// Second factor of the lasso reparameterization `w = u ∘ v`.
    pub slot_v: Option<Slot>,
}

impl StructuredTerm {
    pub fn is_smooth(&self) -> bool {
        matches!(self.term, Term::Smooth { .. } | Term::TensorSmooth { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OzConstraint {
    pub sources: Vec<(String, TermEncoder)>,
    pub origins: Vec<OzOrigin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetInstance {
    pub label: String,
    pub network: Network,
    pub inputs: TermEncoder,
    pub oz: Option<OzConstraint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledFormula {
    pub name: String,
    /// 0-based parameters this formula feeds.
    pub params: Vec<usize>,
    pub has_intercept: bool,
    pub structured: Vec<StructuredTerm>,
    pub offsets: Vec<String>,
    pub nets: Vec<NetInstance>,
}

/// A built (and possibly fitted) model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub formulas: Vec<CompiledFormula>,
    pub store: ParamStore,
    pub sp_scale: f64,
    pub n_train: usize,
    pub history: Option<FitHistory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetDesign {
    pub inputs: DMatrix<f64>,
    pub xoz: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormulaDesign {
    pub structured: Vec<DMatrix<f64>>,
    pub nets: Vec<NetDesign>,
    pub offset: Option<Vec<f64>>,
}

/// Materialized design matrices of every term for one data set.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub formulas: Vec<FormulaDesign>,
    pub nrows: usize,
}

impl Design {
    pub fn select(&self, rows: &[usize]) -> Design {
        Design {
            formulas: self
                .formulas
                .iter()
                .map(|f| FormulaDesign {
                    structured: f.structured.iter().map(|x| x.select_rows(rows)).collect(),
                    nets: f
                        .nets
                        .iter()
                        .map(|n| NetDesign {
                            inputs: n.inputs.select_rows(rows),
                            xoz: n.xoz.as_ref().map(|x| x.select_rows(rows)),
                        })
                        .collect(),
                    offset: f.offset.as_ref().map(|o| rows.iter().map(|&i| o[i]).collect()),
                })
                .collect(),
            nrows: rows.len(),
        }
    }

    /// Total number of orthogonalization constraint columns.
    pub fn constraint_columns(&self) -> usize {
        self.formulas
            .iter()
            .flat_map(|f| &f.nets)
            .filter_map(|n| n.xoz.as_ref().map(DMatrix::ncols))
            .max()
            .unwrap_or(0)
    }
}

/// splitmix64 step, used to derive independent seeds.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds the model: encoders and penalties of every structured term,
/// network instances with their orthogonalization constraints, and initial
/// weights.
pub fn build(y: &[f64], data: &DataFrame, spec: &ModelSpec) -> Result<Model, ModelError> {
    let n = data.nrows();
    if y.len() != n {
        return Err(ModelError::ResponseLength {
            got: y.len(),
            expected: n,
        });
    }
    if n == 0 {
        return Err(DataError::Empty.into());
    }
    spec.family.check_support(y)?;
    let k_params = spec.family.n_params();
    if spec.formulas.mapping.len() != spec.formulas.formulas.len() {
        return Err(FormulaError::Mapping(format!(
            "{} formulas for {k_params} parameters need an explicit mapping",
            spec.formulas.formulas.len()
        ))
        .into());
    }
    for var in spec.variables() {
        data.column(&var)?;
    }
    let sp_scale = 1.0 / n as f64;
    let plans = build_oz_plans(&spec.formulas, |c| data.has_column(c), spec.orthog)?;
    let mut store = ParamStore::new();
    let mut formulas = Vec::with_capacity(spec.formulas.formulas.len());
    for (fi, named) in spec.formulas.formulas.iter().enumerate() {
        let f = &named.formula;
        if f.terms.is_empty() {
            return Err(ModelError::EmptyPredictor(named.name.clone()));
        }
        let params = spec.formulas.mapping[fi].clone();
        let m = params.len();
        let mut structured = Vec::new();
        let mut offsets = Vec::new();
        for term in &f.terms {
            match term {
                Term::Offset { var } => {
                    data.numeric(var)?;
                    offsets.push(var.clone());
                }
                Term::Network(_) | Term::Orthogonalized { .. } => {}
                _ => {
                    let (encoder, block) = structured_encoder(term, data, f.has_intercept, &spec.penalty)?;
                    let label = term.label();
                    let p = encoder.ncols();
                    let slot_name = format!("{}/{}", named.name, label);
                    let penalty = match (term, block) {
                        (_, Some(b)) => PenaltyKind::Smooth {
                            penalty: b.penalty,
                            lambda: b.lambda,
                            df_target: b.df_target,
                        },
                        (Term::Ridge { la, .. }, None) => PenaltyKind::Ridge { la: *la },
                        (Term::Lasso { la, .. }, None) => PenaltyKind::Lasso { la: *la },
                        _ => PenaltyKind::None,
                    };
                    let (slot, slot_v) = if let PenaltyKind::Lasso { .. } = penalty {
                        let u = store.add(&format!("{slot_name}/u"), p, m)?;
                        store.get_mut(u).fill(1.0);
                        (u, Some(store.add(&format!("{slot_name}/v"), p, m)?))
                    } else {
                        (store.add(&slot_name, p, m)?, None)
                    };
                    structured.push(StructuredTerm {
                        label,
                        term: term.clone(),
                        coef_names: encoder.column_names(),
                        encoder,
                        penalty,
                        slot,
                        slot_v,
                    });
                }
            }
        }
        let mut nets = Vec::new();
        for (ti, term) in f.terms.iter().enumerate() {
            let Some(net_term) = term.network() else { continue };
            let net_spec = spec
                .networks
                .get(&net_term.name)
                .ok_or_else(|| ModelError::UnknownNetwork(net_term.name.clone()))?;
            net_spec.validate(m)?;
            let inputs = network_encoder(&net_term.inputs, data)?;
            let plan = plans.iter().find(|p| p.formula == fi && p.term == ti);
            let oz = match plan {
                None => None,
                Some(plan) => {
                    let sources = plan
                        .sources
                        .iter()
                        .map(|s| {
                            let label = s.label();
                            let encoder = match structured.iter().find(|t| t.label == label) {
                                Some(t) => t.encoder.clone(),
                                None => structured_encoder(s, data, f.has_intercept, &spec.penalty)?.0,
                            };
                            Ok((label, encoder))
                        })
                        .collect::<Result<Vec<_>, ModelError>>()?;
                    Some(OzConstraint {
                        sources,
                        origins: plan.origins.clone(),
                    })
                }
            };
            let drop_bias = plan.is_some_and(|p| p.includes_intercept());
            let label = format!("{}/{}#{}", named.name, net_term, ti);
            let instance_seed = mix_seed(spec.seed, (fi * 1000 + ti) as u64);
            let network = init_params(net_spec, inputs.ncols(), &mut store, &label, instance_seed, drop_bias)?;
            nets.push(NetInstance {
                label,
                network,
                inputs,
                oz,
            });
        }
        formulas.push(CompiledFormula {
            name: named.name.clone(),
            params,
            has_intercept: f.has_intercept,
            structured,
            offsets,
            nets,
        });
    }
    Ok(Model {
        spec: spec.clone(),
        formulas,
        store,
        sp_scale,
        n_train: n,
        history: None,
    })
}

/// Loss components of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// Mean negative log-likelihood.
    pub nll: f64,
    /// `sp_scale` times the sum of built-in penalties.
    pub penalty: f64,
    pub total: f64,
}

impl Model {
    pub fn family(&self) -> &FamilySpec {
        &self.spec.family
    }

    pub fn n_params(&self) -> usize {
        self.spec.family.n_params()
    }

    /// Design matrices of `data`, encoded with the training encoders.
    pub fn design(&self, data: &DataFrame) -> Result<Design, ModelError> {
        let formulas = self
            .formulas
            .iter()
            .map(|cf| {
                let structured = cf
                    .structured
                    .iter()
                    .map(|t| t.encoder.encode(data))
                    .collect::<Result<Vec<_>, _>>()?;
                let nets = cf
                    .nets
                    .iter()
                    .map(|net| {
                        let inputs = net.inputs.encode(data)?;
                        let xoz = match &net.oz {
                            None => None,
                            Some(oz) => {
                                let parts = oz
                                    .sources
                                    .iter()
                                    .map(|(_, e)| e.encode(data))
                                    .collect::<Result<Vec<_>, _>>()?;
                                let width = parts.iter().map(DMatrix::ncols).sum();
                                let mut x = DMatrix::zeros(data.nrows(), width);
                                let mut at = 0;
                                for p in parts {
                                    x.columns_mut(at, p.ncols()).copy_from(&p);
                                    at += p.ncols();
                                }
                                Some(x)
                            }
                        };
                        Ok(NetDesign { inputs, xoz })
                    })
                    .collect::<Result<Vec<_>, ModelError>>()?;
                let offset = if cf.offsets.is_empty() {
                    None
                } else {
                    let mut total = vec![0.0; data.nrows()];
                    for var in &cf.offsets {
                        for (t, v) in total.iter_mut().zip(data.numeric(var)?) {
                            *t += v;
                        }
                    }
                    Some(total)
                };
                Ok(FormulaDesign {
                    structured,
                    nets,
                    offset,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Design {
            formulas,
            nrows: data.nrows(),
        })
    }

    /// Coefficient matrix (`p × m`) of a structured term.
    pub fn coef_matrix(&self, term: &StructuredTerm) -> DMatrix<f64> {
        let w = self.store.matrix(term.slot);
        match term.slot_v {
            Some(v) => w.component_mul(&self.store.matrix(v)),
            None => w,
        }
    }

    fn net_seed(seed: u64, fi: usize, ni: usize) -> u64 {
        mix_seed(seed, (fi as u64) << 32 | ni as u64)
    }

    /// Predictors `η` (n × K) and the tapes of every network instance.
    pub(crate) fn forward(
        &self,
        design: &Design,
        training: bool,
        seed: u64,
    ) -> Result<(DMatrix<f64>, Vec<Vec<Tape>>), ModelError> {
        let n = design.nrows;
        let mut eta = DMatrix::zeros(n, self.n_params());
        let mut tapes = Vec::with_capacity(self.formulas.len());
        for (fi, (cf, fd)) in self.formulas.iter().zip(&design.formulas).enumerate() {
            let mut c = DMatrix::zeros(n, cf.params.len());
            for (t, x) in cf.structured.iter().zip(&fd.structured) {
                c += x * self.coef_matrix(t);
            }
            let mut ftapes = Vec::with_capacity(cf.nets.len());
            for (ni, (net, nd)) in cf.nets.iter().zip(&fd.nets).enumerate() {
                let projector = nd.xoz.as_ref().map(Projector::new).transpose()?;
                let (out, tape) = net.network.forward(
                    &self.store,
                    &nd.inputs,
                    training,
                    Self::net_seed(seed, fi, ni),
                    projector.as_ref(),
                )?;
                c += out;
                ftapes.push(tape);
            }
            if let Some(off) = &fd.offset {
                for mut col in c.column_iter_mut() {
                    for (v, o) in col.iter_mut().zip(off) {
                        *v += o;
                    }
                }
            }
            for (j, &k) in cf.params.iter().enumerate() {
                let mut dst = eta.column_mut(k);
                dst += c.column(j);
            }
            tapes.push(ftapes);
        }
        Ok((eta, tapes))
    }

    /// Inference-mode predictors on `design` (projection over all rows at once).
    pub fn eta(&self, design: &Design) -> Result<DMatrix<f64>, ModelError> {
        Ok(self.forward(design, false, 0)?.0)
    }

    /// Unscaled built-in penalty; adds `scale ×` its gradient to `grads`.
    fn raw_penalty(&self, grads: Option<(&mut [f64], f64)>) -> f64 {
        let mut total = 0.0;
        let mut grads = grads;
        for t in self.formulas.iter().flat_map(|f| &f.structured) {
            let w = self.store.matrix(t.slot);
            match &t.penalty {
                PenaltyKind::None => {}
                PenaltyKind::Smooth { penalty, lambda, .. } => {
                    if *lambda == 0.0 {
                        continue;
                    }
                    let pw = penalty * &w;
                    total += lambda * w.dot(&pw);
                    if let Some((g, scale)) = grads.as_mut() {
                        for (acc, v) in g[t.slot.range()].iter_mut().zip(pw.iter()) {
                            *acc += *scale * 2.0 * lambda * v;
                        }
                    }
                }
                PenaltyKind::Ridge { la } => {
                    total += la * w.norm_squared();
                    if let Some((g, scale)) = grads.as_mut() {
                        for (acc, v) in g[t.slot.range()].iter_mut().zip(w.iter()) {
                            *acc += *scale * 2.0 * la * v;
                        }
                    }
                }
                PenaltyKind::Lasso { la } => {
                    let v_slot = t.slot_v.expect("lasso terms have two factors");
                    let v = self.store.matrix(v_slot);
                    total += 0.5 * la * (w.norm_squared() + v.norm_squared());
                    if let Some((g, scale)) = grads.as_mut() {
                        for (acc, u) in g[t.slot.range()].iter_mut().zip(w.iter()) {
                            *acc += *scale * la * u;
                        }
                        for (acc, vv) in g[v_slot.range()].iter_mut().zip(v.iter()) {
                            *acc += *scale * la * vv;
                        }
                    }
                }
            }
        }
        total
    }

    /// `sp_scale ×` built-in penalties at the current weights.
    pub fn penalty(&self) -> f64 {
        self.sp_scale * self.raw_penalty(None)
    }

    /// Mean NLL plus scaled penalties on `design`; with `grads`, also writes
    /// the gradient with respect to every stored value.
    pub fn objective(
        &self,
        design: &Design,
        y: &[f64],
        training: bool,
        seed: u64,
        grads: Option<&mut [f64]>,
    ) -> Result<LossParts, ModelError> {
        if y.len() != design.nrows {
            return Err(ModelError::ResponseLength {
                got: y.len(),
                expected: design.nrows,
            });
        }
        let (eta, tapes) = self.forward(design, training, seed)?;
        if let Some((i, k)) = (0..eta.ncols())
            .flat_map(|k| (0..eta.nrows()).map(move |i| (i, k)))
            .find(|&(i, k)| !eta[(i, k)].is_finite())
        {
            return Err(ModelError::NonFiniteLoss(format!(
                "predictor of parameter '{}' is not finite in row {i}",
                self.family().param_names()[k]
            )));
        }
        let (nll_rows, mut g) = self.family().nll_and_grad(&eta, y)?;
        let n = design.nrows as f64;
        let nll = nll_rows.iter().sum::<f64>() / n;
        if !nll.is_finite() {
            let row = nll_rows.iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(ModelError::NonFiniteLoss(format!("log-likelihood of row {row}")));
        }
        let penalty;
        match grads {
            None => penalty = self.sp_scale * self.raw_penalty(None),
            Some(grads) => {
                grads.fill(0.0);
                g /= n;
                for ((cf, fd), ftapes) in self.formulas.iter().zip(&design.formulas).zip(tapes) {
                    let gf = g.select_columns(&cf.params);
                    for (t, x) in cf.structured.iter().zip(&fd.structured) {
                        let gw = x.transpose() * &gf;
                        match t.slot_v {
                            None => {
                                for (acc, v) in grads[t.slot.range()].iter_mut().zip(gw.iter()) {
                                    *acc += v;
                                }
                            }
                            Some(v_slot) => {
                                let u = self.store.get(t.slot).to_vec();
                                let v = self.store.get(v_slot).to_vec();
                                for (j, gv) in gw.iter().enumerate() {
                                    grads[t.slot.offset + j] += gv * v[j];
                                    grads[v_slot.offset + j] += gv * u[j];
                                }
                            }
                        }
                    }
                    for (net, tape) in cf.nets.iter().zip(ftapes) {
                        net.network.backward(tape, &gf, &self.store, grads)?;
                    }
                }
                penalty = self.sp_scale * self.raw_penalty(Some((grads, self.sp_scale)));
            }
        }
        if !penalty.is_finite() {
            return Err(ModelError::NonFiniteLoss("penalty term".into()));
        }
        Ok(LossParts {
            nll,
            penalty,
            total: nll + penalty,
        })
    }

    fn param_index(&self, k: usize) -> Result<usize, ModelError> {
        let kk = self.n_params();
        if k == 0 || k > kk {
            return Err(ModelError::ParamIndex { index: k, k: kk });
        }
        Ok(k - 1)
    }

    /// Structured terms feeding parameter `k` (1-based), with the column of
    /// their coefficient matrix belonging to `k`.
    fn terms_for(&self, k: usize) -> Result<Vec<(&CompiledFormula, &StructuredTerm, usize)>, ModelError> {
        let k0 = self.param_index(k)?;
        let mut out = Vec::new();
        for cf in &self.formulas {
            if let Some(col) = cf.params.iter().position(|&p| p == k0) {
                for t in &cf.structured {
                    out.push((cf, t, col));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefType {
    Linear,
    Smooth,
}

/// Named coefficients of parameter `k` (1-based). Linear terms give one
/// value per design column; smooth terms give their basis coefficients.
pub fn coef(model: &Model, kind: CoefType, k: usize) -> Result<IndexMap<String, Vec<f64>>, ModelError> {
    let mut out = IndexMap::new();
    for (_, t, col) in model.terms_for(k)? {
        if t.is_smooth() != (kind == CoefType::Smooth) {
            continue;
        }
        let w = model.coef_matrix(t);
        let values: Vec<f64> = w.column(col).iter().copied().collect();
        match kind {
            CoefType::Smooth => {
                out.insert(t.label.clone(), values);
            }
            CoefType::Linear => {
                for (name, v) in t.coef_names.iter().zip(values) {
                    out.insert(name.clone(), vec![v]);
                }
            }
        }
    }
    Ok(out)
}

/// Plot data of one smooth term.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectTable {
    pub term: String,
    pub vars: Vec<String>,
    /// One column per variable.
    pub grid: Vec<Vec<f64>>,
    pub effect: Vec<f64>,
}

pub const GRID_1D: usize = 200;
pub const GRID_2D: usize = 40;

/// Grid over the training ranges of a smooth: `size` points for one
/// variable, a `GRID_2D`-per-axis lattice for tensor products.
pub(crate) fn effect_grid(encoder: &TermEncoder, size: usize) -> Option<(Vec<String>, Vec<Vec<f64>>)> {
    let Some(Encoder::Smooth { basis, .. }) = encoder.parts.first() else {
        return None;
    };
    let vars: Vec<String> = basis.margins.iter().map(|m| m.var.clone()).collect();
    let axes: Vec<Vec<f64>> = basis
        .margins
        .iter()
        .map(|m| {
            let len = match basis.margins.len() {
                1 => size,
                2 => GRID_2D,
                _ => 10,
            };
            linspace(m.range.0, m.range.1, len)
        })
        .collect();
    let total: usize = axes.iter().map(Vec::len).product();
    let mut grid = vec![Vec::with_capacity(total); axes.len()];
    for idx in 0..total {
        let mut rest = idx;
        for d in (0..axes.len()).rev() {
            let len = axes[d].len();
            grid[d].push(axes[d][rest % len]);
            rest /= len;
        }
    }
    Some((vars, grid))
}

/// Grid design rows of a smooth encoder.
pub(crate) fn grid_design(encoder: &TermEncoder, grid: &[Vec<f64>]) -> Result<DMatrix<f64>, ModelError> {
    let Some(Encoder::Smooth { basis, .. }) = encoder.parts.first() else {
        return Err(ModelError::InvalidOption("not a smooth term".into()));
    };
    let cols: Vec<&[f64]> = grid.iter().map(Vec::as_slice).collect();
    Ok(basis.design(&cols)?.0)
}

/// Partial effects of the smooths of parameter `k` (1-based); `which`
/// selects one smooth by position.
pub fn partial_effects(
    model: &Model,
    which: Option<usize>,
    k: usize,
    grid_size: usize,
) -> Result<Vec<EffectTable>, ModelError> {
    let smooths: Vec<_> = model
        .terms_for(k)?
        .into_iter()
        .filter(|(_, t, _)| t.is_smooth())
        .collect();
    let selected: Vec<_> = match which {
        None => smooths,
        Some(i) if i < smooths.len() => vec![smooths[i]],
        Some(i) => {
            return Err(ModelError::InvalidOption(format!(
                "smooth index {i} out of range ({} smooths)",
                smooths.len()
            )))
        }
    };
    selected
        .into_iter()
        .map(|(_, t, col)| {
            let (vars, grid) = effect_grid(&t.encoder, grid_size).expect("smooth encoder");
            let x = grid_design(&t.encoder, &grid)?;
            let w = model.coef_matrix(t);
            let effect = x * w.column(col);
            Ok(EffectTable {
                term: t.label.clone(),
                vars,
                grid,
                effect: effect.iter().copied().collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Statistic {
    Mean,
    Stddev,
    Quantile(Vec<f64>),
}

/// The fitted distribution at the rows of `data`.
pub fn predict_distribution(model: &Model, data: &DataFrame) -> Result<FittedDistribution, ModelError> {
    let design = model.design(data)?;
    Ok(model.family().distribution(&model.eta(&design)?)?)
}

/// Named columns of the requested statistic.
pub fn predict_stats(
    model: &Model,
    data: &DataFrame,
    statistic: &Statistic,
) -> Result<Vec<(String, Vec<f64>)>, ModelError> {
    let dist = predict_distribution(model, data)?;
    distribution_stats(&dist, statistic)
}

pub(crate) fn distribution_stats(
    dist: &FittedDistribution,
    statistic: &Statistic,
) -> Result<Vec<(String, Vec<f64>)>, ModelError> {
    Ok(match statistic {
        Statistic::Mean => vec![("mean".into(), dist.mean())],
        Statistic::Stddev => vec![("stddev".into(), dist.stddev())],
        Statistic::Quantile(probs) => probs
            .iter()
            .map(|&p| Ok((format!("q{p}"), dist.quantile(p)?)))
            .collect::<Result<_, FamilyError>>()?,
    })
}

/// Per-row log-likelihood at `y` and its sum.
pub fn log_score(model: &Model, data: &DataFrame, y: &[f64]) -> Result<(Vec<f64>, f64), ModelError> {
    let dist = predict_distribution(model, data)?;
    let lp = dist.log_prob(y)?;
    let sum = lp.iter().sum();
    Ok((lp, sum))
}

/// Fitted means on the training design (inference mode).
pub fn fitted(model: &Model, data: &DataFrame) -> Result<Vec<f64>, ModelError> {
    Ok(predict_distribution(model, data)?.mean())
}

/// Structured design of the location predictor with its penalty, used by
/// refits and oracles: `(X, S, names)` with `S = blockdiag(λ_j P_j)`.
pub fn structured_location_design(
    model: &Model,
    design: &Design,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<String>), ModelError> {
    let mut blocks: Vec<(&DMatrix<f64>, Option<DMatrix<f64>>, Vec<String>)> = Vec::new();
    for (cf, fd) in model.formulas.iter().zip(&design.formulas) {
        if !cf.params.contains(&0) {
            continue;
        }
        for (t, x) in cf.structured.iter().zip(&fd.structured) {
            let s = match &t.penalty {
                PenaltyKind::Smooth { penalty, lambda, .. } => Some(penalty * *lambda),
                _ => None,
            };
            blocks.push((x, s, t.coef_names.clone()));
        }
    }
    let p: usize = blocks.iter().map(|b| b.0.ncols()).sum();
    let mut x = DMatrix::zeros(design.nrows, p);
    let mut s = DMatrix::zeros(p, p);
    let mut names = Vec::with_capacity(p);
    let mut at = 0;
    for (xb, sb, nb) in blocks {
        let w = xb.ncols();
        x.columns_mut(at, w).copy_from(xb);
        if let Some(sb) = sb {
            s.view_mut((at, at), (w, w)).copy_from(&sb);
        }
        names.extend(nb);
        at += w;
    }
    Ok((x, s, names))
}

/// Sum of offsets feeding the location predictor.
pub(crate) fn location_offset(model: &Model, design: &Design) -> DVector<f64> {
    let mut off = DVector::zeros(design.nrows);
    for (cf, fd) in model.formulas.iter().zip(&design.formulas) {
        if cf.params.contains(&0) {
            if let Some(o) = &fd.offset {
                off += DVector::from_column_slice(o);
            }
        }
    }
    off
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute_graph::{Activation, LayerSpec};

    fn data(n: usize) -> (DataFrame, Vec<f64>) {
        let x: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) * 4.0 - 2.0).collect();
        let z: Vec<f64> = (0..n).map(|i| ((i * 7919) % n) as f64 / n as f64).collect();
        let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| 1.0 + 2.0 * a + b.sin()).collect();
        let df = DataFrame::new()
            .with_numeric("x", x)
            .unwrap()
            .with_numeric("z", z)
            .unwrap();
        (df, y)
    }

    fn net(name: &str, out: usize) -> NetworkSpec {
        NetworkSpec {
            name: name.into(),
            layers: vec![LayerSpec::dense(4, Activation::Tanh), LayerSpec::dense(out, Activation::Linear)],
        }
    }

    #[test]
    fn fresh_model_has_zero_structured_coefficients() {
        let (df, y) = data(60);
        let spec = ModelSpec::new("normal", &[("loc", "~ 1 + x + s(z)"), ("scale", "~ 1")]).unwrap();
        let m = build(&y, &df, &spec).unwrap();
        let lin = coef(&m, CoefType::Linear, 1).unwrap();
        assert_eq!(lin.keys().collect::<Vec<_>>(), vec!["(Intercept)", "x"]);
        assert!(lin.values().all(|v| v == &vec![0.0]));
        let sm = coef(&m, CoefType::Smooth, 1).unwrap();
        assert_eq!(sm["s(z)"].len(), 9);
        let scale = coef(&m, CoefType::Linear, 2).unwrap();
        assert_eq!(scale.keys().collect::<Vec<_>>(), vec!["(Intercept)"]);
        assert!(coef(&m, CoefType::Linear, 3).is_err());
    }

    #[test]
    fn build_errors() {
        let (df, y) = data(30);
        let spec = ModelSpec::new("normal", &[("loc", "~ 1"), ("scale", "~ 0")]).unwrap();
        assert!(matches!(build(&y, &df, &spec), Err(ModelError::EmptyPredictor(_))));
        let spec = ModelSpec::new("normal", &[("loc", "~ 1 + w"), ("scale", "~ 1")]).unwrap();
        assert!(matches!(build(&y, &df, &spec), Err(ModelError::Data(DataError::MissingColumn(_)))));
        let spec = ModelSpec::new("normal", &[("loc", "~ 1 + dnn(x)"), ("scale", "~ 1")]).unwrap();
        assert!(matches!(build(&y, &df, &spec), Err(ModelError::UnknownNetwork(_))));
        let spec = spec.network(net("dnn", 2)).unwrap();
        assert!(matches!(build(&y, &df, &spec), Err(ModelError::Graph(_))));
        assert!(spec.network(net("dnn", 1)).is_err());
    }

    #[test]
    fn shared_network_feeds_mapped_parameters() {
        let (df, y) = data(40);
        let spec = ModelSpec::new("normal", &[("loc", "~ 1"), ("scale", "~ 1"), ("both", "~ 0 + dnn(x, z)")])
            .unwrap()
            .mapping(&[vec![1], vec![2], vec![1, 2]])
            .unwrap()
            .network(net("dnn", 2))
            .unwrap();
        let mut m = build(&y, &df, &spec).unwrap();
        assert_eq!(m.formulas[2].nets[0].network.output_width(), 2);
        let design = m.design(&df).unwrap();
        let before = m.eta(&design).unwrap();
        let slot = m.formulas[2].nets[0].network.slots()[0];
        m.store.get_mut(slot)[0] += 0.5;
        let after = m.eta(&design).unwrap();
        for k in 0..2 {
            assert!((0..40).any(|i| before[(i, k)] != after[(i, k)]));
        }
    }

    #[test]
    fn zero_coefficients_give_flat_effects_on_training_range() {
        let (df, y) = data(50);
        let spec = ModelSpec::new("normal", &[("loc", "~ 1 + s(x) + te(x, z)"), ("scale", "~ 1")]).unwrap();
        let m = build(&y, &df, &spec).unwrap();
        let tables = partial_effects(&m, None, 1, GRID_1D).unwrap();
        assert_eq!(tables.len(), 2);
        assert_eq!(tables[0].grid[0].len(), 200);
        assert_eq!(tables[0].grid[0][0], -2.0);
        assert_eq!(*tables[0].grid[0].last().unwrap(), df.numeric("x").unwrap()[49]);
        assert_eq!(tables[1].effect.len(), 1600);
        assert!(tables.iter().all(|t| t.effect.iter().all(|v| *v == 0.0)));
        assert!(partial_effects(&m, Some(2), 1, GRID_1D).is_err());
    }

    #[test]
    fn prediction_on_training_data_is_reproducible() {
        let (df, y) = data(40);
        let spec = ModelSpec::new("normal", &[("loc", "~ 1 + x + dnn(x)"), ("scale", "~ 1")])
            .unwrap()
            .network(net("dnn", 1))
            .unwrap();
        let m = build(&y, &df, &spec).unwrap();
        let a = fitted(&m, &df).unwrap();
        let b = fitted(&m, &df).unwrap();
        assert_eq!(a, b);
        let q = predict_stats(&m, &df, &Statistic::Quantile(vec![0.5])).unwrap();
        for (qi, mi) in q[0].1.iter().zip(&a) {
            assert!((qi - mi).abs() < 1e-12);
        }
    }
}
