//! Formula DSL for additive predictors.
//!
//! A formula such as `~ 1 + x + s(z, bs="ps", df=6) + dnn(u) %OZ% (x)` is parsed
//! into an ordered list of [`Term`]s. Calls that are not one of the built-in
//! processors (`s`, `te`, `ti`, `lin`, `ridge`, `lasso`, `offset`) are kept as
//! network terms and resolved against the network registry when the model is
//! built.

mod parser;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use parser::parse_formula;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormulaError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("duplicate intercept directive at byte {offset}")]
    DuplicateIntercept { offset: usize },
    #[error("left side of %OZ% at byte {offset} must be a network term")]
    OzLeftNotNetwork { offset: usize },
    #[error("invalid mapping: {0}")]
    Mapping(String),
}

/// Basis family requested through `bs=`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisTag {
    /// P-spline: cubic B-splines with a difference penalty.
    Ps,
    /// Smoother with a linear null space (integrated squared second derivative penalty).
    Tp,
}

impl BasisTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BasisTag::Ps => "ps",
            BasisTag::Tp => "tp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkTerm {
    pub name: String,
    pub inputs: Vec<String>,
}

impl fmt::Display for NetworkTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name, self.inputs.join(", "))
    }
}

/// One additive term of a predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    Intercept,
    Linear {
        vars: Vec<String>,
    },
    Ridge {
        vars: Vec<String>,
        la: f64,
    },
    Lasso {
        vars: Vec<String>,
        la: f64,
    },
    Offset {
        var: String,
    },
    Smooth {
        var: String,
        basis: Option<BasisTag>,
        df: Option<f64>,
        k: Option<usize>,
        /// Penalty difference order (`m=`).
        order: Option<usize>,
    },
    TensorSmooth {
        vars: Vec<String>,
        basis: Option<BasisTag>,
        /// Either one dimension shared by all margins or one per margin.
        k: Option<Vec<usize>>,
        df: Option<f64>,
        /// `ti(...)` rather than `te(...)`.
        interaction_only: bool,
    },
    Network(NetworkTerm),
    Orthogonalized {
        network: NetworkTerm,
        against: Vec<Term>,
    },
}

impl Term {
    /// Variables read by the term (inputs of the network for network terms).
    pub fn variables(&self) -> Vec<&str> {
        match self {
            Term::Intercept => Vec::new(),
            Term::Linear { vars } | Term::Ridge { vars, .. } | Term::Lasso { vars, .. } => {
                vars.iter().map(String::as_str).collect()
            }
            Term::Offset { var } | Term::Smooth { var, .. } => vec![var.as_str()],
            Term::TensorSmooth { vars, .. } => vars.iter().map(String::as_str).collect(),
            Term::Network(net) | Term::Orthogonalized { network: net, .. } => {
                net.inputs.iter().map(String::as_str).collect()
            }
        }
    }

    /// Structured terms carry coefficients in the linear/smooth part of the predictor.
    pub fn is_structured(&self) -> bool {
        matches!(
            self,
            Term::Intercept
                | Term::Linear { .. }
                | Term::Ridge { .. }
                | Term::Lasso { .. }
                | Term::Smooth { .. }
                | Term::TensorSmooth { .. }
        )
    }

    pub fn network(&self) -> Option<&NetworkTerm> {
        match self {
            Term::Network(net) | Term::Orthogonalized { network: net, .. } => Some(net),
            _ => None,
        }
    }

    /// Canonical text of the term; doubles as the term identifier.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

fn fmt_num(x: f64) -> String {
    format!("{x}")
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => write!(f, "1"),
            Term::Linear { vars } if vars.len() == 1 => write!(f, "{}", vars[0]),
            Term::Linear { vars } => write!(f, "lin({})", vars.join(", ")),
            Term::Ridge { vars, la } => write!(f, "ridge({}, la={})", vars.join(", "), fmt_num(*la)),
            Term::Lasso { vars, la } => write!(f, "lasso({}, la={})", vars.join(", "), fmt_num(*la)),
            Term::Offset { var } => write!(f, "offset({var})"),
            Term::Smooth {
                var,
                basis,
                df,
                k,
                order,
            } => {
                write!(f, "s({var}")?;
                if let Some(b) = basis {
                    write!(f, ", bs=\"{}\"", b.as_str())?;
                }
                if let Some(df) = df {
                    write!(f, ", df={}", fmt_num(*df))?;
                }
                if let Some(k) = k {
                    write!(f, ", k={k}")?;
                }
                if let Some(m) = order {
                    write!(f, ", m={m}")?;
                }
                write!(f, ")")
            }
            Term::TensorSmooth {
                vars,
                basis,
                k,
                df,
                interaction_only,
            } => {
                let call = if *interaction_only { "ti" } else { "te" };
                write!(f, "{call}({}", vars.join(", "))?;
                if let Some(b) = basis {
                    write!(f, ", bs=\"{}\"", b.as_str())?;
                }
                if let Some(df) = df {
                    write!(f, ", df={}", fmt_num(*df))?;
                }
                match k.as_deref() {
                    Some([single]) => write!(f, ", k={single}")?,
                    Some(ks) => {
                        let ks: Vec<String> = ks.iter().map(|k| k.to_string()).collect();
                        write!(f, ", k=c({})", ks.join(", "))?
                    }
                    None => {}
                }
                write!(f, ")")
            }
            Term::Network(net) => write!(f, "{net}"),
            Term::Orthogonalized { network, against } => {
                let parts: Vec<String> = against.iter().map(Term::to_string).collect();
                write!(f, "{network} %OZ% ({})", parts.join(" + "))
            }
        }
    }
}

/// Parsed additive predictor of one formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterFormula {
    pub terms: Vec<Term>,
    pub has_intercept: bool,
    pub source_text: String,
}

impl ParameterFormula {
    pub fn networks(&self) -> impl Iterator<Item = &NetworkTerm> {
        self.terms.iter().filter_map(Term::network)
    }

    /// Structural equality ignoring the source text.
    pub fn same_structure(&self, other: &ParameterFormula) -> bool {
        self.terms == other.terms && self.has_intercept == other.has_intercept
    }
}

/// Deterministic text for a parsed formula; `parse_formula` inverts it.
pub fn canonical_format(formula: &ParameterFormula) -> String {
    let mut parts: Vec<String> = Vec::with_capacity(formula.terms.len() + 1);
    if !formula.has_intercept {
        parts.push("0".to_string());
    }
    parts.extend(formula.terms.iter().map(Term::to_string));
    if parts.is_empty() {
        // intercept-only formulas always carry an explicit Intercept term
        parts.push("1".to_string());
    }
    format!("~ {}", parts.join(" + "))
}

/// Network term together with the structured terms of the same formula that
/// share at least one input variable with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlap {
    pub network: NetworkTerm,
    pub structured: Vec<Term>,
}

/// Finds structured terms whose variables intersect each network's inputs.
///
/// The intercept joins the list when `identify_intercept` is set and the
/// formula has one. Networks without any overlap are omitted.
pub fn detect_overlap(formula: &ParameterFormula, identify_intercept: bool) -> Vec<Overlap> {
    let mut out = Vec::new();
    for net in formula.networks() {
        let inputs: BTreeSet<&str> = net.inputs.iter().map(String::as_str).collect();
        let mut structured = Vec::new();
        if identify_intercept && formula.has_intercept {
            structured.push(Term::Intercept);
        }
        for term in &formula.terms {
            if !term.is_structured() || matches!(term, Term::Intercept) {
                continue;
            }
            if term.variables().iter().any(|v| inputs.contains(v)) {
                structured.push(term.clone());
            }
        }
        if !structured.is_empty() {
            out.push(Overlap {
                network: net.clone(),
                structured,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedFormula {
    pub name: String,
    pub formula: ParameterFormula,
}

/// All formulas of a model plus the formula → parameter mapping (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaSet {
    pub formulas: Vec<NamedFormula>,
    pub mapping: Vec<Vec<usize>>,
}

impl FormulaSet {
    /// Identity mapping: formula `i` drives parameter `i`.
    pub fn new(formulas: Vec<NamedFormula>, n_params: usize) -> Result<Self, FormulaError> {
        if formulas.len() != n_params {
            return Err(FormulaError::Mapping(format!(
                "{} formulas for {n_params} distribution parameters; supply a mapping",
                formulas.len()
            )));
        }
        let mapping = (0..formulas.len()).map(|i| vec![i]).collect();
        Ok(Self { formulas, mapping })
    }

    /// Explicit mapping with 1-based parameter indices, e.g. `[[1], [2], [1, 2]]`.
    pub fn with_mapping(
        formulas: Vec<NamedFormula>,
        mapping_one_based: &[Vec<usize>],
        n_params: usize,
    ) -> Result<Self, FormulaError> {
        if mapping_one_based.len() != formulas.len() {
            return Err(FormulaError::Mapping(format!(
                "mapping has {} entries but there are {} formulas",
                mapping_one_based.len(),
                formulas.len()
            )));
        }
        let mut mapping = Vec::with_capacity(formulas.len());
        let mut covered = vec![false; n_params];
        for (i, set) in mapping_one_based.iter().enumerate() {
            if set.is_empty() {
                return Err(FormulaError::Mapping(format!("entry {} is empty", i + 1)));
            }
            let mut zero_based = Vec::with_capacity(set.len());
            for &k in set {
                if k == 0 || k > n_params {
                    return Err(FormulaError::Mapping(format!(
                        "entry {} references parameter {k}, expected 1..{n_params}",
                        i + 1
                    )));
                }
                if zero_based.contains(&(k - 1)) {
                    return Err(FormulaError::Mapping(format!(
                        "entry {} lists parameter {k} twice",
                        i + 1
                    )));
                }
                covered[k - 1] = true;
                zero_based.push(k - 1);
            }
            mapping.push(zero_based);
        }
        if let Some(k) = covered.iter().position(|c| !c) {
            return Err(FormulaError::Mapping(format!(
                "parameter {} is not driven by any formula",
                k + 1
            )));
        }
        Ok(Self { formulas, mapping })
    }

    /// Indices of formulas feeding parameter `k` (0-based).
    pub fn formulas_for_param(&self, k: usize) -> Vec<usize> {
        self.mapping
            .iter()
            .enumerate()
            .filter(|(_, set)| set.contains(&k))
            .map(|(i, _)| i)
            .collect()
    }
}
