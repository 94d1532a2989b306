//! Projection of network features onto the orthogonal complement of
//! structured design columns, and the plans saying which columns apply to
//! which network term.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::formula::{detect_overlap, FormulaSet, Term};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OrthoError {
    #[error("cannot project a batch with zero rows")]
    EmptyBatch,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("constraint column {col} has a non-finite value in row {row}")]
    NonFinite { row: usize, col: usize },
    #[error("%OZ% in formula '{formula}' references '{var}', which is not in the data")]
    UnknownVariable { formula: String, var: String },
}

/// Relative tolerance on `|r_ii| / |r_00|` below which a column is dropped.
pub const RANK_TOL: f64 = 1e-10;

/// Householder QR with column pivoting. Returns the orthonormal basis of the
/// column space (first `rank` columns of Q).
pub fn rank_revealing_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, c) = (a.nrows(), a.ncols());
    let mut r = a.clone();
    let steps = n.min(c);
    let mut reflectors: Vec<(usize, Vec<f64>)> = Vec::with_capacity(steps);
    let mut norms: Vec<f64> = (0..c).map(|j| r.column(j).norm_squared()).collect();
    let mut r00 = 0.0;
    let mut rank = 0;
    for k in 0..steps {
        let (pivot, _) = norms[k..]
            .iter()
            .enumerate()
            .fold((k, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
                if *v > bv {
                    (k + i, *v)
                } else {
                    (bi, bv)
                }
            });
        if pivot != k {
            r.swap_columns(k, pivot);
            norms.swap(k, pivot);
        }
        let x: Vec<f64> = (k..n).map(|i| r[(i, k)]).collect();
        let alpha = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if k == 0 {
            r00 = alpha;
        }
        if alpha == 0.0 || alpha <= RANK_TOL * r00 {
            break;
        }
        let sign = if x[0] >= 0.0 { 1.0 } else { -1.0 };
        let mut v = x;
        v[0] += sign * alpha;
        let vtv: f64 = v.iter().map(|e| e * e).sum();
        for j in k..c {
            let dot: f64 = (k..n).map(|i| v[i - k] * r[(i, j)]).sum();
            let f = 2.0 * dot / vtv;
            for i in k..n {
                r[(i, j)] -= f * v[i - k];
            }
        }
        for (j, norm) in norms.iter_mut().enumerate().skip(k + 1) {
            *norm = (k + 1..n).map(|i| r[(i, j)] * r[(i, j)]).sum();
        }
        reflectors.push((k, v));
        rank += 1;
    }
    // Q_r = H_0 H_1 … H_{r−1} applied to the first r unit vectors
    let mut q = DMatrix::zeros(n, rank);
    for j in 0..rank {
        q[(j, j)] = 1.0;
    }
    for (k, v) in reflectors.iter().rev() {
        let vtv: f64 = v.iter().map(|e| e * e).sum();
        for j in 0..rank {
            let dot: f64 = (*k..n).map(|i| v[i - k] * q[(i, j)]).sum();
            let f = 2.0 * dot / vtv;
            for i in *k..n {
                q[(i, j)] -= f * v[i - k];
            }
        }
    }
    q
}

/// `I − Q Qᵀ` for the column space of one batch of constraint columns.
///
/// In double precision `P P = P` and `P X = 0` hold to `1e-10` (max abs
/// entry), and `U = P U + (I − P) U` holds to `1e-12`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    q: DMatrix<f64>,
}

impl Projector {
    pub fn new(xoz: &DMatrix<f64>) -> Result<Self, OrthoError> {
        if xoz.nrows() == 0 {
            return Err(OrthoError::EmptyBatch);
        }
        for (j, col) in xoz.column_iter().enumerate() {
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(OrthoError::NonFinite { row: i, col: j });
            }
        }
        Ok(Self {
            q: rank_revealing_basis(xoz),
        })
    }

    pub fn rank(&self) -> usize {
        self.q.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.q.nrows()
    }

    /// `(I − P) U`. The map is symmetric, so it also serves as its own adjoint.
    pub fn apply(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        if self.q.ncols() == 0 {
            return u.clone();
        }
        u - &self.q * (self.q.transpose() * u)
    }

    /// `P U`, the component inside the constraint column space.
    pub fn project_onto(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        if self.q.ncols() == 0 {
            return DMatrix::zeros(u.nrows(), u.ncols());
        }
        &self.q * (self.q.transpose() * u)
    }
}

/// `(I − P) U` with `P` the orthogonal projector onto `col(Xoz)`.
pub fn project_orthogonal(u: &DMatrix<f64>, xoz: &DMatrix<f64>) -> Result<DMatrix<f64>, OrthoError> {
    if u.nrows() != xoz.nrows() {
        return Err(OrthoError::Dimension(format!(
            "features have {} rows, constraints {}",
            u.nrows(),
            xoz.nrows()
        )));
    }
    Ok(Projector::new(xoz)?.apply(u))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OzOrigin {
    AutomaticOverlap,
    Manual,
    InterceptOption,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OzOptions {
    pub orthogonalize: bool,
    pub identify_intercept: bool,
}

impl Default for OzOptions {
    fn default() -> Self {
        Self {
            orthogonalize: true,
            identify_intercept: false,
        }
    }
}

/// Constraint columns for one network term of one formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OzPlan {
    pub formula: usize,
    /// Position of the network term within the formula.
    pub term: usize,
    pub network: String,
    /// Structured terms whose design columns form `Xoz`, without duplicates.
    pub sources: Vec<Term>,
    pub origins: Vec<OzOrigin>,
}

impl OzPlan {
    pub fn includes_intercept(&self) -> bool {
        self.sources.iter().any(|t| matches!(t, Term::Intercept))
    }

    fn add(&mut self, term: Term, origin: OzOrigin) {
        if !self.sources.iter().any(|t| t.label() == term.label()) {
            self.sources.push(term);
        }
        if !self.origins.contains(&origin) {
            self.origins.push(origin);
        }
    }
}

/// Collects the constraint sources of every network term: automatic overlap
/// when `orthogonalize` is on, `%OZ%` terms always, and the intercept when
/// `identify_intercept` is on. Sources from several origins are unioned.
pub fn build_oz_plans(
    formulas: &FormulaSet,
    has_column: impl Fn(&str) -> bool,
    options: OzOptions,
) -> Result<Vec<OzPlan>, OrthoError> {
    let mut plans = Vec::new();
    for (fi, named) in formulas.formulas.iter().enumerate() {
        let formula = &named.formula;
        let automatic = if options.orthogonalize {
            detect_overlap(formula, false)
        } else {
            Vec::new()
        };
        let mut auto_iter = automatic.into_iter().peekable();
        for (ti, term) in formula.terms.iter().enumerate() {
            let Some(net) = term.network() else { continue };
            let mut plan = OzPlan {
                formula: fi,
                term: ti,
                network: net.name.clone(),
                sources: Vec::new(),
                origins: Vec::new(),
            };
            // detect_overlap reports networks in term order, skipping those without overlap
            if auto_iter.peek().is_some_and(|o| &o.network == net) {
                let overlap = auto_iter.next().expect("peeked");
                for s in overlap.structured {
                    plan.add(s, OzOrigin::AutomaticOverlap);
                }
            }
            if let Term::Orthogonalized { against, .. } = term {
                for s in against {
                    for var in s.variables() {
                        if !has_column(var) {
                            return Err(OrthoError::UnknownVariable {
                                formula: named.name.clone(),
                                var: var.to_string(),
                            });
                        }
                    }
                    plan.add(s.clone(), OzOrigin::Manual);
                }
            }
            if options.identify_intercept && formula.has_intercept {
                plan.add(Term::Intercept, OzOrigin::InterceptOption);
            }
            if !plan.sources.is_empty() {
                plans.push(plan);
            }
        }
    }
    Ok(plans)
}
