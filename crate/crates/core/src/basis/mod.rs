//! Design matrices and quadratic penalties for smooth terms.
//!
//! Smooths are cubic B-spline bases with quantile-placed interior knots. The
//! `ps` basis uses a difference penalty on adjacent coefficients; the `tp`
//! basis uses the integrated squared second derivative, whose null space is
//! the linear functions. Sum-to-zero constraints are absorbed by a
//! Householder null-space transform, and smoothing parameters are calibrated
//! from a degrees-of-freedom target (see [`df_to_lambda`]).

mod bspline;
mod df;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::formula::BasisTag;
use crate::linalg::{matrix_b64, symmetrize};

pub use bspline::{
    bspline_basis, difference_matrix, difference_penalty, second_derivative_penalty, KnotVector,
};
pub use df::{df_to_lambda, effective_df, DemmlerReinsch};

pub(crate) use bspline::basis_row_extrapolated;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BasisError {
    #[error("invalid knots: {0}")]
    InvalidKnots(String),
    #[error("invalid smooth configuration: {0}")]
    Config(String),
    #[error("non-finite feature value in row {row}")]
    NonFinite { row: usize },
    #[error("feature '{0}' is constant; a smooth needs variation")]
    ConstantInput(String),
    #[error("{n} observations are fewer than the basis dimension {k}")]
    TooFewObservations { n: usize, k: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("df target {target} outside attainable range [{lower}, {upper}]")]
    DfOutOfRange { target: f64, lower: f64, upper: f64 },
    #[error("cross-product matrix is singular beyond jitter tolerance")]
    Singular,
}

pub const CUBIC: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothConfig {
    pub basis: BasisTag,
    pub k: usize,
    pub penalty_order: usize,
    pub df_target: Option<f64>,
    pub sum_to_zero: bool,
    pub hat1: bool,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self {
            basis: BasisTag::Ps,
            k: 10,
            penalty_order: 2,
            df_target: None,
            sum_to_zero: true,
            hat1: false,
        }
    }
}

/// Marginal basis of one variable, kept for re-evaluation on new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub var: String,
    pub knots: KnotVector,
    pub range: (f64, f64),
    #[serde(with = "matrix_b64")]
    pub transform: DMatrix<f64>,
}

/// Everything needed to rebuild the rows of a smooth design on new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothBasis {
    pub margins: Vec<Margin>,
    #[serde(with = "matrix_b64")]
    pub constraint: DMatrix<f64>,
}

impl SmoothBasis {
    /// Design rows for new feature columns (one slice per margin), with a flag
    /// per row telling whether any margin was extrapolated.
    pub fn design(&self, columns: &[&[f64]]) -> Result<(DMatrix<f64>, Vec<bool>), BasisError> {
        if columns.len() != self.margins.len() {
            return Err(BasisError::Dimension(format!(
                "{} columns supplied for {} margins",
                columns.len(),
                self.margins.len()
            )));
        }
        let n = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != n) {
            return Err(BasisError::Dimension("margin columns differ in length".into()));
        }
        let mut flags = vec![false; n];
        let mut product: Option<DMatrix<f64>> = None;
        for (margin, col) in self.margins.iter().zip(columns) {
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(BasisError::NonFinite { row: i });
            }
            let m = margin.knots.n_basis();
            let mut raw = DMatrix::zeros(n, m);
            for (i, &x) in col.iter().enumerate() {
                let (row, extrapolated) = basis_row_extrapolated(&margin.knots, x);
                flags[i] |= extrapolated;
                for (j, v) in row.into_iter().enumerate() {
                    raw[(i, j)] = v;
                }
            }
            let marginal = raw * &margin.transform;
            product = Some(match product {
                None => marginal,
                Some(acc) => row_kronecker(&acc, &marginal),
            });
        }
        let x = product.unwrap_or_else(|| DMatrix::zeros(n, 0)) * &self.constraint;
        Ok((x, flags))
    }
}

/// One structured term: design, penalty, constraint transform and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBlock {
    pub design: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    /// raw-dim × p transform absorbed into the design (identity without constraints)
    pub constraint: DMatrix<f64>,
    pub lambda: f64,
    pub df_target: Option<f64>,
    pub term_id: String,
    pub coef_names: Vec<String>,
    pub var_names: Vec<String>,
    pub ranges: Vec<(f64, f64)>,
    pub basis: Option<SmoothBasis>,
}

impl DesignBlock {
    pub fn ncols(&self) -> usize {
        self.design.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.design.nrows()
    }
}

/// Row-wise Kronecker product of two matrices with equal row counts.
pub fn row_kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, pa, pb) = (a.nrows(), a.ncols(), b.ncols());
    DMatrix::from_fn(n, pa * pb, |i, c| a[(i, c / pb)] * b[(i, c % pb)])
}

/// Orthonormal basis of the null space of `cᵀ` (k × (k−1)), via a Householder
/// reflector whose first column is parallel to `c`.
pub fn sum_to_zero_transform(c: &DVector<f64>) -> Result<DMatrix<f64>, BasisError> {
    let k = c.len();
    let norm = c.norm();
    if k < 2 || !(norm > 0.0) {
        return Err(BasisError::Config("constraint vector is zero".into()));
    }
    // v = c + sign(c0)·‖c‖·e1, with sign(0) taken as +1
    let mut v = c.clone();
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] = c[0] + sign * norm;
    let vtv = v.dot(&v);
    let h = DMatrix::<f64>::identity(k, k) - (&v * v.transpose()) * (2.0 / vtv);
    Ok(h.columns(1, k - 1).into_owned())
}

/// Type-7 sample quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Cubic open knot vector with `k` basis functions on the range of `x`;
/// interior knots at quantiles, falling back to equidistant placement when
/// ties make the quantiles collapse.
pub fn quantile_knots(x: &[f64], k: usize) -> Result<KnotVector, BasisError> {
    if k < CUBIC + 1 {
        return Err(BasisError::Config(format!(
            "cubic basis needs k >= {}, got {k}",
            CUBIC + 1
        )));
    }
    let mut sorted: Vec<f64> = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let n_interior = k - CUBIC - 1;
    let mut interior: Vec<f64> = (1..=n_interior)
        .map(|j| quantile_sorted(&sorted, j as f64 / (n_interior + 1) as f64))
        .collect();
    let strictly_inside = interior
        .iter()
        .zip(std::iter::once(&lo).chain(interior.iter()))
        .all(|(q, prev)| q > prev)
        && interior.last().is_none_or(|q| *q < hi);
    if !strictly_inside {
        interior = (1..=n_interior)
            .map(|j| lo + (hi - lo) * j as f64 / (n_interior + 1) as f64)
            .collect();
    }
    KnotVector::open(lo, hi, &interior, CUBIC)
}

fn raw_penalty(tag: BasisTag, order: usize, knots: &KnotVector) -> Result<DMatrix<f64>, BasisError> {
    match tag {
        BasisTag::Ps => difference_penalty(order, knots.n_basis()),
        BasisTag::Tp => Ok(second_derivative_penalty(knots)),
    }
}

fn range_of(x: &[f64]) -> (f64, f64) {
    x.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Builds the design block of a univariate smooth of `x`.
pub fn build_smooth(x: &[f64], var: &str, cfg: &SmoothConfig) -> Result<DesignBlock, BasisError> {
    let block = build_marginal(x, var, cfg)?;
    let term_id = format!("s({var})");
    finish_block(block, term_id, cfg.sum_to_zero, cfg.df_target, cfg.hat1)
}

/// Unconstrained marginal basis (used directly by tensor products).
pub fn build_marginal(x: &[f64], var: &str, cfg: &SmoothConfig) -> Result<DesignBlock, BasisError> {
    if cfg.k <= cfg.penalty_order {
        return Err(BasisError::Config(format!(
            "k = {} must exceed the penalty order {}",
            cfg.k, cfg.penalty_order
        )));
    }
    if x.len() < cfg.k {
        return Err(BasisError::TooFewObservations { n: x.len(), k: cfg.k });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(BasisError::NonFinite { row: i });
    }
    let range = range_of(x);
    if !(range.1 > range.0) {
        return Err(BasisError::ConstantInput(var.to_string()));
    }
    let knots = quantile_knots(x, cfg.k)?;
    let design = bspline_basis(x, &knots)?;
    let penalty = raw_penalty(cfg.basis, cfg.penalty_order, &knots)?;
    let m = knots.n_basis();
    let identity = DMatrix::identity(m, m);
    Ok(DesignBlock {
        design,
        penalty,
        constraint: identity.clone(),
        lambda: 0.0,
        df_target: None,
        term_id: var.to_string(),
        coef_names: Vec::new(),
        var_names: vec![var.to_string()],
        ranges: vec![range],
        basis: Some(SmoothBasis {
            margins: vec![Margin {
                var: var.to_string(),
                knots,
                range,
                transform: identity.clone(),
            }],
            constraint: identity,
        }),
    })
}

/// Absorbs the sum-to-zero constraint, names coefficients and calibrates λ.
fn finish_block(
    mut block: DesignBlock,
    term_id: String,
    sum_to_zero: bool,
    df_target: Option<f64>,
    hat1: bool,
) -> Result<DesignBlock, BasisError> {
    let raw_dim = block.design.ncols();
    let z = if sum_to_zero {
        let sums = DVector::from_iterator(raw_dim, block.design.column_iter().map(|c| c.sum()));
        sum_to_zero_transform(&sums)?
    } else {
        DMatrix::identity(raw_dim, raw_dim)
    };
    block.design = &block.design * &z;
    block.penalty = symmetrize(&(z.transpose() * &block.penalty * &z));
    if let Some(basis) = block.basis.as_mut() {
        basis.constraint = z.clone();
    }
    block.constraint = z;
    block.coef_names = (1..=block.design.ncols()).map(|j| format!("{term_id}.{j}")).collect();
    block.term_id = term_id;
    if let Some(target) = df_target {
        let p = block.design.ncols() as f64;
        let target = target.min(p);
        block.lambda = df_to_lambda(&block, target, hat1)?;
        block.df_target = Some(target);
    }
    Ok(block)
}

/// Tensor-product smooth from marginal blocks built on the same observations.
///
/// The design is the row-wise Kronecker product of the marginal designs, the
/// penalty is `Σ_j I ⊗ … ⊗ P_j ⊗ … ⊗ I` (one shared λ), and a sum-to-zero
/// constraint is absorbed on the product basis.
pub fn tensor_product(
    margins: &[DesignBlock],
    df_target: Option<f64>,
    hat1: bool,
) -> Result<DesignBlock, BasisError> {
    if margins.len() < 2 {
        return Err(BasisError::Config("tensor product needs at least two margins".into()));
    }
    let n = margins[0].nrows();
    if margins.iter().any(|m| m.nrows() != n) {
        return Err(BasisError::Dimension("marginal blocks differ in row count".into()));
    }
    let dims: Vec<usize> = margins.iter().map(DesignBlock::ncols).collect();
    let total: usize = dims.iter().product();
    let mut design = margins[0].design.clone();
    for m in &margins[1..] {
        design = row_kronecker(&design, &m.design);
    }
    let mut penalty = DMatrix::zeros(total, total);
    for (j, m) in margins.iter().enumerate() {
        let mut term = DMatrix::<f64>::identity(1, 1);
        for (i, &d) in dims.iter().enumerate() {
            let factor = if i == j {
                m.penalty.clone()
            } else {
                DMatrix::identity(d, d)
            };
            term = term.kronecker(&factor);
        }
        penalty += term;
    }
    let mut tensor_margins = Vec::with_capacity(margins.len());
    for m in margins {
        let basis = m
            .basis
            .as_ref()
            .ok_or_else(|| BasisError::Config("marginal block lacks a basis".into()))?;
        for margin in &basis.margins {
            let mut margin = margin.clone();
            margin.transform = &margin.transform * &m.constraint;
            tensor_margins.push(margin);
        }
    }
    let vars: Vec<String> = margins.iter().flat_map(|m| m.var_names.clone()).collect();
    let ranges = margins.iter().flat_map(|m| m.ranges.clone()).collect();
    let block = DesignBlock {
        design,
        penalty,
        constraint: DMatrix::identity(total, total),
        lambda: 0.0,
        df_target: None,
        term_id: String::new(),
        coef_names: Vec::new(),
        var_names: vars.clone(),
        ranges,
        basis: Some(SmoothBasis {
            margins: tensor_margins,
            constraint: DMatrix::identity(total, total),
        }),
    };
    finish_block(block, format!("te({})", vars.join(", ")), true, df_target, hat1)
}

/// Fitted partial effect of a smooth on a grid of feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialEffect {
    /// One column per variable of the smooth.
    pub grid: Vec<Vec<f64>>,
    pub effect: Vec<f64>,
    /// Grid rows that fell outside the training range and were clamped.
    pub clamped: Vec<bool>,
}

/// Re-evaluates the basis of `block` at `grid` (one column per variable) and
/// returns `X_grid · coefs`. Grid values outside the training range are
/// clamped to it and flagged.
pub fn evaluate_partial_effect(
    block: &DesignBlock,
    coefs: &[f64],
    grid: &[Vec<f64>],
) -> Result<PartialEffect, BasisError> {
    let basis = block
        .basis
        .as_ref()
        .ok_or_else(|| BasisError::Config(format!("{} is not a smooth term", block.term_id)))?;
    if coefs.len() != block.ncols() {
        return Err(BasisError::Dimension(format!(
            "{} coefficients for {} columns",
            coefs.len(),
            block.ncols()
        )));
    }
    if grid.len() != basis.margins.len() {
        return Err(BasisError::Dimension(format!(
            "{} grid columns for {} variables",
            grid.len(),
            basis.margins.len()
        )));
    }
    let n = grid.first().map_or(0, Vec::len);
    let mut clamped = vec![false; n];
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(grid.len());
    for (margin, col) in basis.margins.iter().zip(grid) {
        if col.len() != n {
            return Err(BasisError::Dimension("grid columns differ in length".into()));
        }
        let (lo, hi) = margin.range;
        cols.push(
            col.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let c = v.clamp(lo, hi);
                    clamped[i] |= c != v;
                    c
                })
                .collect(),
        );
    }
    let views: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    let (x, _) = basis.design(&views)?;
    let effect = x * DVector::from_column_slice(coefs);
    Ok(PartialEffect {
        grid: cols,
        effect: effect.iter().copied().collect(),
        clamped,
    })
}

/// Evenly spaced grid of `len` points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, len: usize) -> Vec<f64> {
    match len {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..len)
            .map(|i| {
                if i == len - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (len - 1) as f64
                }
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-2.0..3.0)).collect()
    }

    #[test]
    fn ps_with_constraint_drops_one_column() {
        let x = sample(200, 1);
        let b = build_smooth(&x, "x", &SmoothConfig::default()).unwrap();
        assert_eq!(b.ncols(), 9);
        for c in b.design.column_iter() {
            assert!(c.sum().abs() < 1e-8);
        }
        let unconstrained = SmoothConfig {
            sum_to_zero: false,
            ..SmoothConfig::default()
        };
        let b = build_smooth(&x, "x", &unconstrained).unwrap();
        assert_eq!(b.ncols(), 10);
        assert_eq!(b.penalty, difference_penalty(2, 10).unwrap());
    }

    #[test]
    fn constraint_preserves_fit_space() {
        let x = sample(100, 2);
        let cfg = SmoothConfig::default();
        let b = build_smooth(&x, "x", &cfg).unwrap();
        let raw = bspline_basis(&x, &b.basis.as_ref().unwrap().margins[0].knots).unwrap();
        let gamma = DVector::from_fn(b.ncols(), |i, _| (i as f64 * 0.7).sin());
        let lhs = &raw * (&b.constraint * &gamma);
        let rhs = &b.design * &gamma;
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn rows_sum_to_one_inside_domain() {
        let x = sample(50, 3);
        let knots = quantile_knots(&x, 12).unwrap();
        let basis = bspline_basis(&x, &knots).unwrap();
        for row in basis.row_iter() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn errors_on_degenerate_input() {
        let cfg = SmoothConfig::default();
        assert!(matches!(
            build_smooth(&[1.0; 30], "c", &cfg),
            Err(BasisError::ConstantInput(_))
        ));
        assert!(matches!(
            build_smooth(&sample(5, 4), "x", &cfg),
            Err(BasisError::TooFewObservations { .. })
        ));
    }

    #[test]
    fn tied_data_fall_back_to_equidistant_knots() {
        let x: Vec<f64> = (0..100).map(|i| if i < 90 { 1.0 } else { (i - 88) as f64 }).collect();
        let knots = quantile_knots(&x, 10).unwrap();
        let t = knots.knots();
        assert!(t[4..t.len() - 4].windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn tensor_dimensions_and_psd_penalty() {
        let x = sample(300, 5);
        let z = sample(300, 6);
        let c1 = SmoothConfig {
            k: 4,
            ..SmoothConfig::default()
        };
        let c2 = SmoothConfig {
            k: 5,
            ..SmoothConfig::default()
        };
        let m1 = build_marginal(&x, "x", &c1).unwrap();
        let m2 = build_marginal(&z, "z", &c2).unwrap();
        let t = tensor_product(&[m1, m2], None, false).unwrap();
        assert_eq!(t.constraint.nrows(), 20);
        assert_eq!(t.ncols(), 19);
        assert!(t.penalty.symmetric_eigenvalues().min() > -1e-10);
        assert_eq!(t.term_id, "te(x, z)");
    }

    #[test]
    fn partial_effect_matches_training_design() {
        let x = sample(80, 7);
        let b = build_smooth(&x, "x", &SmoothConfig::default()).unwrap();
        let coefs: Vec<f64> = (0..b.ncols()).map(|i| (i as f64).cos()).collect();
        let pe = evaluate_partial_effect(&b, &coefs, &[x.clone()]).unwrap();
        let direct = &b.design * DVector::from_vec(coefs.clone());
        for (a, d) in pe.effect.iter().zip(direct.iter()) {
            assert_abs_diff_eq!(a, d, epsilon = 1e-10);
        }
        let zero = evaluate_partial_effect(&b, &vec![0.0; b.ncols()], &[linspace(-5.0, 5.0, 11)]).unwrap();
        assert!(zero.effect.iter().all(|v| *v == 0.0));
        assert!(zero.clamped[0] && zero.clamped[10] && !zero.clamped[5]);
        assert!(evaluate_partial_effect(&b, &[1.0], &[x]).is_err());
    }

    #[test]
    fn sum_to_zero_transform_is_orthonormal() {
        let c = DVector::from_vec(vec![3.0, -1.0, 2.0, 0.5]);
        let z = sum_to_zero_transform(&c).unwrap();
        assert!((z.transpose() * &c).amax() < 1e-12);
        assert!((z.transpose() * &z - DMatrix::identity(3, 3)).amax() < 1e-12);
    }
}
