use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::BasisError;

/// Knot sequence of a B-spline basis of a given degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    knots: Vec<f64>,
    degree: usize,
}

impl KnotVector {
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self, BasisError> {
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(BasisError::InvalidKnots("knots must be finite".into()));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(BasisError::InvalidKnots("knots must be non-decreasing".into()));
        }
        if knots.len() < 2 * degree + 2 {
            return Err(BasisError::InvalidKnots(format!(
                "degree {degree} needs at least {} knots, got {}",
                2 * degree + 2,
                knots.len()
            )));
        }
        if knots[degree] >= knots[knots.len() - degree - 1] {
            return Err(BasisError::InvalidKnots(
                "knots span an empty domain; at least two distinct positions are required".into(),
            ));
        }
        Ok(Self { knots, degree })
    }

    /// Open (clamped) knot vector: boundary knots repeated `degree + 1` times.
    pub fn open(lower: f64, upper: f64, interior: &[f64], degree: usize) -> Result<Self, BasisError> {
        let mut knots = Vec::with_capacity(interior.len() + 2 * degree + 2);
        knots.extend(std::iter::repeat_n(lower, degree + 1));
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat_n(upper, degree + 1));
        Self::new(knots, degree)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// Interval on which the basis forms a partition of unity.
    pub fn domain(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.knots.len() - self.degree - 1])
    }
}

/// Largest `j` with `t[j] <= x` and a non-empty interval `[t[j], t[j+1])`.
fn find_span(t: &[f64], x: f64) -> usize {
    let mut span = None;
    for j in 0..t.len() - 1 {
        // the first non-empty interval also covers x below the knot range
        if t[j] < t[j + 1] && (t[j] <= x || span.is_none()) {
            span = Some(j);
        }
    }
    span.unwrap_or(0)
}

/// All `len(t) - degree - 1` basis functions at `x` (Cox–de Boor, bottom-up).
pub(crate) fn basis_row(t: &[f64], degree: usize, x: f64) -> Vec<f64> {
    let m = t.len();
    let mut b = vec![0.0; m - 1];
    b[find_span(t, x)] = 1.0;
    for d in 1..=degree {
        for i in 0..m - 1 - d {
            let left = t[i + d] - t[i];
            let right = t[i + d + 1] - t[i + 1];
            let w1 = if left > 0.0 { (x - t[i]) / left } else { 0.0 };
            let w2 = if right > 0.0 { (t[i + d + 1] - x) / right } else { 0.0 };
            b[i] = w1 * b[i] + w2 * b[i + 1];
        }
    }
    b.truncate(m - degree - 1);
    b
}

/// `order`-th derivative of every basis function at `x`.
pub(crate) fn derivative_row(t: &[f64], degree: usize, x: f64, order: usize) -> Vec<f64> {
    if order == 0 {
        return basis_row(t, degree, x);
    }
    let n = t.len() - degree - 1;
    if degree == 0 {
        return vec![0.0; n];
    }
    let lower = derivative_row(t, degree - 1, x, order - 1);
    let p = degree as f64;
    (0..n)
        .map(|i| {
            let left = t[i + degree] - t[i];
            let right = t[i + degree + 1] - t[i + 1];
            let a = if left > 0.0 { lower[i] / left } else { 0.0 };
            let b = if right > 0.0 { lower[i + 1] / right } else { 0.0 };
            p * (a - b)
        })
        .collect()
}

/// Basis row with linear extrapolation outside the domain. Returns the row
/// and whether `x` lay outside the domain.
pub(crate) fn basis_row_extrapolated(knots: &KnotVector, x: f64) -> (Vec<f64>, bool) {
    let (lo, hi) = knots.domain();
    let t = knots.knots();
    let edge = if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        return (basis_row(t, knots.degree, x), false);
    };
    let mut row = basis_row(t, knots.degree, edge);
    let slope = derivative_row(t, knots.degree, edge, 1);
    for (r, s) in row.iter_mut().zip(slope) {
        *r += (x - edge) * s;
    }
    (row, true)
}

/// n×M B-spline design matrix. Values outside the boundary knots are
/// linearly extrapolated.
pub fn bspline_basis(x: &[f64], knots: &KnotVector) -> Result<DMatrix<f64>, BasisError> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(BasisError::NonFinite { row: i });
    }
    let m = knots.n_basis();
    let mut out = DMatrix::zeros(x.len(), m);
    for (i, &xi) in x.iter().enumerate() {
        let (row, _) = basis_row_extrapolated(knots, xi);
        for (j, v) in row.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// `DᵀD` for the `order`-th difference operator on `m` coefficients.
pub fn difference_penalty(order: usize, m: usize) -> Result<DMatrix<f64>, BasisError> {
    let d = difference_matrix(order, m)?;
    Ok(d.transpose() * &d)
}

/// Difference operator itself, `(m - order) × m`.
pub fn difference_matrix(order: usize, m: usize) -> Result<DMatrix<f64>, BasisError> {
    if order == 0 || m <= order {
        return Err(BasisError::Config(format!(
            "difference operator of order {order} needs more than {order} coefficients"
        )));
    }
    let mut d = DMatrix::<f64>::identity(m, m);
    for _ in 0..order {
        let rows = d.nrows();
        d = DMatrix::from_fn(rows - 1, m, |r, c| d[(r + 1, c)] - d[(r, c)]);
    }
    Ok(d)
}

const GAUSS3_NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GAUSS3_WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

/// `∫ B_i''(x) B_j''(x) dx` over the knot domain, by Gauss–Legendre
/// quadrature on each knot span (exact for degree ≤ 3).
pub fn second_derivative_penalty(knots: &KnotVector) -> DMatrix<f64> {
    let m = knots.n_basis();
    let mut pen = DMatrix::zeros(m, m);
    if knots.degree() < 2 {
        return pen;
    }
    let t = knots.knots();
    let (lo, hi) = knots.domain();
    for w in t.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a || a < lo || b > hi {
            continue;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (node, weight) in GAUSS3_NODES.iter().zip(GAUSS3_WEIGHTS) {
            let x = mid + half * node;
            let d2 = derivative_row(t, knots.degree(), x, 2);
            for i in 0..m {
                if d2[i] == 0.0 {
                    continue;
                }
                for j in 0..m {
                    pen[(i, j)] += weight * half * d2[i] * d2[j];
                }
            }
        }
    }
    pen
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn degree_zero_indicator() {
        let k = KnotVector::new(vec![0.0, 1.0, 2.0], 0).unwrap();
        let b = bspline_basis(&[0.5], &k).unwrap();
        assert_eq!(b.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
    }

    #[test]
    fn right_boundary_belongs_to_last_span() {
        let k = KnotVector::open(0.0, 4.0, &[1.0, 2.0, 3.0], 3).unwrap();
        let row = basis_row(k.knots(), 3, 4.0);
        assert_abs_diff_eq!(row[row.len() - 1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn too_few_knots() {
        assert!(KnotVector::new(vec![1.0; 8], 3).is_err());
        assert!(KnotVector::new(vec![0.0, 1.0], 1).is_err());
        assert!(KnotVector::new(vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0], 3).is_ok());
    }

    #[test]
    fn difference_penalty_examples() {
        let p = difference_penalty(2, 5).unwrap();
        let diag: Vec<f64> = (0..5).map(|i| p[(i, i)]).collect();
        assert_eq!(diag, vec![1.0, 5.0, 6.0, 5.0, 1.0]);
        let d = difference_matrix(2, 5).unwrap();
        assert_eq!(d.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, -2.0, 1.0, 0.0, 0.0]);
        let p1 = difference_penalty(1, 3).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(p1, expect);
        assert!(difference_penalty(3, 3).is_err());
    }

    #[test]
    fn difference_penalty_kills_constants() {
        for order in 1..4 {
            for m in order + 1..12 {
                let p = difference_penalty(order, m).unwrap();
                let ones = nalgebra::DVector::from_element(m, 1.0);
                assert!((p * ones).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn second_derivative_penalty_null_space_is_linear() {
        let k = KnotVector::open(0.0, 1.0, &[0.2, 0.35, 0.5, 0.8], 3).unwrap();
        let p = second_derivative_penalty(&k);
        // coefficients reproducing f(x) = x are the Greville abscissae
        let t = k.knots();
        let greville: Vec<f64> = (0..k.n_basis()).map(|i| (t[i + 1] + t[i + 2] + t[i + 3]) / 3.0).collect();
        let g = nalgebra::DVector::from_vec(greville);
        assert!((&p * &g).amax() < 1e-10);
        let ones = nalgebra::DVector::from_element(k.n_basis(), 1.0);
        assert!((&p * ones).amax() < 1e-10);
        let eig = p.symmetric_eigenvalues();
        assert!(eig.min() > -1e-10);
        assert_eq!(eig.iter().filter(|e| e.abs() < 1e-8 * eig.max()).count(), 2);
    }

    #[test]
    fn extrapolation_is_linear() {
        let k = KnotVector::open(0.0, 1.0, &[0.5], 3).unwrap();
        let (r1, f1) = basis_row_extrapolated(&k, 1.5);
        let (r2, f2) = basis_row_extrapolated(&k, 2.0);
        let (r0, f0) = basis_row_extrapolated(&k, 1.0);
        assert!(f1 && f2 && !f0);
        for j in 0..r0.len() {
            assert_abs_diff_eq!(r2[j] - r1[j], r1[j] - r0[j], epsilon = 1e-12);
        }
        // rows still sum to one (derivatives of a partition of unity sum to zero)
        assert_abs_diff_eq!(r2.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}
