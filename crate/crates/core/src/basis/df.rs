use nalgebra::DMatrix;

use super::{BasisError, DesignBlock};
use crate::linalg::{cholesky_jittered, symmetrize};

/// Eigenvalues `s_i` of `L⁻¹ P L⁻ᵀ`, where `L Lᵀ = XᵀX`; the effective df of a
/// penalized fit with weight λ is then a sum of scalar shrinkage factors.
#[derive(Debug, Clone, PartialEq)]
pub struct DemmlerReinsch {
    eigenvalues: Vec<f64>,
    nullity: usize,
    jitter: f64,
}

const LOG10_LAMBDA_RANGE: (f64, f64) = (-10.0, 12.0);
const LOG10_LAMBDA_CEILING: f64 = 30.0;
const NULL_TOL: f64 = 1e-9;

impl DemmlerReinsch {
    pub fn new(x: &DMatrix<f64>, penalty: &DMatrix<f64>) -> Result<Self, BasisError> {
        let p = x.ncols();
        if penalty.nrows() != p || penalty.ncols() != p {
            return Err(BasisError::Dimension(format!(
                "penalty is {}x{} for {p} columns",
                penalty.nrows(),
                penalty.ncols()
            )));
        }
        let xtx = symmetrize(&(x.transpose() * x));
        let (chol, jitter) = cholesky_jittered(&xtx).ok_or(BasisError::Singular)?;
        let l = chol.l();
        let a = l
            .solve_lower_triangular(&symmetrize(penalty))
            .ok_or(BasisError::Singular)?;
        let m = l
            .solve_lower_triangular(&a.transpose())
            .ok_or(BasisError::Singular)?;
        let mut eigenvalues: Vec<f64> = symmetrize(&m)
            .symmetric_eigenvalues()
            .iter()
            .map(|s| s.max(0.0))
            .collect();
        eigenvalues.sort_by(f64::total_cmp);
        let max = eigenvalues.last().copied().unwrap_or(0.0);
        let nullity = eigenvalues.iter().filter(|s| **s <= NULL_TOL * max).count();
        if max == 0.0 {
            eigenvalues.iter_mut().for_each(|s| *s = 0.0);
        }
        Ok(Self {
            eigenvalues,
            nullity,
            jitter,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Dimension of the penalty null space (unpenalized directions).
    pub fn nullity(&self) -> usize {
        self.nullity
    }

    /// Diagonal jitter added to `XᵀX` before factorization (0 when not needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `trace(H)` when `hat1`, otherwise `trace(2H − HH)`.
    pub fn df(&self, lambda: f64, hat1: bool) -> f64 {
        self.eigenvalues
            .iter()
            .map(|s| {
                let ls = lambda * s;
                if hat1 {
                    1.0 / (1.0 + ls)
                } else {
                    (1.0 + 2.0 * ls) / ((1.0 + ls) * (1.0 + ls))
                }
            })
            .sum()
    }

    /// Smallest λ ≥ 0 with `df(λ) = target` to within 1e-6.
    pub fn lambda_for(&self, target: f64, hat1: bool) -> Result<f64, BasisError> {
        let p = self.eigenvalues.len() as f64;
        let lower = self.nullity as f64;
        if !target.is_finite() || target < lower - 1e-9 || target > p + 1e-9 {
            return Err(BasisError::DfOutOfRange {
                target,
                lower,
                upper: p,
            });
        }
        if target >= p - 1e-12 {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = LOG10_LAMBDA_RANGE;
        if self.df(10f64.powf(lo), hat1) <= target {
            return Ok(self.bisect_linear(0.0, 10f64.powf(lo), target, hat1));
        }
        while self.df(10f64.powf(hi), hat1) > target {
            if hi >= LOG10_LAMBDA_CEILING {
                return Err(BasisError::DfOutOfRange {
                    target,
                    lower,
                    upper: p,
                });
            }
            lo = hi;
            hi += 6.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.df(10f64.powf(mid), hat1) > target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-14 {
                break;
            }
        }
        let (l_lo, l_hi) = (10f64.powf(lo), 10f64.powf(hi));
        let pick = if (self.df(l_lo, hat1) - target).abs() <= (self.df(l_hi, hat1) - target).abs() {
            l_lo
        } else {
            l_hi
        };
        Ok(pick)
    }

    fn bisect_linear(&self, mut lo: f64, mut hi: f64, target: f64, hat1: bool) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.df(mid, hat1) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Effective degrees of freedom of `block` at smoothing weight `lambda`.
pub fn effective_df(block: &DesignBlock, lambda: f64, hat1: bool) -> Result<f64, BasisError> {
    Ok(DemmlerReinsch::new(&block.design, &block.penalty)?.df(lambda, hat1))
}

/// Smoothing weight giving `block` the effective df `target`.
pub fn df_to_lambda(block: &DesignBlock, target: f64, hat1: bool) -> Result<f64, BasisError> {
    DemmlerReinsch::new(&block.design, &block.penalty)?.lambda_for(target, hat1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_design_closed_form() {
        let i = DMatrix::<f64>::identity(10, 10);
        let dr = DemmlerReinsch::new(&i, &i).unwrap();
        assert_abs_diff_eq!(dr.df(1.0, true), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dr.df(1.0, false), 7.5, epsilon = 1e-12);
        assert_eq!(dr.df(0.0, true), 10.0);
        assert_eq!(dr.df(0.0, false), 10.0);
        assert_eq!(dr.nullity(), 0);
        assert_eq!(dr.jitter(), 0.0);
    }

    #[test]
    fn target_outside_range_is_rejected() {
        let x = DMatrix::from_fn(30, 5, |i, j| ((i * (j + 1)) as f64 * 0.37).sin());
        let p = super::super::difference_penalty(2, 5).unwrap();
        let dr = DemmlerReinsch::new(&x, &p).unwrap();
        assert_eq!(dr.nullity(), 2);
        assert!(dr.lambda_for(1.5, false).is_err());
        assert!(dr.lambda_for(5.5, false).is_err());
        assert_eq!(dr.lambda_for(5.0, false).unwrap(), 0.0);
        let l = dr.lambda_for(2.0001, true).unwrap();
        assert!((dr.df(l, true) - 2.0001).abs() <= 1e-6);
    }
}
