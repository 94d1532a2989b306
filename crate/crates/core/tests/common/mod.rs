//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sddr::basis::DesignBlock;
use sddr::data::DataFrame;

pub fn uniform(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn normals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn rng_matrix(seed: u64, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, &normals(seed, rows * cols))
}

/// Random design with a PSD penalty of the given nullity.
pub fn random_block(seed: u64, n: usize, p: usize, nullity: usize) -> DesignBlock {
    let x = rng_matrix(seed, n, p);
    let b = rng_matrix(seed.wrapping_add(10_000), p - nullity, p);
    let penalty = b.transpose() * b;
    DesignBlock {
        design: x,
        penalty,
        constraint: DMatrix::identity(p, p),
        lambda: 0.0,
        df_target: None,
        term_id: "random".into(),
        coef_names: (1..=p).map(|j| format!("random.{j}")).collect(),
        var_names: vec![],
        ranges: vec![],
        basis: None,
    }
}

/// Effective df from the explicit hat matrix `H = X (XᵀX + λP)⁻¹ Xᵀ`.
pub fn dense_df(x: &DMatrix<f64>, penalty: &DMatrix<f64>, lambda: f64, hat1: bool) -> f64 {
    let a = x.transpose() * x + penalty * lambda;
    let h = x * a.try_inverse().expect("invertible") * x.transpose();
    if hat1 {
        h.trace()
    } else {
        2.0 * h.trace() - (&h * &h).trace()
    }
}

/// `(I - A A⁺) U` with the pseudo-inverse from an SVD.
pub fn pinv_projection(a: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    let pinv = a.clone().pseudo_inverse(1e-10 * a.amax().max(1.0)).expect("svd");
    u - a * (pinv * u)
}

/// Maximum relative error between an analytic gradient and central finite
/// differences of `f` at `x`, with step `h`. Near-zero entries are compared
/// on an absolute scale of `floor`.
pub fn fd_check(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], grad: &[f64], h: f64, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

pub fn frame(columns: &[(&str, Vec<f64>)]) -> DataFrame {
    columns
        .iter()
        .fold(DataFrame::new(), |df, (name, v)| df.with_numeric(name, v.clone()).unwrap())
}

/// Ordinary least squares via QR.
pub fn ols(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * DVector::from_column_slice(y);
    qr.r().solve_upper_triangular(&qty).expect("full rank")
}

/// Toy data `y = 2 x + ε` with `x, ε ~ N(0, 1)`.
pub fn toy(seed: u64, n: usize) -> (DataFrame, Vec<f64>) {
    let x = normals(seed, n);
    let e = normals(seed.wrapping_add(1), n);
    let y: Vec<f64> = x.iter().zip(&e).map(|(x, e)| 2.0 * x + e).collect();
    (frame(&[("x", x)]), y)
}

/// Heteroscedastic data: `y ~ N(sin(2x), (0.3 + 0.4|z|)²)`.
pub fn heteroscedastic(seed: u64, n: usize) -> (DataFrame, Vec<f64>) {
    let x = uniform(seed, n, -2.0, 2.0);
    let z = uniform(seed.wrapping_add(1), n, -1.5, 1.5);
    let e = normals(seed.wrapping_add(2), n);
    let y: Vec<f64> = (0..n)
        .map(|i| (2.0 * x[i]).sin() + (0.3 + 0.4 * z[i].abs()) * e[i])
        .collect();
    (frame(&[("x", x), ("z", z)]), y)
}
