mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sddr::basis::{
    bspline_basis, build_marginal, build_smooth, df_to_lambda, difference_penalty, effective_df, evaluate_partial_effect,
    row_kronecker, tensor_product, KnotVector, SmoothConfig,
};
use sddr::formula::BasisTag;

use common::{dense_df, random_block, uniform};

/// Cox–de Boor recursion evaluated directly from the definition.
fn cox_de_boor(knots: &[f64], i: usize, degree: usize, x: f64) -> f64 {
    if degree == 0 {
        let last = *knots.last().unwrap();
        let inside = knots[i] <= x && x < knots[i + 1];
        // right boundary belongs to the last non-empty span
        let at_end = x == last && knots[i + 1] == last && knots[i] < last;
        return if inside || at_end { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = knots[i + degree] - knots[i];
    if d1 > 0.0 {
        v += (x - knots[i]) / d1 * cox_de_boor(knots, i, degree - 1, x);
    }
    let d2 = knots[i + degree + 1] - knots[i + 1];
    if d2 > 0.0 {
        v += (knots[i + degree + 1] - x) / d2 * cox_de_boor(knots, i + 1, degree - 1, x);
    }
    v
}

#[test]
fn cubic_row_matches_recursion_oracle() {
    let knots = vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 4.0, 4.0, 4.0];
    let kv = KnotVector::new(knots.clone(), 3).unwrap();
    for x in [2.0, 0.0, 0.37, 1.5, 3.99, 4.0] {
        let row = bspline_basis(&[x], &kv).unwrap();
        for j in 0..kv.n_basis() {
            assert!((row[(0, j)] - cox_de_boor(&knots, j, 3, x)).abs() < 1e-12, "x={x}, j={j}");
        }
    }
}

#[test]
fn degree_zero_is_an_indicator() {
    let kv = KnotVector::new(vec![0.0, 1.0, 2.0], 0).unwrap();
    let row = bspline_basis(&[0.5], &kv).unwrap();
    assert_eq!(row.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
}

#[test]
fn difference_penalty_arithmetic() {
    let p = difference_penalty(2, 5).unwrap();
    assert_eq!(p.diagonal().iter().copied().collect::<Vec<_>>(), vec![1.0, 5.0, 6.0, 5.0, 1.0]);
    let p1 = difference_penalty(1, 3).unwrap();
    let want = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
    assert_eq!(p1, want);
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn rows_partition_unity(interior in prop::collection::vec(0.01f64..0.99, 1..8), xs in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let mut inner = interior.clone();
        inner.sort_by(f64::total_cmp);
        let kv = KnotVector::open(0.0, 1.0, &inner, 3).unwrap();
        let b = bspline_basis(&xs, &kv).unwrap();
        for i in 0..xs.len() {
            prop_assert!((b.row(i).sum() - 1.0).abs() < 1e-12);
            prop_assert!(b.row(i).iter().all(|v| *v >= -1e-15));
        }
    }

    #[test]
    fn difference_penalty_kills_low_polynomials(order in 1usize..4, m in 5usize..15) {
        let p = difference_penalty(order, m).unwrap();
        for deg in 0..order {
            let poly = DVector::from_fn(m, |i, _| (i as f64).powi(deg as i32));
            prop_assert!((&p * poly).amax() < 1e-8);
        }
        prop_assert!(min_eigenvalue(&p) > -1e-10);
    }

    #[test]
    fn smooth_blocks_are_consistent(seed in 0u64..1000, k in 6usize..14, ps in any::<bool>()) {
        let x = uniform(seed, 120, -3.0, 5.0);
        let cfg = SmoothConfig { basis: if ps { BasisTag::Ps } else { BasisTag::Tp }, k, ..SmoothConfig::default() };
        let block = build_smooth(&x, "x", &cfg).unwrap();
        prop_assert_eq!(block.ncols(), k - 1);
        prop_assert!(block.design.row_sum().amax() < 1e-8);
        prop_assert!(min_eigenvalue(&block.penalty) > -1e-10 * block.penalty.amax());
        // absorbing the constraint keeps the fit space: X_raw Z γ = X γ
        let raw = build_marginal(&x, "x", &cfg).unwrap();
        let gamma = DVector::from_fn(k - 1, |i, _| ((i * 7 + seed as usize) % 5) as f64 - 2.0);
        let lhs = &raw.design * (&block.constraint * &gamma);
        prop_assert!((lhs - &block.design * &gamma).amax() < 1e-10);
    }

    #[test]
    fn df_decreases_in_lambda(seed in 0u64..1000, l1 in 1e-4f64..1e2, factor in 1.01f64..100.0) {
        let block = random_block(seed, 40, 8, 2);
        for hat1 in [false, true] {
            let a = effective_df(&block, l1, hat1).unwrap();
            let b = effective_df(&block, l1 * factor, hat1).unwrap();
            prop_assert!(a > b, "hat1={hat1}: df({l1})={a} <= df({})={b}", l1 * factor);
        }
    }

    #[test]
    fn df_round_trip_against_dense_oracle(seed in 0u64..1000, frac in 0.0f64..1.0) {
        let block = random_block(seed, 50, 9, 3);
        let (lo, hi) = (3.0 + 0.5, 9.0 - 0.5);
        let target = lo + frac * (hi - lo);
        for hat1 in [false, true] {
            let lambda = df_to_lambda(&block, target, hat1).unwrap();
            prop_assert!((dense_df(&block.design, &block.penalty, lambda, hat1) - target).abs() < 1e-6);
        }
    }
}

#[test]
fn df_at_zero_is_p() {
    let block = random_block(3, 30, 7, 2);
    for hat1 in [false, true] {
        assert!((effective_df(&block, 0.0, hat1).unwrap() - 7.0).abs() < 1e-9);
    }
}

#[test]
fn tensor_rows_are_kronecker_products() {
    let x = uniform(1, 80, 0.0, 1.0);
    let z = uniform(2, 80, -1.0, 1.0);
    let cfg = |k| SmoothConfig {
        k,
        sum_to_zero: false,
        ..SmoothConfig::default()
    };
    let mx = build_marginal(&x, "x", &cfg(4)).unwrap();
    let mz = build_marginal(&z, "z", &cfg(5)).unwrap();
    let te = tensor_product(&[mx.clone(), mz.clone()], None, false).unwrap();
    assert_eq!(te.ncols(), 19);
    let raw = row_kronecker(&mx.design, &mz.design);
    assert_eq!(raw.ncols(), 20);
    let i = 17;
    let oracle: Vec<f64> = (0..4)
        .flat_map(|a| (0..5).map(move |b| (a, b)))
        .map(|(a, b)| mx.design[(i, a)] * mz.design[(i, b)])
        .collect();
    for (c, v) in oracle.iter().enumerate() {
        assert!((raw[(i, c)] - v).abs() < 1e-12);
    }
    let rebuilt = raw * &te.constraint;
    assert!((rebuilt - &te.design).amax() < 1e-12);
    assert!(min_eigenvalue(&te.penalty) > -1e-10);
}

#[test]
fn penalized_fit_matches_normal_equations() {
    let x = uniform(5, 200, 0.0, 1.0);
    let y: Vec<f64> = x.iter().map(|v| (6.0 * v).sin()).collect();
    let block = build_smooth(
        &x,
        "x",
        &SmoothConfig {
            df_target: Some(5.0),
            ..SmoothConfig::default()
        },
    )
    .unwrap();
    let lambda = block.lambda;
    let xd = &block.design;
    // oracle: LU solve of the augmented least-squares system
    let a = xd.transpose() * xd + &block.penalty * lambda;
    let rhs = xd.transpose() * DVector::from_column_slice(&y);
    let beta = a.clone().lu().solve(&rhs).unwrap();
    let beta_qr = {
        let root = block.penalty.clone().symmetric_eigen();
        let sqrt_p = &root.eigenvectors
            * DMatrix::from_diagonal(&root.eigenvalues.map(|v| (v.max(0.0) * lambda).sqrt()))
            * root.eigenvectors.transpose();
        let mut stacked = DMatrix::zeros(xd.nrows() + xd.ncols(), xd.ncols());
        stacked.rows_mut(0, xd.nrows()).copy_from(xd);
        stacked.rows_mut(xd.nrows(), xd.ncols()).copy_from(&sqrt_p);
        let mut rhs2 = DVector::zeros(xd.nrows() + xd.ncols());
        rhs2.rows_mut(0, xd.nrows()).copy_from(&DVector::from_column_slice(&y));
        stacked.svd(true, true).solve(&rhs2, 1e-14).unwrap()
    };
    assert!((&beta - &beta_qr).amax() < 1e-8);
    let grid: Vec<f64> = x.clone();
    let pe = evaluate_partial_effect(&block, beta.as_slice(), &[grid.clone()]).unwrap();
    let direct = xd * &beta;
    for (a, b) in pe.effect.iter().zip(direct.iter()) {
        assert!((a - b).abs() < 1e-10);
    }
    // centered columns cannot carry the mean of y
    let mean = y.iter().sum::<f64>() / 200.0;
    let rmse = (y.iter().zip(&pe.effect).map(|(t, e)| (t - mean - e).powi(2)).sum::<f64>() / 200.0).sqrt();
    assert!(rmse < 0.1, "rmse {rmse}");
    let zero = evaluate_partial_effect(&block, &vec![0.0; block.ncols()], &[grid]).unwrap();
    assert!(zero.effect.iter().all(|v| *v == 0.0));
}
