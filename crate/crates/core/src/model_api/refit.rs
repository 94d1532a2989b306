//! Penalized least-squares refit of the location predictor on frozen
//! network features, with a conditional coefficient covariance.

use nalgebra::{DMatrix, DVector};

use super::{
    effect_grid, grid_design, location_offset, structured_location_design, Model, ModelError, TermEncoder, GRID_1D,
};
use crate::data::DataFrame;
use crate::families::{FamilyKind, ResponseFn};
use crate::linalg::{cholesky_jittered, symmetrize};
use crate::orthogonalization::Projector;

/// Pointwise band `effect ± 2 sd` of one smooth.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub term: String,
    pub vars: Vec<String>,
    pub grid: Vec<Vec<f64>>,
    pub effect: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefitResult {
    pub names: Vec<String>,
    pub coefficients: DVector<f64>,
    /// Last-layer covariance conditional on the frozen features.
    pub covariance: DMatrix<f64>,
    /// Residual variance estimate `RSS / (n - edf)`.
    pub sigma2: f64,
    pub edf: f64,
    /// Number of structured columns; network features follow them.
    pub structured_cols: usize,
    /// Number of appended network feature columns (plus bias, if any).
    pub feature_cols: usize,
    pub bands: Vec<Band>,
}

/// Refits the location predictor of a normal model: structured columns
/// with their frozen smoothing penalties plus the features feeding the
/// final layer (or the dense layer named `layer`) of every network.
pub fn last_layer_refit(
    model: &Model,
    data: &DataFrame,
    y: &[f64],
    layer: Option<&str>,
) -> Result<RefitResult, ModelError> {
    let family = model.family();
    if family.kind != FamilyKind::Normal {
        return Err(ModelError::NotSupported(format!(
            "last-layer refit needs the normal family, got {}",
            family.name()
        )));
    }
    if family.links[0] != ResponseFn::Identity {
        return Err(ModelError::NotSupported("last-layer refit needs an identity location link".into()));
    }
    if y.len() != data.nrows() {
        return Err(ModelError::ResponseLength {
            got: y.len(),
            expected: data.nrows(),
        });
    }
    let design = model.design(data)?;
    let (xs, s_struct, mut names) = structured_location_design(model, &design)?;
    let n = design.nrows;
    let mut features: Vec<DMatrix<f64>> = Vec::new();
    let mut has_intercept = false;
    let mut any_bias = false;
    for (cf, fd) in model.formulas.iter().zip(&design.formulas) {
        if !cf.params.contains(&0) {
            continue;
        }
        has_intercept |= cf.has_intercept;
        for (net, nd) in cf.nets.iter().zip(&fd.nets) {
            let projector = nd.xoz.as_ref().map(Projector::new).transpose()?;
            let u = net.network.features(&model.store, &nd.inputs, layer, projector.as_ref())?;
            any_bias |= net.network.final_has_bias();
            for j in 0..u.ncols() {
                names.push(format!("{}.u{}", net.label, j + 1));
            }
            features.push(u);
        }
    }
    // the network's output bias stands in for a missing intercept
    let bias = !has_intercept && any_bias;
    if bias {
        names.push("(Intercept)".into());
    }
    let ps = xs.ncols();
    let pf = features.iter().map(DMatrix::ncols).sum::<usize>() + usize::from(bias);
    let p = ps + pf;
    if p == 0 {
        return Err(ModelError::InvalidOption("location predictor has no columns to refit".into()));
    }
    let mut x = DMatrix::zeros(n, p);
    x.columns_mut(0, ps).copy_from(&xs);
    let mut at = ps;
    for u in &features {
        x.columns_mut(at, u.ncols()).copy_from(u);
        at += u.ncols();
    }
    if bias {
        x.column_mut(at).fill(1.0);
    }
    let mut s = DMatrix::zeros(p, p);
    s.view_mut((0, 0), (ps, ps)).copy_from(&s_struct);
    let target = DVector::from_column_slice(y) - location_offset(model, &design);
    let xtx = x.transpose() * &x;
    let a = symmetrize(&(&xtx + &s));
    let (chol, _) = cholesky_jittered(&a).ok_or_else(|| ModelError::NotSupported("refit system is singular".into()))?;
    let beta = chol.solve(&(x.transpose() * &target));
    let a_inv = symmetrize(&chol.inverse());
    let edf = (&a_inv * &xtx).trace();
    let resid = &target - &x * &beta;
    let dof = n as f64 - edf;
    if dof <= 0.0 {
        return Err(ModelError::NotSupported(format!(
            "refit has {edf:.3} effective parameters for {n} observations"
        )));
    }
    let sigma2 = resid.norm_squared() / dof;
    let covariance = &a_inv * sigma2;
    let bands = smooth_bands(model, &beta, &covariance)?;
    Ok(RefitResult {
        names,
        coefficients: beta,
        covariance,
        sigma2,
        edf,
        structured_cols: ps,
        feature_cols: pf,
        bands,
    })
}

fn smooth_bands(model: &Model, beta: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Vec<Band>, ModelError> {
    let mut bands = Vec::new();
    let mut at = 0;
    for cf in model.formulas.iter().filter(|cf| cf.params.contains(&0)) {
        for t in &cf.structured {
            let w = t.encoder.ncols();
            if t.is_smooth() {
                bands.push(band(&t.label, &t.encoder, beta.rows(at, w).into_owned(), cov.view((at, at), (w, w)).into_owned())?);
            }
            at += w;
        }
    }
    Ok(bands)
}

fn band(label: &str, encoder: &TermEncoder, beta: DVector<f64>, cov: DMatrix<f64>) -> Result<Band, ModelError> {
    let (vars, grid) = effect_grid(encoder, GRID_1D).expect("smooth encoder");
    let xg = grid_design(encoder, &grid)?;
    let effect = &xg * &beta;
    let xc = &xg * &cov;
    let mut lower = Vec::with_capacity(xg.nrows());
    let mut upper = Vec::with_capacity(xg.nrows());
    for i in 0..xg.nrows() {
        let var = xc.row(i).dot(&xg.row(i)).max(0.0);
        let half = 2.0 * var.sqrt();
        lower.push(effect[i] - half);
        upper.push(effect[i] + half);
    }
    Ok(Band {
        term: label.to_string(),
        vars,
        grid,
        effect: effect.iter().copied().collect(),
        lower,
        upper,
    })
}
