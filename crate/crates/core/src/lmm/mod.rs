//! Linear mixed model core.

pub(crate) mod engine;
mod fit;
mod kmat;
mod mse;

pub use engine::Method;
pub use fit::{fit_at_theta, fit_model, FitOptions, FittedLmm};
pub use kmat::{build_k, KBlocks};
pub use mse::{
    mixed_weight_jacobian, mixed_weights, mse_first_order, mse_second_order, predict_mixed, MixedTarget,
};

use crate::dataset::{ClusteredDataset, ModelSpec};
use crate::error::{LmmError, Result};
use crate::scalar::{lit, Scalar};
use crate::variance::VarianceParams;
use engine::{ModelDesign, Response, VState};
use nalgebra::{DMatrix, DVector};

fn check_beta<S: Scalar>(d: &ModelDesign<'_, S>, beta: &DVector<S>) -> Result<DVector<S>> {
    if beta.len() == d.p() {
        Ok(beta.clone())
    } else if beta.len() == d.data.p() {
        Ok(beta.select_rows(&d.idx))
    } else {
        Err(LmmError::Dimension(format!(
            "beta has length {}, model has {} columns",
            beta.len(),
            d.p()
        )))
    }
}

/// Marginal log-likelihood `l^m(beta, theta)`, evaluated cluster by cluster.
///
/// `beta` may be given on the model columns or padded to all columns.
pub fn marginal_loglik<S: Scalar>(
    data: &ClusteredDataset<S>,
    spec: &ModelSpec,
    theta: &VarianceParams<S>,
    beta: &DVector<S>,
) -> Result<S> {
    let d = ModelDesign::new(data, spec)?;
    let beta = check_beta(&d, beta)?;
    let vs = VState::new(data, theta)?;
    let res = Response::observed(&d).residual(&d, &beta);
    let mut quad = S::zero();
    for i in 0..d.n() {
        quad += vs.vinv[i].vv(res.yty[i], &res.zty[i]);
    }
    let m = lit::<S>(data.m() as f64);
    Ok(-lit::<S>(0.5) * (m * engine::ln_2pi::<S>() + vs.logdet() + quad))
}

/// Conditional part `log f(y | u)` of the extended log-likelihood.
pub fn conditional_loglik<S: Scalar>(
    data: &ClusteredDataset<S>,
    spec: &ModelSpec,
    theta: &VarianceParams<S>,
    beta: &DVector<S>,
    u: &DVector<S>,
) -> Result<S> {
    let d = ModelDesign::new(data, spec)?;
    let beta = check_beta(&d, beta)?;
    if u.len() != data.r() {
        return Err(LmmError::Dimension(format!("u has length {}, expected {}", u.len(), data.r())));
    }
    let s = theta.r_scale();
    if !(s > S::zero()) {
        return Err(LmmError::Singular("R".into()));
    }
    Ok(-lit::<S>(0.5) * engine::cond_deviance(&d, s, &Response::observed(&d), &beta, u))
}

/// Random-effect part `log f(u)`; requires a nonsingular `G`.
pub fn random_effect_loglik<S: Scalar>(data: &ClusteredDataset<S>, theta: &VarianceParams<S>, u: &DVector<S>) -> Result<S> {
    let q = data.q();
    if u.len() != data.r() {
        return Err(LmmError::Dimension(format!("u has length {}, expected {}", u.len(), data.r())));
    }
    let (ginv, logdet_g) = engine::spd_inverse(&theta.g(), "G")?;
    let mut quad = S::zero();
    for i in 0..data.n() {
        let ui = u.rows(i * q, q);
        quad += ui.dot(&(&ginv * ui));
    }
    let r = lit::<S>(data.r() as f64);
    let n = lit::<S>(data.n() as f64);
    Ok(-lit::<S>(0.5) * (r * engine::ln_2pi::<S>() + n * logdet_g + quad))
}

/// Extended log-likelihood: conditional part plus `log f(u)`.
pub fn extended_loglik<S: Scalar>(
    data: &ClusteredDataset<S>,
    spec: &ModelSpec,
    theta: &VarianceParams<S>,
    beta: &DVector<S>,
    u: &DVector<S>,
) -> Result<S> {
    Ok(conditional_loglik(data, spec, theta, beta, u)? + random_effect_loglik(data, theta, u)?)
}

/// Solves the mixed-model equations
/// `[X'R^-1X  X'R^-1Z; Z'R^-1X  Z'R^-1Z + G^-1] (beta, u) = (X'R^-1y, Z'R^-1y)`
/// by eliminating the cluster blocks of `u`.
pub fn solve_henderson<S: Scalar>(
    data: &ClusteredDataset<S>,
    spec: &ModelSpec,
    theta: &VarianceParams<S>,
) -> Result<(DVector<S>, DVector<S>)> {
    let d = ModelDesign::new(data, spec)?;
    let s = theta.r_scale();
    if !(s > S::zero()) {
        return Err(LmmError::Singular("R".into()));
    }
    let q = data.q();
    let p = d.p();
    let (ginv, _) = engine::spd_inverse(&theta.g(), "G")?;
    let sinv = S::one() / s;
    let mut lhs = DMatrix::<S>::zeros(p, p);
    let mut rhs = DVector::<S>::zeros(p);
    let mut blocks = Vec::with_capacity(d.n());
    let st = data.stats();
    for i in 0..d.n() {
        let dii = &st[i].ztz * sinv + &ginv;
        let chol = dii.cholesky().ok_or(LmmError::SingularCluster { cluster: i })?;
        let xz = &d.xtz[i] * sinv;
        let dinv_zx = chol.solve(&xz.transpose());
        let zy = &st[i].zty * sinv;
        let dinv_zy = chol.solve(&zy);
        lhs += &d.xtx[i] * sinv - &xz * &dinv_zx;
        rhs += st[i].xty.select_rows(&d.idx) * sinv - &xz * &dinv_zy;
        blocks.push((dinv_zx, dinv_zy));
    }
    let chol = lhs
        .clone()
        .cholesky()
        .ok_or_else(|| LmmError::Singular("mixed-model coefficient matrix".into()))?;
    let beta = chol.solve(&rhs);
    let mut u = DVector::zeros(d.n() * q);
    for (i, (dzx, dzy)) in blocks.iter().enumerate() {
        u.rows_mut(i * q, q).copy_from(&(dzy - dzx * &beta));
    }
    Ok((beta, u))
}

/// Effective degrees of freedom `tr(H)` of the fitted values `X beta~ + Z u~`.
pub fn effective_dof<S: Scalar>(data: &ClusteredDataset<S>, spec: &ModelSpec, theta: &VarianceParams<S>) -> Result<S> {
    let d = ModelDesign::new(data, spec)?;
    let vs = VState::new(data, theta)?;
    let g = engine::gls(&d, &vs, &Response::observed(&d))?;
    Ok(engine::dof(&d, &vs, &g))
}

/// GLS estimate `(X'V^-1X)^-1 X'V^-1 y` on the model columns.
pub fn gls_beta<S: Scalar>(data: &ClusteredDataset<S>, spec: &ModelSpec, theta: &VarianceParams<S>) -> Result<DVector<S>> {
    let d = ModelDesign::new(data, spec)?;
    let vs = VState::new(data, theta)?;
    Ok(engine::gls(&d, &vs, &Response::observed(&d))?.beta)
}

pub use mse::MseEvaluator;

pub(crate) fn optimize_design<S: Scalar>(
    d: &ModelDesign<'_, S>,
    resp: &Response<S>,
    st: &crate::variance::VarianceStructure<S>,
    opts: &FitOptions,
    start: DVector<S>,
) -> Result<DVector<S>> {
    fit::optimize(d, resp, st, opts, start).map(|o| o.theta)
}
