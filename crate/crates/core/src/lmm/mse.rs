use super::engine::{self, Gls, ModelDesign, Response, VState};
use super::fit::FittedLmm;
use crate::dataset::{ClusteredDataset, ModelSpec};
use crate::error::{LmmError, Result};
use crate::scalar::{lit, Scalar};
use crate::variance::VarianceParams;
use nalgebra::{DMatrix, DVector};

/// `mu_i = k' beta + m' u_i`.
#[derive(Debug, Clone)]
pub struct MixedTarget<S: Scalar> {
    /// Length equal to the number of columns of `X` (all columns).
    pub k: DVector<S>,
    /// Length `q`.
    pub m: DVector<S>,
    /// 0-based cluster index.
    pub cluster: usize,
}

impl<S: Scalar> MixedTarget<S> {
    pub fn new(k: DVector<S>, m: DVector<S>, cluster: usize) -> Self {
        MixedTarget { k, m, cluster }
    }

    /// Regression-synthetic target (`m = 0`).
    pub fn synthetic(k: DVector<S>, q: usize, cluster: usize) -> Self {
        MixedTarget { k, m: DVector::zeros(q), cluster }
    }

    /// `c = (k_M, 0, .., m, .., 0)` on the model columns and all random effects.
    pub fn c_vector(&self, spec: &ModelSpec, n: usize) -> DVector<S> {
        let idx = spec.indices();
        let q = self.m.len();
        let mut c = DVector::zeros(idx.len() + n * q);
        for (j, &col) in idx.iter().enumerate() {
            c[j] = self.k[col];
        }
        c.rows_mut(idx.len() + self.cluster * q, q).copy_from(&self.m);
        c
    }

    fn check<T: Scalar>(&self, data: &ClusteredDataset<T>) -> Result<()> {
        if self.cluster >= data.n() {
            return Err(LmmError::InvalidArgument(format!("cluster {} out of range", self.cluster)));
        }
        if self.k.len() != data.p() || self.m.len() != data.q() {
            return Err(LmmError::Dimension("target vectors do not match the design".into()));
        }
        Ok(())
    }
}

/// EBLUP `k' beta_hat + m' u~_i`.
pub fn predict_mixed<S: Scalar>(fit: &FittedLmm<S>, target: &MixedTarget<S>) -> Result<S> {
    let q = target.m.len();
    if target.k.len() != fit.beta_hat.len() || (target.cluster + 1) * q > fit.u_tilde.len() {
        return Err(LmmError::Dimension("target does not match the fit".into()));
    }
    Ok(target.k.dot(&fit.beta_hat) + target.m.dot(&fit.u_tilde.rows(target.cluster * q, q)))
}

/// Precomputed state for MSE evaluation of many targets under one fit.
pub struct MseEvaluator<'a, S: Scalar> {
    d: ModelDesign<'a, S>,
    vs: VState<S>,
    g: Gls<S>,
    va: DMatrix<S>,
}

impl<'a, S: Scalar> MseEvaluator<'a, S> {
    pub fn new(data: &'a ClusteredDataset<S>, fit: &FittedLmm<S>) -> Result<Self> {
        let d = ModelDesign::new(data, &fit.spec)?;
        let vs = VState::new(data, &fit.theta_hat)?;
        let g = engine::gls(&d, &vs, &Response::observed(&d))?;
        let va = engine::spd_inverse(&fit.theta_info, "information of theta")
            .map_err(|_| LmmError::Singular("asymptotic covariance of theta is not positive definite".into()))?
            .0;
        Ok(MseEvaluator { d, vs, g, va })
    }

    /// `(g1, g2)`.
    pub fn first_order(&self, t: &MixedTarget<S>) -> Result<(S, S)> {
        t.check(self.d.data)?;
        let i = t.cluster;
        let ztz = self.d.ztz(i);
        let gm = &self.vs.g * &t.m;
        let g1 = t.m.dot(&gm) - gm.dot(&(self.vs.vinv[i].zz(ztz) * &gm));
        let fi = self.vs.vinv[i].xz(&self.d.xtz[i], ztz);
        let dv = t.k.select_rows(&self.d.idx) - fi * &gm;
        let g2 = dv.dot(&(&self.g.a_inv * &dv));
        Ok((g1, g2))
    }

    /// `g3 = tr{(da'/dtheta) V_i (da'/dtheta)' V_A}`.
    pub fn g3(&self, t: &MixedTarget<S>) -> Result<S> {
        t.check(self.d.data)?;
        let e = weight_factors(&self.vs, self.d.ztz(t.cluster), t.cluster);
        let ztz = self.d.ztz(t.cluster);
        let ztvz = ztz * self.vs.s + ztz * &self.vs.g * ztz;
        let h = e.len();
        let rows: Vec<DVector<S>> = e.iter().map(|ek| ek.tr_mul(&t.m)).collect();
        let mut g3 = S::zero();
        for k in 0..h {
            for l in 0..h {
                g3 += rows[k].dot(&(&ztvz * &rows[l])) * self.va[(l, k)];
            }
        }
        Ok(g3)
    }

    pub fn second_order(&self, t: &MixedTarget<S>) -> Result<S> {
        let (g1, g2) = self.first_order(t)?;
        let g3 = self.g3(t)?;
        if g3 < -lit::<S>(1e-10) * (g1 + g2) {
            return Err(LmmError::Singular("negative g3: covariance of theta is not positive semidefinite".into()));
        }
        Ok(g1 + g2 + lit::<S>(2.0) * g3)
    }
}

/// `E_k` with `da_i'/dtheta_k = m' E_k Z_i'`.
fn weight_factors<S: Scalar>(vs: &VState<S>, ztz: &DMatrix<S>, i: usize) -> Vec<DMatrix<S>> {
    let y = vs.vinv[i].zt_left(ztz);
    vs.vk
        .iter()
        .map(|vk| {
            let wk = vs.vinv[i].mul(vk, ztz).mul(&vs.vinv[i], ztz);
            &vk.c * &y - &vs.g * wk.zt_left(ztz)
        })
        .collect()
}

/// `(g1, g2)` of the first-order MSE estimator; `g1 + g2 = c' K^{-1} c`.
pub fn mse_first_order<S: Scalar>(data: &ClusteredDataset<S>, fit: &FittedLmm<S>, target: &MixedTarget<S>) -> Result<(S, S)> {
    MseEvaluator::new(data, fit)?.first_order(target)
}

/// `g1 + g2 + 2 g3` with `V_A` the inverse expected information of `theta`.
pub fn mse_second_order<S: Scalar>(data: &ClusteredDataset<S>, fit: &FittedLmm<S>, target: &MixedTarget<S>) -> Result<S> {
    MseEvaluator::new(data, fit)?.second_order(target)
}

/// `a_i = V_i^{-1} Z_i G m`, the weights of `y_i - X_i beta` in `m' u~_i`.
pub fn mixed_weights<S: Scalar>(data: &ClusteredDataset<S>, theta: &VarianceParams<S>, cluster: usize, m: &DVector<S>) -> Result<DVector<S>> {
    if cluster >= data.n() {
        return Err(LmmError::InvalidArgument("cluster out of range".into()));
    }
    let vs = VState::new(data, theta)?;
    let ztz = &data.stats()[cluster].ztz;
    let y = vs.vinv[cluster].zt_left(ztz);
    let z = &data.clusters()[cluster].z;
    Ok(z * ((&vs.g * y).transpose() * m))
}

/// Jacobian of `a_i` in `theta`: row `k` holds `da_i'/dtheta_k`.
pub fn mixed_weight_jacobian<S: Scalar>(data: &ClusteredDataset<S>, theta: &VarianceParams<S>, cluster: usize, m: &DVector<S>) -> Result<DMatrix<S>> {
    if cluster >= data.n() {
        return Err(LmmError::InvalidArgument("cluster out of range".into()));
    }
    let vs = VState::new(data, theta)?;
    let ztz = &data.stats()[cluster].ztz;
    let z = &data.clusters()[cluster].z;
    let e = weight_factors(&vs, ztz, cluster);
    let mut out = DMatrix::zeros(e.len(), z.nrows());
    for (k, ek) in e.iter().enumerate() {
        out.row_mut(k).copy_from(&(z * ek.tr_mul(m)).transpose());
    }
    Ok(out)
}
