use super::engine::{self, Gls, ModelDesign, Response, VState};
use crate::dataset::{ClusteredDataset, ModelSpec};
use crate::error::{LmmError, Result};
use crate::scalar::{lit, Scalar};
use crate::variance::VarianceParams;
use nalgebra::DMatrix;

/// `K = C'R^{-1}C + G^+` with `C = [X Z]`, and the blocks of `K^{-1}`.
///
/// The inverse blocks are assembled from `V^{-1}` and `G` only, so they stay
/// defined when `G` is singular.
#[derive(Debug, Clone)]
pub struct KBlocks<S: Scalar> {
    pub k: DMatrix<S>,
    pub kinv11: DMatrix<S>,
    pub kinv12: DMatrix<S>,
    pub kinv22: DMatrix<S>,
}

impl<S: Scalar> KBlocks<S> {
    pub fn p(&self) -> usize {
        self.kinv11.nrows()
    }
    pub fn r(&self) -> usize {
        self.kinv22.nrows()
    }
    pub fn kinv21(&self) -> DMatrix<S> {
        self.kinv12.transpose()
    }
    /// Dense `K^{-1}`.
    pub fn kinv(&self) -> DMatrix<S> {
        let (p, r) = (self.p(), self.r());
        let mut out = DMatrix::zeros(p + r, p + r);
        out.view_mut((0, 0), (p, p)).copy_from(&self.kinv11);
        out.view_mut((0, p), (p, r)).copy_from(&self.kinv12);
        out.view_mut((p, 0), (r, p)).copy_from(&self.kinv12.transpose());
        out.view_mut((p, p), (r, r)).copy_from(&self.kinv22);
        out
    }
}

pub fn build_k<S: Scalar>(data: &ClusteredDataset<S>, spec: &ModelSpec, theta: &VarianceParams<S>) -> Result<KBlocks<S>> {
    let d = ModelDesign::new(data, spec)?;
    let vs = VState::new(data, theta)?;
    let g = engine::gls(&d, &vs, &Response::observed(&d))?;
    k_blocks(&d, &vs, &g)
}

pub(crate) fn k_blocks<S: Scalar>(d: &ModelDesign<'_, S>, vs: &VState<S>, gls: &Gls<S>) -> Result<KBlocks<S>> {
    let p = d.p();
    let q = vs.g.nrows();
    let n = d.n();
    let r = n * q;
    let sinv = S::one() / vs.s;
    let gplus = if q == 0 {
        DMatrix::zeros(0, 0)
    } else {
        match vs.g.clone().cholesky() {
            Some(c) => c.inverse(),
            None => vs
                .g
                .clone()
                .pseudo_inverse(lit(1e-12))
                .map_err(|e| LmmError::Singular(format!("G pseudo-inverse: {e}")))?,
        }
    };
    let mut k = DMatrix::zeros(p + r, p + r);
    let mut xvzg = DMatrix::zeros(p, r);
    let mut f = DMatrix::zeros(r, r);
    for i in 0..n {
        let ztz = d.ztz(i);
        let xx = &d.xtx[i] * sinv;
        let mut top = k.view_mut((0, 0), (p, p));
        top += xx;
        k.view_mut((0, p + i * q), (p, q)).copy_from(&(&d.xtz[i] * sinv));
        k.view_mut((p + i * q, 0), (q, p)).copy_from(&(d.xtz[i].transpose() * sinv));
        k.view_mut((p + i * q, p + i * q), (q, q)).copy_from(&(ztz * sinv + &gplus));
        let fi = vs.vinv[i].xz(&d.xtz[i], ztz);
        xvzg.view_mut((0, i * q), (p, q)).copy_from(&(&fi * &vs.g));
        let gzvzg = &vs.g * vs.vinv[i].zz(ztz) * &vs.g;
        f.view_mut((i * q, i * q), (q, q)).copy_from(&(&vs.g - gzvzg));
    }
    let kinv12 = -(&gls.a_inv * &xvzg);
    let mut kinv22 = f + xvzg.transpose() * &gls.a_inv * &xvzg;
    kinv22 = (&kinv22 + kinv22.transpose()) * lit::<S>(0.5);
    Ok(KBlocks { k, kinv11: gls.a_inv.clone(), kinv12, kinv22 })
}
