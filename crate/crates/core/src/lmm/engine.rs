//! Cluster-blockwise evaluation of the marginal quantities.
//!
//! Every per-cluster matrix used here has the form `alpha I + Z C Z^t`, so
//! products and traces reduce to `q x q` work on cross products.

use crate::dataset::{ClusteredDataset, ModelSpec};
use crate::error::{LmmError, Result};
use crate::scalar::{lit, Scalar};
use crate::variance::{VarianceParams, VarianceStructure};
use nalgebra::{DMatrix, DVector};

/// `alpha I + Z C Z^t` for one cluster.
#[derive(Debug, Clone)]
pub(crate) struct ZElem<S: Scalar> {
    pub alpha: S,
    pub c: DMatrix<S>,
}

impl<S: Scalar> ZElem<S> {
    pub fn new(alpha: S, c: DMatrix<S>) -> Self {
        ZElem { alpha, c }
    }

    pub fn mul(&self, o: &Self, ztz: &DMatrix<S>) -> Self {
        let c = &o.c * self.alpha + &self.c * o.alpha + &self.c * ztz * &o.c;
        ZElem { alpha: self.alpha * o.alpha, c }
    }

    pub fn add(&self, o: &Self) -> Self {
        ZElem { alpha: self.alpha + o.alpha, c: &self.c + &o.c }
    }

    pub fn scale(&self, f: S) -> Self {
        ZElem { alpha: self.alpha * f, c: &self.c * f }
    }

    pub fn trace(&self, m: usize, ztz: &DMatrix<S>) -> S {
        self.alpha * lit::<S>(m as f64) + self.c.component_mul(&ztz.transpose()).sum()
    }

    /// `X^t E X`.
    pub fn xx(&self, xtx: &DMatrix<S>, xtz: &DMatrix<S>) -> DMatrix<S> {
        xtx * self.alpha + xtz * &self.c * xtz.transpose()
    }

    /// `X^t E Z`.
    pub fn xz(&self, xtz: &DMatrix<S>, ztz: &DMatrix<S>) -> DMatrix<S> {
        xtz * self.alpha + xtz * &self.c * ztz
    }

    /// `Z^t E Z`.
    pub fn zz(&self, ztz: &DMatrix<S>) -> DMatrix<S> {
        ztz * self.alpha + ztz * &self.c * ztz
    }

    /// `X^t E v`.
    pub fn xv(&self, xtv: &DVector<S>, xtz: &DMatrix<S>, ztv: &DVector<S>) -> DVector<S> {
        xtv * self.alpha + xtz * (&self.c * ztv)
    }

    /// `v^t E v`.
    pub fn vv(&self, vtv: S, ztv: &DVector<S>) -> S {
        self.alpha * vtv + ztv.dot(&(&self.c * ztv))
    }

    /// `Z^t E = (alpha I + S C) Z^t`, returned as the `q x q` left factor.
    pub fn zt_left(&self, ztz: &DMatrix<S>) -> DMatrix<S> {
        DMatrix::identity(ztz.nrows(), ztz.nrows()) * self.alpha + ztz * &self.c
    }
}

/// Design cross products restricted to the columns of one model.
#[derive(Debug, Clone)]
pub(crate) struct ModelDesign<'a, S: Scalar> {
    pub data: &'a ClusteredDataset<S>,
    pub idx: Vec<usize>,
    pub xtx: Vec<DMatrix<S>>,
    pub xtz: Vec<DMatrix<S>>,
}

impl<'a, S: Scalar> ModelDesign<'a, S> {
    pub fn new(data: &'a ClusteredDataset<S>, spec: &ModelSpec) -> Result<Self> {
        if spec.p() != data.p() {
            return Err(LmmError::Dimension(format!(
                "model mask has {} entries, dataset has {} columns",
                spec.p(),
                data.p()
            )));
        }
        let idx = spec.indices();
        let xtx = data
            .stats()
            .iter()
            .map(|s| s.xtx.select_rows(&idx).select_columns(&idx))
            .collect();
        let xtz = data.stats().iter().map(|s| s.xtz.select_rows(&idx)).collect();
        Ok(ModelDesign { data, idx, xtx, xtz })
    }

    pub fn p(&self) -> usize {
        self.idx.len()
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn ztz(&self, i: usize) -> &DMatrix<S> {
        &self.data.stats()[i].ztz
    }

    pub fn m_i(&self, i: usize) -> usize {
        self.data.stats()[i].m
    }
}

/// Response cross products for one model.
#[derive(Debug, Clone)]
pub(crate) struct Response<S: Scalar> {
    pub xty: Vec<DVector<S>>,
    pub zty: Vec<DVector<S>>,
    pub yty: Vec<S>,
}

impl<S: Scalar> Response<S> {
    pub fn observed(d: &ModelDesign<'_, S>) -> Self {
        let st = d.data.stats();
        Response {
            xty: st.iter().map(|s| s.xty.select_rows(&d.idx)).collect(),
            zty: st.iter().map(|s| s.zty.clone()).collect(),
            yty: st.iter().map(|s| s.yty).collect(),
        }
    }

    pub fn from_ys(d: &ModelDesign<'_, S>, ys: &[DVector<S>]) -> Self {
        let cl = d.data.clusters();
        let mut out = Response { xty: Vec::with_capacity(ys.len()), zty: Vec::with_capacity(ys.len()), yty: Vec::with_capacity(ys.len()) };
        for (c, y) in cl.iter().zip(ys) {
            let xty = c.x.tr_mul(y);
            out.xty.push(xty.select_rows(&d.idx));
            out.zty.push(c.z.tr_mul(y));
            out.yty.push(y.dot(y));
        }
        out
    }

    /// Cross products of `r = y - X beta`.
    pub fn residual(&self, d: &ModelDesign<'_, S>, beta: &DVector<S>) -> Response<S> {
        let mut out = self.clone();
        for i in 0..d.n() {
            let xb_x = &d.xtx[i] * beta;
            out.yty[i] = self.yty[i] - lit::<S>(2.0) * beta.dot(&self.xty[i]) + beta.dot(&xb_x);
            out.zty[i] = &self.zty[i] - d.xtz[i].tr_mul(beta);
            out.xty[i] = &self.xty[i] - xb_x;
        }
        out
    }
}

/// Per-cluster `V_i^{-1}` and `log|V_i|` at one `theta`.
#[derive(Debug, Clone)]
pub(crate) struct VState<S: Scalar> {
    pub s: S,
    pub g: DMatrix<S>,
    pub vinv: Vec<ZElem<S>>,
    pub logdet_v: Vec<S>,
    /// `V_k = r_k I + Z G_k Z^t`, identical across clusters.
    pub vk: Vec<ZElem<S>>,
}

impl<S: Scalar> VState<S> {
    pub fn new(data: &ClusteredDataset<S>, vp: &VarianceParams<S>) -> Result<Self> {
        let st = &vp.structure;
        let s = vp.r_scale();
        if !(s > S::zero()) {
            return Err(LmmError::InvalidVariance("R must be positive definite".into()));
        }
        let g = vp.g();
        let q = g.nrows();
        if q != data.q() {
            return Err(LmmError::Dimension(format!("G is {q}x{q} but Z has {} columns", data.q())));
        }
        let mut vinv = Vec::with_capacity(data.n());
        let mut logdet_v = Vec::with_capacity(data.n());
        for (i, cs) in data.stats().iter().enumerate() {
            let mf = lit::<S>(cs.m as f64);
            if q == 0 {
                vinv.push(ZElem::new(S::one() / s, DMatrix::zeros(0, 0)));
                logdet_v.push(mf * s.ln());
                continue;
            }
            // V^{-1} = (1/s)[I - Z (sI + G Z^tZ)^{-1} G Z^t]
            let t = DMatrix::identity(q, q) * s + &g * &cs.ztz;
            let lu = t.lu();
            let det = lu.determinant();
            if !(det > S::zero()) || !det.is_finite() {
                return Err(LmmError::SingularCluster { cluster: i });
            }
            let mm = lu.solve(&g).ok_or(LmmError::SingularCluster { cluster: i })?;
            let mut c = mm * (-S::one() / s);
            c = (&c + c.transpose()) * lit::<S>(0.5);
            vinv.push(ZElem::new(S::one() / s, c));
            logdet_v.push(mf * s.ln() + det.ln() - lit::<S>(q as f64) * s.ln());
        }
        let vk = vk_elems(st);
        Ok(VState { s, g, vinv, logdet_v, vk })
    }

    pub fn logdet(&self) -> S {
        self.logdet_v.iter().fold(S::zero(), |a, &b| a + b)
    }
}

pub(crate) fn vk_elems<S: Scalar>(st: &VarianceStructure<S>) -> Vec<ZElem<S>> {
    st.g_slopes
        .iter()
        .zip(&st.r_slopes)
        .map(|(gk, &rk)| ZElem::new(rk, gk.clone()))
        .collect()
}

/// Cholesky-based inverse of a symmetric positive definite matrix with a
/// condition guard (warn above 1e10, fail above 1e14).
pub(crate) fn spd_inverse<S: Scalar>(a: &DMatrix<S>, what: &str) -> Result<(DMatrix<S>, S)> {
    let n = a.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), S::zero()));
    }
    let sym = (a + a.transpose()) * lit::<S>(0.5);
    let chol = sym.cholesky().ok_or_else(|| LmmError::Singular(what.to_string()))?;
    let l = chol.l_dirty();
    let mut dmin = l[(0, 0)];
    let mut dmax = l[(0, 0)];
    let mut logdet = S::zero();
    for i in 0..n {
        let d = l[(i, i)];
        dmin = dmin.min(d);
        dmax = dmax.max(d);
        logdet += lit::<S>(2.0) * d.ln();
    }
    let cond = crate::scalar::to_f64(dmax / dmin).powi(2);
    if !cond.is_finite() || cond > 1e14 {
        return Err(LmmError::IllConditioned { what: what.to_string(), cond });
    }
    if cond > 1e10 {
        log::warn!("{what} is ill-conditioned (condition estimate {cond:.3e})");
    }
    Ok((chol.inverse(), logdet))
}

/// Symmetric (inverse) square root by eigendecomposition.
pub(crate) fn sym_pow<S: Scalar>(a: &DMatrix<S>, inverse: bool, what: &str) -> Result<DMatrix<S>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (a + a.transpose()) * lit::<S>(0.5);
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(S::zero(), |m, &v| m.max(crate::scalar::abs(v)));
    let tol = max * lit::<S>(1e-12);
    let mut d = eig.eigenvalues.clone();
    for v in d.iter_mut() {
        if inverse {
            if *v <= tol {
                return Err(LmmError::Singular(format!("{what} is not positive definite")));
            }
            *v = S::one() / v.sqrt();
        } else {
            if *v < -tol {
                return Err(LmmError::Singular(format!("{what} is not positive semidefinite")));
            }
            *v = if *v > S::zero() { v.sqrt() } else { S::zero() };
        }
    }
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&d) * q.transpose();
    out = (&out + out.transpose()) * lit::<S>(0.5);
    Ok(out)
}

/// GLS quantities for one model at one `theta`.
#[derive(Debug, Clone)]
pub(crate) struct Gls<S: Scalar> {
    pub a: DMatrix<S>,
    pub a_inv: DMatrix<S>,
    pub logdet_a: S,
    pub beta: DVector<S>,
    /// `y^t P y`.
    pub ytpy: S,
}

pub(crate) fn gls<S: Scalar>(d: &ModelDesign<'_, S>, vs: &VState<S>, resp: &Response<S>) -> Result<Gls<S>> {
    let p = d.p();
    let mut a = DMatrix::zeros(p, p);
    let mut xtvy = DVector::zeros(p);
    let mut ytvy = S::zero();
    for i in 0..d.n() {
        let e = &vs.vinv[i];
        a += e.xx(&d.xtx[i], &d.xtz[i]);
        xtvy += e.xv(&resp.xty[i], &d.xtz[i], &resp.zty[i]);
        ytvy += e.vv(resp.yty[i], &resp.zty[i]);
    }
    let (a_inv, logdet_a) = spd_inverse(&a, "X^t V^-1 X")?;
    let beta = &a_inv * &xtvy;
    let ytpy = ytvy - xtvy.dot(&beta);
    Ok(Gls { a, a_inv, logdet_a, beta, ytpy })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Method {
    Ml,
    Reml,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Twice the negative (restricted) profile log-likelihood.
pub(crate) fn objective<S: Scalar>(d: &ModelDesign<'_, S>, vs: &VState<S>, g: &Gls<S>, method: Method) -> S {
    let m = lit::<S>(d.data.m() as f64);
    let p = lit::<S>(d.p() as f64);
    match method {
        Method::Ml => m * lit::<S>(LN_2PI) + vs.logdet() + g.ytpy,
        Method::Reml => (m - p) * lit::<S>(LN_2PI) + vs.logdet() + g.logdet_a + g.ytpy,
    }
}

pub(crate) fn ln_2pi<S: Scalar>() -> S {
    lit(LN_2PI)
}

/// Score of the log-likelihood and expected information in `theta`.
#[derive(Debug, Clone)]
pub(crate) struct ScoreInfo<S: Scalar> {
    pub score: DVector<S>,
    pub info: DMatrix<S>,
    /// `tr(A^{-1} X^t V^{-1} V_k V^{-1} X)`.
    pub h: DVector<S>,
}

pub(crate) fn score_info<S: Scalar>(
    d: &ModelDesign<'_, S>,
    vs: &VState<S>,
    g: &Gls<S>,
    resp: &Response<S>,
    method: Method,
    need_info: bool,
) -> ScoreInfo<S> {
    let h = vs.vk.len();
    let p = d.p();
    let half = lit::<S>(0.5);
    let res = resp.residual(d, &g.beta);
    let mut tr_vk = vec![S::zero(); h];
    let mut quad = vec![S::zero(); h];
    let mut t_k = vec![DMatrix::<S>::zeros(p, p); h];
    let mut tr_vv = DMatrix::<S>::zeros(h, h);
    let mut t_kl = vec![DMatrix::<S>::zeros(p, p); h * h];
    for i in 0..d.n() {
        let ztz = d.ztz(i);
        let m = d.m_i(i);
        let vinv = &vs.vinv[i];
        let vkv: Vec<ZElem<S>> = vs.vk.iter().map(|vk| vinv.mul(vk, ztz)).collect();
        let wk: Vec<ZElem<S>> = vkv.iter().map(|e| e.mul(vinv, ztz)).collect();
        for k in 0..h {
            tr_vk[k] += vkv[k].trace(m, ztz);
            quad[k] += wk[k].vv(res.yty[i], &res.zty[i]);
            t_k[k] += wk[k].xx(&d.xtx[i], &d.xtz[i]);
        }
        if need_info {
            for k in 0..h {
                for l in k..h {
                    let wkvl = wk[k].mul(&vs.vk[l], ztz);
                    tr_vv[(k, l)] += wkvl.trace(m, ztz);
                    if method == Method::Reml {
                        let e = wkvl.mul(vinv, ztz);
                        t_kl[k * h + l] += e.xx(&d.xtx[i], &d.xtz[i]);
                    }
                }
            }
        }
    }
    let hvec = DVector::from_iterator(h, (0..h).map(|k| (&g.a_inv * &t_k[k]).trace()));
    let score = DVector::from_iterator(
        h,
        (0..h).map(|k| match method {
            Method::Ml => half * (quad[k] - tr_vk[k]),
            Method::Reml => half * (quad[k] - tr_vk[k] + hvec[k]),
        }),
    );
    let mut info = DMatrix::zeros(h, h);
    if need_info {
        let at: Vec<DMatrix<S>> = t_k.iter().map(|t| &g.a_inv * t).collect();
        for k in 0..h {
            for l in k..h {
                let v = match method {
                    Method::Ml => half * tr_vv[(k, l)],
                    Method::Reml => {
                        half * (tr_vv[(k, l)] - lit::<S>(2.0) * (&g.a_inv * &t_kl[k * h + l]).trace()
                            + (&at[k] * &at[l]).trace())
                    }
                };
                info[(k, l)] = v;
                info[(l, k)] = v;
            }
        }
    }
    ScoreInfo { score, info, h: hvec }
}

/// `u~_i = G Z_i^t V_i^{-1} (y_i - X_i beta)`.
pub(crate) fn blup<S: Scalar>(d: &ModelDesign<'_, S>, vs: &VState<S>, resp: &Response<S>, beta: &DVector<S>) -> DVector<S> {
    let q = vs.g.nrows();
    let res = resp.residual(d, beta);
    let mut u = DVector::zeros(d.n() * q);
    for i in 0..d.n() {
        let ztz = d.ztz(i);
        let ztvr = vs.vinv[i].zt_left(ztz) * &res.zty[i];
        u.rows_mut(i * q, q).copy_from(&(&vs.g * ztvr));
    }
    u
}

/// `tr(H)` computed without inverting `G`.
pub(crate) fn dof<S: Scalar>(d: &ModelDesign<'_, S>, vs: &VState<S>, g: &Gls<S>) -> S {
    let p = d.p();
    let mut tr_zg = S::zero();
    let mut cross = DMatrix::<S>::zeros(p, p);
    for i in 0..d.n() {
        let ztz = d.ztz(i);
        let ztvz = vs.vinv[i].zz(ztz);
        tr_zg += (&vs.g * &ztvz).trace();
        let f = vs.vinv[i].xz(&d.xtz[i], ztz);
        cross += &f * &vs.g * f.transpose();
    }
    lit::<S>(p as f64) + tr_zg - (&g.a_inv * cross).trace()
}

/// `-2 log f(y | u)` at `(beta, u)`.
pub(crate) fn cond_deviance<S: Scalar>(
    d: &ModelDesign<'_, S>,
    s: S,
    resp: &Response<S>,
    beta: &DVector<S>,
    u: &DVector<S>,
) -> S {
    let q = d.data.q();
    let two = lit::<S>(2.0);
    let mut rss = S::zero();
    for i in 0..d.n() {
        let ui = u.rows(i * q, q).into_owned();
        let ztz = d.ztz(i);
        rss += resp.yty[i] - two * beta.dot(&resp.xty[i]) - two * ui.dot(&resp.zty[i])
            + beta.dot(&(&d.xtx[i] * beta))
            + two * beta.dot(&(&d.xtz[i] * &ui))
            + ui.dot(&(ztz * &ui));
    }
    let m = lit::<S>(d.data.m() as f64);
    m * ln_2pi::<S>() + m * s.ln() + rss / s
}
