use super::engine::{self, Gls, Method, ModelDesign, Response, ScoreInfo, VState};
use super::kmat::{k_blocks, KBlocks};
use crate::caic::{bias_correction_internal, BiasMethod};
use crate::dataset::{ClusteredDataset, ModelSpec};
use crate::error::{LmmError, Result};
use crate::scalar::{abs, lit, to_f64, Scalar};
use crate::variance::{VarianceParams, VarianceStructure};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub method: Method,
    pub max_iter: usize,
    /// Relative change of the objective between iterations.
    pub rel_tol: f64,
    /// Gradient norm in `theta`, relative to `1 + |objective|`.
    pub grad_tol: f64,
    pub bias: BiasMethod,
    /// Populate `FittedLmm::k` (dense, `(p + nq)^2` entries).
    pub with_k: bool,
    pub start: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            method: Method::Reml,
            max_iter: 200,
            rel_tol: 1e-10,
            grad_tol: 1e-6,
            bias: BiasMethod::default(),
            with_k: false,
            start: None,
        }
    }
}

impl FitOptions {
    pub fn ml() -> Self {
        FitOptions { method: Method::Ml, ..Default::default() }
    }
    pub fn with_bias(mut self, bias: BiasMethod) -> Self {
        self.bias = bias;
        self
    }
    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }
}

/// A fitted candidate model.
#[derive(Debug, Clone)]
pub struct FittedLmm<S: Scalar> {
    pub spec: ModelSpec,
    pub method: Method,
    /// GLS estimate padded with zeros to all columns.
    pub beta_hat: DVector<S>,
    /// GLS estimate on the model columns.
    pub beta_model: DVector<S>,
    pub theta_hat: VarianceParams<S>,
    pub u_tilde: DVector<S>,
    pub loglik_marginal: S,
    /// `log f(y | u~)` at `(beta_hat, u_tilde)`.
    pub loglik_conditional: S,
    /// Twice the negative profile (restricted) log-likelihood at `theta_hat`.
    pub objective: S,
    pub rho_hat: S,
    pub b_hat: S,
    pub caic: S,
    /// `X_M' V^-1 X_M` (not divided by the cluster count).
    pub info_marginal: DMatrix<S>,
    /// `X_M' R^-1 X_M` (not divided by the cluster count).
    pub hessian_conditional: DMatrix<S>,
    /// Expected information of `theta` for the fitting method.
    pub theta_info: DMatrix<S>,
    pub k: Option<KBlocks<S>>,
    pub boundary: bool,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl<S: Scalar> FittedLmm<S> {
    pub fn n_clusters(&self) -> usize {
        self.u_tilde.len() / self.theta_hat.structure.q().max(1)
    }
    /// `(X_M' V^-1 X_M)^{-1}`.
    pub fn beta_cov(&self) -> Result<DMatrix<S>> {
        Ok(engine::spd_inverse(&self.info_marginal, "X^t V^-1 X")?.0)
    }
}

/// Fits `spec` by (restricted) maximum likelihood.
pub fn fit_model<S: Scalar>(data: &ClusteredDataset<S>, spec: &ModelSpec, structure: &VarianceStructure<S>, opts: &FitOptions) -> Result<FittedLmm<S>> {
    let d = ModelDesign::new(data, spec)?;
    let resp = Response::observed(&d);
    let start = match &opts.start {
        Some(s) => DVector::from_iterator(s.len(), s.iter().map(|&v| lit::<S>(v))),
        None => start_values(&d, &resp, structure),
    };
    let out = optimize(&d, &resp, structure, opts, start)?;
    let vp = VarianceParams::new(out.theta, structure.clone())?;
    let mut fit = finish(&d, &resp, spec, &vp, opts)?;
    fit.boundary = out.boundary;
    fit.converged = true;
    fit.iterations = out.iterations;
    fit.grad_norm = out.grad_norm;
    Ok(fit)
}

/// All fitted quantities at a given `theta`, without optimizing.
pub fn fit_at_theta<S: Scalar>(data: &ClusteredDataset<S>, spec: &ModelSpec, theta: &VarianceParams<S>, opts: &FitOptions) -> Result<FittedLmm<S>> {
    let d = ModelDesign::new(data, spec)?;
    let resp = Response::observed(&d);
    let mut fit = finish(&d, &resp, spec, theta, opts)?;
    fit.boundary = theta.g_singular();
    Ok(fit)
}

fn finish<S: Scalar>(d: &ModelDesign<'_, S>, resp: &Response<S>, spec: &ModelSpec, vp: &VarianceParams<S>, opts: &FitOptions) -> Result<FittedLmm<S>> {
    let vs = VState::new(d.data, vp)?;
    let g = engine::gls(d, &vs, resp)?;
    let si = engine::score_info(d, &vs, &g, resp, opts.method, true);
    let u = engine::blup(d, &vs, resp, &g.beta);
    let rho = engine::dof(d, &vs, &g);
    let cond_dev = engine::cond_deviance(d, vs.s, resp, &g.beta, &u);
    let b = bias_correction_internal(d, resp, vp, &vs, &g, &si, opts)?;
    let caic = cond_dev + lit::<S>(2.0) * (rho + b);
    let m = lit::<S>(d.data.m() as f64);
    let loglik_marginal = -lit::<S>(0.5) * (m * engine::ln_2pi::<S>() + vs.logdet() + g.ytpy);
    let objective = engine::objective(d, &vs, &g, opts.method);
    let mut beta_hat = DVector::zeros(d.data.p());
    for (j, &c) in d.idx.iter().enumerate() {
        beta_hat[c] = g.beta[j];
    }
    let mut jc = DMatrix::zeros(d.p(), d.p());
    for x in &d.xtx {
        jc += x;
    }
    jc /= vs.s;
    let k = if opts.with_k { Some(k_blocks(d, &vs, &g)?) } else { None };
    Ok(FittedLmm {
        spec: spec.clone(),
        method: opts.method,
        beta_hat,
        beta_model: g.beta.clone(),
        theta_hat: vp.clone(),
        u_tilde: u,
        loglik_marginal,
        loglik_conditional: -lit::<S>(0.5) * cond_dev,
        objective,
        rho_hat: rho,
        b_hat: b,
        caic,
        info_marginal: g.a.clone(),
        hessian_conditional: jc,
        theta_info: si.info,
        k,
        boundary: vp.g_singular(),
        converged: true,
        iterations: 0,
        grad_norm: 0.0,
    })
}

pub(crate) fn start_values<S: Scalar>(d: &ModelDesign<'_, S>, resp: &Response<S>, st: &VarianceStructure<S>) -> DVector<S> {
    let p = d.p();
    let mut xtx = DMatrix::<S>::zeros(p, p);
    let mut xty = DVector::<S>::zeros(p);
    let mut yty = S::zero();
    for i in 0..d.n() {
        xtx += &d.xtx[i];
        xty += &resp.xty[i];
        yty += resp.yty[i];
    }
    let beta = xtx.cholesky().map(|c| c.solve(&xty)).unwrap_or_else(|| DVector::zeros(p));
    let dfree = (d.data.m() as f64 - p as f64).max(1.0);
    let mut s2 = (yty - beta.dot(&xty)) / lit::<S>(dfree);
    if !(s2 > S::zero()) {
        s2 = lit(1e-3);
    }
    let h = st.h();
    let n_r = (0..h).filter(|&k| !st.can_vanish(k)).count().max(1);
    let n_g = (0..h).filter(|&k| st.can_vanish(k)).count().max(1);
    let q = lit::<S>(st.q().max(1) as f64);
    DVector::from_iterator(
        h,
        (0..h).map(|k| {
            let half = s2 * lit::<S>(0.5);
            if !st.can_vanish(k) {
                half / (lit::<S>(n_r as f64) * abs(st.r_slopes[k]))
            } else {
                let tr = abs(st.g_slopes[k].trace()) / q;
                let tr = if tr > S::zero() { tr } else { S::one() };
                half / (lit::<S>(n_g as f64) * tr)
            }
        }),
    )
}

pub(crate) struct OptOutcome<S: Scalar> {
    pub theta: DVector<S>,
    pub iterations: usize,
    pub boundary: bool,
    pub grad_norm: f64,
}

struct Point<S: Scalar> {
    theta: DVector<S>,
    f: S,
    vs: VState<S>,
    g: Gls<S>,
}

fn evaluate<S: Scalar>(d: &ModelDesign<'_, S>, resp: &Response<S>, st: &VarianceStructure<S>, method: Method, theta: DVector<S>) -> Result<Point<S>> {
    let vp = VarianceParams { theta: theta.clone(), structure: st.clone() };
    vp.validate()?;
    let vs = VState::new(d.data, &vp)?;
    let g = engine::gls(d, &vs, resp)?;
    let f = engine::objective(d, &vs, &g, method);
    if !f.is_finite() {
        return Err(LmmError::Singular("objective is not finite".into()));
    }
    Ok(Point { theta, f, vs, g })
}

/// Fisher scoring on `log theta` with backtracking; components that only
/// enter `G` may be pinned at zero.
pub(crate) fn optimize<S: Scalar>(
    d: &ModelDesign<'_, S>,
    resp: &Response<S>,
    st: &VarianceStructure<S>,
    opts: &FitOptions,
    start: DVector<S>,
) -> Result<OptOutcome<S>> {
    let h = st.h();
    if start.len() != h {
        return Err(LmmError::Dimension("start vector has wrong length".into()));
    }
    let method = opts.method;
    let mut active: Vec<bool> = (0..h).map(|k| start[k] > S::zero() || !st.can_vanish(k)).collect();
    let mut restarted = vec![false; h];
    let mut cur = evaluate(d, resp, st, method, start)?;
    let mut last_rel = f64::INFINITY;
    let floor = lit::<S>(1e-8);
    for iter in 0..opts.max_iter {
        let si: ScoreInfo<S> = engine::score_info(d, &cur.vs, &cur.g, resp, method, true);
        // gradient of -2l in theta, KKT-projected at pinned components
        let mut gn = 0.0;
        for k in 0..h {
            let gk = -2.0 * to_f64(si.score[k]);
            if active[k] || gk < 0.0 {
                gn += gk * gk;
            }
        }
        let gnorm = gn.sqrt();
        // rounding in -2l limits how small the gradient can get
        let gtol = opts.grad_tol * (1.0 + to_f64(abs(cur.f)));
        if gnorm < gtol && (last_rel < opts.rel_tol || gnorm < 1e-2 * gtol) {
            // re-enter a pinned component whose gradient points inward
            let mut reopen = false;
            for k in 0..h {
                if !active[k] && -2.0 * to_f64(si.score[k]) < -gtol && !restarted[k] {
                    restarted[k] = true;
                    active[k] = true;
                    let mut th = cur.theta.clone();
                    th[k] = cur.vs.s * lit::<S>(0.1);
                    cur = evaluate(d, resp, st, method, th)?;
                    reopen = true;
                }
            }
            if !reopen {
                let boundary = (0..h).any(|k| !active[k]);
                return Ok(OptOutcome { theta: cur.theta, iterations: iter, boundary, grad_norm: gnorm });
            }
            last_rel = f64::INFINITY;
            continue;
        }
        let idx: Vec<usize> = (0..h).filter(|&k| active[k]).collect();
        let na = idx.len();
        let mut gphi = DVector::<S>::zeros(na);
        let mut iphi = DMatrix::<S>::zeros(na, na);
        for (a, &k) in idx.iter().enumerate() {
            gphi[a] = cur.theta[k] * si.score[k];
            for (b, &l) in idx.iter().enumerate() {
                iphi[(a, b)] = cur.theta[k] * cur.theta[l] * si.info[(k, l)];
            }
        }
        let mut step = match iphi.clone().cholesky() {
            Some(c) => c.solve(&gphi),
            None => DVector::from_iterator(na, (0..na).map(|a| gphi[a] / iphi[(a, a)].max(lit(1e-12)))),
        };
        let maxs = step.iter().fold(S::zero(), |m, &v| m.max(abs(v)));
        if maxs > lit(3.0) {
            step *= lit::<S>(3.0) / maxs;
        }
        let mut t = S::one();
        let mut accepted = None;
        for _ in 0..50 {
            let mut th = cur.theta.clone();
            for (a, &k) in idx.iter().enumerate() {
                th[k] = cur.theta[k] * (t * step[a]).exp();
            }
            if let Ok(pt) = evaluate(d, resp, st, method, th) {
                if pt.f <= cur.f {
                    accepted = Some(pt);
                    break;
                }
            }
            t *= lit(0.5);
        }
        match accepted {
            Some(mut pt) => {
                last_rel = to_f64(abs(cur.f - pt.f) / (S::one() + abs(pt.f)));
                // pin vanishing components that collapsed towards zero
                let mut pinned = false;
                for k in 0..h {
                    if active[k] && st.can_vanish(k) && pt.theta[k] < floor * pt.vs.s {
                        active[k] = false;
                        pinned = true;
                        pt.theta[k] = S::zero();
                    }
                }
                if pinned {
                    pt = evaluate(d, resp, st, method, pt.theta)?;
                    last_rel = f64::INFINITY;
                }
                cur = pt;
            }
            None => {
                // no decrease possible at working precision
                if gnorm < 1e-4 * (1.0 + to_f64(abs(cur.f))) {
                    let boundary = (0..h).any(|k| !active[k]);
                    return Ok(OptOutcome { theta: cur.theta, iterations: iter, boundary, grad_norm: gnorm });
                }
                return Err(LmmError::NonConvergence { iterations: iter, grad_norm: gnorm });
            }
        }
    }
    let si = engine::score_info(d, &cur.vs, &cur.g, resp, method, false);
    let gnorm = si.score.iter().map(|v| 4.0 * to_f64(*v).powi(2)).sum::<f64>().sqrt();
    Err(LmmError::NonConvergence { iterations: opts.max_iter, grad_norm: gnorm })
}
