//! Conditional AIC and model selection.

use crate::dataset::{ClusteredDataset, ModelSpec};
use crate::error::{LmmError, Result};
use crate::lmm::engine::{self, Gls, Method, ModelDesign, Response, ScoreInfo, VState, ZElem};
use crate::lmm::{fit_model, FitOptions, FittedLmm};
use crate::rng::stream_rng;
use crate::scalar::{lit, to_f64, Scalar};
use crate::variance::{VarianceParams, VarianceStructure};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// How the variance-estimation penalty `b` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BiasMethod {
    /// `b = 0` (variance parameters treated as known).
    Zero,
    /// Closed-form expectations from the expected information.
    Analytic,
    /// Parametric bootstrap at `theta_hat` with finite differences in `y`.
    MonteCarlo { reps: usize, seed: u64 },
}

impl Default for BiasMethod {
    fn default() -> Self {
        BiasMethod::MonteCarlo { reps: 200, seed: 0x00C0_FFEE }
    }
}

/// Per-cluster pieces shared by both estimators of `b`.
struct BiasParts<S: Scalar> {
    /// `N_j = -V_j V^{-1} R + R_j - R V^{-1} V_j` per cluster and component.
    n_elems: Vec<Vec<ZElem<S>>>,
    /// `tr{R_j (R^{-1} - V^{-1})}`.
    c2: DVector<S>,
    /// `tr[R_j {(R^{-1})_k - (V^{-1})_k}]`.
    c3: DMatrix<S>,
    iinv: DMatrix<S>,
}

fn bias_parts<S: Scalar>(d: &ModelDesign<'_, S>, vp: &VarianceParams<S>, vs: &VState<S>, si: &ScoreInfo<S>) -> Result<BiasParts<S>> {
    let h = vp.h();
    let s = vs.s;
    let r = &vp.structure.r_slopes;
    let iinv = engine::spd_inverse(&si.info, "information of theta")?.0;
    let mut n_elems = Vec::with_capacity(d.n());
    let mut tr_vinv = S::zero();
    let mut tr_w = vec![S::zero(); h];
    let m = lit::<S>(d.data.m() as f64);
    for i in 0..d.n() {
        let ztz = d.ztz(i);
        let mi = d.m_i(i);
        let vinv = &vs.vinv[i];
        tr_vinv += vinv.trace(mi, ztz);
        let mut row = Vec::with_capacity(h);
        for j in 0..h {
            let vj = &vs.vk[j];
            let a = vj.mul(vinv, ztz).add(&vinv.mul(vj, ztz)).scale(-s);
            let nj = a.add(&ZElem::new(r[j], DMatrix::zeros(ztz.nrows(), ztz.nrows())));
            row.push(nj);
            let w = vinv.mul(vj, ztz).mul(vinv, ztz);
            tr_w[j] += w.trace(mi, ztz);
        }
        n_elems.push(row);
    }
    let c2 = DVector::from_iterator(h, (0..h).map(|j| r[j] * (m / s - tr_vinv)));
    let mut c3 = DMatrix::zeros(h, h);
    for j in 0..h {
        for k in 0..h {
            c3[(j, k)] = r[j] * (-r[k] * m / (s * s) + tr_w[k]);
        }
    }
    Ok(BiasParts { n_elems, c2, c3, iinv })
}

/// `tr(N_j P V_k P)` for all `(j, k)`, expanding `P = V^{-1} - V^{-1} X A^{-1} X' V^{-1}`.
fn tr_npvp<S: Scalar>(d: &ModelDesign<'_, S>, vs: &VState<S>, g: &Gls<S>, parts: &BiasParts<S>) -> DMatrix<S> {
    let h = vs.vk.len();
    let p = d.p();
    let mut direct = DMatrix::<S>::zeros(h, h);
    let mut xwnx = vec![DMatrix::<S>::zeros(p, p); h * h];
    let mut xnx = vec![DMatrix::<S>::zeros(p, p); h];
    let mut tk = vec![DMatrix::<S>::zeros(p, p); h];
    for i in 0..d.n() {
        let ztz = d.ztz(i);
        let mi = d.m_i(i);
        let vinv = &vs.vinv[i];
        let w: Vec<ZElem<S>> = vs.vk.iter().map(|vk| vinv.mul(vk, ztz).mul(vinv, ztz)).collect();
        for k in 0..h {
            tk[k] += w[k].xx(&d.xtx[i], &d.xtz[i]);
        }
        for j in 0..h {
            let nj = &parts.n_elems[i][j];
            let vnv = vinv.mul(nj, ztz).mul(vinv, ztz);
            xnx[j] += vnv.xx(&d.xtx[i], &d.xtz[i]);
            for k in 0..h {
                direct[(j, k)] += nj.mul(&w[k], ztz).trace(mi, ztz);
                let e = w[k].mul(nj, ztz).mul(vinv, ztz);
                xwnx[j * h + k] += e.xx(&d.xtx[i], &d.xtz[i]);
            }
        }
    }
    let mut out = DMatrix::zeros(h, h);
    for j in 0..h {
        for k in 0..h {
            out[(j, k)] = direct[(j, k)] - lit::<S>(2.0) * (&g.a_inv * &xwnx[j * h + k]).trace()
                + (&g.a_inv * &tk[k] * &g.a_inv * &xnx[j]).trace();
        }
    }
    out
}

fn combine<S: Scalar>(parts: &BiasParts<S>, hess_tr: &DVector<S>, e2: &DVector<S>, e11: &DMatrix<S>) -> S {
    let h = hess_tr.len();
    let mut b = -lit::<S>(0.5) * hess_tr.sum();
    for j in 0..h {
        b -= parts.c2[j] * e2[j];
        for k in 0..h {
            b -= parts.c3[(j, k)] * e11[(j, k)];
        }
    }
    b
}

pub(crate) fn bias_correction_internal<S: Scalar>(
    d: &ModelDesign<'_, S>,
    resp: &Response<S>,
    vp: &VarianceParams<S>,
    vs: &VState<S>,
    g: &Gls<S>,
    si: &ScoreInfo<S>,
    opts: &FitOptions,
) -> Result<S> {
    match opts.bias {
        BiasMethod::Zero => Ok(S::zero()),
        BiasMethod::Analytic => {
            let parts = bias_parts(d, vp, vs, si)?;
            let t = tr_npvp(d, vs, g, &parts);
            let h = vp.h();
            // E(grad grad' theta*_j) = sum_k (I^-1)_{jk} P V_k P
            let hess_tr = DVector::from_iterator(h, (0..h).map(|j| (0..h).fold(S::zero(), |a, k| a + parts.iinv[(j, k)] * t[(j, k)])));
            let e2 = match opts.method {
                Method::Reml => DVector::zeros(h),
                Method::Ml => &parts.iinv * &si.h * (-lit::<S>(0.5)),
            };
            Ok(combine(&parts, &hess_tr, &e2, &parts.iinv))
        }
        BiasMethod::MonteCarlo { reps, seed } => bias_monte_carlo(d, resp, vp, vs, g, si, opts, reps, seed),
    }
}

/// First-order term `theta* = I^{-1} s(y; theta_hat)` of `theta_hat(y) - theta`.
fn theta_star<S: Scalar>(d: &ModelDesign<'_, S>, vs: &VState<S>, iinv: &DMatrix<S>, method: Method, ys: &[DVector<S>]) -> Result<DVector<S>> {
    let resp = Response::from_ys(d, ys);
    let g = engine::gls(d, vs, &resp)?;
    let si = engine::score_info(d, vs, &g, &resp, method, false);
    Ok(iinv * si.score)
}

#[allow(clippy::too_many_arguments)]
fn bias_monte_carlo<S: Scalar>(
    d: &ModelDesign<'_, S>,
    _resp: &Response<S>,
    vp: &VarianceParams<S>,
    vs: &VState<S>,
    g: &Gls<S>,
    si: &ScoreInfo<S>,
    opts: &FitOptions,
    reps: usize,
    seed: u64,
) -> Result<S> {
    if reps == 0 {
        return Err(LmmError::InvalidArgument("bootstrap needs at least one replicate".into()));
    }
    let h = vp.h();
    let parts = bias_parts(d, vp, vs, si)?;
    let cl = d.data.clusters();
    let q = vs.g.nrows();
    let gsqrt = engine::sym_pow(&vs.g, false, "G")?;
    let sd_e = vs.s.sqrt();
    let all_y: Vec<f64> = cl.iter().flat_map(|c| c.y.iter().map(|v| to_f64(*v))).collect();
    let mean = all_y.iter().sum::<f64>() / all_y.len() as f64;
    let sd_y = (all_y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (all_y.len().max(2) - 1) as f64).sqrt();
    let step = lit::<S>(1e-4 * if sd_y > 0.0 { sd_y } else { 1.0 });
    let inner = FitOptions { bias: BiasMethod::Zero, with_k: false, start: None, ..opts.clone() };
    let mut hess = DVector::<S>::zeros(h);
    let mut e2 = DVector::<S>::zeros(h);
    let mut e11 = DMatrix::<S>::zeros(h, h);
    let mut failed = 0usize;
    let mut ok = 0usize;
    for rep in 0..reps {
        let mut rng = stream_rng(seed, rep as u64);
        let ys: Vec<DVector<S>> = cl
            .iter()
            .map(|c| {
                let xb = c.x.select_columns(&d.idx) * &g.beta;
                let z = DVector::from_iterator(q, (0..q).map(|_| lit::<S>(rng.sample::<f64, _>(StandardNormal))));
                let u = &gsqrt * z;
                let e = DVector::from_iterator(c.y.len(), (0..c.y.len()).map(|_| lit::<S>(rng.sample::<f64, _>(StandardNormal)) * sd_e));
                xb + &c.z * u + e
            })
            .collect();
        let ts = theta_star(d, vs, &parts.iinv, opts.method, &ys)?;
        e11 += &ts * ts.transpose();
        // Hutchinson probe with polarization: v'N H v = (a'Ha - b'Hb)/4
        let v: Vec<DVector<S>> = ys
            .iter()
            .map(|y| DVector::from_iterator(y.len(), (0..y.len()).map(|_| if rng.random::<bool>() { S::one() } else { -S::one() })))
            .collect();
        let shifted = |dir: &[DVector<S>], sgn: S| -> Vec<DVector<S>> {
            ys.iter().zip(dir).map(|(y, a)| y + a * (step * sgn)).collect()
        };
        for j in 0..h {
            let nv: Vec<DVector<S>> = v
                .iter()
                .enumerate()
                .map(|(i, vi)| {
                    let e = &parts.n_elems[i][j];
                    let z = &cl[i].z;
                    vi * e.alpha + z * (&e.c * z.tr_mul(vi))
                })
                .collect();
            let a: Vec<DVector<S>> = nv.iter().zip(&v).map(|(x, vi)| x + vi).collect();
            let b: Vec<DVector<S>> = nv.iter().zip(&v).map(|(x, vi)| x - vi).collect();
            let qa = (theta_star(d, vs, &parts.iinv, opts.method, &shifted(&a, S::one()))?[j]
                - ts[j] * lit::<S>(2.0)
                + theta_star(d, vs, &parts.iinv, opts.method, &shifted(&a, -S::one()))?[j])
                / (step * step);
            let qb = (theta_star(d, vs, &parts.iinv, opts.method, &shifted(&b, S::one()))?[j]
                - ts[j] * lit::<S>(2.0)
                + theta_star(d, vs, &parts.iinv, opts.method, &shifted(&b, -S::one()))?[j])
                / (step * step);
            hess[j] += (qa - qb) * lit::<S>(0.25);
        }
        let resp_star = Response::from_ys(d, &ys);
        match crate::lmm::optimize_design(d, &resp_star, &vp.structure, &inner, vp.theta.clone()) {
            Ok(th) => {
                e2 += th - &vp.theta - &ts;
                ok += 1;
            }
            Err(_) => failed += 1,
        }
    }
    if failed as f64 > 0.05 * reps as f64 {
        return Err(LmmError::BiasCorrection { failed, total: reps });
    }
    let r = lit::<S>(reps as f64);
    hess /= r;
    e11 /= r;
    e2 /= lit::<S>(ok.max(1) as f64);
    Ok(combine(&parts, &hess, &e2, &e11))
}

/// `b(theta_hat)` for model `spec` at the given variance parameters.
pub fn bias_correction_b<S: Scalar>(
    data: &ClusteredDataset<S>,
    spec: &ModelSpec,
    theta_hat: &VarianceParams<S>,
    method: Method,
    bias: BiasMethod,
) -> Result<S> {
    let d = ModelDesign::new(data, spec)?;
    let resp = Response::observed(&d);
    let vs = VState::new(data, theta_hat)?;
    let g = engine::gls(&d, &vs, &resp)?;
    let si = engine::score_info(&d, &vs, &g, &resp, method, true);
    let opts = FitOptions { method, bias, ..Default::default() };
    bias_correction_internal(&d, &resp, theta_hat, &vs, &g, &si, &opts)
}

/// `cAIC = -2 l^c(beta_hat, u~) + 2 rho + 2 b`.
pub fn caic<S: Scalar>(fit: &FittedLmm<S>) -> S {
    -lit::<S>(2.0) * fit.loglik_conditional + lit::<S>(2.0) * (fit.rho_hat + fit.b_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateStructure {
    /// Each model adds exactly one covariate to its predecessor.
    Nested,
    General,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSet {
    pub specs: Vec<ModelSpec>,
    pub structure: CandidateStructure,
    pub a: usize,
}

impl CandidateSet {
    pub fn new(specs: Vec<ModelSpec>, structure: CandidateStructure, a: usize) -> Result<Self> {
        if specs.is_empty() {
            return Err(LmmError::InvalidArgument("empty candidate set".into()));
        }
        let p = specs[0].p();
        for (j, s) in specs.iter().enumerate() {
            if s.p() != p {
                return Err(LmmError::Dimension("candidate masks differ in length".into()));
            }
            if s.included.iter().take(a).any(|&b| !b) {
                return Err(LmmError::InvalidArgument(format!("model {} drops a forced covariate", s.label)));
            }
            if specs[..j].iter().any(|o| o.label == s.label) {
                return Err(LmmError::InvalidArgument(format!("duplicate label {}", s.label)));
            }
            if structure == CandidateStructure::Nested && j > 0 {
                let prev = &specs[j - 1];
                if !(prev.is_subset_of(s) && s.size() == prev.size() + 1) {
                    return Err(LmmError::InvalidArgument(format!(
                        "{} does not extend {} by one covariate",
                        s.label, prev.label
                    )));
                }
            }
        }
        Ok(CandidateSet { specs, structure, a })
    }

    /// Nested chain: forced block, then covariates `a+1..p` added one at a time.
    pub fn nested_chain(p: usize, a: usize) -> Result<Self> {
        let specs = (a..=p)
            .map(|j| ModelSpec::from_indices(p, &(0..j).collect::<Vec<_>>(), a))
            .collect::<Result<Vec<_>>>()?;
        Self::new(specs, CandidateStructure::Nested, a)
    }

    /// All subsets of the selectable covariates, ordered by size then lexicographically.
    pub fn all_subsets(p: usize, a: usize) -> Result<Self> {
        let k = p - a;
        let mut masks: Vec<Vec<bool>> = (0..(1usize << k))
            .map(|bits| (0..p).map(|c| c < a || bits >> (c - a) & 1 == 1).collect())
            .collect();
        masks.sort_by(|x, y| {
            let sx = x.iter().filter(|&&b| b).count();
            let sy = y.iter().filter(|&&b| b).count();
            sx.cmp(&sy).then_with(|| {
                let ix: Vec<usize> = (0..p).filter(|&c| x[c]).collect();
                let iy: Vec<usize> = (0..p).filter(|&c| y[c]).collect();
                ix.cmp(&iy)
            })
        });
        let specs = masks
            .into_iter()
            .map(|m| {
                let label = crate::dataset::label_for(&m);
                ModelSpec::new(m, a, label)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(specs, CandidateStructure::General, a)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, spec: &ModelSpec) -> Option<usize> {
        self.specs.iter().position(|s| s.included == spec.included)
    }
}

#[derive(Debug, Clone)]
pub struct SelectionResult<S: Scalar> {
    pub selected: usize,
    pub caic: Vec<S>,
    pub rho_hat: Vec<S>,
    pub b_hat: Vec<S>,
    /// `trace[i][j] = cAIC_i - cAIC_j`.
    pub trace: Vec<Vec<S>>,
    pub fits: Vec<FittedLmm<S>>,
}

impl<S: Scalar> SelectionResult<S> {
    pub fn selected_fit(&self) -> &FittedLmm<S> {
        &self.fits[self.selected]
    }
}

/// Index of the minimum; exact ties go to the smaller model, then the earlier entry.
pub fn argmin_with_ties<S: Scalar>(values: &[S], sizes: &[usize]) -> usize {
    let mut best = 0;
    for j in 1..values.len() {
        let better = values[j] < values[best] || (values[j] == values[best] && sizes[j] < sizes[best]);
        if better {
            best = j;
        }
    }
    best
}

/// Fits every candidate and returns the cAIC minimizer.
pub fn select_model<S: Scalar>(
    data: &ClusteredDataset<S>,
    candidates: &CandidateSet,
    structure: &VarianceStructure<S>,
    opts: &FitOptions,
) -> Result<SelectionResult<S>> {
    let fits = candidates
        .specs
        .iter()
        .map(|s| {
            fit_model(data, s, structure, opts).map_err(|e| LmmError::Model { label: s.label.clone(), source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(selection_from_fits(fits))
}

pub fn selection_from_fits<S: Scalar>(fits: Vec<FittedLmm<S>>) -> SelectionResult<S> {
    let caic: Vec<S> = fits.iter().map(|f| f.caic).collect();
    let sizes: Vec<usize> = fits.iter().map(|f| f.spec.size()).collect();
    let selected = argmin_with_ties(&caic, &sizes);
    let trace = caic.iter().map(|&a| caic.iter().map(|&b| a - b).collect()).collect();
    SelectionResult {
        selected,
        rho_hat: fits.iter().map(|f| f.rho_hat).collect(),
        b_hat: fits.iter().map(|f| f.b_hat).collect(),
        caic,
        trace,
        fits,
    }
}

/// Frequency with which the selected model misses a column of `true_model`.
///
/// `generate(rep)` must return the dataset of replicate `rep`.
pub fn underselection_rate<S, F>(
    generate: F,
    candidates: &CandidateSet,
    true_model: &ModelSpec,
    structure: &VarianceStructure<S>,
    opts: &FitOptions,
    reps: usize,
) -> Result<f64>
where
    S: Scalar,
    F: Fn(u64) -> Result<ClusteredDataset<S>> + Sync,
{
    if reps == 0 {
        return Err(LmmError::InvalidArgument("reps must be positive".into()));
    }
    let under: Vec<bool> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let data = generate(rep)?;
            let sel = select_model(&data, candidates, structure, opts)?;
            Ok(!true_model.is_subset_of(&candidates.specs[sel.selected]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(under.iter().filter(|&&u| u).count() as f64 / reps as f64)
}
