//! Post-selection and naive confidence intervals.

use crate::dataset::{ClusteredDataset, ModelSpec};
use crate::error::{LmmError, Result};
use crate::lmm::engine::{spd_inverse, sym_pow};
use crate::lmm::{predict_mixed, FittedLmm, KBlocks, MixedTarget, MseEvaluator};
use crate::region::{ConstraintSet, StackedRegion};
use crate::tmvn::{sample_posi_joint, sample_truncated, SampleBatch, SamplerConfig};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntervalMethod {
    #[serde(rename = "post-caic")]
    PostCaic,
    #[serde(rename = "naive-1")]
    Naive1,
    #[serde(rename = "naive-2")]
    Naive2,
}

impl fmt::Display for IntervalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntervalMethod::PostCaic => "post-caic",
            IntervalMethod::Naive1 => "naive-1",
            IntervalMethod::Naive2 => "naive-2",
        })
    }
}

impl std::str::FromStr for IntervalMethod {
    type Err = LmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post-caic" => Ok(IntervalMethod::PostCaic),
            "naive-1" => Ok(IntervalMethod::Naive1),
            "naive-2" => Ok(IntervalMethod::Naive2),
            _ => Err(LmmError::InvalidArgument(format!("unknown interval method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McMeta {
    pub b: usize,
    pub seed: u64,
    pub acceptance: Option<f64>,
    /// Standard error of the half-width from 10 sub-batches.
    pub quantile_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalResult {
    pub target: String,
    pub point_estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    pub method: IntervalMethod,
    pub mc: Option<McMeta>,
}

impl IntervalResult {
    fn symmetric(target: String, est: f64, half: f64, alpha: f64, method: IntervalMethod, mc: Option<McMeta>) -> Self {
        IntervalResult { target, point_estimate: est, lower: est - half, upper: est + half, alpha, method, mc }
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.length()
    }

    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(LmmError::InvalidArgument(format!("alpha = {alpha} is outside (0, 1)")))
    }
}

/// `Phi^{-1}(1 - alpha/2)`.
pub fn z_critical(alpha: f64) -> f64 {
    std::f64::consts::SQRT_2 * erfc_inv(alpha)
}

/// The `ceil(p B)`-th smallest sample (1-based), clamped to `1..=B`.
pub fn empirical_quantile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(LmmError::InvalidArgument("no samples".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(LmmError::InvalidArgument(format!("p = {p} is outside (0, 1)")));
    }
    let mut v = samples.to_vec();
    let k = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    Ok(*kth)
}

/// `c(alpha/2)`: the `(1 - alpha)` empirical quantile of `|t|`. The draws
/// are not re-centred; the limiting law is centred at zero.
pub fn symmetric_critical_value(t: &[f64], alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    let abs: Vec<f64> = t.iter().map(|v| v.abs()).collect();
    let c = empirical_quantile(&abs, 1.0 - alpha)?;
    let parts = 10usize;
    let se = if abs.len() >= parts * 10 {
        let chunk = abs.len() / parts;
        let qs: Vec<f64> = (0..parts)
            .map(|i| empirical_quantile(&abs[i * chunk..(i + 1) * chunk], 1.0 - alpha))
            .collect::<Result<_>>()?;
        let mean = qs.iter().sum::<f64>() / parts as f64;
        let var = qs.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / (parts - 1) as f64;
        (var / parts as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok((c, se))
}

/// Region-conditional draws of the selected model's standardized vector
/// `W^s`: `|M|` fixed coordinates, then any random-effect coordinates.
#[derive(Debug, Clone)]
pub struct ConditionalDraws {
    pub ws: DMatrix<f64>,
    pub seed: u64,
    pub acceptance: Option<f64>,
}

impl ConditionalDraws {
    /// From a batch on a region over all columns (nested or orthogonal
    /// families); keeps the model's columns and the free tail.
    pub fn from_full(batch: &SampleBatch, spec: &ModelSpec, free_tail: usize) -> Result<Self> {
        let d = batch.dim();
        if d != spec.p() + free_tail {
            return Err(LmmError::Dimension(format!("batch has {d} columns, expected {}", spec.p() + free_tail)));
        }
        let mut cols = spec.indices();
        cols.extend(spec.p()..d);
        Ok(ConditionalDraws { ws: batch.draws.select_columns(&cols), seed: batch.seed, acceptance: batch.acceptance_rate })
    }

    /// From a batch on `region.fixed`.
    pub fn from_stacked_fixed(batch: &SampleBatch, region: &StackedRegion) -> Self {
        let (o, l) = region.blocks[region.selected];
        ConditionalDraws { ws: batch.draws.columns(o, l).into_owned(), seed: batch.seed, acceptance: batch.acceptance_rate }
    }

    /// From a batch on `region.mixed`.
    pub fn from_stacked_mixed(batch: &SampleBatch, region: &StackedRegion) -> Self {
        let rows: Vec<DVector<f64>> =
            (0..batch.b()).map(|i| region.mixed_selected(batch.draws.row(i).transpose().as_slice())).collect();
        let ws = DMatrix::from_fn(rows.len(), rows.first().map_or(0, |r| r.len()), |i, j| rows[i][j]);
        ConditionalDraws { ws, seed: batch.seed, acceptance: batch.acceptance_rate }
    }

    pub fn b(&self) -> usize {
        self.ws.nrows()
    }

    /// Draws of `v' W^s` over the first `v.len()` coordinates.
    pub fn project(&self, v: &DVector<f64>) -> Vec<f64> {
        let n = v.len();
        (0..self.b()).map(|i| self.ws.row(i).columns(0, n).transpose().dot(v)).collect()
    }

    fn meta(&self, se: f64) -> McMeta {
        McMeta { b: self.b(), seed: self.seed, acceptance: self.acceptance, quantile_se: se }
    }
}

fn model_position(spec: &ModelSpec, j: usize) -> Result<usize> {
    spec.indices()
        .iter()
        .position(|&c| c == j)
        .ok_or_else(|| LmmError::InvalidArgument(format!("column {} is not in model {}", j + 1, spec.label)))
}

/// `(X_M' V^-1 X_M)^{-1/2}`: maps `W^s` to the scale of `beta_hat_M - beta_M`.
pub fn info_inv_sqrt(fit: &FittedLmm<f64>) -> Result<DMatrix<f64>> {
    sym_pow(&fit.info_marginal, true, "I^m(M)")
}

fn restrict_k(fit: &FittedLmm<f64>, k: &DVector<f64>) -> Result<DVector<f64>> {
    if k.len() != fit.spec.p() {
        return Err(LmmError::Dimension(format!("k has length {}, expected {}", k.len(), fit.spec.p())));
    }
    let km = k.select_rows(&fit.spec.indices());
    if km.iter().all(|&v| v == 0.0) {
        return Err(LmmError::InvalidArgument("k vanishes on the selected model".into()));
    }
    Ok(km)
}

/// Post-selection interval for `k'beta` from shared draws; `k` spans all columns.
pub fn posi_ci_linear_combo_from_draws(
    fit: &FittedLmm<f64>,
    draws: &ConditionalDraws,
    k: &DVector<f64>,
    alpha: f64,
    label: &str,
) -> Result<IntervalResult> {
    let km = restrict_k(fit, k)?;
    let v = info_inv_sqrt(fit)? * &km;
    let (c, se) = symmetric_critical_value(&draws.project(&v), alpha)?;
    let est = km.dot(&fit.beta_model);
    Ok(IntervalResult::symmetric(label.into(), est, c, alpha, IntervalMethod::PostCaic, Some(draws.meta(se))))
}

/// Post-selection interval for `beta_j` (`j` a 0-based column of `X`).
pub fn posi_ci_beta_from_draws(fit: &FittedLmm<f64>, draws: &ConditionalDraws, j: usize, alpha: f64) -> Result<IntervalResult> {
    model_position(&fit.spec, j)?;
    let mut k = DVector::zeros(fit.spec.p());
    k[j] = 1.0;
    posi_ci_linear_combo_from_draws(fit, draws, &k, alpha, &format!("beta{}", j + 1))
}

/// Samples `region` (over all columns of `X`) and returns the interval for `beta_j`.
pub fn posi_ci_beta(fit: &FittedLmm<f64>, region: &ConstraintSet, j: usize, alpha: f64, cfg: &SamplerConfig) -> Result<IntervalResult> {
    check_alpha(alpha)?;
    let batch = sample_truncated(region, cfg)?;
    let draws = ConditionalDraws::from_full(&batch, &fit.spec, region.free_tail())?;
    posi_ci_beta_from_draws(fit, &draws, j, alpha)
}

/// Samples `region` and returns the interval for `k'beta`.
pub fn posi_ci_linear_combo(
    fit: &FittedLmm<f64>,
    region: &ConstraintSet,
    k: &DVector<f64>,
    alpha: f64,
    cfg: &SamplerConfig,
) -> Result<IntervalResult> {
    check_alpha(alpha)?;
    restrict_k(fit, k)?;
    let batch = sample_truncated(region, cfg)?;
    let draws = ConditionalDraws::from_full(&batch, &fit.spec, region.free_tail())?;
    posi_ci_linear_combo_from_draws(fit, &draws, k, alpha, "k'beta")
}

/// Symmetric square root of `K^{-1}`.
pub fn k_inverse_sqrt(k: &KBlocks<f64>) -> Result<DMatrix<f64>> {
    sym_pow(&k.kinv(), false, "K^-1")
}

/// Post-selection interval for `mu_i` from draws with `|M| + r` columns;
/// `kinv_sqrt` is the square root of `K(M)^{-1}`.
pub fn posi_ci_mixed_from_draws(
    fit: &FittedLmm<f64>,
    kinv_sqrt: &DMatrix<f64>,
    draws: &ConditionalDraws,
    target: &MixedTarget<f64>,
    alpha: f64,
    label: &str,
) -> Result<IntervalResult> {
    let n = fit.n_clusters();
    let c = target.c_vector(&fit.spec, n);
    if kinv_sqrt.nrows() != c.len() || draws.ws.ncols() != c.len() {
        return Err(LmmError::Dimension(format!(
            "target has {} coordinates, K^-1/2 {} and draws {}",
            c.len(),
            kinv_sqrt.nrows(),
            draws.ws.ncols()
        )));
    }
    let v = kinv_sqrt * &c;
    let (crit, se) = symmetric_critical_value(&draws.project(&v), alpha)?;
    let est = predict_mixed(fit, target)?;
    Ok(IntervalResult::symmetric(label.into(), est, crit, alpha, IntervalMethod::PostCaic, Some(draws.meta(se))))
}

/// Samples `region_fixed` (over all columns of `X`) with `r` free
/// random-effect coordinates and returns the interval for `mu_i`.
pub fn posi_ci_mixed(
    fit: &FittedLmm<f64>,
    k: &KBlocks<f64>,
    region_fixed: &ConstraintSet,
    target: &MixedTarget<f64>,
    alpha: f64,
    cfg: &SamplerConfig,
) -> Result<IntervalResult> {
    check_alpha(alpha)?;
    let r = k.r();
    let batch = sample_posi_joint(region_fixed, r, cfg)?;
    let draws = ConditionalDraws::from_full(&batch, &fit.spec, region_fixed.free_tail() + r)?;
    posi_ci_mixed_from_draws(fit, &k_inverse_sqrt(k)?, &draws, target, alpha, "mu")
}

/// `k'beta_hat +- z sqrt(k' (X_M'V^-1X_M)^{-1} k)`.
pub fn naive_ci_linear_combo(fit: &FittedLmm<f64>, k: &DVector<f64>, alpha: f64, label: &str) -> Result<IntervalResult> {
    check_alpha(alpha)?;
    let km = restrict_k(fit, k)?;
    let cov = spd_inverse(&fit.info_marginal, "I^m(M)")?.0;
    let se = km.dot(&(&cov * &km)).sqrt();
    let est = km.dot(&fit.beta_model);
    Ok(IntervalResult::symmetric(label.into(), est, z_critical(alpha) * se, alpha, IntervalMethod::Naive1, None))
}

pub fn naive_ci_beta(fit: &FittedLmm<f64>, j: usize, alpha: f64) -> Result<IntervalResult> {
    model_position(&fit.spec, j)?;
    let mut k = DVector::zeros(fit.spec.p());
    k[j] = 1.0;
    naive_ci_linear_combo(fit, &k, alpha, &format!("beta{}", j + 1))
}

/// `mu_hat +- z sqrt(mse)`, with the first- (`order = 1`) or second-order MSE.
pub fn naive_ci_mixed(
    data: &ClusteredDataset<f64>,
    fit: &FittedLmm<f64>,
    target: &MixedTarget<f64>,
    alpha: f64,
    order: u8,
) -> Result<IntervalResult> {
    naive_ci_mixed_with(&MseEvaluator::new(data, fit)?, fit, target, alpha, order, "mu")
}

/// As [`naive_ci_mixed`] with a shared evaluator.
pub fn naive_ci_mixed_with(
    ev: &MseEvaluator<'_, f64>,
    fit: &FittedLmm<f64>,
    target: &MixedTarget<f64>,
    alpha: f64,
    order: u8,
    label: &str,
) -> Result<IntervalResult> {
    check_alpha(alpha)?;
    let (mse, method) = match order {
        1 => {
            let (g1, g2) = ev.first_order(target)?;
            (g1 + g2, IntervalMethod::Naive1)
        }
        2 => (ev.second_order(target)?, IntervalMethod::Naive2),
        _ => return Err(LmmError::InvalidArgument(format!("order must be 1 or 2, got {order}"))),
    };
    let est = predict_mixed(fit, target)?;
    Ok(IntervalResult::symmetric(label.into(), est, z_critical(alpha) * mse.sqrt(), alpha, method, None))
}
