use crate::scenario::{candidate_set_for, generate_nerm, NermSample, SimScenario, P};
use nalgebra::DVector;
use postcaic_core::ci::{
    k_inverse_sqrt, naive_ci_linear_combo, naive_ci_mixed_with, posi_ci_linear_combo_from_draws, posi_ci_mixed_from_draws,
    ConditionalDraws,
};
use postcaic_core::lmm::{build_k, MseEvaluator};
use postcaic_core::region::{general_region_nonorthogonal, general_region_orthogonal, sigma_matrix, ExtendedSelectionMatrix};
use postcaic_core::rng::stream_seed;
use postcaic_core::tmvn::{sample_posi_joint, sample_truncated};
use postcaic_core::{
    select_model, BiasMethod, CandidateSet, Fit, FitOptions, IntervalMethod, IntervalResult, LmmError, SamplerConfig,
    SamplerMethod, Structure, Target,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Core(#[from] LmmError),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("target model {target} is not a candidate")]
    TargetNotCandidate { target: String },
    #[error("target model selected {selected} times in {attempts} attempts (needed {required}); selection counts {counts:?}; {failed} failed replications{}", if last.is_empty() { String::new() } else { format!(", last error: {last}") })]
    TargetNeverSelected { attempts: usize, selected: usize, required: usize, counts: Vec<usize>, failed: usize, last: String },
    #[error("{failed} of {attempts} replications failed to fit; last error: {last}")]
    NonConvergence { failed: usize, attempts: usize, last: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionFamily {
    /// Contraction of the extended selection matrix.
    Orthogonal,
    /// Stacked per-model estimators.
    NonOrthogonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Targets {
    pub betas: bool,
    pub combos: bool,
    pub mixed: bool,
}

impl Default for Targets {
    fn default() -> Self {
        Targets { betas: true, combos: true, mixed: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pipeline {
    pub bias: BiasMethod,
    pub region: RegionFamily,
    pub sampler: SamplerMethod,
    pub targets: Targets,
    /// Replications evaluated per parallel round.
    pub batch: usize,
}

impl Default for Pipeline {
    fn default() -> Self {
        Pipeline {
            bias: BiasMethod::Analytic,
            region: RegionFamily::Orthogonal,
            sampler: SamplerMethod::Auto,
            targets: Targets::default(),
            batch: 64,
        }
    }
}

/// One `(method, target)` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub setting: String,
    pub method: IntervalMethod,
    pub target: String,
    /// Percent.
    pub coverage: f64,
    pub length: f64,
    /// `100 sqrt(p (1 - p) / I)`.
    pub mc_se: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageTable {
    pub rows: Vec<CoverageRow>,
    pub attempts: usize,
    pub conditioned: usize,
    pub failed: usize,
    /// Selections per candidate over all attempts.
    pub selection_counts: Vec<usize>,
}

impl CoverageTable {
    pub fn row(&self, method: IntervalMethod, target: &str) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.method == method && r.target == target)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SimError> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Per-replication coverage and length for each `(method, target)`, in a fixed order.
#[derive(Debug, Clone)]
struct RepOutcome {
    cells: Vec<(IntervalMethod, String, f64, f64)>,
}

struct Attempt {
    selected: usize,
    outcome: Option<RepOutcome>,
}

struct Context<'a> {
    scen: &'a SimScenario,
    pipe: &'a Pipeline,
    cands: &'a CandidateSet,
    ups: &'a ExtendedSelectionMatrix,
    target_idx: usize,
    full_idx: Option<usize>,
    opts: FitOptions,
}

const SAMPLER_SALT: u64 = 0x5A4D_F1E5;

/// Generates, fits and selects until the target model has been selected
/// `scen.i_required` times, building intervals on each of those replications.
pub fn run_until_selected(scen: &SimScenario, pipe: &Pipeline) -> Result<CoverageTable, SimError> {
    let (cands, _) = candidate_set_for(scen.tag);
    run_with_candidates(scen, pipe, &cands)
}

/// As [`run_until_selected`] over an explicit candidate set on the five columns.
pub fn run_with_candidates(scen: &SimScenario, pipe: &Pipeline, cands: &CandidateSet) -> Result<CoverageTable, SimError> {
    scen.validate().map_err(SimError::Scenario)?;
    let ups = ExtendedSelectionMatrix::from_specs(&cands.specs)?;
    let target_idx = cands.index_of(&scen.target).ok_or_else(|| SimError::TargetNotCandidate { target: scen.target.label.clone() })?;
    let full_idx = cands.specs.iter().position(|s| s.size() == P);
    let ctx = Context {
        scen,
        pipe,
        cands,
        ups: &ups,
        target_idx,
        full_idx,
        opts: FitOptions::default().with_bias(pipe.bias),
    };
    let max_attempts = 100 * scen.i_required;
    let batch = pipe.batch.max(1);
    let mut counts = vec![0usize; cands.len()];
    let mut outcomes: Vec<RepOutcome> = Vec::with_capacity(scen.i_required);
    let mut attempts = 0usize;
    let mut failed = 0usize;
    let mut last_err = String::new();
    while outcomes.len() < scen.i_required && attempts < max_attempts {
        let hi = (attempts + batch).min(max_attempts);
        let round: Vec<Result<Attempt, SimError>> = (attempts..hi).into_par_iter().map(|rep| ctx.attempt(rep as u64)).collect();
        for res in round {
            attempts += 1;
            match res {
                Ok(a) => {
                    counts[a.selected] += 1;
                    if let Some(o) = a.outcome {
                        if outcomes.len() < scen.i_required {
                            outcomes.push(o);
                        }
                    }
                }
                Err(e) => {
                    failed += 1;
                    last_err = e.to_string();
                }
            }
            if outcomes.len() == scen.i_required {
                break;
            }
        }
        if failed * 20 > attempts.max(20) {
            return Err(SimError::NonConvergence { failed, attempts, last: last_err });
        }
    }
    log::info!("{} attempts, {} conditioned, {} failed", attempts, outcomes.len(), failed);
    if outcomes.len() < scen.i_required {
        return Err(SimError::TargetNeverSelected { attempts, selected: outcomes.len(), required: scen.i_required, counts, failed, last: last_err });
    }
    Ok(CoverageTable { rows: aggregate(scen, &outcomes), attempts, conditioned: outcomes.len(), failed, selection_counts: counts })
}

fn aggregate(scen: &SimScenario, outcomes: &[RepOutcome]) -> Vec<CoverageRow> {
    let reps = outcomes.len();
    let Some(first) = outcomes.first() else { return Vec::new() };
    first
        .cells
        .iter()
        .enumerate()
        .map(|(c, (method, target, _, _))| {
            let cov = outcomes.iter().map(|o| o.cells[c].2).sum::<f64>() / reps as f64;
            let len = outcomes.iter().map(|o| o.cells[c].3).sum::<f64>() / reps as f64;
            CoverageRow {
                setting: scen.setting.to_string(),
                method: *method,
                target: target.clone(),
                coverage: 100.0 * cov,
                length: len,
                mc_se: 100.0 * (cov * (1.0 - cov) / reps as f64).sqrt(),
                reps,
            }
        })
        .collect()
}

impl Context<'_> {
    fn attempt(&self, rep: u64) -> Result<Attempt, SimError> {
        let sample = generate_nerm(self.scen, stream_seed(self.scen.seed, rep))?;
        let sel = select_model(&sample.data, self.cands, &Structure::nested_error(), &self.opts)?;
        let outcome = if sel.selected == self.target_idx {
            let full = match self.full_idx {
                Some(i) => sel.fits[i].clone(),
                None => postcaic_core::lmm::fit_model(
                    &sample.data,
                    &postcaic_core::ModelSpec::full(P),
                    &Structure::nested_error(),
                    &self.opts,
                )?,
            };
            let rho_b: Vec<f64> = sel.fits.iter().map(|f| f.rho_hat + f.b_hat).collect();
            let seed = stream_seed(self.scen.seed ^ SAMPLER_SALT, rep);
            Some(self.intervals(&sample, sel.selected_fit(), &full, &rho_b, seed)?)
        } else {
            None
        };
        Ok(Attempt { selected: sel.selected, outcome })
    }

    fn intervals(&self, sample: &NermSample, fit: &Fit, full: &Fit, rho_b: &[f64], seed: u64) -> Result<RepOutcome, SimError> {
        let scen = self.scen;
        let data = &sample.data;
        let n = data.n();
        let alpha = scen.alpha;
        let sigma = sigma_matrix(full)?;
        let cfg = SamplerConfig { b: scen.b, seed, method: self.pipe.sampler, ..Default::default() };
        let r = if self.pipe.targets.mixed { n * data.q() } else { 0 };
        let (fixed, mixed) = match self.pipe.region {
            RegionFamily::Orthogonal => {
                let region = general_region_orthogonal(&sigma, self.ups, rho_b, self.target_idx, None)?;
                let batch = sample_posi_joint(&region, r, &cfg)?;
                let d = ConditionalDraws::from_full(&batch, &fit.spec, r)?;
                (d.clone(), d)
            }
            RegionFamily::NonOrthogonal => {
                let st = general_region_nonorthogonal(&sigma, &self.cands.specs, rho_b, self.target_idx, None, r)?;
                let fixed = ConditionalDraws::from_stacked_fixed(&sample_truncated(&st.fixed, &cfg)?, &st);
                let mixed = if r > 0 {
                    let mcfg = SamplerConfig { seed: seed ^ 0x0F1E_D2C3, ..cfg.clone() };
                    ConditionalDraws::from_stacked_mixed(&sample_truncated(&st.mixed, &mcfg)?, &st)
                } else {
                    fixed.clone()
                };
                (fixed, mixed)
            }
        };
        let beta = DVector::from_column_slice(&scen.beta_true);
        let mut cells = Vec::new();
        let mut push = |m: IntervalMethod, t: String, cov: f64, len: f64| cells.push((m, t, cov, len));

        if self.pipe.targets.betas {
            for j in fit.spec.indices() {
                let mut k = DVector::zeros(P);
                k[j] = 1.0;
                let label = format!("beta{}", j + 1);
                let posi = posi_ci_linear_combo_from_draws(fit, &fixed, &k, alpha, &label)?;
                let naive = naive_ci_linear_combo(fit, &k, alpha, &label)?;
                for ci in [posi, naive] {
                    push(ci.method, label.clone(), f64::from(u8::from(ci.covers(beta[j]))), ci.length());
                }
            }
        }

        let means = data.cluster_covariate_means();
        if self.pipe.targets.combos {
            let mut acc = [(0.0, 0.0); 2];
            for k in &means {
                let truth = k.dot(&beta);
                let posi = posi_ci_linear_combo_from_draws(fit, &fixed, k, alpha, "k'beta")?;
                let naive = naive_ci_linear_combo(fit, k, alpha, "k'beta")?;
                for (a, ci) in acc.iter_mut().zip([&posi, &naive]) {
                    a.0 += f64::from(u8::from(ci.covers(truth)));
                    a.1 += ci.length();
                }
            }
            push(IntervalMethod::PostCaic, "k'beta".into(), acc[0].0 / n as f64, acc[0].1 / n as f64);
            push(IntervalMethod::Naive1, "k'beta".into(), acc[1].0 / n as f64, acc[1].1 / n as f64);
        }

        if self.pipe.targets.mixed {
            // K(M) at the full-model variance estimate
            let kb = build_k(data, &fit.spec, &full.theta_hat)?;
            let kinv_sqrt = k_inverse_sqrt(&kb)?;
            let ev = MseEvaluator::new(data, fit)?;
            let mut acc = [(0.0, 0.0); 3];
            for (i, k) in means.iter().enumerate() {
                let target = Target::new(k.clone(), DVector::from_element(1, 1.0), i);
                let truth = k.dot(&beta) + sample.u[i];
                let cis: [IntervalResult; 3] = [
                    posi_ci_mixed_from_draws(fit, &kinv_sqrt, &mixed, &target, alpha, "mu")?,
                    naive_ci_mixed_with(&ev, fit, &target, alpha, 1, "mu")?,
                    naive_ci_mixed_with(&ev, fit, &target, alpha, 2, "mu")?,
                ];
                for (a, ci) in acc.iter_mut().zip(&cis) {
                    a.0 += f64::from(u8::from(ci.covers(truth)));
                    a.1 += ci.length();
                }
            }
            for (m, a) in [IntervalMethod::PostCaic, IntervalMethod::Naive1, IntervalMethod::Naive2].into_iter().zip(acc) {
                push(m, "mu".into(), a.0 / n as f64, a.1 / n as f64);
            }
        }
        Ok(RepOutcome { cells })
    }
}

/// Frequency of selecting a model that misses a non-zero coefficient.
pub fn underselection(scen: &SimScenario, reps: usize, bias: BiasMethod) -> Result<f64, SimError> {
    scen.validate().map_err(SimError::Scenario)?;
    let (cands, _) = candidate_set_for(scen.tag);
    let rate = postcaic_core::caic::underselection_rate(
        |rep| Ok(generate_nerm(scen, stream_seed(scen.seed, rep))?.data),
        &cands,
        &scen.true_model(),
        &Structure::nested_error(),
        &FitOptions::default().with_bias(bias),
        reps,
    )?;
    Ok(rate)
}
