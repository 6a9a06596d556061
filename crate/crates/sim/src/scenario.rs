use nalgebra::{DMatrix, DVector};
use postcaic_core::region::ExtendedSelectionMatrix;
use postcaic_core::rng::stream_rng;
use postcaic_core::{CandidateSet, Dataset, ModelSpec};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Variance settings, stored as `(sigma_e^2, sigma_u^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    /// `(1, 1)`.
    S1,
    /// `(1, 0.5)`.
    S2,
}

impl Setting {
    /// `(sigma_e^2, sigma_u^2)`.
    pub fn variances(self) -> (f64, f64) {
        match self {
            Setting::S1 => (1.0, 1.0),
            Setting::S2 => (1.0, 0.5),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::S1 => "S1",
            Setting::S2 => "S2",
        })
    }
}

impl FromStr for Setting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Setting::S1),
            "S2" => Ok(Setting::S2),
            _ => Err(format!("unknown setting {s:?} (expected S1 or S2)")),
        }
    }
}

/// Selection matrix: `V2` forces covariates 1-2, `V3` 1-3, `V4` 1-4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionTag {
    V2,
    V3,
    V4,
}

impl SelectionTag {
    pub fn forced(self) -> usize {
        match self {
            SelectionTag::V2 => 2,
            SelectionTag::V3 => 3,
            SelectionTag::V4 => 4,
        }
    }
}

impl fmt::Display for SelectionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.forced())
    }
}

impl FromStr for SelectionTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "v2" => Ok(SelectionTag::V2),
            "v3" => Ok(SelectionTag::V3),
            "v4" => Ok(SelectionTag::V4),
            _ => Err(format!("unknown selection matrix {s:?} (expected v2, v3 or v4)")),
        }
    }
}

pub const BETA_TRUE: [f64; 5] = [2.25, -1.1, 2.43, 0.0, 0.0];
pub const P: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimScenario {
    pub beta_true: Vec<f64>,
    pub setting: Setting,
    pub n: usize,
    pub mi: usize,
    /// Off-diagonal of the covariate correlation matrix.
    pub omega_offdiag: f64,
    pub tag: SelectionTag,
    /// Model whose selection is conditioned on.
    pub target: ModelSpec,
    /// Conditioned replications required.
    pub i_required: usize,
    pub alpha: f64,
    /// Monte Carlo draws per interval.
    pub b: usize,
    pub seed: u64,
}

impl SimScenario {
    /// Desk-scale defaults: target = full model, `I = 500`, `B = 5000`, `alpha = 0.05`.
    pub fn new(setting: Setting, n: usize, mi: usize, tag: SelectionTag) -> Self {
        SimScenario {
            beta_true: BETA_TRUE.to_vec(),
            setting,
            n,
            mi,
            omega_offdiag: 0.25,
            tag,
            target: ModelSpec::full(P),
            i_required: 500,
            alpha: 0.05,
            b: 5000,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n < 2 || self.mi < 2 {
            return Err("need n >= 2 and m_i >= 2".into());
        }
        if self.i_required == 0 || self.b == 0 {
            return Err("I and B must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err("alpha must lie in (0, 1)".into());
        }
        if self.beta_true.len() != P || self.target.p() != P {
            return Err(format!("the design has {P} columns"));
        }
        if !(self.omega_offdiag > -1.0 / (P as f64 - 2.0) && self.omega_offdiag < 1.0) {
            return Err("covariate correlation matrix is not positive definite".into());
        }
        Ok(())
    }

    /// Smallest model holding every non-zero coefficient.
    pub fn true_model(&self) -> ModelSpec {
        let idx: Vec<usize> = (0..P).filter(|&j| self.beta_true[j] != 0.0 || j == 0).collect();
        ModelSpec::from_indices(P, &idx, 0).expect("intercept is always present")
    }
}

/// A generated dataset with its true random effects.
#[derive(Debug, Clone)]
pub struct NermSample {
    pub data: Dataset,
    pub u: DVector<f64>,
}

/// `y_ij = x_ij' beta + u_i + e_ij` with `x_1 = 1` and `(x_2..x_5) ~ N(0, Omega)`.
pub fn generate_nerm(scen: &SimScenario, rep_seed: u64) -> postcaic_core::Result<NermSample> {
    let design = NermDesign {
        beta: &scen.beta_true,
        n: scen.n,
        mi: scen.mi,
        variances: scen.setting.variances(),
        omega_offdiag: scen.omega_offdiag,
        forced: scen.tag.forced(),
    };
    simulate_nerm(&design, rep_seed)
}

/// Layout of a nested error regression draw with any number of columns.
#[derive(Debug, Clone, Copy)]
pub struct NermDesign<'a> {
    /// Coefficients, intercept first.
    pub beta: &'a [f64],
    pub n: usize,
    pub mi: usize,
    /// `(sigma_e^2, sigma_u^2)`.
    pub variances: (f64, f64),
    /// Common correlation of the non-intercept covariates.
    pub omega_offdiag: f64,
    pub forced: usize,
}

pub fn simulate_nerm(design: &NermDesign<'_>, rep_seed: u64) -> postcaic_core::Result<NermSample> {
    let p = design.beta.len();
    if p == 0 || design.n == 0 || design.mi == 0 {
        return Err(postcaic_core::LmmError::InvalidArgument("empty design".into()));
    }
    let (se2, su2) = design.variances;
    let k = p - 1;
    let omega = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { design.omega_offdiag });
    let l = omega.cholesky().ok_or_else(|| postcaic_core::LmmError::InvalidArgument("Omega is not positive definite".into()))?.l();
    let mut rng = stream_rng(rep_seed, 0);
    let beta = DVector::from_column_slice(design.beta);
    let mut ys = Vec::with_capacity(design.n);
    let mut xs = Vec::with_capacity(design.n);
    let mut u = DVector::zeros(design.n);
    for ui in u.iter_mut() {
        *ui = su2.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let mut x = DMatrix::zeros(design.mi, p);
        for r in 0..design.mi {
            let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let c = &l * z;
            x[(r, 0)] = 1.0;
            for j in 0..k {
                x[(r, j + 1)] = c[j];
            }
        }
        let e = DVector::from_fn(design.mi, |_, _| se2.sqrt() * rng.sample::<f64, _>(StandardNormal));
        ys.push(&x * &beta + DVector::from_element(design.mi, *ui) + e);
        xs.push(x);
    }
    let data = Dataset::nested_error(ys, xs, design.forced)?;
    Ok(NermSample { data, u })
}

/// All subsets of the covariates after the forced block.
pub fn candidate_set_for(tag: SelectionTag) -> (CandidateSet, ExtendedSelectionMatrix) {
    let cands = CandidateSet::all_subsets(P, tag.forced()).expect("static candidate layout");
    let ups = ExtendedSelectionMatrix::from_specs(&cands.specs).expect("candidates share one design");
    (cands, ups)
}
