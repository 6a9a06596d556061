use crate::dataset::ModelSpec;
use crate::error::{LmmError, Result};
use crate::lmm::engine::sym_pow;
use crate::lmm::FittedLmm;
use crate::scalar::{to_f64, Scalar};
use nalgebra::DMatrix;

/// `Sigma = (I^m)^{-1/2} J^c (I^m)^{-1/2}` from a full-model fit, with the
/// per-cluster informations it is built from.
#[derive(Debug, Clone)]
pub struct SigmaEstimate {
    pub sigma: DMatrix<f64>,
    /// `X'V^-1X / n`.
    pub info_marginal: DMatrix<f64>,
    /// `X'R^-1X / n`.
    pub hessian_conditional: DMatrix<f64>,
    /// `(I^m)^{-1/2}`, kept for the non-orthogonal builders.
    pub info_inv_sqrt: DMatrix<f64>,
    pub n: usize,
}

impl SigmaEstimate {
    pub fn from_parts(info_marginal: DMatrix<f64>, hessian_conditional: DMatrix<f64>, n: usize) -> Result<Self> {
        let d = info_marginal.nrows();
        if info_marginal.ncols() != d || hessian_conditional.shape() != (d, d) {
            return Err(LmmError::Dimension("information matrices must be square and of equal size".into()));
        }
        if n == 0 {
            return Err(LmmError::InvalidArgument("n must be positive".into()));
        }
        let info_inv_sqrt = sym_pow(&info_marginal, true, "I^m")?;
        let s = &info_inv_sqrt * &hessian_conditional * &info_inv_sqrt;
        let sigma = (&s + s.transpose()) * 0.5;
        Ok(SigmaEstimate { sigma, info_marginal, hessian_conditional, info_inv_sqrt, n })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// `I^m` restricted to the given columns.
    pub fn info_block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        self.info_marginal.select_rows(rows).select_columns(cols)
    }

    /// `J^c` restricted to the given columns.
    pub fn hessian_block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        self.hessian_conditional.select_rows(rows).select_columns(cols)
    }
}

/// Plug-in `Sigma` on the columns of `full_fit`.
pub fn sigma_matrix<S: Scalar>(full_fit: &FittedLmm<S>) -> Result<SigmaEstimate> {
    let n = full_fit.n_clusters();
    let nf = n as f64;
    let im = full_fit.info_marginal.map(|v| to_f64(v) / nf);
    let jc = full_fit.hessian_conditional.map(|v| to_f64(v) / nf);
    SigmaEstimate::from_parts(im, jc, n)
}

/// Tolerance of [`check_orthogonality`].
pub const ORTHOGONALITY_TOL: f64 = 0.1;

/// Largest `|J^c_ab| / sqrt(J^c_aa J^c_bb)` over columns `a` of `first` and
/// `b` of `second` (a shared column counts with itself), and whether it is
/// at most [`ORTHOGONALITY_TOL`]. `sigma` must come from the full model.
pub fn check_orthogonality(sigma: &SigmaEstimate, first: &ModelSpec, second: &ModelSpec) -> (f64, bool) {
    let j = &sigma.hessian_conditional;
    let mut stat: f64 = 0.0;
    for a in first.indices() {
        for b in second.indices() {
            let den = (j[(a, a)] * j[(b, b)]).sqrt();
            if den > 0.0 {
                stat = stat.max(j[(a, b)].abs() / den);
            }
        }
    }
    (stat, stat <= ORTHOGONALITY_TOL)
}
