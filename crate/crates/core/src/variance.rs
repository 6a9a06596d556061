use crate::error::{LmmError, Result};
use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StructureKind {
    /// One random intercept per cluster, `theta = (sigma2_u, sigma2_e)`.
    NestedError,
    /// `G = sum theta_k G_k`, `R_i = (sum theta_k r_k) I`.
    LinearInTheta,
}

/// Variance structure linear in `theta`.
///
/// `R_i` is a multiple of the identity; `G` is shared by all clusters.
#[derive(Debug, Clone)]
pub struct VarianceStructure<S: Scalar> {
    pub kind: StructureKind,
    pub g_slopes: Vec<DMatrix<S>>,
    pub r_slopes: Vec<S>,
}

impl<S: Scalar> VarianceStructure<S> {
    pub fn nested_error() -> Self {
        VarianceStructure {
            kind: StructureKind::NestedError,
            g_slopes: vec![DMatrix::from_element(1, 1, S::one()), DMatrix::zeros(1, 1)],
            r_slopes: vec![S::zero(), S::one()],
        }
    }

    pub fn linear(g_slopes: Vec<DMatrix<S>>, r_slopes: Vec<S>) -> Result<Self> {
        if g_slopes.len() != r_slopes.len() || g_slopes.is_empty() {
            return Err(LmmError::InvalidVariance("slope lists must be nonempty and of equal length".into()));
        }
        let q = g_slopes[0].nrows();
        for g in &g_slopes {
            if g.nrows() != q || g.ncols() != q {
                return Err(LmmError::InvalidVariance("G slopes must be q x q".into()));
            }
            if (g - g.transpose()).iter().any(|v| crate::scalar::abs(*v) > S::default_epsilon().sqrt()) {
                return Err(LmmError::InvalidVariance("G slopes must be symmetric".into()));
            }
        }
        if r_slopes.iter().all(|&r| r == S::zero()) {
            return Err(LmmError::InvalidVariance("R must depend on theta".into()));
        }
        Ok(VarianceStructure { kind: StructureKind::LinearInTheta, g_slopes, r_slopes })
    }

    pub fn h(&self) -> usize {
        self.r_slopes.len()
    }

    pub fn q(&self) -> usize {
        self.g_slopes[0].nrows()
    }

    /// Components that only enter `G` may sit on the zero boundary.
    pub fn can_vanish(&self, k: usize) -> bool {
        self.r_slopes[k] == S::zero()
    }

    pub fn g(&self, theta: &DVector<S>) -> DMatrix<S> {
        let q = self.q();
        let mut g = DMatrix::zeros(q, q);
        for (t, gk) in theta.iter().zip(&self.g_slopes) {
            g += gk * *t;
        }
        g
    }

    /// Scale `s` with `R_i = s I`.
    pub fn r_scale(&self, theta: &DVector<S>) -> S {
        theta.iter().zip(&self.r_slopes).fold(S::zero(), |acc, (t, r)| acc + *t * *r)
    }
}

/// Variance parameters together with their structure.
#[derive(Debug, Clone)]
pub struct VarianceParams<S: Scalar> {
    pub theta: DVector<S>,
    pub structure: VarianceStructure<S>,
}

impl<S: Scalar> VarianceParams<S> {
    pub fn new(theta: DVector<S>, structure: VarianceStructure<S>) -> Result<Self> {
        let v = VarianceParams { theta, structure };
        v.validate()?;
        Ok(v)
    }

    /// `theta = (sigma2_u, sigma2_e)`.
    pub fn nested_error(sigma2_u: S, sigma2_e: S) -> Result<Self> {
        Self::new(DVector::from_vec(vec![sigma2_u, sigma2_e]), VarianceStructure::nested_error())
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != self.structure.h() {
            return Err(LmmError::InvalidVariance("theta length does not match structure".into()));
        }
        if self.theta.iter().any(|t| !t.is_finite() || *t < S::zero()) {
            return Err(LmmError::InvalidVariance("theta must be finite and nonnegative".into()));
        }
        if self.r_scale() <= S::zero() {
            return Err(LmmError::InvalidVariance("R must be positive definite".into()));
        }
        Ok(())
    }

    pub fn g(&self) -> DMatrix<S> {
        self.structure.g(&self.theta)
    }

    pub fn r_scale(&self) -> S {
        self.structure.r_scale(&self.theta)
    }

    pub fn h(&self) -> usize {
        self.theta.len()
    }

    /// True when `G` is only positive semidefinite.
    pub fn g_singular(&self) -> bool {
        let g = self.g();
        g.nrows() > 0 && g.cholesky().is_none()
    }

    pub fn with_theta(&self, theta: DVector<S>) -> Self {
        VarianceParams { theta, structure: self.structure.clone() }
    }
}
