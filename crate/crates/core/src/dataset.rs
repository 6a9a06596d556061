use crate::error::{LmmError, Result};
use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// One cluster: response, fixed-effect design and random-effect design.
#[derive(Debug, Clone)]
pub struct Cluster<S: Scalar> {
    pub y: DVector<S>,
    pub x: DMatrix<S>,
    pub z: DMatrix<S>,
}

/// Per-cluster cross products of `[X y Z]`.
#[derive(Debug, Clone)]
pub struct ClusterStats<S: Scalar> {
    pub m: usize,
    pub xtx: DMatrix<S>,
    pub xtz: DMatrix<S>,
    pub ztz: DMatrix<S>,
    pub xty: DVector<S>,
    pub zty: DVector<S>,
    pub yty: S,
}

impl<S: Scalar> ClusterStats<S> {
    pub fn from_cluster(c: &Cluster<S>) -> Self {
        Self::with_response(c, &c.y)
    }

    pub fn with_response(c: &Cluster<S>, y: &DVector<S>) -> Self {
        let xt = c.x.transpose();
        let zt = c.z.transpose();
        ClusterStats {
            m: y.len(),
            xtx: &xt * &c.x,
            xtz: &xt * &c.z,
            ztz: &zt * &c.z,
            xty: &xt * y,
            zty: &zt * y,
            yty: y.dot(y),
        }
    }
}

/// Clustered data `y_i = X_i beta + Z_i u_i + e_i`, `i = 1..n`.
///
/// The first `a` columns of `X` are present in every candidate model, the
/// remaining `k` are selectable.
#[derive(Debug, Clone)]
pub struct ClusteredDataset<S: Scalar> {
    clusters: Vec<Cluster<S>>,
    stats: Vec<ClusterStats<S>>,
    a: usize,
    k: usize,
    q: usize,
    intercept: bool,
}

impl<S: Scalar> ClusteredDataset<S> {
    pub fn new(clusters: Vec<Cluster<S>>, a: usize, intercept: bool) -> Result<Self> {
        if clusters.is_empty() {
            return Err(LmmError::InvalidData("no clusters".into()));
        }
        let p = clusters[0].x.ncols();
        let q = clusters[0].z.ncols();
        if a > p {
            return Err(LmmError::InvalidData(format!("a = {a} exceeds column count {p}")));
        }
        for (i, c) in clusters.iter().enumerate() {
            let m = c.y.len();
            if m == 0 {
                return Err(LmmError::InvalidData(format!("cluster {i} is empty")));
            }
            if c.x.nrows() != m || c.z.nrows() != m || c.x.ncols() != p || c.z.ncols() != q {
                return Err(LmmError::Dimension(format!("cluster {i} has inconsistent shapes")));
            }
            if c.y.iter().chain(c.x.iter()).chain(c.z.iter()).any(|v| !v.is_finite()) {
                return Err(LmmError::InvalidData(format!("cluster {i} has non-finite values")));
            }
            if intercept && p > 0 && c.x.column(0).iter().any(|&v| v != S::one()) {
                return Err(LmmError::InvalidData(format!(
                    "cluster {i}: first column is declared as intercept but is not all ones"
                )));
            }
        }
        let stats: Vec<_> = clusters.iter().map(ClusterStats::from_cluster).collect();
        let mut xtx = DMatrix::<S>::zeros(p, p);
        for s in &stats {
            xtx += &s.xtx;
        }
        if p == 0 || !full_rank(&xtx) {
            return Err(LmmError::InvalidData("stacked X is not of full column rank".into()));
        }
        Ok(ClusteredDataset { clusters, stats, a, k: p - a, q, intercept })
    }

    /// Random-intercept layout: `Z_i` is a column of ones.
    pub fn nested_error(ys: Vec<DVector<S>>, xs: Vec<DMatrix<S>>, a: usize) -> Result<Self> {
        if ys.len() != xs.len() {
            return Err(LmmError::Dimension("ys and xs differ in length".into()));
        }
        let clusters = ys
            .into_iter()
            .zip(xs)
            .map(|(y, x)| {
                let m = y.len();
                Cluster { y, x, z: DMatrix::from_element(m, 1, S::one()) }
            })
            .collect::<Vec<_>>();
        let intercept = clusters[0].x.ncols() > 0 && clusters.iter().all(|c| c.x.column(0).iter().all(|&v| v == S::one()));
        Self::new(clusters, a, intercept)
    }

    /// Same design, new responses.
    pub fn with_responses(&self, ys: &[DVector<S>]) -> Result<Self> {
        if ys.len() != self.n() {
            return Err(LmmError::Dimension("response count differs from cluster count".into()));
        }
        let mut out = self.clone();
        for ((c, s), y) in out.clusters.iter_mut().zip(out.stats.iter_mut()).zip(ys) {
            if y.len() != c.y.len() {
                return Err(LmmError::Dimension("cluster size mismatch".into()));
            }
            c.y = y.clone();
            s.xty = c.x.tr_mul(y);
            s.zty = c.z.tr_mul(y);
            s.yty = y.dot(y);
        }
        Ok(out)
    }

    pub fn clusters(&self) -> &[Cluster<S>] {
        &self.clusters
    }
    pub fn stats(&self) -> &[ClusterStats<S>] {
        &self.stats
    }
    pub fn n(&self) -> usize {
        self.clusters.len()
    }
    pub fn m(&self) -> usize {
        self.stats.iter().map(|s| s.m).sum()
    }
    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.stats.iter().map(|s| s.m).collect()
    }
    pub fn a(&self) -> usize {
        self.a
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn p(&self) -> usize {
        self.a + self.k
    }
    pub fn q(&self) -> usize {
        self.q
    }
    /// Total random-effect dimension `n q`.
    pub fn r(&self) -> usize {
        self.n() * self.q
    }
    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    /// Column means of `X_i` per cluster.
    pub fn cluster_covariate_means(&self) -> Vec<DVector<S>> {
        self.clusters
            .iter()
            .map(|c| c.x.row_mean().transpose())
            .collect()
    }

    /// Stacked `(y, X, Z)` with block-diagonal `Z`, for dense checks.
    pub fn dense(&self) -> (DVector<S>, DMatrix<S>, DMatrix<S>) {
        let m = self.m();
        let (p, q, r) = (self.p(), self.q, self.r());
        let mut y = DVector::zeros(m);
        let mut x = DMatrix::zeros(m, p);
        let mut z = DMatrix::zeros(m, r);
        let mut row = 0;
        for (i, c) in self.clusters.iter().enumerate() {
            let mi = c.y.len();
            y.rows_mut(row, mi).copy_from(&c.y);
            x.view_mut((row, 0), (mi, p)).copy_from(&c.x);
            z.view_mut((row, i * q), (mi, q)).copy_from(&c.z);
            row += mi;
        }
        (y, x, z)
    }
}

fn full_rank<S: Scalar>(xtx: &DMatrix<S>) -> bool {
    let eig = xtx.clone().symmetric_eigen();
    let ev = &eig.eigenvalues;
    let max = ev.iter().cloned().fold(ev[0], |a, b| a.max(b));
    let min = ev.iter().cloned().fold(ev[0], |a, b| a.min(b));
    max > S::zero() && min > max * S::default_epsilon() * crate::scalar::lit(1e3)
}

/// A candidate model: which columns of `X` are included.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub included: Vec<bool>,
    pub label: String,
}

impl ModelSpec {
    pub fn new(included: Vec<bool>, a: usize, label: impl Into<String>) -> Result<Self> {
        if included.iter().take(a).any(|&b| !b) || included.len() < a {
            return Err(LmmError::InvalidArgument("forced covariates must be included".into()));
        }
        if !included.iter().any(|&b| b) {
            return Err(LmmError::InvalidArgument("model includes no covariate".into()));
        }
        Ok(ModelSpec { included, label: label.into() })
    }

    /// Model with all `p` columns.
    pub fn full(p: usize) -> Self {
        ModelSpec { included: vec![true; p], label: label_for(&vec![true; p]) }
    }

    /// Model from 0-based column indices.
    pub fn from_indices(p: usize, idx: &[usize], a: usize) -> Result<Self> {
        let mut inc = vec![false; p];
        for &i in idx {
            if i >= p {
                return Err(LmmError::InvalidArgument(format!("column {i} out of range")));
            }
            inc[i] = true;
        }
        let label = label_for(&inc);
        Self::new(inc, a, label)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.included.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn size(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }

    pub fn p(&self) -> usize {
        self.included.len()
    }

    pub fn is_subset_of(&self, other: &ModelSpec) -> bool {
        self.included.len() == other.included.len()
            && self.included.iter().zip(&other.included).all(|(&a, &b)| !a || b)
    }
}

/// `"x1+x2+x4"` style label (1-based).
pub fn label_for(inc: &[bool]) -> String {
    inc.iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| format!("x{}", i + 1))
        .collect::<Vec<_>>()
        .join("+")
}
