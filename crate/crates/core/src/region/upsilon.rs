use crate::dataset::ModelSpec;
use crate::error::{LmmError, Result};
use nalgebra::DMatrix;

/// 0/1 matrix with one row per model: the first `d` columns flag the
/// diagonal entries of `Sigma` a model uses, the remaining `d(d-1)/2`
/// columns flag the off-diagonal pairs `(j, k)`, `j < k`, in lexicographic
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedSelectionMatrix {
    d: usize,
    rows: Vec<Vec<u8>>,
}

impl ExtendedSelectionMatrix {
    pub fn from_specs(specs: &[ModelSpec]) -> Result<Self> {
        let d = specs.first().map(|s| s.p()).ok_or_else(|| LmmError::InvalidArgument("no models".into()))?;
        if specs.iter().any(|s| s.p() != d) {
            return Err(LmmError::Dimension("models differ in column count".into()));
        }
        let pairs = pair_list(d);
        let rows = specs
            .iter()
            .map(|s| {
                let inc = &s.included;
                let mut row: Vec<u8> = inc.iter().map(|&b| b as u8).collect();
                row.extend(pairs.iter().map(|&(j, k)| (inc[j] && inc[k]) as u8));
                row
            })
            .collect();
        Ok(ExtendedSelectionMatrix { d, rows })
    }

    /// Checks that every row is the pattern of some covariate subset.
    pub fn from_rows(d: usize, rows: Vec<Vec<u8>>) -> Result<Self> {
        let pairs = pair_list(d);
        for (m, row) in rows.iter().enumerate() {
            if row.len() != d + pairs.len() || row.iter().any(|&v| v > 1) {
                return Err(LmmError::Dimension(format!("row {m} is not a 0/1 row of length {}", d + pairs.len())));
            }
            for (s, &(j, k)) in pairs.iter().enumerate() {
                if row[d + s] != row[j] * row[k] {
                    return Err(LmmError::InvalidArgument(format!(
                        "row {m}: pair ({}, {}) flag disagrees with its diagonal flags",
                        j + 1,
                        k + 1
                    )));
                }
            }
        }
        Ok(ExtendedSelectionMatrix { d, rows })
    }

    /// Number of diagonal slots.
    pub fn d(&self) -> usize {
        self.d
    }

    /// `(models, d + d(d-1)/2)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.d + self.d * self.d.saturating_sub(1) / 2)
    }

    pub fn row(&self, m: usize) -> &[u8] {
        &self.rows[m]
    }

    /// `(j, k)` for each off-diagonal slot.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        pair_list(self.d)
    }

    /// Slot of entry `(j, k)` of `Sigma`.
    pub fn slot(&self, j: usize, k: usize) -> usize {
        let (j, k) = if j <= k { (j, k) } else { (k, j) };
        if j == k {
            j
        } else {
            // pairs before row j, then offset within row j
            self.d + j * (2 * self.d - j - 1) / 2 + (k - j - 1)
        }
    }

    /// Rows for a subset of models.
    pub fn restrict(&self, models: &[usize]) -> Self {
        ExtendedSelectionMatrix { d: self.d, rows: models.iter().map(|&m| self.rows[m].clone()).collect() }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let (r, c) = self.shape();
        DMatrix::from_fn(r, c, |i, j| self.rows[i][j] as f64)
    }

    /// Symmetric `Q` with `w'Qw = sum_s coef_s * monomial_s(w)`, where the
    /// monomials are `Sigma_jj w_j^2` and `2 Sigma_jk w_j w_k`.
    pub(crate) fn contract(&self, coef: &[f64], sigma: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.d;
        let mut q = DMatrix::zeros(d, d);
        for j in 0..d {
            q[(j, j)] = coef[j] * sigma[(j, j)];
        }
        for (s, (j, k)) in self.pairs().into_iter().enumerate() {
            let v = coef[d + s] * sigma[(j, k)];
            q[(j, k)] = v;
            q[(k, j)] = v;
        }
        q
    }
}

fn pair_list(d: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(d * d.saturating_sub(1) / 2);
    for j in 0..d {
        for k in j + 1..d {
            v.push((j, k));
        }
    }
    v
}
