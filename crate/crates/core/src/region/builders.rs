use super::constraint::{ConstraintSet, QuadraticConstraint, Sense};
use super::sigma::SigmaEstimate;
use super::upsilon::ExtendedSelectionMatrix;
use crate::dataset::ModelSpec;
use crate::error::{LmmError, Result};
use crate::lmm::engine::sym_pow;
use nalgebra::{DMatrix, DVector};

fn masked(sigma: &DMatrix<f64>, keep: usize) -> DMatrix<f64> {
    let d = sigma.nrows();
    DMatrix::from_fn(d, d, |j, k| if j < keep && k < keep { sigma[(j, k)] } else { 0.0 })
}

/// Region of a nested chain `M_0 ⊂ .. ⊂ M_K`, where `M_j` holds the first
/// `a + j` columns of `sigma` and `rho_b[j]` is `rho + b` of `M_j`.
///
/// Smaller competitors give `w'(Q_p - Q_j)w >= 2(rho_b[p] - rho_b[j])`,
/// larger ones `w'(Q_j - Q_p)w < 2(rho_b[j] - rho_b[p])`, with `Q_j` the
/// `Sigma` block of `M_j` padded by zeros. With `p0 = Some(t)` only models
/// from `M_t` upwards compete.
pub fn nested_region(sigma: &SigmaEstimate, rho_b: &[f64], a: usize, selected: usize, p0: Option<usize>) -> Result<ConstraintSet> {
    if rho_b.is_empty() {
        return Err(LmmError::InvalidArgument("empty chain".into()));
    }
    let k = rho_b.len() - 1;
    let d = sigma.dim();
    if a + k != d {
        return Err(LmmError::Dimension(format!("chain spans {} columns, Sigma has {d}", a + k)));
    }
    if selected > k {
        return Err(LmmError::InvalidArgument(format!("selected order {selected} beyond chain length {k}")));
    }
    let lo = p0.unwrap_or(0);
    if lo > selected {
        return Err(LmmError::InvalidArgument("selected model is smaller than the smallest competitor".into()));
    }
    if rho_b.windows(2).any(|w| w[1] <= w[0]) {
        log::warn!("rho + b is not increasing along the chain; the region may be empty");
    }
    let qp = masked(&sigma.sigma, a + selected);
    let mut cs = Vec::new();
    for j in lo..selected {
        let q = &qp - masked(&sigma.sigma, a + j);
        cs.push(QuadraticConstraint::quadratic(q, 2.0 * (rho_b[selected] - rho_b[j]), Sense::GreaterEqual)?);
    }
    for j in selected + 1..=k {
        let q = masked(&sigma.sigma, a + j) - &qp;
        cs.push(QuadraticConstraint::quadratic(q, 2.0 * (rho_b[j] - rho_b[selected]), Sense::Less)?);
    }
    ConstraintSet::new(d, 0, cs)
}

/// Region under orthogonal models: for each competitor `i`, the row
/// difference `upsilon_sel - upsilon_i` contracted with the monomials
/// `(Sigma_jj w_j^2, 2 Sigma_jk w_j w_k)` must be at least
/// `2(rho_b[sel] - rho_b[i])`. `competitors` indexes rows of `upsilon`;
/// `None` means all of them.
pub fn general_region_orthogonal(
    sigma: &SigmaEstimate,
    upsilon: &ExtendedSelectionMatrix,
    rho_b: &[f64],
    selected: usize,
    competitors: Option<&[usize]>,
) -> Result<ConstraintSet> {
    let (rows, _) = upsilon.shape();
    if upsilon.d() != sigma.dim() {
        return Err(LmmError::Dimension(format!("upsilon has {} diagonal slots, Sigma is {}", upsilon.d(), sigma.dim())));
    }
    if rho_b.len() != rows || selected >= rows {
        return Err(LmmError::Dimension("rho_b or selected index does not match upsilon".into()));
    }
    let all: Vec<usize> = (0..rows).collect();
    let comp = competitors.unwrap_or(&all);
    let sel = upsilon.row(selected);
    let mut cs = Vec::new();
    for &i in comp {
        if i == selected {
            continue;
        }
        if i >= rows {
            return Err(LmmError::InvalidArgument(format!("competitor {i} out of range")));
        }
        let coef: Vec<f64> = sel.iter().zip(upsilon.row(i)).map(|(&s, &o)| s as f64 - o as f64).collect();
        let q = upsilon.contract(&coef, &sigma.sigma);
        cs.push(QuadraticConstraint::quadratic(q, 2.0 * (rho_b[selected] - rho_b[i]), Sense::GreaterEqual)?);
    }
    ConstraintSet::new(sigma.dim(), 0, cs)
}

/// Regions on the stacked, per-model standardized estimators.
#[derive(Debug, Clone)]
pub struct StackedRegion {
    /// Region in `R^e` without the cross-model correlation.
    pub fixed: ConstraintSet,
    /// Region in `R^{e+r}` through `E^{1/2}`; the last `r` coordinates are free.
    pub mixed: ConstraintSet,
    /// `E_1^{1/2}`.
    pub e_sqrt: DMatrix<f64>,
    /// `(offset, len)` of each model's block.
    pub blocks: Vec<(usize, usize)>,
    /// Candidate indices of the blocks.
    pub models: Vec<usize>,
    /// Position of the selected model among `models`.
    pub selected: usize,
    /// The `A_1` block of each constraint.
    pub a1: Vec<DMatrix<f64>>,
}

impl StackedRegion {
    pub fn e(&self) -> usize {
        self.e_sqrt.nrows()
    }

    pub fn r(&self) -> usize {
        self.mixed.free_tail()
    }

    /// Full `A` matrix of constraint `c`, with the identity on the random effects.
    pub fn a_matrix(&self, c: usize) -> DMatrix<f64> {
        let e = self.e();
        let r = self.r();
        let mut a = DMatrix::zeros(e + r, e + r);
        a.view_mut((0, 0), (e, e)).copy_from(&self.a1[c]);
        a.view_mut((e, e), (r, r)).fill_with_identity();
        a
    }

    /// Selected model's block of a point of `fixed`.
    pub fn fixed_selected(&self, w: &[f64]) -> DVector<f64> {
        let (o, l) = self.blocks[self.selected];
        DVector::from_column_slice(&w[o..o + l])
    }

    /// Selected block of `E^{1/2} w` followed by the free tail, for a point of `mixed`.
    pub fn mixed_selected(&self, w: &[f64]) -> DVector<f64> {
        let e = self.e();
        let (o, l) = self.blocks[self.selected];
        let z = self.e_sqrt.rows(o, l) * DVector::from_column_slice(&w[..e]);
        let mut out = DVector::zeros(l + w.len() - e);
        out.rows_mut(0, l).copy_from(&z);
        out.rows_mut(l, w.len() - e).copy_from_slice(&w[e..]);
        out
    }
}

struct Stack {
    blocks: Vec<(usize, usize)>,
    /// `I^m(M)^{-1/2} J^c(M) I^m(M)^{-1/2}` per model.
    std_hess: Vec<DMatrix<f64>>,
    e_sqrt: DMatrix<f64>,
    e: usize,
}

fn stack(sigma: &SigmaEstimate, specs: &[&ModelSpec]) -> Result<Stack> {
    let d = sigma.dim();
    let mut blocks = Vec::new();
    let mut idx = Vec::new();
    let mut inv_sqrt = Vec::new();
    let mut std_hess = Vec::new();
    let mut off = 0;
    for s in specs {
        if s.p() != d {
            return Err(LmmError::Dimension(format!("model {} does not match Sigma of size {d}", s.label)));
        }
        let ix = s.indices();
        let im = sigma.info_block(&ix, &ix);
        let is = sym_pow(&im, true, "I^m(M)")?;
        let jc = sigma.hessian_block(&ix, &ix);
        let h = &is * jc * &is;
        std_hess.push((&h + h.transpose()) * 0.5);
        inv_sqrt.push(is);
        blocks.push((off, ix.len()));
        off += ix.len();
        idx.push(ix);
    }
    let e = off;
    let mut big = DMatrix::zeros(e, e);
    for (bi, &(oi, li)) in blocks.iter().enumerate() {
        for (bj, &(oj, lj)) in blocks.iter().enumerate() {
            let cross = sigma.info_block(&idx[bi], &idx[bj]);
            let blk = &inv_sqrt[bi] * cross * &inv_sqrt[bj];
            big.view_mut((oi, oj), (li, lj)).copy_from(&blk);
        }
    }
    let big = (&big + big.transpose()) * 0.5;
    let e_sqrt = sym_pow(&big, false, "E")?;
    Ok(Stack { blocks, std_hess, e_sqrt, e })
}

impl Stack {
    /// `(J^m_o)^{-1/2} B (J^m_o)^{-1/2}` with `+J^c` on block `plus` and `-J^c` on block `minus`.
    fn a1(&self, plus: usize, minus: usize) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.e, self.e);
        let (op, lp) = self.blocks[plus];
        let (om, lm) = self.blocks[minus];
        let mut vp = a.view_mut((op, op), (lp, lp));
        vp += &self.std_hess[plus];
        let mut vm = a.view_mut((om, om), (lm, lm));
        vm -= &self.std_hess[minus];
        a
    }

    fn sandwich(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        &self.e_sqrt * a * &self.e_sqrt
    }
}

/// Regions for correlated models. `competitors` lists the candidate indices
/// forming the stack (it must contain `selected`); every model contributes a
/// block of `|M|` coordinates and each competitor `i` gives
/// `w' A_i w >= 2(rho_b[sel] - rho_b[i])`.
pub fn general_region_nonorthogonal(
    sigma: &SigmaEstimate,
    specs: &[ModelSpec],
    rho_b: &[f64],
    selected: usize,
    competitors: Option<&[usize]>,
    r: usize,
) -> Result<StackedRegion> {
    if rho_b.len() != specs.len() || selected >= specs.len() {
        return Err(LmmError::Dimension("rho_b or selected index does not match the models".into()));
    }
    let all: Vec<usize> = (0..specs.len()).collect();
    let models: Vec<usize> = competitors.unwrap_or(&all).to_vec();
    let pos = models
        .iter()
        .position(|&m| m == selected)
        .ok_or_else(|| LmmError::InvalidArgument("selected model is not among the competitors".into()))?;
    let refs: Vec<&ModelSpec> = models.iter().map(|&m| &specs[m]).collect();
    let st = stack(sigma, &refs)?;
    let mut fixed = Vec::new();
    let mut mixed = Vec::new();
    let mut a1s = Vec::new();
    for (b, &m) in models.iter().enumerate() {
        if b == pos {
            continue;
        }
        let rhs = 2.0 * (rho_b[selected] - rho_b[m]);
        let a1 = st.a1(pos, b);
        fixed.push(QuadraticConstraint::quadratic(a1.clone(), rhs, Sense::GreaterEqual)?);
        mixed.push(QuadraticConstraint::quadratic(st.sandwich(&a1), rhs, Sense::GreaterEqual)?);
        a1s.push(a1);
    }
    let e = st.e;
    Ok(StackedRegion {
        fixed: ConstraintSet::new(e, 0, fixed)?,
        mixed: ConstraintSet::new(e + r, r, mixed)?,
        e_sqrt: st.e_sqrt,
        blocks: st.blocks,
        models,
        selected: pos,
        a1: a1s,
    })
}

/// Region built against a smallest model `M_s` nested in every candidate:
/// `w' E^{1/2}(A_{sel,s} - A_{M,s}) E^{1/2} w >= 2(rho_b[sel] - rho_b[M])`
/// for every `M != sel`. The identity blocks on the random effects cancel.
pub fn misspecified_region(sigma: &SigmaEstimate, specs: &[ModelSpec], rho_b: &[f64], selected: usize, r: usize) -> Result<StackedRegion> {
    if rho_b.len() != specs.len() || selected >= specs.len() {
        return Err(LmmError::Dimension("rho_b or selected index does not match the models".into()));
    }
    let smallest = (0..specs.len())
        .find(|&s| specs.iter().all(|o| specs[s].is_subset_of(o)))
        .ok_or_else(|| LmmError::InvalidArgument("no candidate is nested in all others".into()))?;
    let refs: Vec<&ModelSpec> = specs.iter().collect();
    let st = stack(sigma, &refs)?;
    let a_sel = st.a1(selected, smallest);
    let mut fixed = Vec::new();
    let mut mixed = Vec::new();
    let mut a1s = Vec::new();
    for m in 0..specs.len() {
        if m == selected {
            continue;
        }
        let a1 = &a_sel - st.a1(m, smallest);
        let rhs = 2.0 * (rho_b[selected] - rho_b[m]);
        fixed.push(QuadraticConstraint::quadratic(a1.clone(), rhs, Sense::GreaterEqual)?);
        mixed.push(QuadraticConstraint::quadratic(st.sandwich(&a1), rhs, Sense::GreaterEqual)?);
        a1s.push(a1);
    }
    let e = st.e;
    Ok(StackedRegion {
        fixed: ConstraintSet::new(e, 0, fixed)?,
        mixed: ConstraintSet::new(e + r, r, mixed)?,
        e_sqrt: st.e_sqrt,
        blocks: st.blocks,
        models: (0..specs.len()).collect(),
        selected,
        a1: a1s,
    })
}
