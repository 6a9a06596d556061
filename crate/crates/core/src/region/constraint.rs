use crate::error::{LmmError, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sense {
    /// `value < rhs`
    Less,
    /// `value >= rhs`
    GreaterEqual,
}

impl Sense {
    fn token(self) -> &'static str {
        match self {
            Sense::Less => "lt",
            Sense::GreaterEqual => "ge",
        }
    }
}

/// `w'Qw + l'w {<, >=} rhs` on the constrained block of a region.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticConstraint {
    pub q: DMatrix<f64>,
    pub linear: Option<DVector<f64>>,
    pub rhs: f64,
    pub sense: Sense,
}

impl QuadraticConstraint {
    /// Symmetrizes `q`.
    pub fn quadratic(q: DMatrix<f64>, rhs: f64, sense: Sense) -> Result<Self> {
        if q.nrows() != q.ncols() {
            return Err(LmmError::Dimension("constraint matrix is not square".into()));
        }
        let q = (&q + q.transpose()) * 0.5;
        Ok(QuadraticConstraint { q, linear: None, rhs, sense })
    }

    /// `l'w {<, >=} rhs`.
    pub fn linear(l: DVector<f64>, rhs: f64, sense: Sense) -> Self {
        let d = l.len();
        QuadraticConstraint { q: DMatrix::zeros(d, d), linear: Some(l), rhs, sense }
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    /// `w'Qw + l'w` over the first `dim()` entries of `w`.
    pub fn value(&self, w: &[f64]) -> f64 {
        let d = self.dim();
        let mut v = 0.0;
        for j in 0..d {
            let wj = w[j];
            if wj == 0.0 {
                continue;
            }
            let col = self.q.column(j);
            let mut s = col[j] * wj;
            for k in 0..j {
                s += 2.0 * col[k] * w[k];
            }
            v += s * wj;
        }
        if let Some(l) = &self.linear {
            for j in 0..d {
                v += l[j] * w[j];
            }
        }
        v
    }

    pub fn satisfied(&self, w: &[f64]) -> bool {
        let v = self.value(w);
        match self.sense {
            Sense::Less => v < self.rhs,
            Sense::GreaterEqual => v >= self.rhs,
        }
    }

    /// The same set written as `>=`; the boundary of a strict constraint is
    /// a null set for every distribution used here.
    pub fn as_greater_equal(&self) -> Self {
        match self.sense {
            Sense::GreaterEqual => self.clone(),
            Sense::Less => QuadraticConstraint {
                q: -&self.q,
                linear: self.linear.as_ref().map(|l| -l),
                rhs: -self.rhs,
                sense: Sense::GreaterEqual,
            },
        }
    }

    fn key(&self) -> Vec<f64> {
        let mut k = vec![self.rhs];
        k.extend(self.q.iter().copied());
        if let Some(l) = &self.linear {
            k.extend(l.iter().copied());
        }
        k
    }
}

/// Conjunction of constraints on `R^dim`; the last `free_tail` coordinates
/// are never constrained.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    dim: usize,
    free_tail: usize,
    constraints: Vec<QuadraticConstraint>,
}

impl ConstraintSet {
    pub fn new(dim: usize, free_tail: usize, constraints: Vec<QuadraticConstraint>) -> Result<Self> {
        if free_tail > dim {
            return Err(LmmError::Dimension("free tail exceeds dimension".into()));
        }
        let dc = dim - free_tail;
        for (i, c) in constraints.iter().enumerate() {
            if c.dim() != dc || c.linear.as_ref().is_some_and(|l| l.len() != dc) {
                return Err(LmmError::Dimension(format!(
                    "constraint {i} acts on {} coordinates, region constrains {dc}",
                    c.dim()
                )));
            }
            if !c.rhs.is_finite() || c.q.iter().any(|v| !v.is_finite()) {
                return Err(LmmError::Region(format!("constraint {i} has non-finite entries")));
            }
        }
        Ok(ConstraintSet { dim, free_tail, constraints })
    }

    pub fn unconstrained(dim: usize) -> Self {
        ConstraintSet { dim, free_tail: 0, constraints: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn free_tail(&self) -> usize {
        self.free_tail
    }

    /// Number of leading coordinates the constraints act on.
    pub fn constrained_dim(&self) -> usize {
        self.dim - self.free_tail
    }

    pub fn constraints(&self) -> &[QuadraticConstraint] {
        &self.constraints
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// Appends `r` unconstrained coordinates.
    pub fn with_free_tail(&self, r: usize) -> Self {
        ConstraintSet { dim: self.dim + r, free_tail: self.free_tail + r, constraints: self.constraints.clone() }
    }

    /// Membership test; panics if `w` has the wrong length.
    pub fn contains(&self, w: &[f64]) -> bool {
        assert_eq!(w.len(), self.dim, "point has length {}, region dimension is {}", w.len(), self.dim);
        self.constraints.iter().all(|c| c.satisfied(w))
    }

    /// All constraints as `>=`, sorted; two sets describing the same
    /// constraints in a different order or orientation compare equal.
    pub fn canonical(&self) -> Self {
        let mut cs: Vec<QuadraticConstraint> = self.constraints.iter().map(|c| c.as_greater_equal()).collect();
        cs.sort_by(|a, b| {
            let (ka, kb) = (a.key(), b.key());
            ka.iter().zip(&kb).map(|(x, y)| x.total_cmp(y)).find(|o| *o != Ordering::Equal).unwrap_or(Ordering::Equal)
        });
        ConstraintSet { dim: self.dim, free_tail: self.free_tail, constraints: cs }
    }

    /// Entrywise comparison of canonical forms.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        let (a, b) = (self.canonical(), other.canonical());
        if a.dim != b.dim || a.free_tail != b.free_tail || a.len() != b.len() {
            return false;
        }
        a.constraints.iter().zip(&b.constraints).all(|(x, y)| {
            let lin_ok = match (&x.linear, &y.linear) {
                (None, None) => true,
                (Some(l1), Some(l2)) => (l1 - l2).amax() <= tol,
                (Some(l), None) | (None, Some(l)) => l.amax() <= tol,
            };
            (x.rhs - y.rhs).abs() <= tol && (&x.q - &y.q).amax() <= tol && lin_ok
        })
    }

    /// Plain-text listing, readable by [`ConstraintSet::from_listing`].
    pub fn to_listing(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "region dim {} free {} constraints {}", self.dim, self.free_tail, self.len());
        for c in &self.constraints {
            let _ = writeln!(s, "constraint {} {:e}", c.sense.token(), c.rhs);
            for r in 0..c.dim() {
                let row: Vec<String> = c.q.row(r).iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(s, "q {}", row.join(" "));
            }
            if let Some(l) = &c.linear {
                let row: Vec<String> = l.iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(s, "l {}", row.join(" "));
            }
        }
        s
    }

    pub fn from_listing(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |line: usize, msg: &str| LmmError::Parse { line: line + 1, msg: msg.to_string() };
        let (n0, head) = lines.next().ok_or_else(|| bad(0, "empty listing"))?;
        let h: Vec<&str> = head.split_whitespace().collect();
        if h.len() != 7 || h[0] != "region" || h[1] != "dim" || h[3] != "free" || h[5] != "constraints" {
            return Err(bad(n0, "expected 'region dim D free R constraints N'"));
        }
        let num = |s: &str, line: usize| s.parse::<usize>().map_err(|_| bad(line, "bad integer"));
        let dim = num(h[2], n0)?;
        let free = num(h[4], n0)?;
        let count = num(h[6], n0)?;
        let dc = dim.checked_sub(free).ok_or_else(|| bad(n0, "free tail exceeds dimension"))?;
        let floats = |s: &str, line: usize| -> Result<Vec<f64>> {
            s.split_whitespace().map(|t| t.parse::<f64>().map_err(|_| bad(line, "bad number"))).collect()
        };
        let mut out = Vec::with_capacity(count);
        let mut pending: Vec<(usize, &str)> = lines.collect();
        pending.reverse();
        for _ in 0..count {
            let (ln, l) = pending.pop().ok_or_else(|| bad(n0, "fewer constraints than declared"))?;
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 3 || t[0] != "constraint" {
                return Err(bad(ln, "expected 'constraint lt|ge RHS'"));
            }
            let sense = match t[1] {
                "lt" => Sense::Less,
                "ge" => Sense::GreaterEqual,
                _ => return Err(bad(ln, "sense must be lt or ge")),
            };
            let rhs = t[2].parse::<f64>().map_err(|_| bad(ln, "bad rhs"))?;
            let mut q = DMatrix::zeros(dc, dc);
            for r in 0..dc {
                let (ln, l) = pending.pop().ok_or_else(|| bad(ln, "missing matrix row"))?;
                let row = l.strip_prefix("q ").ok_or_else(|| bad(ln, "expected matrix row"))?;
                let vals = floats(row, ln)?;
                if vals.len() != dc {
                    return Err(bad(ln, "matrix row has wrong length"));
                }
                for (c, v) in vals.into_iter().enumerate() {
                    q[(r, c)] = v;
                }
            }
            let mut linear = None;
            if let Some((ln, l)) = pending.last().copied() {
                if let Some(row) = l.strip_prefix("l ") {
                    pending.pop();
                    let vals = floats(row, ln)?;
                    if vals.len() != dc {
                        return Err(bad(ln, "linear row has wrong length"));
                    }
                    linear = Some(DVector::from_vec(vals));
                }
            }
            out.push(QuadraticConstraint { q, linear, rhs, sense });
        }
        if let Some((ln, _)) = pending.pop() {
            return Err(bad(ln, "trailing content"));
        }
        ConstraintSet::new(dim, free, out)
    }
}
