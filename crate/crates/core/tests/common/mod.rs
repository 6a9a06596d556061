#![allow(dead_code)]
//! Dense reference computations used as test oracles.

use nalgebra::{DMatrix, DVector};
use postcaic_core::{ClusteredDataset, ModelSpec, Variance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn nerm_data(seed: u64, n: usize, mi: usize, p: usize, su: f64, se: f64) -> ClusteredDataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta: Vec<f64> = (0..p).map(|j| [2.0, -1.0, 1.5, 0.5, 0.0, 0.0][j % 6]).collect();
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    for _ in 0..n {
        let mut x = DMatrix::zeros(mi, p);
        let u: f64 = rng.sample::<f64, _>(StandardNormal) * su.sqrt();
        let mut y = DVector::zeros(mi);
        for r in 0..mi {
            x[(r, 0)] = 1.0;
            for c in 1..p {
                x[(r, c)] = rng.sample(StandardNormal);
            }
            let e: f64 = rng.sample::<f64, _>(StandardNormal) * se.sqrt();
            y[r] = (0..p).map(|c| x[(r, c)] * beta[c]).sum::<f64>() + u + e;
        }
        ys.push(y);
        xs.push(x);
    }
    ClusteredDataset::nested_error(ys, xs, 1).unwrap()
}

pub struct Dense {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub s: f64,
}

impl Dense {
    pub fn new(data: &ClusteredDataset<f64>, spec: &ModelSpec, theta: &Variance) -> Self {
        let (y, x, z) = data.dense();
        let x = x.select_columns(&spec.indices());
        let n = data.n();
        let gq = theta.g();
        let q = gq.nrows();
        let mut g = DMatrix::zeros(n * q, n * q);
        for i in 0..n {
            g.view_mut((i * q, i * q), (q, q)).copy_from(&gq);
        }
        Dense { y, x, z, g, s: theta.r_scale() }
    }
    pub fn m(&self) -> usize {
        self.y.len()
    }
    pub fn v(&self) -> DMatrix<f64> {
        &self.z * &self.g * self.z.transpose() + DMatrix::identity(self.m(), self.m()) * self.s
    }
    pub fn vinv(&self) -> DMatrix<f64> {
        self.v().try_inverse().unwrap()
    }
    pub fn gls(&self) -> DVector<f64> {
        let vi = self.vinv();
        let a = self.x.transpose() * &vi * &self.x;
        a.try_inverse().unwrap() * self.x.transpose() * vi * &self.y
    }
    pub fn henderson(&self) -> (DVector<f64>, DVector<f64>) {
        let p = self.x.ncols();
        let r = self.z.ncols();
        let mut c = DMatrix::zeros(p + r, p + r);
        let si = 1.0 / self.s;
        c.view_mut((0, 0), (p, p)).copy_from(&(self.x.transpose() * &self.x * si));
        let xz = self.x.transpose() * &self.z * si;
        c.view_mut((0, p), (p, r)).copy_from(&xz);
        c.view_mut((p, 0), (r, p)).copy_from(&xz.transpose());
        let zz = self.z.transpose() * &self.z * si + self.g.clone().try_inverse().unwrap();
        c.view_mut((p, p), (r, r)).copy_from(&zz);
        let mut rhs = DVector::zeros(p + r);
        rhs.rows_mut(0, p).copy_from(&(self.x.transpose() * &self.y * si));
        rhs.rows_mut(p, r).copy_from(&(self.z.transpose() * &self.y * si));
        let sol = c.try_inverse().unwrap() * rhs;
        (sol.rows(0, p).into_owned(), sol.rows(p, r).into_owned())
    }
    /// Trace of the hat matrix of `X beta~ + Z u~` in `y`.
    pub fn dof(&self) -> f64 {
        let vi = self.vinv();
        let a = (self.x.transpose() * &vi * &self.x).try_inverse().unwrap();
        let m = self.m();
        let pgls = &self.x * &a * self.x.transpose() * &vi;
        let id = DMatrix::<f64>::identity(m, m);
        let h = &pgls + &self.z * &self.g * self.z.transpose() * &vi * (id - &pgls);
        h.trace()
    }
    pub fn loglik(&self, beta: &DVector<f64>) -> f64 {
        let v = self.v();
        let r = &self.y - &self.x * beta;
        let ld = v.clone().cholesky().unwrap().l().diagonal().map(|d| d.ln()).sum() * 2.0;
        let q = r.dot(&(v.try_inverse().unwrap() * &r));
        -0.5 * (self.m() as f64 * (2.0 * std::f64::consts::PI).ln() + ld + q)
    }
    /// Minus twice the restricted log-likelihood, constants included.
    pub fn reml_objective(&self) -> f64 {
        let vi = self.vinv();
        let a = self.x.transpose() * &vi * &self.x;
        let ld_a = a.clone().cholesky().unwrap().l().diagonal().map(|d| d.ln()).sum() * 2.0;
        let beta = self.gls();
        let p = self.x.ncols() as f64;
        -2.0 * self.loglik(&beta) - p * (2.0 * std::f64::consts::PI).ln() + ld_a
    }
    /// Full `K` matrix on the model columns and all random effects.
    pub fn k(&self) -> DMatrix<f64> {
        let p = self.x.ncols();
        let r = self.z.ncols();
        let si = 1.0 / self.s;
        let mut c = DMatrix::zeros(p + r, p + r);
        c.view_mut((0, 0), (p, p)).copy_from(&(self.x.transpose() * &self.x * si));
        let xz = self.x.transpose() * &self.z * si;
        c.view_mut((0, p), (p, r)).copy_from(&xz);
        c.view_mut((p, 0), (r, p)).copy_from(&xz.transpose());
        let zz = self.z.transpose() * &self.z * si + self.g.clone().try_inverse().unwrap();
        c.view_mut((p, p), (r, r)).copy_from(&zz);
        c
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn max_rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = b.amax().max(1e-300);
    (a - b).amax() / scale
}

/// `A A' / d + 0.5 I` with standard normal `A`.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.5
}

pub fn normal_rows(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

/// CDF of the standard normal restricted to `{x : keep(x)}`, by Simpson's rule on `[-12, 12]`.
pub struct TruncatedCdf {
    pub grid: Vec<f64>,
    pub cdf: Vec<f64>,
}

impl TruncatedCdf {
    pub fn new(keep: impl Fn(f64) -> bool) -> Self {
        let steps = 240_000;
        let h = 24.0 / steps as f64;
        let dens = |x: f64| if keep(x) { (-0.5 * x * x).exp() } else { 0.0 };
        let mut grid = vec![-12.0];
        let mut cdf = vec![0.0];
        let mut acc = 0.0;
        for i in 0..steps / 2 {
            let a = -12.0 + 2.0 * i as f64 * h;
            acc += h / 3.0 * (dens(a) + 4.0 * dens(a + h) + dens(a + 2.0 * h));
            grid.push(a + 2.0 * h);
            cdf.push(acc);
        }
        for v in &mut cdf {
            *v /= acc;
        }
        TruncatedCdf { grid, cdf }
    }

    pub fn at(&self, x: f64) -> f64 {
        if x <= self.grid[0] {
            return 0.0;
        }
        let h = self.grid[1] - self.grid[0];
        let i = (((x - self.grid[0]) / h) as usize).min(self.grid.len() - 2);
        let t = (x - self.grid[i]) / h;
        self.cdf[i] + t * (self.cdf[i + 1] - self.cdf[i])
    }

    /// Kolmogorov-Smirnov distance of a sample to this CDF.
    pub fn ks(&self, sample: &[f64]) -> f64 {
        let mut s = sample.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        let n = s.len() as f64;
        s.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = self.at(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}
