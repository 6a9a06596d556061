//! Standard multivariate normal draws truncated to a [`ConstraintSet`].

use crate::error::{LmmError, Result};
use crate::region::{ConstraintSet, QuadraticConstraint, Sense};
use crate::rng::stream_rng;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerMethod {
    Rejection,
    /// Hit-and-run with exact one-dimensional truncated normal moves.
    Chain,
    /// Rejection unless the probed acceptance is below [`AUTO_CHAIN_THRESHOLD`].
    Auto,
}

/// Acceptance below which `Auto` switches to the chain.
pub const AUTO_CHAIN_THRESHOLD: f64 = 1e-3;
const AUTO_PROBES: usize = 20_000;
const START_PROBES: usize = 20_000;
const START_RAYS: usize = 2000;
const STUCK_LIMIT: usize = 1000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub b: usize,
    pub seed: u64,
    pub method: SamplerMethod,
    pub burn_in: usize,
    pub thinning: usize,
    /// Total proposal budget of the rejection sampler.
    pub max_proposals: usize,
    /// Independent substreams; the batch depends on this but not on the thread count.
    pub streams: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            b: 10_000,
            seed: 0,
            method: SamplerMethod::Auto,
            burn_in: 1000,
            thinning: 5,
            max_proposals: 50_000_000,
            streams: 8,
        }
    }
}

impl SamplerConfig {
    pub fn new(b: usize, seed: u64) -> Self {
        SamplerConfig { b, seed, ..Default::default() }
    }

    pub fn with_method(mut self, method: SamplerMethod) -> Self {
        self.method = method;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(LmmError::InvalidArgument("B must be at least 1".into()));
        }
        if self.max_proposals < self.b {
            return Err(LmmError::InvalidArgument("max_proposals must be at least B".into()));
        }
        if self.thinning == 0 || self.streams == 0 {
            return Err(LmmError::InvalidArgument("thinning and streams must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SampleBatch {
    /// `B x dim`.
    pub draws: DMatrix<f64>,
    /// Rejection only.
    pub acceptance_rate: Option<f64>,
    /// Chain only: fraction of steps that moved.
    pub move_rate: Option<f64>,
    pub seed: u64,
    pub method: SamplerMethod,
}

impl SampleBatch {
    pub fn b(&self) -> usize {
        self.draws.nrows()
    }

    pub fn dim(&self) -> usize {
        self.draws.ncols()
    }

    /// CSV with a `#` metadata line, then `w1..wd`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(
            f,
            "# seed={} method={:?} acceptance={} moves={}",
            self.seed,
            self.method,
            self.acceptance_rate.map_or("NA".into(), |v| v.to_string()),
            self.move_rate.map_or("NA".into(), |v| v.to_string())
        )?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record((1..=self.dim()).map(|j| format!("w{j}")))?;
        for i in 0..self.b() {
            w.write_record(self.draws.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the draws of [`SampleBatch::write_csv`].
    pub fn read_csv_draws(path: &Path) -> Result<DMatrix<f64>> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| LmmError::Parse { line: i + 3, msg: format!("bad number {s:?}") }))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let d = rows.first().map_or(0, |r| r.len());
        Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// Fraction of `n_probe` (at least 100) standard normal draws inside `region`.
pub fn acceptance_estimate(region: &ConstraintSet, n_probe: usize, seed: u64) -> f64 {
    if region.is_empty() {
        return 1.0;
    }
    let n_probe = n_probe.max(100);
    let dc = region.constrained_dim();
    let streams = 8usize;
    let hits: usize = (0..streams)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(seed ^ 0xACCE_5700, s as u64);
            let count = n_probe / streams + usize::from(s < n_probe % streams);
            let mut w = vec![0.0; region.dim()];
            let mut hits = 0;
            for _ in 0..count {
                normal_vec(&mut rng, &mut w[..dc]);
                if region.contains(&w) {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    hits as f64 / n_probe as f64
}

/// `B` draws of `N(0, I_dim)` conditioned on `region`.
pub fn sample_truncated(region: &ConstraintSet, cfg: &SamplerConfig) -> Result<SampleBatch> {
    cfg.validate()?;
    let method = match cfg.method {
        SamplerMethod::Auto => {
            let acc = acceptance_estimate(region, AUTO_PROBES, cfg.seed);
            if acc < AUTO_CHAIN_THRESHOLD {
                SamplerMethod::Chain
            } else {
                SamplerMethod::Rejection
            }
        }
        m => m,
    };
    match method {
        SamplerMethod::Chain => chain(region, cfg),
        _ => rejection(region, cfg),
    }
}

/// Draws on `region_fixed` followed by `r` independent standard normal
/// columns from a separate stream.
pub fn sample_posi_joint(region_fixed: &ConstraintSet, r: usize, cfg: &SamplerConfig) -> Result<SampleBatch> {
    let head = sample_truncated(region_fixed, cfg)?;
    if r == 0 {
        return Ok(head);
    }
    let df = head.dim();
    let b = head.b();
    let mut draws = DMatrix::zeros(b, df + r);
    draws.columns_mut(0, df).copy_from(&head.draws);
    let per = b.div_ceil(cfg.streams);
    let tails: Vec<Vec<f64>> = (0..cfg.streams)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(cfg.seed ^ 0x7A11_F4EE, s as u64);
            let rows = per.min(b.saturating_sub(s * per));
            let mut v = vec![0.0; rows * r];
            normal_vec(&mut rng, &mut v);
            v
        })
        .collect();
    for (s, v) in tails.iter().enumerate() {
        for (k, chunk) in v.chunks(r).enumerate() {
            let i = s * per + k;
            for (j, &x) in chunk.iter().enumerate() {
                draws[(i, df + j)] = x;
            }
        }
    }
    Ok(SampleBatch { draws, ..head })
}

fn split_counts(b: usize, streams: usize) -> Vec<usize> {
    (0..streams).map(|s| b / streams + usize::from(s < b % streams)).collect()
}

fn assemble(parts: Vec<Vec<f64>>, b: usize, dim: usize) -> DMatrix<f64> {
    let mut draws = DMatrix::zeros(b, dim);
    let mut i = 0;
    for part in parts {
        for row in part.chunks(dim) {
            for (j, &v) in row.iter().enumerate() {
                draws[(i, j)] = v;
            }
            i += 1;
        }
    }
    draws
}

fn rejection(region: &ConstraintSet, cfg: &SamplerConfig) -> Result<SampleBatch> {
    let dim = region.dim();
    let counts = split_counts(cfg.b, cfg.streams);
    let budget = cfg.max_proposals / cfg.streams;
    let parts: Vec<Result<(Vec<f64>, usize)>> = counts
        .par_iter()
        .enumerate()
        .map(|(s, &want)| {
            let mut rng = stream_rng(cfg.seed, s as u64);
            let mut out = Vec::with_capacity(want * dim);
            let mut w = vec![0.0; dim];
            let mut tried = 0usize;
            let mut got = 0usize;
            while got < want {
                if tried >= budget.max(want) {
                    return Err(LmmError::Sampler(format!(
                        "rejection budget of {} proposals exhausted with acceptance {:.2e}; use the chain method",
                        cfg.max_proposals,
                        got as f64 / tried as f64
                    )));
                }
                normal_vec(&mut rng, &mut w);
                tried += 1;
                if region.contains(&w) {
                    out.extend_from_slice(&w);
                    got += 1;
                }
            }
            Ok((out, tried))
        })
        .collect();
    let mut draws = Vec::with_capacity(parts.len());
    let mut tried = 0;
    for p in parts {
        let (d, t) = p?;
        draws.push(d);
        tried += t;
    }
    Ok(SampleBatch {
        draws: assemble(draws, cfg.b, dim),
        acceptance_rate: Some(cfg.b as f64 / tried as f64),
        move_rate: None,
        seed: cfg.seed,
        method: SamplerMethod::Rejection,
    })
}

fn chain(region: &ConstraintSet, cfg: &SamplerConfig) -> Result<SampleBatch> {
    let dim = region.dim();
    let dc = region.constrained_dim();
    let counts = split_counts(cfg.b, cfg.streams);
    let parts: Vec<Result<(Vec<f64>, usize, usize)>> = counts
        .par_iter()
        .enumerate()
        .map(|(s, &want)| {
            let mut rng = stream_rng(cfg.seed, s as u64);
            let mut x = start_point(region, &mut rng)?;
            let mut out = Vec::with_capacity(want * dim);
            let mut dir = vec![0.0; dc];
            let (mut steps, mut moves, mut stuck) = (0usize, 0usize, 0usize);
            let total = cfg.burn_in + want * cfg.thinning;
            for it in 0..total {
                normal_vec(&mut rng, &mut dir);
                let nrm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                dir.iter_mut().for_each(|v| *v /= nrm);
                steps += 1;
                if line_move(region, &mut x, &dir, &mut rng) {
                    moves += 1;
                    stuck = 0;
                } else {
                    stuck += 1;
                    if stuck >= STUCK_LIMIT {
                        return Err(LmmError::Sampler(format!("chain did not move in {STUCK_LIMIT} steps")));
                    }
                }
                if it >= cfg.burn_in && (it - cfg.burn_in + 1) % cfg.thinning == 0 {
                    out.extend_from_slice(&x[..dc]);
                    for _ in dc..dim {
                        out.push(rng.sample(StandardNormal));
                    }
                }
            }
            Ok((out, steps, moves))
        })
        .collect();
    let mut draws = Vec::new();
    let (mut steps, mut moves) = (0, 0);
    for p in parts {
        let (d, s, m) = p?;
        draws.push(d);
        steps += s;
        moves += m;
    }
    Ok(SampleBatch {
        draws: assemble(draws, cfg.b, dim),
        acceptance_rate: None,
        move_rate: Some(moves as f64 / steps.max(1) as f64),
        seed: cfg.seed,
        method: SamplerMethod::Chain,
    })
}

fn start_point(region: &ConstraintSet, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut w = vec![0.0; region.dim()];
    let dc = region.constrained_dim();
    for _ in 0..START_PROBES {
        normal_vec(rng, &mut w[..dc]);
        if region.contains(&w) {
            return Ok(w);
        }
    }
    // far regions: the feasible point nearest the origin along axes and random rays
    let origin = vec![0.0; dc];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut dir = vec![0.0; dc];
    for k in 0..2 * dc + START_RAYS {
        if k < 2 * dc {
            dir.fill(0.0);
            dir[k / 2] = if k % 2 == 0 { 1.0 } else { -1.0 };
        } else {
            normal_vec(rng, &mut dir);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v /= norm);
        }
        let mut feasible = vec![(f64::NEG_INFINITY, f64::INFINITY)];
        for c in region.constraints() {
            feasible = intersect(&feasible, &line_set(c, &origin, &dir));
        }
        for &(lo, hi) in &feasible {
            let t = if lo <= 0.0 && hi >= 0.0 {
                0.0
            } else if lo > 0.0 {
                lo + (1e-9 * (1.0 + lo)).min(0.5 * (hi - lo))
            } else {
                hi - (1e-9 * (1.0 - hi)).min(0.5 * (hi - lo))
            };
            if best.as_ref().is_none_or(|(b, _)| t.abs() < *b) {
                w[..dc].iter_mut().zip(&dir).for_each(|(x, d)| *x = t * d);
                if region.contains(&w) {
                    best = Some((t.abs(), w.clone()));
                }
            }
        }
    }
    best.map(|(_, w)| w).ok_or_else(|| {
        LmmError::Sampler(format!("no starting point found in {START_PROBES} normal probes and {} rays", 2 * dc + START_RAYS))
    })
}

/// One hit-and-run step along the unit direction `dir` of the constrained block.
fn line_move(region: &ConstraintSet, x: &mut [f64], dir: &[f64], rng: &mut ChaCha8Rng) -> bool {
    let dc = dir.len();
    let mut feasible = vec![(f64::NEG_INFINITY, f64::INFINITY)];
    for c in region.constraints() {
        let set = line_set(c, &x[..dc], dir);
        feasible = intersect(&feasible, &set);
        if feasible.is_empty() {
            return false;
        }
    }
    // t ~ N(mu, 1) restricted to the feasible set, mu = -dir'x
    let mu = -dir.iter().zip(x.iter()).map(|(d, v)| d * v).sum::<f64>();
    let shifted: Vec<(f64, f64)> = feasible.iter().map(|&(a, b)| (a - mu, b - mu)).collect();
    let Some(s) = sample_union(&shifted, rng) else { return false };
    let t = s + mu;
    let mut cand: Vec<f64> = x.to_vec();
    for j in 0..dc {
        cand[j] += t * dir[j];
    }
    if region.contains(&cand) {
        x.copy_from_slice(&cand);
        true
    } else {
        false
    }
}

/// `{t : c(x + t d) holds}` as sorted disjoint intervals.
fn line_set(c: &QuadraticConstraint, x: &[f64], d: &[f64]) -> Vec<(f64, f64)> {
    let dc = d.len();
    let qd: Vec<f64> = (0..dc).map(|j| (0..dc).map(|k| c.q[(j, k)] * d[k]).sum()).collect();
    let mut a: f64 = d.iter().zip(&qd).map(|(u, v)| u * v).sum();
    let mut b: f64 = 2.0 * x.iter().zip(&qd).map(|(u, v)| u * v).sum::<f64>();
    if let Some(l) = &c.linear {
        b += l.iter().zip(d).map(|(u, v)| u * v).sum::<f64>();
    }
    let mut k = c.value(x) - c.rhs;
    // `Less` is the complement of `>=`; flip to f(t) >= 0 vs f(t) < 0
    let want_nonneg = c.sense == Sense::GreaterEqual;
    if !want_nonneg {
        a = -a;
        b = -b;
        k = -k;
    }
    // now the set is {f >= 0} (up to the null boundary) with f = a t^2 + b t + k
    let scale = a.abs() + b.abs() + k.abs();
    if scale == 0.0 {
        return vec![(f64::NEG_INFINITY, f64::INFINITY)];
    }
    if a.abs() <= 1e-14 * scale {
        if b.abs() <= 1e-14 * scale {
            return if k >= 0.0 { vec![(f64::NEG_INFINITY, f64::INFINITY)] } else { vec![] };
        }
        let root = -k / b;
        return if b > 0.0 { vec![(root, f64::INFINITY)] } else { vec![(f64::NEG_INFINITY, root)] };
    }
    let disc = b * b - 4.0 * a * k;
    if disc <= 0.0 {
        return if a > 0.0 { vec![(f64::NEG_INFINITY, f64::INFINITY)] } else { vec![] };
    }
    let sq = disc.sqrt();
    let qq = -0.5 * (b + b.signum() * sq);
    let (mut r1, mut r2) = (qq / a, if qq != 0.0 { k / qq } else { 0.0 });
    if r1 > r2 {
        std::mem::swap(&mut r1, &mut r2);
    }
    if a > 0.0 {
        vec![(f64::NEG_INFINITY, r1), (r2, f64::INFINITY)]
    } else {
        vec![(r1, r2)]
    }
}

fn intersect(u: &[(f64, f64)], v: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(a1, b1) in u {
        for &(a2, b2) in v {
            let (lo, hi) = (a1.max(a2), b1.min(b2));
            if lo < hi {
                out.push((lo, hi));
            }
        }
    }
    out.sort_by(|p, q| p.0.total_cmp(&q.0));
    out
}

/// `log P(Z > x)` for a standard normal `Z`.
fn log_sf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    if x < 25.0 {
        (0.5 * erfc(x / std::f64::consts::SQRT_2)).ln()
    } else {
        let x2 = x * x;
        -0.5 * x2 - (x * (2.0 * std::f64::consts::PI).sqrt()).ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

fn sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn inv_sf(q: f64) -> f64 {
    std::f64::consts::SQRT_2 * erfc_inv(2.0 * q)
}

/// `log P(lo < Z < hi)`.
fn log_mass(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 {
        let (a, b) = (log_sf(lo), log_sf(hi));
        a + (-(b - a).exp()).ln_1p()
    } else if hi <= 0.0 {
        log_mass(-hi, -lo)
    } else {
        (1.0 - sf(hi) - sf(-lo)).ln()
    }
}

fn sample_union(ints: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Option<f64> {
    let logs: Vec<f64> = ints.iter().map(|&(a, b)| log_mass(a, b)).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return None;
    }
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut pick = ints.len() - 1;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            pick = i;
            break;
        }
        u -= wi;
    }
    let (lo, hi) = ints[pick];
    Some(sample_interval(lo, hi, rng))
}

/// Standard normal restricted to `(lo, hi)`.
pub(crate) fn sample_interval(lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    if hi <= 0.0 {
        return -sample_interval(-hi, -lo, rng);
    }
    if lo >= 5.0 {
        return tail_sample(lo, hi, rng);
    }
    let u: f64 = rng.random();
    let s = if lo >= 0.0 {
        let (a, b) = (sf(lo), sf(hi));
        inv_sf(a - u * (a - b))
    } else {
        let (a, b) = (sf(-lo), sf(-hi));
        // Phi(lo) = sf(-lo); sample the cdf between Phi(lo) and Phi(hi)
        let p = a + u * (b - a);
        -inv_sf(p)
    };
    s.clamp(lo, hi)
}

/// Exponential-proposal rejection for `lo >= 5`.
fn tail_sample(lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    let alpha = 0.5 * (lo + (lo * lo + 4.0).sqrt());
    if hi - lo < 1.0 / alpha {
        loop {
            let z = lo + rng.random::<f64>() * (hi - lo);
            if rng.random::<f64>() <= (0.5 * (lo * lo - z * z)).exp() {
                return z;
            }
        }
    }
    let exp = Exp::new(alpha).expect("positive rate");
    loop {
        let z = lo + rng.sample(exp);
        if z < hi && rng.random::<f64>() <= (-0.5 * (z - alpha) * (z - alpha)).exp() {
            return z;
        }
    }
}
