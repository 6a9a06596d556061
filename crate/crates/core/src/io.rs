//! Clustered survey CSV input, the log-shift transform and interval reports.

use crate::ci::{IntervalMethod, IntervalResult, McMeta};
use crate::dataset::{Cluster, ClusteredDataset, ModelSpec};
use crate::error::{LmmError, Result};
use crate::lmm::{fit_model, FitOptions};
use crate::variance::VarianceStructure;
use crate::caic::BiasMethod;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub cluster_id: String,
    pub y: f64,
    pub x: Vec<f64>,
    pub weight: f64,
}

/// Column layout of a survey CSV.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub cluster: String,
    pub response: String,
    /// `None`: every other column except the weight.
    pub covariates: Option<Vec<String>>,
    /// Used when present in the header; weights default to 1.
    pub weight: String,
    /// Prepend a column of ones.
    pub add_intercept: bool,
    /// Leading columns forced into every model (counting the intercept).
    pub forced: usize,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            cluster: "cluster_id".into(),
            response: "y".into(),
            covariates: None,
            weight: "weight".into(),
            add_intercept: true,
            forced: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurveyData {
    pub data: ClusteredDataset<f64>,
    pub cluster_ids: Vec<String>,
    /// Records per cluster in file order; `x` excludes the added intercept.
    pub records: Vec<Vec<SurveyRecord>>,
    /// Covariate names in column order of `data`.
    pub columns: Vec<String>,
}

impl SurveyData {
    pub fn weights(&self) -> Vec<DVector<f64>> {
        self.records.iter().map(|g| DVector::from_iterator(g.len(), g.iter().map(|r| r.weight))).collect()
    }
}

fn parse_err(line: u64, msg: impl Into<String>) -> LmmError {
    LmmError::Parse { line: line as usize, msg: msg.into() }
}

/// Reads a survey CSV; clusters are ordered by first appearance.
pub fn load_clustered_csv(path: &Path, schema: &CsvSchema) -> Result<SurveyData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let ci = find(&schema.cluster).ok_or_else(|| parse_err(1, format!("missing column {:?}", schema.cluster)))?;
    let yi = find(&schema.response).ok_or_else(|| parse_err(1, format!("missing column {:?}", schema.response)))?;
    let wi = find(&schema.weight);
    let xnames: Vec<String> = match &schema.covariates {
        Some(c) => c.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != ci && *i != yi && Some(*i) != wi)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let xi: Vec<usize> = xnames
        .iter()
        .map(|n| find(n).ok_or_else(|| parse_err(1, format!("missing column {n:?}"))))
        .collect::<Result<_>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<SurveyRecord>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize, what: &str| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            if s.is_empty() {
                return Err(parse_err(line, format!("missing value for {what}")));
            }
            let v = s.parse::<f64>().map_err(|_| parse_err(line, format!("bad number {s:?} for {what}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value for {what}")));
            }
            Ok(v)
        };
        let id = rec.get(ci).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(parse_err(line, "missing cluster id"));
        }
        let y = num(yi, &schema.response)?;
        let x = xi.iter().zip(&xnames).map(|(&i, n)| num(i, n)).collect::<Result<Vec<_>>>()?;
        let weight = match wi {
            Some(i) => num(i, &schema.weight)?,
            None => 1.0,
        };
        if weight <= 0.0 {
            return Err(parse_err(line, "weights must be positive"));
        }
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id.clone()).or_default().push(SurveyRecord { cluster_id: id, y, x, weight });
    }
    if order.is_empty() {
        return Err(LmmError::InvalidData("no data rows".into()));
    }
    let records: Vec<Vec<SurveyRecord>> = order.iter().map(|id| groups.remove(id).unwrap_or_default()).collect();
    let mut columns = Vec::new();
    if schema.add_intercept {
        columns.push("(intercept)".to_string());
    }
    columns.extend(xnames);
    let data = build_dataset(&records, schema.add_intercept, schema.forced)?;
    Ok(SurveyData { data, cluster_ids: order, records, columns })
}

fn build_dataset(records: &[Vec<SurveyRecord>], intercept: bool, forced: usize) -> Result<ClusteredDataset<f64>> {
    let off = usize::from(intercept);
    let clusters = records
        .iter()
        .map(|g| {
            let m = g.len();
            let p = g.first().map_or(0, |r| r.x.len()) + off;
            let y = DVector::from_iterator(m, g.iter().map(|r| r.y));
            let x = DMatrix::from_fn(m, p, |i, j| if intercept && j == 0 { 1.0 } else { g[i].x[j - off] });
            Cluster { y, x, z: DMatrix::from_element(m, 1, 1.0) }
        })
        .collect();
    ClusteredDataset::new(clusters, forced, intercept)
}

/// Writes records in the layout read by [`load_clustered_csv`] with the default schema.
pub fn write_clustered_csv(path: &Path, records: &[Vec<SurveyRecord>], names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["cluster_id".to_string(), "y".to_string()];
    head.extend(names.iter().cloned());
    head.push("weight".into());
    w.write_record(&head)?;
    for r in records.iter().flatten() {
        let mut row = vec![r.cluster_id.clone(), fmt_num(r.y)];
        row.extend(r.x.iter().map(|&v| fmt_num(v)));
        row.push(fmt_num(r.weight));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `sum_j w_j x_j / sum_j w_j` per cluster.
pub fn weighted_covariate_means(groups: &[Vec<SurveyRecord>]) -> Result<Vec<DVector<f64>>> {
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let p = g.first().map_or(0, |r| r.x.len());
            let tw: f64 = g.iter().map(|r| r.weight).sum();
            if !(tw > 0.0) {
                return Err(LmmError::InvalidData(format!("cluster {i} has zero total weight")));
            }
            let mut m = DVector::zeros(p);
            for r in g {
                if r.weight < 0.0 {
                    return Err(LmmError::InvalidData(format!("cluster {i} has a negative weight")));
                }
                m += DVector::from_column_slice(&r.x) * r.weight;
            }
            Ok(m / tw)
        })
        .collect()
}

/// Fisher skewness `m3 / m2^{3/2}`; zero for constant input.
pub fn fisher_skewness(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.is_empty() {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let scale = mean.abs().max(1.0);
    if m2 <= (1e-14 * scale).powi(2) {
        return 0.0;
    }
    m3 / m2.powf(1.5)
}

/// `points` equally spaced shifts over `[max(eps - min y, 0) + eps, max y]`,
/// `eps = 1e-6 range(y)`.
pub fn default_shift_grid(y: &[f64], points: usize) -> Vec<f64> {
    if y.is_empty() || points == 0 {
        return Vec::new();
    }
    let lo_y = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi_y = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi_y - lo_y;
    let eps = if range > 0.0 { 1e-6 * range } else { 1e-6 * hi_y.abs().max(1.0) };
    let lo = (eps - lo_y).max(0.0) + eps;
    let hi = hi_y.max(lo);
    if points == 1 || hi == lo {
        return vec![lo];
    }
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// `log(y + c*)` with `c*` the grid point minimizing the absolute skewness of
/// `residuals(log(y + c))`; ties go to the smallest `c`. Grid points with
/// `min(y) + c <= 0` or failing residuals are skipped.
pub fn log_shift_transform<F>(y: &[f64], residuals: F, grid: &[f64]) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let lo_y = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut feasible: Vec<f64> = grid.iter().copied().filter(|&c| lo_y + c > 0.0).collect();
    feasible.sort_by(|a, b| a.total_cmp(b));
    if feasible.is_empty() {
        return Err(LmmError::InvalidArgument("no grid point makes y + c positive".into()));
    }
    let scores: Vec<Result<f64>> = feasible
        .par_iter()
        .map(|&c| {
            let yl: Vec<f64> = y.iter().map(|v| (v + c).ln()).collect();
            Ok(fisher_skewness(&residuals(&yl)?).abs())
        })
        .collect();
    let mut best: Option<(f64, f64)> = None;
    let mut last_err = None;
    for (s, &c) in scores.into_iter().zip(&feasible) {
        match s {
            Ok(s) if best.is_none_or(|b| s < b.0) => best = Some((s, c)),
            Ok(_) => {}
            Err(e) => {
                log::warn!("shift {c:e} skipped: {e}");
                last_err = Some(e);
            }
        }
    }
    let Some((_, c)) = best else {
        return Err(last_err.unwrap_or_else(|| LmmError::InvalidArgument("no usable grid point".into())));
    };
    Ok((y.iter().map(|v| (v + c).ln()).collect(), c))
}

/// Marginal residuals `y - X beta_hat` of a full-model REML fit with `y`
/// (flattened in cluster order) as the response.
pub fn full_model_residuals(data: &ClusteredDataset<f64>, y: &[f64]) -> Result<Vec<f64>> {
    let sizes = data.cluster_sizes();
    if y.len() != sizes.iter().sum::<usize>() {
        return Err(LmmError::Dimension("response length does not match the dataset".into()));
    }
    let mut ys = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &m in &sizes {
        ys.push(DVector::from_column_slice(&y[off..off + m]));
        off += m;
    }
    let d = data.with_responses(&ys)?;
    let spec = ModelSpec::full(d.p());
    let fit = fit_model(&d, &spec, &VarianceStructure::nested_error(), &FitOptions::default().with_bias(BiasMethod::Zero))?;
    let mut out = Vec::with_capacity(y.len());
    for (c, yi) in d.clusters().iter().zip(&ys) {
        out.extend((yi - &c.x * &fit.beta_hat).iter());
    }
    Ok(out)
}

fn fmt_num(v: f64) -> String {
    format!("{v:e}")
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportRow {
    target: String,
    method: IntervalMethod,
    estimate: f64,
    lower: f64,
    upper: f64,
    length: f64,
    alpha: f64,
    #[serde(rename = "B")]
    b: Option<usize>,
    seed: Option<u64>,
    acceptance: Option<f64>,
    quantile_se: Option<f64>,
}

/// Summary of interval lengths for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthSummary {
    pub method: IntervalMethod,
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
}

pub fn length_summary(intervals: &[IntervalResult]) -> Vec<LengthSummary> {
    let mut methods: Vec<IntervalMethod> = Vec::new();
    for r in intervals {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let mut l: Vec<f64> = intervals.iter().filter(|r| r.method == m).map(|r| r.length()).collect();
            l.sort_by(|a, b| a.total_cmp(b));
            let n = l.len();
            let mean = l.iter().sum::<f64>() / n as f64;
            let median = if n % 2 == 1 { l[n / 2] } else { 0.5 * (l[n / 2 - 1] + l[n / 2]) };
            let sd = if n > 1 { (l.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
            LengthSummary { method: m, count: n, min: l[0], max: l[n - 1], median, mean, sd }
        })
        .collect()
}

/// Sidecar path holding the length summary of a report.
pub fn summary_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".summary.csv");
    s.into()
}

/// Writes one CSV row per interval, in the given order, and the length
/// summary next to it (see [`summary_path`]).
pub fn emit_report(intervals: &[IntervalResult], path: &Path) -> Result<()> {
    if intervals.is_empty() {
        return Err(LmmError::InvalidArgument("no intervals to report".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in intervals {
        w.serialize(ReportRow {
            target: r.target.clone(),
            method: r.method,
            estimate: r.point_estimate,
            lower: r.lower,
            upper: r.upper,
            length: r.length(),
            alpha: r.alpha,
            b: r.mc.as_ref().map(|m| m.b),
            seed: r.mc.as_ref().map(|m| m.seed),
            acceptance: r.mc.as_ref().and_then(|m| m.acceptance),
            quantile_se: r.mc.as_ref().map(|m| m.quantile_se),
        })?;
    }
    w.flush()?;
    let mut s = csv::Writer::from_path(summary_path(path))?;
    for row in length_summary(intervals) {
        s.serialize(row)?;
    }
    s.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<IntervalResult>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: ReportRow = row?;
        let mc = match (row.b, row.seed) {
            (Some(b), Some(seed)) => {
                Some(McMeta { b, seed, acceptance: row.acceptance, quantile_se: row.quantile_se.unwrap_or(f64::NAN) })
            }
            _ => None,
        };
        out.push(IntervalResult {
            target: row.target,
            point_estimate: row.estimate,
            lower: row.lower,
            upper: row.upper,
            alpha: row.alpha,
            method: row.method,
            mc,
        });
    }
    Ok(out)
}
