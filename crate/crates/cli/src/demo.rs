use crate::analysis::{candidates, CandidateArg};
use anyhow::{bail, Context, Result};
use clap::Args;
use postcaic_core::io::{load_clustered_csv, CsvSchema};
use postcaic_core::{BiasMethod, FitOptions};
use postcaic_sim::{region_demo, simulate_nerm, NermDesign};
use serde::Deserialize;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Args)]
pub struct RegionDemoArgs {
    /// TOML configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoConfig {
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default = "default_probes")]
    probes: usize,
    /// "nested" or "all".
    #[serde(default = "default_candidates")]
    candidates: String,
    #[serde(default = "default_forced")]
    forced: usize,
    /// "analytic", "zero" or "mc".
    #[serde(default = "default_bias")]
    bias: String,
    /// Survey CSV; when absent a dataset is drawn from `generate`.
    data: Option<PathBuf>,
    generate: Option<Generate>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Generate {
    clusters: usize,
    cluster_size: usize,
    /// Intercept first.
    beta: Vec<f64>,
    #[serde(default = "one")]
    sigma2_u: f64,
    #[serde(default = "one")]
    sigma2_e: f64,
    #[serde(default)]
    correlation: f64,
}

fn default_seed() -> u64 {
    1
}
fn default_probes() -> usize {
    100_000
}
fn default_candidates() -> String {
    "nested".into()
}
fn default_forced() -> usize {
    1
}
fn default_bias() -> String {
    "analytic".into()
}
fn one() -> f64 {
    1.0
}

pub fn run(a: &RegionDemoArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let cfg: DemoConfig = toml::from_str(&text)?;
    let data = match (&cfg.data, &cfg.generate) {
        (Some(path), _) => load_clustered_csv(path, &CsvSchema { forced: cfg.forced, ..CsvSchema::default() })?.data,
        (None, Some(g)) => {
            let design = NermDesign {
                beta: &g.beta,
                n: g.clusters,
                mi: g.cluster_size,
                variances: (g.sigma2_e, g.sigma2_u),
                omega_offdiag: g.correlation,
                forced: cfg.forced,
            };
            simulate_nerm(&design, cfg.seed)?.data
        }
        (None, None) => bail!("the configuration needs `data` or a [generate] table"),
    };
    let kind = match cfg.candidates.as_str() {
        "nested" => CandidateArg::Nested,
        "all" => CandidateArg::All,
        other => bail!("unknown candidate set {other:?}"),
    };
    let bias = match cfg.bias.as_str() {
        "analytic" => BiasMethod::Analytic,
        "zero" => BiasMethod::Zero,
        "mc" => BiasMethod::MonteCarlo { reps: 200, seed: cfg.seed },
        other => bail!("unknown bias method {other:?}"),
    };
    let cands = candidates(kind, data.p(), data.a())?;
    let demo = region_demo(&data, &cands, &FitOptions::default().with_bias(bias), cfg.probes, cfg.seed)?;
    let mut s = String::new();
    for (i, listing) in demo.listings.iter().enumerate() {
        writeln!(s, "# selected {} (rho + b = {:.6})", demo.labels[i], demo.rho_b[i])?;
        writeln!(s, "{}", listing.trim_end())?;
    }
    writeln!(s, "# exactly one region: {:.6} of {} standard normal probes", demo.exactly_one, demo.probes)?;
    match &a.out {
        Some(p) => std::fs::write(p, &s)?,
        None => print!("{s}"),
    }
    println!("{} regions; exactly-one fraction {:.6}", demo.listings.len(), demo.exactly_one);
    Ok(())
}
