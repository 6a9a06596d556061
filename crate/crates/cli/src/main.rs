mod analysis;
mod demo;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use postcaic_core::io::{
    default_shift_grid, fisher_skewness, full_model_residuals, load_clustered_csv, write_clustered_csv, CsvSchema,
    SurveyData,
};
use postcaic_core::lmm::fit_model;
use postcaic_core::{BiasMethod, FitOptions, LmmError, Method, ModelSpec, SamplerMethod, Structure};
use postcaic_sim::{run_until_selected, Pipeline, RegionFamily, SelectionTag, Setting, SimError, SimScenario, Targets};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "postcaic", version, about = "Conditional AIC selection and post-selection intervals for linear mixed models")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Coverage study on simulated nested error regression data.
    Simulate(SimulateArgs),
    /// Selection regions of a candidate set and the partition check.
    RegionDemo(demo::RegionDemoArgs),
    /// Fit one model.
    Fit(FitArgs),
    /// Fit every candidate and report cAIC.
    Select(SelectArgs),
    /// Select a model and build post-selection and naive intervals.
    Ci(analysis::CiArgs),
    /// Log-shift transform of the response minimizing residual skewness.
    Transform(TransformArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BiasArg {
    Analytic,
    Mc,
    Zero,
}

#[derive(Args, Clone, Debug)]
pub struct FitFlags {
    /// Bias correction of the cAIC penalty.
    #[arg(long, value_enum, default_value = "analytic")]
    bias: BiasArg,
    /// Bootstrap draws for `--bias mc`.
    #[arg(long, default_value_t = 200)]
    bias_reps: usize,
    /// Maximum likelihood instead of REML.
    #[arg(long)]
    ml: bool,
}

impl FitFlags {
    pub fn options(&self, seed: u64) -> FitOptions {
        let bias = match self.bias {
            BiasArg::Analytic => BiasMethod::Analytic,
            BiasArg::Mc => BiasMethod::MonteCarlo { reps: self.bias_reps, seed },
            BiasArg::Zero => BiasMethod::Zero,
        };
        let mut o = FitOptions::default().with_bias(bias);
        if self.ml {
            o.method = Method::Ml;
        }
        o
    }
}

#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// Survey CSV, one row per unit.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "cluster_id")]
    cluster: String,
    #[arg(long, default_value = "y")]
    response: String,
    /// Comma-separated covariate columns (default: all other columns).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Weight column, used when present.
    #[arg(long, default_value = "weight")]
    weight: String,
    #[arg(long)]
    no_intercept: bool,
    /// Leading columns kept in every candidate, counting the intercept.
    #[arg(long, default_value_t = 1)]
    forced: usize,
}

impl DataArgs {
    pub fn load(&self) -> Result<SurveyData> {
        let schema = CsvSchema {
            cluster: self.cluster.clone(),
            response: self.response.clone(),
            covariates: self.covariates.clone(),
            weight: self.weight.clone(),
            add_intercept: !self.no_intercept,
            forced: self.forced,
        };
        load_clustered_csv(&self.data, &schema).with_context(|| format!("reading {}", self.data.display()))
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = "S1")]
    setting: Setting,
    /// Clusters.
    #[arg(long, default_value_t = 30)]
    n: usize,
    /// Units per cluster.
    #[arg(long, default_value_t = 5)]
    mi: usize,
    #[arg(long = "sel-matrix", default_value = "v2")]
    sel_matrix: SelectionTag,
    /// Conditioned replications.
    #[arg(long = "I")]
    i: Option<usize>,
    /// Monte Carlo draws per interval.
    #[arg(long = "B")]
    b: Option<usize>,
    /// I = 1000 and B = 10000.
    #[arg(long)]
    full_scale: bool,
    /// 1-based columns of the conditioning model (default: all five).
    #[arg(long, value_delimiter = ',')]
    target: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value = "orthogonal")]
    region: RegionArg,
    #[arg(long, value_enum, default_value = "auto")]
    sampler: SamplerArg,
    /// Comma-separated subset of betas, combos, mixed.
    #[arg(long, value_delimiter = ',', default_value = "betas,combos,mixed")]
    targets: Vec<TargetArg>,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RegionArg {
    Orthogonal,
    Nonorthogonal,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SamplerArg {
    Auto,
    Rejection,
    Chain,
}

impl From<SamplerArg> for SamplerMethod {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Auto => SamplerMethod::Auto,
            SamplerArg::Rejection => SamplerMethod::Rejection,
            SamplerArg::Chain => SamplerMethod::Chain,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Betas,
    Combos,
    Mixed,
}

pub fn targets_from(list: &[TargetArg]) -> Targets {
    Targets {
        betas: list.contains(&TargetArg::Betas),
        combos: list.contains(&TargetArg::Combos),
        mixed: list.contains(&TargetArg::Mixed),
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// 1-based columns of the model, intercept included (default: all).
    #[arg(long, value_delimiter = ',')]
    model: Option<Vec<usize>>,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "all")]
    candidates: analysis::CandidateArg,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TransformArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 200)]
    grid_points: usize,
    /// Transformed data in the input layout.
    #[arg(long)]
    out: PathBuf,
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut scen = SimScenario::new(a.setting, a.n, a.mi, a.sel_matrix);
    if a.full_scale {
        scen.i_required = 1000;
        scen.b = 10_000;
    }
    scen.i_required = a.i.unwrap_or(scen.i_required);
    scen.b = a.b.unwrap_or(scen.b);
    scen.alpha = a.alpha;
    scen.seed = a.seed;
    scen.target = model_from(&a.target, postcaic_sim::P, scen.tag.forced())?;
    let pipe = Pipeline {
        bias: a.fit.options(a.seed).bias,
        region: match a.region {
            RegionArg::Orthogonal => RegionFamily::Orthogonal,
            RegionArg::Nonorthogonal => RegionFamily::NonOrthogonal,
        },
        sampler: a.sampler.into(),
        targets: targets_from(&a.targets),
        ..Pipeline::default()
    };
    let table = run_until_selected(&scen, &pipe)?;
    println!(
        "{} {}:{} {}: {} conditioned of {} attempts ({} failed)",
        scen.setting, scen.n, scen.mi, scen.tag, table.conditioned, table.attempts, table.failed
    );
    println!("{:<10} {:<8} {:>8} {:>8} {:>7}", "method", "target", "coverage", "length", "mc_se");
    for r in &table.rows {
        println!("{:<10} {:<8} {:>8.1} {:>8.3} {:>7.2}", r.method.to_string(), r.target, r.coverage, r.length, r.mc_se);
    }
    if let Some(out) = &a.out {
        table.write_csv(out)?;
    }
    Ok(())
}

fn model_from(cols: &Option<Vec<usize>>, p: usize, a: usize) -> Result<ModelSpec> {
    match cols {
        None => Ok(ModelSpec::full(p)),
        Some(c) => {
            if c.iter().any(|&j| j == 0 || j > p) {
                bail!("model columns must lie in 1..={p}");
            }
            let idx: Vec<usize> = c.iter().map(|j| j - 1).collect();
            Ok(ModelSpec::from_indices(p, &idx, a)?)
        }
    }
}

fn fit(a: &FitArgs) -> Result<()> {
    let sd = a.data.load()?;
    let data = &sd.data;
    let spec = model_from(&a.model, data.p(), data.a())?;
    let f = fit_model(data, &spec, &Structure::nested_error(), &a.fit.options(a.seed))?;
    let cov = f.beta_cov()?;
    println!("model {} ({} clusters, {} units)", spec.label, data.n(), data.m());
    println!("{:<14} {:>12} {:>12}", "column", "estimate", "std.err");
    for (pos, j) in spec.indices().into_iter().enumerate() {
        println!("{:<14} {:>12.5} {:>12.5}", sd.columns[j], f.beta_model[pos], cov[(pos, pos)].sqrt());
    }
    println!("sigma2_u {:.5}  sigma2_e {:.5}{}", f.theta_hat.theta[0], f.theta_hat.theta[1], if f.boundary { "  (boundary)" } else { "" });
    println!(
        "marginal loglik {:.4}  conditional loglik {:.4}  rho {:.4}  b {:.4}  cAIC {:.4}",
        f.loglik_marginal, f.loglik_conditional, f.rho_hat, f.b_hat, f.caic
    );
    Ok(())
}

fn select(a: &SelectArgs) -> Result<()> {
    let sd = a.data.load()?;
    let cands = analysis::candidates(a.candidates, sd.data.p(), sd.data.a())?;
    let sel = postcaic_core::select_model(&sd.data, &cands, &Structure::nested_error(), &a.fit.options(a.seed))?;
    println!("{:<3} {:<30} {:>10} {:>8} {:>8} {:>12}", "", "model", "cond.ll", "rho", "b", "cAIC");
    for (i, f) in sel.fits.iter().enumerate() {
        let mark = if i == sel.selected { "*" } else { "" };
        let names: Vec<&str> = f.spec.indices().iter().map(|&j| sd.columns[j].as_str()).collect();
        println!(
            "{:<3} {:<30} {:>10.3} {:>8.3} {:>8.3} {:>12.3}",
            mark,
            names.join("+"),
            f.loglik_conditional,
            f.rho_hat,
            f.b_hat,
            f.caic
        );
    }
    Ok(())
}

fn transform(a: &TransformArgs) -> Result<()> {
    let sd = a.data.load()?;
    let y: Vec<f64> = sd.records.iter().flatten().map(|r| r.y).collect();
    let grid = default_shift_grid(&y, a.grid_points);
    let (ty, c) = postcaic_core::io::log_shift_transform(&y, |v| full_model_residuals(&sd.data, v), &grid)?;
    let before = fisher_skewness(&full_model_residuals(&sd.data, &y)?);
    let after = fisher_skewness(&full_model_residuals(&sd.data, &ty)?);
    let mut records = sd.records.clone();
    for (r, v) in records.iter_mut().flatten().zip(&ty) {
        r.y = *v;
    }
    let names: Vec<String> = sd.columns.iter().skip(usize::from(!a.data.no_intercept)).cloned().collect();
    write_clustered_csv(&a.out, &records, &names)?;
    println!("shift c = {c:.6}; residual skewness {before:.4} -> {after:.4}");
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    fn core(e: &LmmError) -> u8 {
        match e {
            LmmError::NonConvergence { .. } | LmmError::BiasCorrection { .. } => 2,
            LmmError::Model { source, .. } => core(source),
            _ => 1,
        }
    }
    if let Some(s) = e.downcast_ref::<SimError>() {
        return match s {
            SimError::NonConvergence { .. } => 2,
            SimError::TargetNeverSelected { .. } => 3,
            SimError::Core(c) => core(c),
            _ => 1,
        };
    }
    e.downcast_ref::<LmmError>().map_or(1, core)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let res = match &cli.cmd {
        Command::Simulate(a) => simulate(a),
        Command::RegionDemo(a) => demo::run(a),
        Command::Fit(a) => fit(a),
        Command::Select(a) => select(a),
        Command::Ci(a) => analysis::run(a),
        Command::Transform(a) => transform(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
