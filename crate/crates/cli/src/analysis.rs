use crate::{targets_from, DataArgs, FitFlags, SamplerArg, TargetArg};
use anyhow::Result;
use clap::{Args, ValueEnum};
use nalgebra::DVector;
use postcaic_core::ci::{
    k_inverse_sqrt, naive_ci_linear_combo, naive_ci_mixed_with, posi_ci_linear_combo_from_draws, posi_ci_mixed_from_draws,
    ConditionalDraws,
};
use postcaic_core::io::{emit_report, length_summary, weighted_covariate_means};
use postcaic_core::lmm::{build_k, fit_model, MseEvaluator};
use postcaic_core::region::{general_region_nonorthogonal, general_region_orthogonal, nested_region, sigma_matrix, ExtendedSelectionMatrix};
use postcaic_core::tmvn::{sample_posi_joint, sample_truncated};
use postcaic_core::{
    select_model, CandidateSet, CandidateStructure, IntervalResult, ModelSpec, SamplerConfig, Structure, Target,
};
use std::path::PathBuf;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CandidateArg {
    /// Every subset of the non-forced columns.
    All,
    /// Columns added one at a time in file order.
    Nested,
}

pub fn candidates(kind: CandidateArg, p: usize, a: usize) -> Result<CandidateSet> {
    Ok(match kind {
        CandidateArg::All => CandidateSet::all_subsets(p, a)?,
        CandidateArg::Nested => CandidateSet::nested_chain(p, a)?,
    })
}

#[derive(Args)]
pub struct CiArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "all")]
    candidates: CandidateArg,
    /// Comma-separated subset of betas, combos, mixed.
    #[arg(long, value_delimiter = ',', default_value = "betas")]
    targets: Vec<TargetArg>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long = "B", default_value_t = 5000)]
    b: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value = "auto")]
    sampler: SamplerArg,
    /// Stacked regions for correlated candidates.
    #[arg(long)]
    nonorthogonal: bool,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
}

pub fn run(a: &CiArgs) -> Result<()> {
    let sd = a.data.load()?;
    let data = &sd.data;
    let structure = Structure::nested_error();
    let opts = a.fit.options(a.seed);
    let cands = candidates(a.candidates, data.p(), data.a())?;
    let sel = select_model(data, &cands, &structure, &opts)?;
    let fit = sel.selected_fit();
    let full = match cands.index_of(&ModelSpec::full(data.p())) {
        Some(i) => sel.fits[i].clone(),
        None => fit_model(data, &ModelSpec::full(data.p()), &structure, &opts)?,
    };
    let sigma = sigma_matrix(&full)?;
    let rho_b: Vec<f64> = sel.fits.iter().map(|f| f.rho_hat + f.b_hat).collect();
    let targets = targets_from(&a.targets);
    let r = if targets.mixed { data.n() * data.q() } else { 0 };
    let cfg = SamplerConfig { b: a.b, seed: a.seed, method: a.sampler.into(), ..Default::default() };
    let (fixed, mixed) = if a.nonorthogonal {
        let st = general_region_nonorthogonal(&sigma, &cands.specs, &rho_b, sel.selected, None, r)?;
        let fixed = ConditionalDraws::from_stacked_fixed(&sample_truncated(&st.fixed, &cfg)?, &st);
        let mixed = if r > 0 {
            ConditionalDraws::from_stacked_mixed(&sample_truncated(&st.mixed, &SamplerConfig { seed: a.seed ^ 0x0F1E_D2C3, ..cfg.clone() })?, &st)
        } else {
            fixed.clone()
        };
        (fixed, mixed)
    } else {
        let region = match cands.structure {
            CandidateStructure::Nested => nested_region(&sigma, &rho_b, cands.a, sel.selected, None)?,
            CandidateStructure::General => {
                let ups = ExtendedSelectionMatrix::from_specs(&cands.specs)?;
                general_region_orthogonal(&sigma, &ups, &rho_b, sel.selected, None)?
            }
        };
        let d = ConditionalDraws::from_full(&sample_posi_joint(&region, r, &cfg)?, &fit.spec, r)?;
        (d.clone(), d)
    };

    let mut out: Vec<IntervalResult> = Vec::new();
    if targets.betas {
        for j in fit.spec.indices() {
            let mut k = DVector::zeros(data.p());
            k[j] = 1.0;
            let label = sd.columns[j].clone();
            out.push(posi_ci_linear_combo_from_draws(fit, &fixed, &k, a.alpha, &label)?);
            out.push(naive_ci_linear_combo(fit, &k, a.alpha, &label)?);
        }
    }
    let means: Vec<DVector<f64>> = weighted_covariate_means(&sd.records)?
        .into_iter()
        .map(|m| if data.has_intercept() { m.insert_row(0, 1.0) } else { m })
        .collect();
    if targets.combos {
        for (k, id) in means.iter().zip(&sd.cluster_ids) {
            let label = format!("k'beta[{id}]");
            out.push(posi_ci_linear_combo_from_draws(fit, &fixed, k, a.alpha, &label)?);
            out.push(naive_ci_linear_combo(fit, k, a.alpha, &label)?);
        }
    }
    if targets.mixed {
        let kinv_sqrt = k_inverse_sqrt(&build_k(data, &fit.spec, &full.theta_hat)?)?;
        let ev = MseEvaluator::new(data, fit)?;
        for (i, (k, id)) in means.iter().zip(&sd.cluster_ids).enumerate() {
            let t = Target::new(k.clone(), DVector::from_element(1, 1.0), i);
            let label = format!("mu[{id}]");
            out.push(posi_ci_mixed_from_draws(fit, &kinv_sqrt, &mixed, &t, a.alpha, &label)?);
            out.push(naive_ci_mixed_with(&ev, fit, &t, a.alpha, 1, &label)?);
            out.push(naive_ci_mixed_with(&ev, fit, &t, a.alpha, 2, &label)?);
        }
    }
    emit_report(&out, &a.out)?;
    let names: Vec<&str> = fit.spec.indices().iter().map(|&j| sd.columns[j].as_str()).collect();
    println!("selected {} of {} candidates: {}", sel.selected + 1, cands.len(), names.join("+"));
    if let Some(acc) = fixed.acceptance {
        println!("region acceptance {acc:.4}");
    }
    for s in length_summary(&out) {
        println!("{:<10} {:>5} intervals, length median {:.4} mean {:.4}", s.method.to_string(), s.count, s.median, s.mean);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
