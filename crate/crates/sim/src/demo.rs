use crate::harness::SimError;
use postcaic_core::region::{general_region_orthogonal, nested_region, sigma_matrix, ExtendedSelectionMatrix, SigmaEstimate};
use postcaic_core::rng::stream_rng;
use postcaic_core::{select_model, CandidateSet, CandidateStructure, ConstraintSet, Dataset, FitOptions, Structure};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Selection regions of every candidate, one per row of the candidate set.
#[derive(Debug, Clone, Serialize)]
pub struct RegionDemo {
    pub labels: Vec<String>,
    pub rho_b: Vec<f64>,
    #[serde(skip)]
    pub regions: Vec<ConstraintSet>,
    pub listings: Vec<String>,
    /// Share of probe points lying in exactly one region.
    pub exactly_one: f64,
    pub probes: usize,
}

/// Regions from a fitted candidate set; `Sigma` comes from the largest model.
pub fn region_demo(data: &Dataset, cands: &CandidateSet, opts: &FitOptions, probes: usize, seed: u64) -> Result<RegionDemo, SimError> {
    let sel = select_model(data, cands, &Structure::nested_error(), opts)?;
    let full = (0..cands.len()).max_by_key(|&i| cands.specs[i].size()).unwrap_or(0);
    let sigma = sigma_matrix(&sel.fits[full])?;
    let rho_b: Vec<f64> = sel.fits.iter().map(|f| f.rho_hat + f.b_hat).collect();
    region_demo_from_parts(&sigma, cands, &rho_b, probes, seed)
}

pub fn region_demo_from_parts(
    sigma: &SigmaEstimate,
    cands: &CandidateSet,
    rho_b: &[f64],
    probes: usize,
    seed: u64,
) -> Result<RegionDemo, SimError> {
    let ups = ExtendedSelectionMatrix::from_specs(&cands.specs)?;
    let regions = (0..cands.len())
        .map(|i| match cands.structure {
            CandidateStructure::Nested => nested_region(sigma, rho_b, cands.a, i, None),
            CandidateStructure::General => general_region_orthogonal(sigma, &ups, rho_b, i, None),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let d = sigma.dim();
    let mut rng = stream_rng(seed, 0);
    let mut hits = 0usize;
    for _ in 0..probes {
        let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if regions.iter().filter(|r| r.contains(&w)).count() == 1 {
            hits += 1;
        }
    }
    Ok(RegionDemo {
        labels: cands.specs.iter().map(|s| s.label.clone()).collect(),
        rho_b: rho_b.to_vec(),
        listings: regions.iter().map(|r| r.to_listing()).collect(),
        regions,
        exactly_one: if probes == 0 { f64::NAN } else { hits as f64 / probes as f64 },
        probes,
    })
}
