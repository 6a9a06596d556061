use nalgebra::{DMatrix, DVector};
use postcaic_core::region::{check_orthogonality, sigma_matrix};
use postcaic_core::lmm::fit_model;
use postcaic_core::{
    BiasMethod, CandidateSet, CandidateStructure, Dataset, FitOptions, IntervalMethod, ModelSpec, Sense, Structure,
};
use postcaic_sim::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small(setting: Setting, n: usize, tag: SelectionTag) -> SimScenario {
    let mut s = SimScenario::new(setting, n, 5, tag);
    s.i_required = 4;
    s.b = 600;
    s
}

#[test]
fn generator_moments() {
    let mut s = SimScenario::new(Setting::S2, 3000, 5, SelectionTag::V2);
    s.seed = 3;
    let sample = generate_nerm(&s, 11).unwrap();
    let beta = DVector::from_column_slice(&BETA_TRUE);
    let (se2, su2) = Setting::S2.variances();
    assert_eq!((se2, su2), (1.0, 0.5));
    let mut resid = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for c in sample.data.clusters() {
        let r = &c.y - &c.x * &beta;
        resid.push(r);
        for i in 0..c.x.nrows() {
            assert_eq!(c.x[(i, 0)], 1.0);
            rows.push((1..5).map(|j| c.x[(i, j)]).collect());
        }
    }
    let all: Vec<f64> = resid.iter().flat_map(|r| r.iter().copied()).collect();
    let var = all.iter().map(|v| v * v).sum::<f64>() / all.len() as f64;
    assert!((var - (se2 + su2)).abs() < 0.05, "{var}");
    // within-cluster pairs share only u_i
    let mut cov = 0.0;
    let mut pairs = 0.0;
    for r in &resid {
        for i in 0..r.len() {
            for j in i + 1..r.len() {
                cov += r[i] * r[j];
                pairs += 1.0;
            }
        }
    }
    let icc = cov / pairs / var;
    assert!((icc - su2 / (su2 + se2)).abs() < 0.04, "{icc}");
    let m = rows.len() as f64;
    for a in 0..4 {
        for b in 0..4 {
            let c = rows.iter().map(|r| r[a] * r[b]).sum::<f64>() / m;
            let want = if a == b { 1.0 } else { 0.25 };
            assert!((c - want).abs() < 0.05, "({a}, {b}) {c}");
        }
    }
    assert_eq!(sample.u.len(), 3000);
}

#[test]
fn generator_is_seeded() {
    let s = small(Setting::S1, 15, SelectionTag::V2);
    let a = generate_nerm(&s, 5).unwrap();
    let b = generate_nerm(&s, 5).unwrap();
    let c = generate_nerm(&s, 6).unwrap();
    assert_eq!(a.data.clusters()[3].y, b.data.clusters()[3].y);
    assert_ne!(a.data.clusters()[3].y, c.data.clusters()[3].y);
}

#[test]
fn candidate_shapes() {
    for (tag, count) in [(SelectionTag::V2, 8), (SelectionTag::V3, 4), (SelectionTag::V4, 2)] {
        let (c, ups) = candidate_set_for(tag);
        assert_eq!(c.len(), count);
        assert_eq!(ups.shape(), (count, 15));
        for spec in &c.specs {
            assert!(spec.included[..tag.forced()].iter().all(|&v| v));
        }
        assert!(c.index_of(&ModelSpec::full(P)).is_some());
    }
    assert_eq!("v3".parse::<SelectionTag>().unwrap(), SelectionTag::V3);
    assert_eq!("s2".parse::<Setting>().unwrap(), Setting::S2);
    assert!("v5".parse::<SelectionTag>().is_err());
}

#[test]
fn scenario_validation() {
    let mut s = small(Setting::S1, 15, SelectionTag::V2);
    assert!(s.validate().is_ok());
    s.alpha = 1.0;
    assert!(s.validate().is_err());
    s.alpha = 0.05;
    s.omega_offdiag = -0.5;
    assert!(s.validate().is_err());
    let t = small(Setting::S1, 15, SelectionTag::V2);
    assert_eq!(t.true_model().indices(), vec![0, 1, 2]);
}

#[test]
fn single_model_reduces_to_naive() {
    let mut s = small(Setting::S1, 20, SelectionTag::V2);
    s.i_required = 1;
    s.b = 20_000;
    let only = CandidateSet::new(vec![ModelSpec::full(P)], CandidateStructure::General, 2).unwrap();
    let tab = run_with_candidates(&s, &Pipeline::default(), &only).unwrap();
    assert_eq!((tab.attempts, tab.conditioned, tab.failed), (1, 1, 0));
    for j in 1..=P {
        let t = format!("beta{j}");
        let posi = tab.row(IntervalMethod::PostCaic, &t).unwrap();
        let naive = tab.row(IntervalMethod::Naive1, &t).unwrap();
        assert_eq!(posi.reps, 1);
        assert!((posi.length / naive.length - 1.0).abs() < 0.05, "{t}: {} vs {}", posi.length, naive.length);
    }
    let posi = tab.row(IntervalMethod::PostCaic, "mu").unwrap();
    let naive = tab.row(IntervalMethod::Naive1, "mu").unwrap();
    assert!((posi.length / naive.length - 1.0).abs() < 0.05);
}

#[test]
fn table_layout_and_determinism() {
    let s = small(Setting::S1, 15, SelectionTag::V4);
    let pipe = Pipeline::default();
    let a = run_until_selected(&s, &pipe).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| run_until_selected(&s, &Pipeline { batch: 3, ..pipe.clone() })).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.conditioned, 4);
    assert_eq!(a.selection_counts.iter().sum::<usize>() + a.failed, a.attempts);
    // 5 betas x 2, k'beta x 2, mu x 3
    assert_eq!(a.rows.len(), 15);
    for r in &a.rows {
        assert!((0.0..=100.0).contains(&r.coverage));
        let p = r.coverage / 100.0;
        assert!((r.mc_se - 100.0 * (p * (1.0 - p) / 4.0).sqrt()).abs() < 1e-9);
        assert_eq!(r.setting, "S1");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.csv");
    a.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("setting,method,target,coverage,length,mc_se,reps\n"));
    assert_eq!(text.lines().count(), 16);
    assert!(text.contains("S1,post-caic,beta5,"));
}

#[test]
fn nonorthogonal_family_runs() {
    let s = small(Setting::S1, 15, SelectionTag::V4);
    let pipe = Pipeline { region: RegionFamily::NonOrthogonal, ..Pipeline::default() };
    let tab = run_until_selected(&s, &pipe).unwrap();
    assert_eq!(tab.conditioned, 4);
    assert!(tab.row(IntervalMethod::PostCaic, "mu").is_some());
}

#[test]
fn unreachable_target_aborts() {
    let mut s = small(Setting::S1, 15, SelectionTag::V2);
    s.i_required = 2;
    // covariate 3 carries a large coefficient, so dropping it is never chosen
    s.target = ModelSpec::from_indices(P, &[0, 1], 2).unwrap();
    match run_until_selected(&s, &Pipeline::default()) {
        Err(SimError::TargetNeverSelected { attempts, selected, .. }) => {
            assert_eq!(attempts, 200);
            assert_eq!(selected, 0);
        }
        other => panic!("{other:?}"),
    }
    s.target = ModelSpec::from_indices(P, &[0], 1).unwrap();
    assert!(matches!(run_until_selected(&s, &Pipeline::default()), Err(SimError::TargetNotCandidate { .. })));
}

fn three_covariate_data(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = [1.0, 0.3, 0.1];
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    for _ in 0..40 {
        let u: f64 = rng.sample(StandardNormal);
        let x = DMatrix::from_fn(5, 3, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
        let y = DVector::from_fn(5, |i, _| {
            (0..3).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + u + rng.sample::<f64, _>(StandardNormal)
        });
        ys.push(y);
        xs.push(x);
    }
    Dataset::nested_error(ys, xs, 1).unwrap()
}

#[test]
fn region_demo_nested_partitions() {
    let data = three_covariate_data(1);
    let cands = CandidateSet::nested_chain(3, 1).unwrap();
    let demo = region_demo(&data, &cands, &FitOptions::default(), 20_000, 7).unwrap();
    assert_eq!(demo.listings.len(), 3);
    assert_eq!(demo.regions.len(), 3);
    let se = (demo.exactly_one * (1.0 - demo.exactly_one) / 20_000.0).sqrt();
    assert!(1.0 - demo.exactly_one <= 3.0 * se.max(1.0 / 20_000.0), "{}", demo.exactly_one);
    let largest = demo.regions.last().unwrap();
    assert!(largest.constraints().iter().all(|c| c.sense == Sense::GreaterEqual));
}

#[test]
fn region_demo_all_subsets() {
    let data = three_covariate_data(2);
    let cands = CandidateSet::all_subsets(3, 1).unwrap();
    let demo = region_demo(&data, &cands, &FitOptions::default().with_bias(BiasMethod::Analytic), 5_000, 8).unwrap();
    assert_eq!(demo.listings.len(), 4);
    assert_eq!(demo.labels.len(), 4);
    let full = cands.index_of(&ModelSpec::full(3)).unwrap();
    assert!(demo.regions[full].constraints().iter().all(|c| c.sense == Sense::GreaterEqual));
    assert!(demo.exactly_one > 0.5);
}

#[test]
fn correlated_covariates_break_orthogonality() {
    let s = SimScenario::new(Setting::S1, 90, 5, SelectionTag::V2);
    let sample = generate_nerm(&s, 1).unwrap();
    let full = fit_model(&sample.data, &ModelSpec::full(P), &Structure::nested_error(), &FitOptions::default()).unwrap();
    let sigma = sigma_matrix(&full).unwrap();
    let a = ModelSpec::from_indices(P, &[0, 1, 2, 3], 2).unwrap();
    let b = ModelSpec::from_indices(P, &[0, 1, 2, 4], 2).unwrap();
    let (gap, ok) = check_orthogonality(&sigma, &a, &b);
    assert!(!ok, "gap {gap}");
}

#[test]
fn weak_signal_underselection_falls_with_clusters() {
    let beta = [2.25, -1.1, 0.25, 0.0, 0.0];
    let (cands, _) = candidate_set_for(SelectionTag::V2);
    let truth = ModelSpec::from_indices(5, &[0, 1, 2], 2).unwrap();
    let rate = |n: usize| {
        let design = NermDesign { beta: &beta, n, mi: 5, variances: (1.0, 1.0), omega_offdiag: 0.25, forced: 2 };
        postcaic_core::caic::underselection_rate(
            |rep| Ok(simulate_nerm(&design, 7000 + rep)?.data),
            &cands,
            &truth,
            &Structure::nested_error(),
            &FitOptions::default().with_bias(BiasMethod::Analytic),
            200,
        )
        .unwrap()
    };
    let (few, many) = (rate(15), rate(90));
    assert!(many < few, "{few} vs {many}");
    assert!(many < 0.05, "{many}");
}
