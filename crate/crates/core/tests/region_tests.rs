mod common;

use common::{normal_rows, random_spd};
use nalgebra::{DMatrix, DVector};
use postcaic_core::region::{
    check_orthogonality, ensure_nonempty, general_region_nonorthogonal, general_region_orthogonal, misspecified_region,
    nested_region, sigma_matrix, ExtendedSelectionMatrix,
};
use postcaic_core::tmvn::acceptance_estimate;
use postcaic_core::{
    ConstraintSet, FitOptions, ModelSpec, QuadraticConstraint, Sense, SigmaEstimate, Structure,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_sigma(seed: u64, d: usize) -> SigmaEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let im = random_spd(&mut rng, d);
    let jc = random_spd(&mut rng, d);
    SigmaEstimate::from_parts(im, jc, 30).unwrap()
}

fn chain_specs(d: usize, a: usize) -> Vec<ModelSpec> {
    (0..=d - a).map(|j| ModelSpec::from_indices(d, &(0..a + j).collect::<Vec<_>>(), a).unwrap()).collect()
}

const SM_RHO_B: [f64; 3] = [0.0, 1.063, 2.064];

#[test]
fn three_model_select_smallest_matches_display() {
    let sig = random_sigma(1, 3);
    let s = &sig.sigma;
    let region = nested_region(&sig, &SM_RHO_B, 1, 0, None).unwrap();
    assert_eq!(region.len(), 2);
    assert!(region.constraints().iter().all(|c| c.sense == Sense::Less));
    assert!((region.constraints()[0].rhs - 2.0 * 1.063).abs() < 1e-15);
    assert!((region.constraints()[1].rhs - 2.0 * 2.064).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for w in normal_rows(&mut rng, 200, 3) {
        let first = w[1] * w[1] * s[(1, 1)] + 2.0 * w[0] * w[1] * s[(0, 1)];
        let second = w[1] * w[1] * s[(1, 1)]
            + w[2] * w[2] * s[(2, 2)]
            + 2.0 * w[0] * w[1] * s[(0, 1)]
            + 2.0 * w[0] * w[2] * s[(0, 2)]
            + 2.0 * w[1] * w[2] * s[(1, 2)];
        assert!((region.constraints()[0].value(&w) - first).abs() < 1e-12);
        assert!((region.constraints()[1].value(&w) - second).abs() < 1e-12);
    }
    assert!(region.contains(&[0.0, 0.0, 0.0]));
}

#[test]
fn single_model_is_unconstrained() {
    let sig = random_sigma(3, 2);
    let region = nested_region(&sig, &[4.0], 2, 0, None).unwrap();
    assert!(region.is_empty());
    assert!(region.contains(&[100.0, -3.0]));
}

#[test]
fn nested_argument_errors() {
    let sig = random_sigma(3, 3);
    assert!(nested_region(&sig, &SM_RHO_B, 2, 0, None).is_err());
    assert!(nested_region(&sig, &SM_RHO_B, 1, 3, None).is_err());
    assert!(nested_region(&sig, &SM_RHO_B, 1, 0, Some(1)).is_err());
    // non-monotone only warns
    assert!(nested_region(&sig, &[0.0, 2.0, 1.0], 1, 1, None).is_ok());
}

#[test]
fn three_model_regions_partition_space() {
    let sig = random_sigma(4, 3);
    let regions: Vec<ConstraintSet> = (0..3).map(|p| nested_region(&sig, &SM_RHO_B, 1, p, None).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut exactly_one = 0usize;
    let mut hits = [0usize; 3];
    for w in normal_rows(&mut rng, n, 3) {
        let inside: Vec<bool> = regions.iter().map(|r| r.contains(&w)).collect();
        if inside.iter().filter(|&&b| b).count() == 1 {
            exactly_one += 1;
        }
        for (h, &b) in hits.iter_mut().zip(&inside) {
            *h += b as usize;
        }
    }
    let frac = exactly_one as f64 / n as f64;
    let se = (frac * (1.0 - frac) / n as f64).sqrt().max(1.0 / n as f64);
    assert!((1.0 - frac).abs() <= 3.0 * se, "fraction {frac}");
    assert!(hits.iter().all(|&h| h > 0), "{hits:?}");
}

/// Each region written out as the pairwise sums over the chain.
fn direct_nested_membership(s: &DMatrix<f64>, rho_b: &[f64], a: usize, p: usize, w: &[f64]) -> bool {
    let k = rho_b.len() - 1;
    let partial = |cols: usize| -> f64 {
        let mut t = 0.0;
        for j in 0..cols {
            t += s[(j, j)] * w[j] * w[j];
            for l in j + 1..cols {
                t += 2.0 * s[(j, l)] * w[j] * w[l];
            }
        }
        t
    };
    let sel = partial(a + p);
    (0..p).all(|j| sel - partial(a + j) >= 2.0 * (rho_b[p] - rho_b[j]))
        && (p + 1..=k).all(|j| partial(a + j) - sel < 2.0 * (rho_b[j] - rho_b[p]))
}

#[test]
fn nested_membership_matches_direct_sums() {
    for seed in 0..5 {
        let sig = random_sigma(10 + seed, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ws = normal_rows(&mut rng, 10_000, 3);
        for p in 0..3 {
            let region = nested_region(&sig, &SM_RHO_B, 1, p, None).unwrap();
            for w in &ws {
                assert_eq!(region.contains(w), direct_nested_membership(&sig.sigma, &SM_RHO_B, 1, p, w));
            }
        }
    }
}

#[test]
fn nested_and_general_builders_agree() {
    let d = 5;
    let a = 2;
    let rho_b = [0.0, 1.2, 2.1, 3.5];
    let specs = chain_specs(d, a);
    let ups = ExtendedSelectionMatrix::from_specs(&specs).unwrap();
    let sig = random_sigma(21, d);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let ws = normal_rows(&mut rng, 10_000, d);
    for p in 0..specs.len() {
        let nested = nested_region(&sig, &rho_b, a, p, None).unwrap();
        let general = general_region_orthogonal(&sig, &ups, &rho_b, p, None).unwrap();
        assert!(nested.canonical().approx_eq(&general.canonical(), 1e-12), "order {p}");
        for w in &ws {
            assert_eq!(nested.contains(w), general.contains(w));
        }
    }
    // restricted competitor list
    let nested = nested_region(&sig, &rho_b, a, 2, Some(1)).unwrap();
    let general = general_region_orthogonal(&sig, &ups, &rho_b, 2, Some(&[1, 2, 3])).unwrap();
    assert!(nested.canonical().approx_eq(&general.canonical(), 1e-12));
}

#[test]
fn extended_selection_shapes() {
    let all = postcaic_core::CandidateSet::all_subsets(5, 2).unwrap();
    let ups = ExtendedSelectionMatrix::from_specs(&all.specs).unwrap();
    assert_eq!(ups.shape(), (8, 15));
    let two = ups.restrict(&[0, 7]);
    assert_eq!(two.shape(), (2, 15));
    for (s, (j, k)) in ups.pairs().into_iter().enumerate() {
        assert_eq!(ups.slot(j, k), 5 + s);
        assert_eq!(ups.slot(k, j), 5 + s);
    }
    let m = ups.to_matrix();
    for r in 0..8 {
        for (s, (j, k)) in ups.pairs().into_iter().enumerate() {
            assert_eq!(m[(r, 5 + s)], m[(r, j)] * m[(r, k)]);
        }
    }
    let mut bad = ups.row(3).to_vec();
    bad[5] = 1 - bad[5];
    assert!(ExtendedSelectionMatrix::from_rows(5, vec![bad]).is_err());
    assert!(ExtendedSelectionMatrix::from_rows(5, vec![ups.row(3).to_vec()]).is_ok());
}

#[test]
fn general_builder_four_model_example() {
    // M0 = {1}, M1 = {1,2}, M2 = {1,2,3}, M3 = {1,3}
    let d = 3;
    let specs = vec![
        ModelSpec::from_indices(d, &[0], 1).unwrap(),
        ModelSpec::from_indices(d, &[0, 1], 1).unwrap(),
        ModelSpec::from_indices(d, &[0, 1, 2], 1).unwrap(),
        ModelSpec::from_indices(d, &[0, 2], 1).unwrap(),
    ];
    let ups = ExtendedSelectionMatrix::from_specs(&specs).unwrap();
    let sig = random_sigma(31, d);
    let s = &sig.sigma;
    let rho_b = [0.0, 1.1, 2.0, 0.9];
    let region = general_region_orthogonal(&sig, &ups, &rho_b, 0, None).unwrap();
    assert_eq!(region.len(), 3);
    let w = [0.3, -1.2, 0.7];
    // against M3: -(w3^2 S33 + 2 w1 w3 S13) >= -2(rho_b3 - rho_b0)
    let c = &region.constraints()[2];
    let direct = -(w[2] * w[2] * s[(2, 2)] + 2.0 * w[0] * w[2] * s[(0, 2)]);
    assert!((c.value(&w) - direct).abs() < 1e-12);
    assert!((c.rhs + 2.0 * 0.9).abs() < 1e-15);
}

#[test]
fn identical_models_give_trivial_constraint() {
    let specs = vec![ModelSpec::from_indices(3, &[0, 1], 1).unwrap(); 2];
    let ups = ExtendedSelectionMatrix::from_specs(&specs).unwrap();
    let sig = random_sigma(41, 3);
    let region = general_region_orthogonal(&sig, &ups, &[1.0, 1.0], 0, None).unwrap();
    assert_eq!(region.len(), 1);
    let c = &region.constraints()[0];
    assert!(c.q.iter().all(|&v| v == 0.0));
    assert_eq!(c.rhs, 0.0);
    assert!(region.contains(&[5.0, -2.0, 1.0]));
}

#[test]
fn dimension_mismatch_is_rejected() {
    let specs = chain_specs(4, 1);
    let ups = ExtendedSelectionMatrix::from_specs(&specs).unwrap();
    let sig = random_sigma(42, 3);
    assert!(general_region_orthogonal(&sig, &ups, &[0.0, 1.0, 2.0, 3.0], 0, None).is_err());
}

fn acceptance_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn stacked_region_reduces_to_orthogonal_on_diagonal_information() {
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let diag_i = DVector::from_fn(d, |j, _| 1.0 + j as f64 * 0.5);
    let diag_j = DVector::from_fn(d, |j, _| 2.0 - j as f64 * 0.3);
    let sig = SigmaEstimate::from_parts(DMatrix::from_diagonal(&diag_i), DMatrix::from_diagonal(&diag_j), 40).unwrap();
    let specs = vec![
        ModelSpec::from_indices(d, &[0], 1).unwrap(),
        ModelSpec::from_indices(d, &[0, 1], 1).unwrap(),
        ModelSpec::from_indices(d, &[0, 2, 3], 1).unwrap(),
        ModelSpec::from_indices(d, &[0, 1, 2, 3], 1).unwrap(),
    ];
    let ups = ExtendedSelectionMatrix::from_specs(&specs).unwrap();
    let rho_b = [0.0, 0.8, 1.7, 2.4];
    let n = 100_000;
    for sel in 0..4 {
        let orth = general_region_orthogonal(&sig, &ups, &rho_b, sel, None).unwrap();
        let stacked = general_region_nonorthogonal(&sig, &specs, &rho_b, sel, None, 0).unwrap();
        let p1 = acceptance_estimate(&orth, n, 52);
        let p2 = acceptance_estimate(&stacked.mixed, n, 53);
        let se = (acceptance_se(p1, n).powi(2) + acceptance_se(p2, n).powi(2)).sqrt().max(1e-5);
        assert!((p1 - p2).abs() <= 4.0 * se, "selected {sel}: {p1} vs {p2}");
    }
    let _ = &mut rng;
}

#[test]
fn stacked_block_structure() {
    let d = 4;
    let sig = random_sigma(61, d);
    let specs = vec![
        ModelSpec::from_indices(d, &[0], 1).unwrap(),
        ModelSpec::from_indices(d, &[0, 1], 1).unwrap(),
        ModelSpec::from_indices(d, &[0, 1, 2, 3], 1).unwrap(),
    ];
    let r = 3;
    let st = general_region_nonorthogonal(&sig, &specs, &[0.0, 1.0, 2.0], 1, None, r).unwrap();
    assert_eq!(st.e(), 1 + 2 + 4);
    assert_eq!(st.r(), r);
    assert_eq!(st.fixed.dim(), 7);
    assert_eq!(st.mixed.dim(), 10);
    assert_eq!(st.mixed.free_tail(), r);
    assert_eq!(st.fixed.len(), 2);
    for (c, comp) in [0usize, 2].into_iter().enumerate() {
        let a1 = &st.a1[c];
        for (b, &(o, l)) in st.blocks.iter().enumerate() {
            for (b2, &(o2, l2)) in st.blocks.iter().enumerate() {
                let blk = a1.view((o, o2), (l, l2));
                let nonzero = blk.iter().any(|&v| v != 0.0);
                let expected = b == b2 && (b == 1 || b == comp);
                assert_eq!(nonzero, expected, "constraint {c}, block ({b}, {b2})");
            }
        }
        // the selected block is positive, the competitor block negative
        let (o, l) = st.blocks[1];
        assert!(a1.view((o, o), (l, l)).symmetric_eigenvalues().min() > 0.0);
        let (o, l) = st.blocks[comp];
        assert!(a1.view((o, o), (l, l)).symmetric_eigenvalues().max() < 0.0);
        let a = st.a_matrix(c);
        assert_eq!(a.view((7, 7), (r, r)).into_owned(), DMatrix::identity(r, r));
        assert!(a.view((0, 7), (7, r)).iter().all(|&v| v == 0.0));
        // random-effect coordinates stay out of the constraints
        assert_eq!(st.mixed.constraints()[c].q.nrows(), 7);
    }
    // E^{1/2} squares to a unit-diagonal matrix
    let e = &st.e_sqrt * &st.e_sqrt;
    for i in 0..7 {
        assert!((e[(i, i)] - 1.0).abs() < 1e-10);
    }
    assert!(general_region_nonorthogonal(&sig, &specs, &[0.0, 1.0, 2.0], 1, Some(&[0, 2]), 0).is_err());
}

#[test]
fn misspecified_matches_nonorthogonal_membership() {
    let d = 4;
    let sig = random_sigma(71, d);
    let specs = vec![
        ModelSpec::from_indices(d, &[0], 1).unwrap(),
        ModelSpec::from_indices(d, &[0, 1], 1).unwrap(),
        ModelSpec::from_indices(d, &[0, 2], 1).unwrap(),
        ModelSpec::from_indices(d, &[0, 1, 2, 3], 1).unwrap(),
    ];
    let rho_b = [0.0, 0.9, 1.1, 2.5];
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    for sel in 0..4 {
        let mis = misspecified_region(&sig, &specs, &rho_b, sel, 2).unwrap();
        let gen = general_region_nonorthogonal(&sig, &specs, &rho_b, sel, None, 2).unwrap();
        assert_eq!(mis.mixed.len(), specs.len() - 1);
        let ws = normal_rows(&mut rng, 10_000, mis.mixed.dim());
        let agree = ws.iter().filter(|w| mis.mixed.contains(w) == gen.mixed.contains(w)).count();
        assert_eq!(agree, ws.len(), "selected {sel}");
    }
    let no_smallest = vec![ModelSpec::from_indices(d, &[0, 1], 1).unwrap(), ModelSpec::from_indices(d, &[0, 2], 1).unwrap()];
    assert!(misspecified_region(&sig, &no_smallest, &[0.0, 1.0], 0, 0).is_err());
}

#[test]
fn orthogonality_check_cases() {
    let sig = SigmaEstimate::from_parts(DMatrix::identity(4, 4), DMatrix::identity(4, 4), 10).unwrap();
    let a = ModelSpec::from_indices(4, &[0, 1], 0).unwrap();
    let b = ModelSpec::from_indices(4, &[2, 3], 0).unwrap();
    assert_eq!(check_orthogonality(&sig, &a, &b), (0.0, true));
    let c = ModelSpec::from_indices(4, &[1, 2], 0).unwrap();
    let (stat, pass) = check_orthogonality(&sig, &a, &c);
    assert_eq!(stat, 1.0);
    assert!(!pass);
}

#[test]
fn sigma_is_identity_without_random_effects() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let a = random_spd(&mut rng, 5);
    let sig = SigmaEstimate::from_parts(a.clone(), a, 12).unwrap();
    assert!((sig.sigma - DMatrix::identity(5, 5)).abs().max() < 1e-12);
}

#[test]
fn sigma_from_fit_is_symmetric_psd() {
    let data = common::nerm_data(82, 30, 5, 4, 1.0, 1.0);
    let fit = postcaic_core::lmm::fit_model(&data, &ModelSpec::full(4), &Structure::nested_error(), &FitOptions::default()).unwrap();
    let sig = sigma_matrix(&fit).unwrap();
    assert!((&sig.sigma - sig.sigma.transpose()).abs().max() < 1e-12);
    assert!(sig.sigma.clone().symmetric_eigenvalues().min() >= -1e-10);
    // J^c dominates I^m, so Sigma - I is PSD
    let diff = &sig.sigma - DMatrix::identity(4, 4);
    assert!(diff.symmetric_eigenvalues().min() >= -1e-10);
    assert!(SigmaEstimate::from_parts(-DMatrix::<f64>::identity(2, 2), DMatrix::identity(2, 2), 3).is_err());
}

#[test]
fn empty_region_is_reported() {
    let c = QuadraticConstraint::quadratic(DMatrix::from_row_slice(1, 1, &[1.0]), -1.0, Sense::Less).unwrap();
    let region = ConstraintSet::new(1, 0, vec![c]).unwrap();
    assert!(ensure_nonempty(&region, 1).is_err());
    assert_eq!(ensure_nonempty(&ConstraintSet::unconstrained(2), 1).unwrap(), 1.0);
}

#[test]
fn contains_edge_cases() {
    let region = ConstraintSet::unconstrained(3);
    assert!(region.contains(&[1e6, -1e6, 0.0]));
    let c = QuadraticConstraint::quadratic(DMatrix::identity(2, 2), 1.0, Sense::GreaterEqual).unwrap();
    let region = ConstraintSet::new(2, 0, vec![c]).unwrap();
    assert!(!region.contains(&[0.0, 0.0]));
    assert!(ConstraintSet::new(3, 0, vec![QuadraticConstraint::quadratic(DMatrix::identity(2, 2), 1.0, Sense::Less).unwrap()]).is_err());
}

fn arb_constraint(d: usize) -> impl Strategy<Value = QuadraticConstraint> {
    (
        prop::collection::vec(-3.0f64..3.0, d * d),
        prop::option::of(prop::collection::vec(-2.0f64..2.0, d)),
        -5.0f64..5.0,
        any::<bool>(),
    )
        .prop_map(move |(q, l, rhs, ge)| {
            let sense = if ge { Sense::GreaterEqual } else { Sense::Less };
            let mut c = QuadraticConstraint::quadratic(DMatrix::from_vec(d, d, q), rhs, sense).unwrap();
            c.linear = l.map(DVector::from_vec);
            c
        })
}

proptest! {
    #[test]
    fn listing_round_trip(cs in prop::collection::vec(arb_constraint(3), 0..5), free in 0usize..3) {
        let region = ConstraintSet::new(3 + free, free, cs).unwrap();
        let back = ConstraintSet::from_listing(&region.to_listing()).unwrap();
        prop_assert_eq!(back, region);
    }

    #[test]
    fn canonical_keeps_membership(cs in prop::collection::vec(arb_constraint(2), 1..4), w in prop::collection::vec(-3.0f64..3.0, 2)) {
        let region = ConstraintSet::new(2, 0, cs).unwrap();
        let canon = region.canonical();
        prop_assert!(canon.canonical().approx_eq(&canon, 0.0));
        // strict versus weak boundaries differ only on a null set
        let on_boundary = region.constraints().iter().any(|c| (c.value(&w) - c.rhs).abs() < 1e-12);
        if !on_boundary {
            prop_assert_eq!(region.contains(&w), canon.contains(&w));
        }
    }

    #[test]
    fn nested_regions_tile(seed in 0u64..1000, w in prop::collection::vec(-4.0f64..4.0, 4), gaps in prop::collection::vec(0.05f64..2.0, 3)) {
        let sig = random_sigma(seed, 4);
        let mut rho_b = vec![0.0];
        for g in gaps {
            let last = *rho_b.last().unwrap();
            rho_b.push(last + g);
        }
        let inside = (0..4).filter(|&p| nested_region(&sig, &rho_b, 1, p, None).unwrap().contains(&w)).count();
        prop_assert_eq!(inside, 1);
    }
}
