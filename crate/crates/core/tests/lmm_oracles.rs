mod common;

use common::{max_rel, nerm_data, rel_err, Dense};
use nalgebra::{DMatrix, DVector};
use postcaic_core::lmm::{
    build_k, conditional_loglik, effective_dof, extended_loglik, fit_at_theta, fit_model, gls_beta, marginal_loglik,
    mixed_weight_jacobian, mixed_weights, mse_first_order, mse_second_order, predict_mixed, solve_henderson, MseEvaluator,
};
use postcaic_core::{
    BiasMethod, Cluster, ClusteredDataset, FitOptions, Method, MixedTarget, ModelSpec, Variance, VarianceStructure,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn theta(su: f64, se: f64) -> Variance {
    Variance::nested_error(su, se).unwrap()
}

fn zero_bias() -> FitOptions {
    FitOptions::default().with_bias(BiasMethod::Zero)
}

#[test]
fn marginal_loglik_single_observation() {
    let c = Cluster { y: DVector::from_vec(vec![0.0]), x: DMatrix::from_element(1, 1, 1.0), z: DMatrix::zeros(1, 1) };
    let data = ClusteredDataset::new(vec![c], 1, true).unwrap();
    let l = marginal_loglik(&data, &ModelSpec::full(1), &theta(0.0, 1.0), &DVector::from_vec(vec![0.0])).unwrap();
    assert!((l + 0.918_938_533_204_672_7).abs() < 1e-12);
}

#[test]
fn marginal_loglik_residual_doubling() {
    let data = nerm_data(3, 4, 3, 2, 1.0, 1.0);
    let spec = ModelSpec::full(2);
    let th = theta(0.0, 1.0);
    let beta = DVector::from_vec(vec![0.3, -0.2]);
    let l1 = marginal_loglik(&data, &spec, &th, &beta).unwrap();
    let ys: Vec<DVector<f64>> = data
        .clusters()
        .iter()
        .map(|c| {
            let fit = &c.x * &beta;
            &fit + (&c.y - &fit) * 2.0
        })
        .collect();
    let doubled = data.with_responses(&ys).unwrap();
    let l2 = marginal_loglik(&doubled, &spec, &th, &beta).unwrap();
    let ss: f64 = data.clusters().iter().map(|c| (&c.y - &c.x * &beta).norm_squared()).sum();
    assert!((l2 - l1 + 1.5 * ss).abs() < 1e-9 * ss);
}

#[test]
fn marginal_loglik_matches_dense_v() {
    let ys = vec![DVector::zeros(2), DVector::zeros(2)];
    let xs = vec![DMatrix::from_element(2, 1, 1.0); 2];
    let data = ClusteredDataset::nested_error(ys, xs, 1).unwrap();
    let spec = ModelSpec::full(1);
    let th = theta(1.0, 1.0);
    let beta = DVector::from_vec(vec![0.0]);
    let dense = Dense::new(&data, &spec, &th).loglik(&beta);
    let l = marginal_loglik(&data, &spec, &th, &beta).unwrap();
    assert!(rel_err(l, dense) < 1e-12);
    for seed in 0..5 {
        let data = nerm_data(seed, 6, 4, 3, 0.7, 1.3);
        let spec = ModelSpec::full(3);
        let th = theta(0.7, 1.3);
        let beta = DVector::from_vec(vec![1.0, -0.5, 0.2]);
        let l = marginal_loglik(&data, &spec, &th, &beta).unwrap();
        assert!(rel_err(l, Dense::new(&data, &spec, &th).loglik(&beta)) < 1e-10);
    }
}

#[test]
fn conditional_loglik_reductions() {
    let data = nerm_data(11, 5, 3, 2, 1.0, 1.0);
    let spec = ModelSpec::full(2);
    let beta = DVector::from_vec(vec![0.5, 0.1]);
    let u0 = DVector::zeros(5);
    let lc = conditional_loglik(&data, &spec, &theta(1.0, 1.0), &beta, &u0).unwrap();
    let lm = marginal_loglik(&data, &spec, &theta(0.0, 1.0), &beta).unwrap();
    assert!(rel_err(lc, lm) < 1e-12);

    let u = DVector::from_vec(vec![0.3, -0.1, 0.2, 0.0, 1.0]);
    let ys: Vec<DVector<f64>> = data.clusters().iter().enumerate().map(|(i, c)| &c.x * &beta + c.z.column(0) * u[i]).collect();
    let exact = data.with_responses(&ys).unwrap();
    let lc = conditional_loglik(&exact, &spec, &theta(1.0, 1.0), &beta, &u).unwrap();
    let m = exact.m() as f64;
    assert!((lc + 0.5 * m * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-10);
}

#[test]
fn extended_loglik_matches_dense() {
    let data = nerm_data(5, 7, 4, 3, 0.8, 1.2);
    let spec = ModelSpec::full(3);
    let th = theta(0.8, 1.2);
    let beta = DVector::from_vec(vec![0.2, 0.4, -0.3]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
    let d = Dense::new(&data, &spec, &th);
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let res = &d.y - &d.x * &beta - &d.z * &u;
    let cond = -0.5 * (d.m() as f64 * (ln2pi + d.s.ln()) + res.norm_squared() / d.s);
    let re = -0.5 * (7.0 * (ln2pi + 0.8f64.ln()) + u.norm_squared() / 0.8);
    let l = extended_loglik(&data, &spec, &th, &beta, &u).unwrap();
    assert!(rel_err(l, cond + re) < 1e-12);
}

#[test]
fn henderson_ols_and_shrinkage_limits() {
    let base = nerm_data(21, 6, 3, 2, 1.0, 1.0);
    let clusters: Vec<Cluster<f64>> =
        base.clusters().iter().map(|c| Cluster { y: c.y.clone(), x: c.x.clone(), z: DMatrix::zeros(c.y.len(), 1) }).collect();
    let data = ClusteredDataset::new(clusters, 1, true).unwrap();
    let spec = ModelSpec::full(2);
    let (beta, u) = solve_henderson(&data, &spec, &theta(1.0, 2.0)).unwrap();
    let (y, x, _) = data.dense();
    let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * y;
    assert!(max_rel(&beta, &ols) < 1e-10);
    assert!(u.amax() < 1e-14);

    let (_, u) = solve_henderson(&base, &spec, &theta(1e-10, 1.0)).unwrap();
    assert!(u.amax() < 1e-8);
}

#[test]
fn henderson_equals_gls_and_dense() {
    for seed in 0..10 {
        let data = nerm_data(100 + seed, 12, 4, 4, 0.6, 1.1);
        let spec = ModelSpec::from_indices(4, &[0, 1, 3], 1).unwrap();
        let th = theta(0.6, 1.1);
        let (beta_h, u_h) = solve_henderson(&data, &spec, &th).unwrap();
        let beta_g = gls_beta(&data, &spec, &th).unwrap();
        assert!(max_rel(&beta_h, &beta_g) < 1e-8);
        let d = Dense::new(&data, &spec, &th);
        assert!(max_rel(&beta_g, &d.gls()) < 1e-10);
        let (_, u_d) = d.henderson();
        assert!(max_rel(&u_h, &u_d) < 1e-9);
    }
}

#[test]
fn woodbury_inverse_matches_dense() {
    // the cluster-wise V^-1 reaches the public API through X'V^-1X = (K^-1_11)^-1
    for seed in 0..5 {
        let data = nerm_data(200 + seed, 8, 5, 3, 1.4, 0.6);
        let spec = ModelSpec::full(3);
        let th = theta(1.4, 0.6);
        let d = Dense::new(&data, &spec, &th);
        let vi = d.vinv();
        let a_dense = d.x.transpose() * &vi * &d.x;
        let kb = build_k(&data, &spec, &th).unwrap();
        let a_inv = a_dense.try_inverse().unwrap();
        let err = (&kb.kinv11 - &a_inv).amax() / a_inv.amax();
        assert!(err < 1e-10, "K^-1_11 error {err}");
        let kd = d.k().try_inverse().unwrap();
        let err = (kb.kinv() - &kd).amax() / kd.amax();
        assert!(err < 1e-10, "K^-1 error {err}");
        assert!((&kb.kinv12 - kb.kinv21().transpose()).amax() < 1e-14);
    }
}

#[test]
fn effective_dof_matches_dense_and_limits() {
    let data = nerm_data(7, 30, 5, 3, 1.0, 1.0);
    let spec = ModelSpec::full(3);
    let mut last = 0.0;
    for &ratio in &[0.0, 0.01, 0.1, 0.5, 1.0, 2.0, 10.0] {
        let th = theta(ratio, 1.0);
        let rho = effective_dof(&data, &spec, &th).unwrap();
        if ratio > 0.0 {
            assert!(rel_err(rho, Dense::new(&data, &spec, &th).dof()) < 1e-10);
        } else {
            assert!((rho - 3.0).abs() < 1e-10);
        }
        assert!(rho >= last - 1e-10);
        last = rho;
    }
    let rho = effective_dof(&data, &spec, &theta(1e9, 1.0)).unwrap();
    assert!((rho - 32.0).abs() < 1e-5, "rank([X Z]) limit, got {rho}");
}

#[test]
fn effective_dof_bounds_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for inst in 0..100 {
        let n = rng.random_range(3..12);
        let mi = rng.random_range(2..6);
        let data = nerm_data(1000 + inst, n, mi, 4, 1.0, 1.0);
        let spec = ModelSpec::from_indices(4, &[0, 1, 2], 1).unwrap();
        let th = theta(rng.random_range(0.01..5.0), rng.random_range(0.1..3.0));
        let rho = effective_dof(&data, &spec, &th).unwrap();
        assert!(rho >= 3.0 - 1e-10 && rho <= 3.0 + n as f64 + 1e-10, "rho {rho} out of bounds");
    }
}

#[test]
fn reml_fit_is_stationary_and_matches_dense_objective() {
    let data = nerm_data(31, 30, 5, 3, 1.0, 1.0);
    let spec = ModelSpec::full(3);
    let fit = fit_model(&data, &spec, &VarianceStructure::nested_error(), &zero_bias()).unwrap();
    assert!(fit.converged && !fit.boundary);
    let obj = |su: f64, se: f64| Dense::new(&data, &spec, &theta(su, se)).reml_objective();
    let t = &fit.theta_hat.theta;
    assert!(rel_err(fit.objective, obj(t[0], t[1])) < 1e-10);
    for k in 0..2 {
        let h = 1e-5 * t[k];
        let mut up = t.clone();
        let mut dn = t.clone();
        up[k] += h;
        dn[k] -= h;
        let g = (obj(up[0], up[1]) - obj(dn[0], dn[1])) / (2.0 * h);
        assert!(g.abs() < 1e-4, "REML gradient component {k} = {g}");
    }
    let beta = Dense::new(&data, &spec, &fit.theta_hat).gls();
    assert!(max_rel(&fit.beta_model, &beta) < 1e-10);
}

#[test]
fn ml_fit_maximizes_marginal_loglik() {
    let data = nerm_data(32, 20, 4, 2, 1.0, 1.0);
    let spec = ModelSpec::full(2);
    let fit = fit_model(&data, &spec, &VarianceStructure::nested_error(), &zero_bias().with_method(Method::Ml)).unwrap();
    let t = fit.theta_hat.theta.clone();
    let prof = |su: f64, se: f64| {
        let d = Dense::new(&data, &spec, &theta(su, se));
        d.loglik(&d.gls())
    };
    let l0 = prof(t[0], t[1]);
    assert!(rel_err(fit.loglik_marginal, l0) < 1e-10);
    for (a, b) in [(1.01, 1.0), (0.99, 1.0), (1.0, 1.01), (1.0, 0.99)] {
        assert!(prof(t[0] * a, t[1] * b) <= l0 + 1e-9);
    }
}

#[test]
fn zero_random_effect_variance_hits_boundary() {
    let mut hits = 0;
    for seed in 0..10 {
        let data = nerm_data(500 + seed, 30, 5, 2, 0.0, 1.0);
        let fit = fit_model(&data, &ModelSpec::full(2), &VarianceStructure::nested_error(), &zero_bias()).unwrap();
        if fit.boundary {
            assert_eq!(fit.theta_hat.theta[0], 0.0);
            hits += 1;
        }
    }
    assert!(hits >= 3, "only {hits} boundary fits");
}

#[test]
fn variance_estimates_are_consistent() {
    let reps = 200;
    let mut bias_u = 0.0;
    let mut bias_e = 0.0;
    for seed in 0..reps {
        let data = nerm_data(10_000 + seed, 90, 5, 3, 1.0, 1.0);
        let fit = fit_model(&data, &ModelSpec::full(3), &VarianceStructure::nested_error(), &zero_bias()).unwrap();
        bias_u += fit.theta_hat.theta[0] - 1.0;
        bias_e += fit.theta_hat.theta[1] - 1.0;
    }
    assert!((bias_u / reps as f64).abs() < 0.05);
    assert!((bias_e / reps as f64).abs() < 0.05);
}

#[test]
fn k_reduces_to_fixed_effect_information_without_random_effects() {
    let base = nerm_data(41, 5, 4, 2, 1.0, 1.0);
    let clusters: Vec<Cluster<f64>> =
        base.clusters().iter().map(|c| Cluster { y: c.y.clone(), x: c.x.clone(), z: DMatrix::zeros(c.y.len(), 0) }).collect();
    let data = ClusteredDataset::new(clusters, 1, true).unwrap();
    let st = VarianceStructure::linear(vec![DMatrix::zeros(0, 0)], vec![1.0]).unwrap();
    let th = Variance::new(DVector::from_vec(vec![2.0]), st).unwrap();
    let kb = build_k(&data, &ModelSpec::full(2), &th).unwrap();
    let (_, x, _) = data.dense();
    let expect = x.transpose() * &x / 2.0;
    assert!((&kb.k - &expect).amax() < 1e-12);
}

#[test]
fn mixed_prediction_reductions() {
    let data = nerm_data(51, 10, 5, 3, 1.0, 1.0);
    let spec = ModelSpec::full(3);
    let fit = fit_at_theta(&data, &spec, &theta(1.0, 1.0), &zero_bias()).unwrap();
    let k = DVector::from_vec(vec![1.0, 0.3, -0.2]);
    let syn = MixedTarget::synthetic(k.clone(), 1, 2);
    assert!((predict_mixed(&fit, &syn).unwrap() - k.dot(&fit.beta_hat)).abs() < 1e-14);
    let e2 = MixedTarget::synthetic(DVector::from_vec(vec![0.0, 1.0, 0.0]), 1, 0);
    assert_eq!(predict_mixed(&fit, &e2).unwrap(), fit.beta_hat[1]);

    // Random intercept BLUP: u_i = gamma_i (ybar_i - xbar_i' beta).
    let means = data.cluster_covariate_means();
    for i in 0..10 {
        let c = &data.clusters()[i];
        let mi = c.y.len() as f64;
        let gamma = 1.0 / (1.0 + 1.0 / mi);
        let ybar = c.y.mean();
        let t = MixedTarget::new(means[i].clone(), DVector::from_vec(vec![1.0]), i);
        let synth = means[i].dot(&fit.beta_hat);
        let expect = gamma * ybar + (1.0 - gamma) * synth;
        assert!((predict_mixed(&fit, &t).unwrap() - expect).abs() < 1e-10);
    }
}

#[test]
fn g1_closed_form_for_cluster_mean() {
    let data = nerm_data(61, 10, 5, 2, 1.0, 1.0);
    let spec = ModelSpec::full(2);
    let fit = fit_at_theta(&data, &spec, &theta(1.0, 1.0), &zero_bias()).unwrap();
    let t = MixedTarget::new(DVector::zeros(2), DVector::from_vec(vec![1.0]), 3);
    let (g1, g2) = mse_first_order(&data, &fit, &t).unwrap();
    assert!((g1 - 1.0 / 6.0).abs() < 1e-12);
    assert!(g2 > 0.0);
}

#[test]
fn g2_alone_for_synthetic_target() {
    let data = nerm_data(62, 10, 5, 3, 1.0, 1.0);
    let spec = ModelSpec::full(3);
    let fit = fit_at_theta(&data, &spec, &theta(0.8, 1.2), &zero_bias()).unwrap();
    let k = DVector::from_vec(vec![1.0, 0.5, -0.5]);
    let t = MixedTarget::synthetic(k.clone(), 1, 4);
    let (g1, g2) = mse_first_order(&data, &fit, &t).unwrap();
    let a = Dense::new(&data, &spec, &theta(0.8, 1.2));
    let vi = a.vinv();
    let cov = (a.x.transpose() * &vi * &a.x).try_inverse().unwrap();
    assert_eq!(g1, 0.0);
    assert!(rel_err(g2, k.dot(&(&cov * &k))) < 1e-10);
}

#[test]
fn k_inverse_quadratic_form_equals_g1_plus_g2() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for inst in 0..20 {
        let data = nerm_data(300 + inst, 8, rng.random_range(2..7), 4, 1.0, 1.0);
        let spec = ModelSpec::from_indices(4, &[0, 2, 3], 1).unwrap();
        let th = theta(rng.random_range(0.1..3.0), rng.random_range(0.2..2.0));
        let fit = fit_at_theta(&data, &spec, &th, &zero_bias()).unwrap();
        let k = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let i = rng.random_range(0..8);
        let t = MixedTarget::new(k, DVector::from_vec(vec![1.0]), i);
        let (g1, g2) = mse_first_order(&data, &fit, &t).unwrap();
        let c = t.c_vector(&spec, data.n());
        let kinv = build_k(&data, &spec, &th).unwrap().kinv();
        let quad = c.dot(&(&kinv * &c));
        assert!(rel_err(g1 + g2, quad) < 1e-8, "instance {inst}: {} vs {quad}", g1 + g2);
    }
}

#[test]
fn mixed_weight_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for inst in 0..20 {
        let mi = rng.random_range(2..8);
        let data = nerm_data(400 + inst, 5, mi, 2, 1.0, 1.0);
        let th = theta(rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
        let m = DVector::from_vec(vec![1.0]);
        let jac = mixed_weight_jacobian(&data, &th, 2, &m).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..2 {
            let h = 1e-5 * th.theta[k];
            let mut up = th.theta.clone();
            let mut dn = th.theta.clone();
            up[k] += h;
            dn[k] -= h;
            let a_up = mixed_weights(&data, &th.with_theta(up), 2, &m).unwrap();
            let a_dn = mixed_weights(&data, &th.with_theta(dn), 2, &m).unwrap();
            let fd = (a_up - a_dn) / (2.0 * h);
            let an = jac.row(k).transpose();
            worst = worst.max(max_rel(&an, &fd));
        }
        assert!(worst < 1e-5, "instance {inst}: relative error {worst}");
    }
}

#[test]
fn second_order_mse_dominates_first_order() {
    for seed in 0..10 {
        let data = nerm_data(600 + seed, 15, 5, 3, 1.0, 1.0);
        let fit = fit_model(&data, &ModelSpec::full(3), &VarianceStructure::nested_error(), &zero_bias()).unwrap();
        if fit.boundary {
            continue;
        }
        let ev = MseEvaluator::new(&data, &fit).unwrap();
        let means = data.cluster_covariate_means();
        for i in 0..15 {
            let t = MixedTarget::new(means[i].clone(), DVector::from_vec(vec![1.0]), i);
            let (g1, g2) = ev.first_order(&t).unwrap();
            let m2 = mse_second_order(&data, &fit, &t).unwrap();
            assert!(m2 >= g1 + g2);
            assert!(ev.g3(&t).unwrap() >= 0.0);
        }
        let syn = MixedTarget::synthetic(means[0].clone(), 1, 0);
        assert_eq!(ev.g3(&syn).unwrap(), 0.0);
    }
}

#[test]
fn g3_shrinks_with_cluster_count() {
    let avg = |n: usize| {
        let mut tot = 0.0;
        for seed in 0..20 {
            let data = nerm_data(700 + seed, n, 5, 2, 1.0, 1.0);
            let fit = fit_at_theta(&data, &ModelSpec::full(2), &theta(1.0, 1.0), &zero_bias()).unwrap();
            let ev = MseEvaluator::new(&data, &fit).unwrap();
            let t = MixedTarget::new(DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![1.0]), 0);
            tot += ev.g3(&t).unwrap();
        }
        tot / 20.0
    };
    let ratio = avg(90) / avg(15);
    let expect = 15.0 / 90.0;
    assert!(ratio > expect / 2.0 && ratio < expect * 2.0, "ratio {ratio}");
}

#[test]
fn f32_fit_agrees_with_f64() {
    let data = nerm_data(81, 20, 5, 2, 1.0, 1.0);
    let (ys, xs): (Vec<_>, Vec<_>) =
        data.clusters().iter().map(|c| (c.y.map(|v| v as f32), c.x.map(|v| v as f32))).unzip();
    let data32 = ClusteredDataset::<f32>::nested_error(ys, xs, 1).unwrap();
    let spec = ModelSpec::full(2);
    let opts = zero_bias();
    let f64fit = fit_model(&data, &spec, &VarianceStructure::nested_error(), &opts).unwrap();
    let opts32 = FitOptions { grad_tol: 1e-3, rel_tol: 1e-6, ..opts };
    let f32fit = fit_model(&data32, &spec, &VarianceStructure::<f32>::nested_error(), &opts32).unwrap();
    for k in 0..2 {
        assert!(rel_err(f32fit.theta_hat.theta[k] as f64, f64fit.theta_hat.theta[k]) < 1e-3);
        assert!(rel_err(f32fit.beta_hat[k] as f64, f64fit.beta_hat[k]) < 1e-3);
    }
    assert!(rel_err(f32fit.rho_hat as f64, f64fit.rho_hat) < 1e-3);
}
