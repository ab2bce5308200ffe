use std::time::Instant;

use krylov_eb::covariance::{build_cov_operator, CovBackend, CovDerivative, CovarianceOperator, Geometry, Grid, MaternKernel};
use krylov_eb::estimate::{map_exact, map_reconstruct, optimize_hyperparams, OptimizeOptions, Parameterization};
use krylov_eb::marginal::{objective_exact, objective_gengk, HyperParams, Hyperprior, MarginalModel, PriorFamily};
use krylov_eb::operators::LinearOperator;
use krylov_eb::problems::{relative_error, ProblemInstance};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn heat(n: usize) -> (ProblemInstance, MarginalModel) {
    let p = ProblemInstance::heat(n, 1.0, 0.02, 0).unwrap();
    let prior = PriorFamily::matern(p.geometry(), 1.5, CovBackend::Fft).unwrap();
    let model = MarginalModel::new(p.forward.clone(), p.d.clone(), prior, Hyperprior::Flat).unwrap();
    (p, model)
}

#[test]
fn heat_logdet_term_grows_with_depth() {
    let (_, model) = heat(256);
    let t = HyperParams::new(vec![8.73e-7, 0.2562, 0.0566]).unwrap();
    let fact = model.factorize(&t, 50).unwrap();
    let mut prev = f64::NEG_INFINITY;
    for k in 1..=50 {
        let e = objective_gengk(&model, &t, k, Some(&fact)).unwrap();
        assert!(e.logdet_term >= prev * (1.0 - 1e-14), "k={k}: {} < {prev}", e.logdet_term);
        prev = e.logdet_term;
    }
}

#[test]
fn split_errors_available_for_every_depth() {
    let (_, model) = heat(64);
    let t = HyperParams::new(vec![1e-5, 0.3, 0.1]).unwrap();
    let exact = objective_exact(&model, &t).unwrap();
    let fact = model.factorize(&t, 64).unwrap();
    for k in 1..=fact.k() {
        let e = objective_gengk(&model, &t, k, Some(&fact)).unwrap();
        let re_logdet = rel(e.logdet(), exact.logdet());
        let re_quad = rel(e.quadratic(), exact.quadratic());
        assert!(re_logdet.is_finite() && re_quad.is_finite());
    }
}

#[test]
fn heat_breakdown_reproduces_dense_objective_and_map() {
    let (_, model) = heat(48);
    for t in [[1e-5, 0.3, 0.1], [1e-3, 1.2, 0.3]] {
        let t = HyperParams::new(t.to_vec()).unwrap();
        let exact = objective_exact(&model, &t).unwrap();
        let approx = objective_gengk(&model, &t, 48, None).unwrap();
        assert!(rel(approx.value, exact.value) < 1e-8);
        for i in 0..3 {
            assert!(rel(approx.gradient[i], exact.gradient[i]) < 1e-8, "component {i}");
        }
        let s = map_reconstruct(&model, &t, 48, None).unwrap();
        let s_exact = map_exact(&model, &t).unwrap();
        assert!((&s - &s_exact).norm() < 1e-8 * s_exact.norm());
    }
}

#[test]
fn log_and_linear_parameterizations_share_the_minimizer() {
    // A = 0: F = m/2 log theta_1 + |d|^2 / (2 theta_1), minimized at |d|^2 / m
    let (m, n) = (30, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    let closed = d.norm_squared() / m as f64;
    let prior = PriorFamily::scaled(CovarianceOperator::identity(n));
    let model = MarginalModel::new(LinearOperator::zero(m, n), d, prior, Hyperprior::Flat).unwrap();
    let theta0 = HyperParams::new(vec![1.0, 1.0]).unwrap();
    let mut found = Vec::new();
    for parameterization in [Parameterization::Log, Parameterization::Linear] {
        let opts = OptimizeOptions {
            k: 5,
            grad_tol: 1e-10,
            ftol: 0.0,
            parameterization,
            ..Default::default()
        };
        let (t, trace) = optimize_hyperparams(&model, &theta0, &opts).unwrap();
        assert!(trace.converged, "{parameterization:?}: {:?}", trace.reason);
        assert!(rel(t[0], closed) < 1e-4, "{parameterization:?}: {} vs {closed}", t[0]);
        found.push(t[0]);
    }
    assert!(rel(found[0], found[1]) < 1e-4);
}

#[test]
fn heat_estimate_lands_in_the_reported_band() {
    let (p, model) = heat(256);
    let theta0 = HyperParams::new(vec![1e-4, 1.0, 0.1]).unwrap();
    let opts = OptimizeOptions { k: 22, ..Default::default() };
    let (t, trace) = optimize_hyperparams(&model, &theta0, &opts).unwrap();
    assert!(trace.converged);
    let s = map_reconstruct(&model, &t, 22, None).unwrap();
    let re = relative_error(&p.s_true, &s).unwrap();
    assert!((0.10..=0.25).contains(&re), "relative error {re}");
}

#[test]
fn fft_covariance_cost_is_sublinear_in_ratio() {
    let kernel = MaternKernel::from_std(1.5, 1.0, 0.1).unwrap();
    let time = |n: usize| {
        let g = Geometry::Grid(Grid::unit_1d(n).unwrap());
        let q = build_cov_operator(&g, &kernel, CovDerivative::None, CovBackend::Fft).unwrap();
        let x = DVector::from_element(n, 1.0);
        let mut runs: Vec<f64> = (0..7)
            .map(|_| {
                let start = Instant::now();
                for _ in 0..5 {
                    q.apply(&x).unwrap();
                }
                start.elapsed().as_secs_f64()
            })
            .collect();
        runs.sort_by(f64::total_cmp);
        runs[3]
    };
    let small = time(1 << 14);
    let large = time(1 << 16);
    // quadratic cost would give 16
    assert!(large / small < 10.0, "ratio {}", large / small);
}
