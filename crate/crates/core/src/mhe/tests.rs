use super::*;
use crate::arrival::unpack_eta;
use crate::data::WindowOrigin;
use crate::model::{LtiScalar, Rk4Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

fn scalar_window(ys: &[f64]) -> Window {
    let m = ys.len() - 1;
    Window {
        u_win: vec![DVector::zeros(0); m],
        z: ys[1..m].iter().map(|&y| scalar(y)).collect(),
        y_target: scalar(ys[m]),
        origin: WindowOrigin { trajectory: 0, offset: 0 },
    }
}

fn scalar_eta(s_bar: f64, lambda: f64) -> ArrivalParams {
    unpack_eta(&DVector::from_vec(vec![s_bar, 0.5 * lambda.ln()]), 1).unwrap()
}

/// Dense normal equations `H x = b` of the scalar cost
/// `lambda (s - x0)^2 + sum_{k<m} (y_k - x_k)^2 / r + sum_k (x_k - theta x_{k-1})^2 / q`.
fn scalar_dense(ys: &[f64], theta: f64, s_bar: f64, lambda: f64, q: f64, r: f64) -> (DMatrix<f64>, DVector<f64>) {
    let m = ys.len() - 1;
    let mut h = DMatrix::zeros(m + 1, m + 1);
    let mut b = DVector::zeros(m + 1);
    let mut add = |a: DVector<f64>, c: f64, w: f64| {
        h += &a * a.transpose() * w;
        b += &a * (c * w);
    };
    let unit = |i: usize| {
        let mut e = DVector::zeros(m + 1);
        e[i] = 1.0;
        e
    };
    if lambda > 0.0 {
        add(unit(0), s_bar, lambda);
    }
    for k in 1..m {
        add(unit(k), ys[k], 1.0 / r);
    }
    for k in 1..=m {
        add(unit(k) - unit(k - 1) * theta, 0.0, 1.0 / q);
    }
    (h, b)
}

fn lorenz_truth(m: usize, x0: [f64; 3], theta: &DVector<f64>) -> (Window, DVector<f64>) {
    let model = Rk4Model::lorenz(0.02, 1);
    let mut states = vec![DVector::from_row_slice(&x0)];
    for _ in 0..m {
        let next = model.dynamics(states.last().unwrap(), &DVector::zeros(0), theta);
        states.push(next);
    }
    let window = Window {
        u_win: vec![DVector::zeros(0); m],
        z: (1..m).map(|k| model.output(&states[k], theta)).collect(),
        y_target: model.output(&states[m], theta),
        origin: WindowOrigin { trajectory: 0, offset: 0 },
    };
    let flat = DVector::from_iterator(3 * (m + 1), states.iter().flat_map(|s| s.iter().copied()));
    (window, flat)
}

fn noisy_lorenz_window(m: usize, seed: u64) -> (Window, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = DVector::from_vec(vec![10.0, 30.0]);
    let x0 = [
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
    ];
    let (mut w, truth) = lorenz_truth(m, x0, &theta);
    for z in w.z.iter_mut().chain(std::iter::once(&mut w.y_target)) {
        for v in z.iter_mut() {
            *v += rng.random_range(-1.0..1.0);
        }
    }
    (w, truth)
}

#[test]
fn zero_residual_cost_and_gradient() {
    let theta = DVector::from_vec(vec![10.0, 30.0]);
    let (w, truth) = lorenz_truth(10, [1.0, 2.0, 20.0], &theta);
    let model = Rk4Model::lorenz(0.02, 1);
    let eta = ArrivalParams::from_covariance(truth.rows(0, 3).into_owned(), &DMatrix::identity(3, 3)).unwrap();
    assert!(mhe_cost(&model, &w, &truth, &theta, &eta).unwrap() < 1e-24);
    assert!(mhe_stationarity(&model, &w, &truth, &theta, &eta).unwrap().amax() < 1e-10);
}

#[test]
fn scalar_cost_matches_formula() {
    let ys: [f64; 4] = [0.0, 0.7, -0.4, 1.3];
    let x: DVector<f64> = DVector::from_vec(vec![0.2, 0.5, -0.1, 0.9]);
    let (theta, s_bar, lambda): (f64, f64, f64) = (0.8, 0.3, 2.5);
    let expected = lambda * (s_bar - x[0]).powi(2)
        + (ys[1] - x[1]).powi(2)
        + (ys[2] - x[2]).powi(2)
        + (x[1] - theta * x[0]).powi(2)
        + (x[2] - theta * x[1]).powi(2)
        + (x[3] - theta * x[2]).powi(2);
    let cost = mhe_cost(
        &LtiScalar::default(),
        &scalar_window(&ys),
        &x,
        &scalar(theta),
        &scalar_eta(s_bar, lambda),
    )
    .unwrap();
    assert!((cost - expected).abs() < 1e-14, "{cost} vs {expected}");
}

#[test]
fn cost_scales_inversely_with_weights() {
    let (w, truth) = noisy_lorenz_window(8, 1);
    let theta = DVector::from_vec(vec![11.0, 28.0]);
    let eta = unpack_eta(&DVector::from_vec(vec![0.5, -1.0, 2.0, -1.2, 0.3, -0.8, 0.1, -0.2, -1.5]), 3).unwrap();
    let x = truth.map(|v| v + 0.3);
    let base = Rk4Model::lorenz(0.02, 1);
    let c = 2.0;
    let mut scaled = base.clone();
    scaled.process_cov *= c;
    scaled.measurement_cov *= c;
    let a = mhe_cost(&base, &w, &x, &theta, &eta).unwrap();
    let b = mhe_cost(&scaled, &w, &x, &theta, &eta.scaled(c)).unwrap();
    assert!((a / c - b).abs() <= 1e-12 * a, "{a} {b}");
}

#[test]
fn stationarity_matches_finite_differences() {
    let model = Rk4Model::lorenz(0.02, 1);
    let theta = DVector::from_vec(vec![9.0, 31.0]);
    let eta = unpack_eta(&DVector::from_vec(vec![0.5, -1.0, 2.0, -1.2, 0.3, -0.8, 0.1, -0.2, -1.5]), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..3 {
        let (w, truth) = noisy_lorenz_window(6, seed);
        let x = truth.map(|v| v + rng.random_range(-0.5..0.5));
        let grad = mhe_stationarity(&model, &w, &x, &theta, &eta).unwrap();
        let mut fd = DVector::zeros(x.len());
        for i in 0..x.len() {
            let h = 1e-6 * x[i].abs().max(1.0);
            let mut p = x.clone();
            p[i] += h;
            let plus = mhe_cost(&model, &w, &p, &theta, &eta).unwrap();
            p[i] -= 2.0 * h;
            let minus = mhe_cost(&model, &w, &p, &theta, &eta).unwrap();
            fd[i] = (plus - minus) / (2.0 * h);
        }
        let rel = (&grad - &fd).norm() / fd.norm();
        assert!(rel <= 1e-6, "relative error {rel}");
    }
}

#[test]
fn scalar_gradient_is_dense_quadratic_gradient() {
    let ys = [0.0, 0.7, -0.4, 1.3, 0.2];
    let (theta, s_bar, lambda) = (0.6, -0.2, 0.7);
    let x = DVector::from_vec(vec![0.2, 0.5, -0.1, 0.9, 1.1]);
    let grad = mhe_stationarity(
        &LtiScalar::default(),
        &scalar_window(&ys),
        &x,
        &scalar(theta),
        &scalar_eta(s_bar, lambda),
    )
    .unwrap();
    let (h, b) = scalar_dense(&ys, theta, s_bar, lambda, 1.0, 1.0);
    assert!((grad - (h * &x - b) * 2.0).amax() <= 1e-12);
}

#[test]
fn scalar_solve_is_one_step_and_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let ys: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let theta = rng.random_range(-1.2..1.2);
        let s_bar = rng.random_range(-1.0..1.0);
        let lambda = rng.random_range(0.05..5.0);
        let pred = predict(
            &LtiScalar::default(),
            &scalar_window(&ys),
            &scalar(theta),
            &scalar_eta(s_bar, lambda),
            &MheOptions::default(),
        )
        .unwrap();
        let (h, b) = scalar_dense(&ys, theta, s_bar, lambda, 1.0, 1.0);
        let dense = h.cholesky().unwrap().solve(&b);
        assert!(pred.sol.converged);
        assert!(pred.sol.iterations <= 1);
        assert!((&pred.sol.x_hat - &dense).amax() <= 1e-9);
        assert!((pred.y_hat[0] - dense[3]).abs() <= 1e-9);
        assert!((pred.eps[0] - (ys[3] - dense[3])).abs() <= 1e-9);
    }
}

#[test]
fn zero_noise_lorenz_recovers_truth() {
    let model = Rk4Model::lorenz(0.02, 1);
    let theta = DVector::from_vec(vec![10.0, 30.0]);
    let (w, truth) = lorenz_truth(10, [-3.0, 5.0, 18.0], &theta);
    for sigma in [0.01, 1.0, 100.0] {
        let eta = ArrivalParams::from_covariance(truth.rows(0, 3).into_owned(), &(DMatrix::identity(3, 3) * sigma)).unwrap();
        let pred = predict(&model, &w, &theta, &eta, &MheOptions::default()).unwrap();
        assert!(pred.sol.cost <= 1e-16);
        assert!((&pred.sol.x_hat - &truth).amax() <= 1e-8);
        assert!(pred.eps.amax() <= 1e-8);
    }
}

#[test]
fn noisy_lorenz_converges_to_stationary_point() {
    let model = Rk4Model::lorenz(0.02, 1);
    let eta = ArrivalParams::default_prior(3);
    for seed in 0..10 {
        let (w, _) = noisy_lorenz_window(10, 100 + seed);
        for theta in [[10.0, 30.0], [15.0, 25.0]] {
            let sol = mhe_solve(&model, &w, &DVector::from_row_slice(&theta), &eta, &MheOptions::default()).unwrap();
            assert!(sol.converged, "seed {seed}: kkt {}", sol.kkt_norm);
            assert!(sol.kkt_norm <= 1e-8);
            let grad = mhe_stationarity(&model, &w, &sol.x_hat, &DVector::from_row_slice(&theta), &eta).unwrap();
            assert!(grad.amax() <= 1e-8);
        }
    }
}

#[test]
fn cost_non_increasing_over_iterations() {
    let model = Rk4Model::lorenz(0.02, 1);
    let eta = ArrivalParams::default_prior(3);
    let theta = DVector::from_vec(vec![14.0, 26.0]);
    for seed in 0..5 {
        let (w, _) = noisy_lorenz_window(12, 200 + seed);
        let mut last = f64::INFINITY;
        for max_iter in 0..8 {
            let opts = MheOptions { max_iter, ..Default::default() };
            let sol = mhe_solve(&model, &w, &theta, &eta, &opts).unwrap();
            assert!(sol.cost <= last * (1.0 + 1e-13), "{} > {last}", sol.cost);
            last = sol.cost;
        }
    }
}

#[test]
fn oscillator_mismatch_leaves_prediction_error() {
    // Truth: omega = 1 sampled every 0.5 s; estimator assumes omega = 0.7.
    let truth_model = Rk4Model::oscillator(0.5, 10, 1e-3, 1e-2);
    let model = Rk4Model::oscillator(0.5, 1, 1e-3, 1e-2);
    let one = scalar(1.0);
    let mut x = DVector::from_vec(vec![1.0, 0.0]);
    let mut ys = vec![truth_model.output(&x, &one)];
    for _ in 0..5 {
        x = truth_model.dynamics(&x, &DVector::zeros(0), &one);
        ys.push(truth_model.output(&x, &one));
    }
    let w = Window {
        u_win: vec![DVector::zeros(0); 5],
        z: ys[1..5].to_vec(),
        y_target: ys[5].clone(),
        origin: WindowOrigin { trajectory: 0, offset: 0 },
    };
    let eta = ArrivalParams::from_covariance(DVector::from_vec(vec![1.0, 0.0]), &DMatrix::identity(2, 2)).unwrap();
    let pred = predict(&model, &w, &scalar(0.7), &eta, &MheOptions::default()).unwrap();
    assert!(pred.sol.converged);
    assert!(pred.sol.cost > 0.0);
    assert!(pred.eps.amax() > 1e-3);
}

#[test]
fn weight_scaling_leaves_estimate_unchanged() {
    let base = Rk4Model::lorenz(0.02, 1);
    let theta = DVector::from_vec(vec![12.0, 28.0]);
    let eta = ArrivalParams::default_prior(3);
    let tight = MheOptions { tol: 1e-11, max_iter: 100, ..Default::default() };
    for seed in 0..3 {
        let (w, _) = noisy_lorenz_window(10, 300 + seed);
        let reference = predict(&base, &w, &theta, &eta, &tight).unwrap();
        for c in [0.1, 10.0] {
            let mut scaled = base.clone();
            scaled.process_cov *= c;
            scaled.measurement_cov *= c;
            let p = predict(&scaled, &w, &theta, &eta.scaled(c), &tight).unwrap();
            assert!((&p.sol.x_hat - &reference.sol.x_hat).amax() <= 1e-8);
            assert!((&p.eps - &reference.eps).amax() <= 1e-8);
            assert!((p.sol.cost * c - reference.sol.cost).abs() <= 1e-9 * reference.sol.cost);
        }
    }
}

#[test]
fn indefinite_weight_names_theta() {
    let model = LtiScalar { process_var: -1.0, ..Default::default() };
    let err = mhe_solve(&model, &scalar_window(&[0.0, 1.0, 2.0, 3.0]), &scalar(0.8), &scalar_eta(0.0, 1.0), &MheOptions::default())
        .unwrap_err();
    match err {
        Error::IndefiniteWeight { which, theta } => {
            assert_eq!(which, "process noise");
            assert_eq!(theta, vec![0.8]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn no_arrival_term_still_solvable() {
    let ys = [0.0, 0.7, -0.4, 1.3];
    let sol = mhe_solve(
        &LtiScalar::default(),
        &scalar_window(&ys),
        &scalar(0.8),
        &ArrivalParams::none(1),
        &MheOptions::default(),
    )
    .unwrap();
    let (h, b) = scalar_dense(&ys, 0.8, 0.0, 0.0, 1.0, 1.0);
    let dense = h.cholesky().unwrap().solve(&b);
    assert!((sol.x_hat - dense).amax() <= 1e-9);
}

#[test]
fn exact_hessian_matches_gradient_differences() {
    let model = Rk4Model::lorenz(0.02, 1);
    let theta = DVector::from_vec(vec![10.0, 30.0]);
    let eta = ArrivalParams::default_prior(3);
    let (w, truth) = noisy_lorenz_window(5, 17);
    let problem = MheProblem::new(&model, &theta, &eta).unwrap();
    let x = truth.map(|v| v + 0.2);
    let h = problem.exact_half_hessian(&w, &x, 1e-5).unwrap().to_dense() * 2.0;
    let mut fd = DMatrix::zeros(x.len(), x.len());
    for i in 0..x.len() {
        let step = 1e-5 * x[i].abs().max(1.0);
        let mut p = x.clone();
        p[i] += step;
        let plus = problem.gradient(&w, &p).unwrap();
        p[i] -= 2.0 * step;
        let minus = problem.gradient(&w, &p).unwrap();
        fd.set_column(i, &((plus - minus) / (2.0 * step)));
    }
    let rel = (&h - &fd).norm() / fd.norm();
    assert!(rel <= 1e-7, "relative error {rel}");
}
