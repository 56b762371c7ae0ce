//! Test-side oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use mhe_sysid::data::WindowOrigin;
use mhe_sysid::mhe::{MheOptions, MheProblem, MheSolution};
use mhe_sysid::model::{LinearModel, ParametricModel};
use mhe_sysid::{ArrivalParams, Window};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense linear system of an LTI estimation problem.
pub struct DenseLti {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl DenseLti {
    pub fn scalar(theta: f64) -> Self {
        let one = DMatrix::from_element(1, 1, 1.0);
        DenseLti {
            a: DMatrix::from_element(1, 1, theta),
            b: DMatrix::zeros(1, 0),
            c: one.clone(),
            q: one.clone(),
            r: one,
        }
    }

    pub fn from_model(model: &LinearModel, theta: &DVector<f64>) -> Self {
        DenseLti {
            a: model.state_matrix(theta),
            b: model.input.clone(),
            c: model.observation.clone(),
            q: model.process_cov.clone(),
            r: model.measurement_cov.clone(),
        }
    }

    /// Minimizer of the estimation cost from the dense `(m+1)n` normal equations built
    /// with explicit inverses of `Q`, `R` and `Sigma`.
    pub fn solve(&self, w: &Window, arrival: Option<(&DVector<f64>, &DMatrix<f64>)>) -> DVector<f64> {
        let n = self.a.nrows();
        let m = w.u_win.len();
        let dim = (m + 1) * n;
        let q_inv = self.q.clone().try_inverse().unwrap();
        let r_inv = self.r.clone().try_inverse().unwrap();
        let mut h = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        let mut add = |rows: &DMatrix<f64>, weight: &DMatrix<f64>, target: &DVector<f64>| {
            h += rows.transpose() * weight * rows;
            rhs += rows.transpose() * weight * target;
        };
        if let Some((s_bar, sigma)) = arrival {
            let mut sel = DMatrix::zeros(n, dim);
            sel.view_mut((0, 0), (n, n)).fill_with_identity();
            add(&sel, &sigma.clone().try_inverse().unwrap(), s_bar);
        }
        for k in 1..m {
            let mut sel = DMatrix::zeros(self.c.nrows(), dim);
            sel.view_mut((0, k * n), (self.c.nrows(), n)).copy_from(&self.c);
            add(&sel, &r_inv, &w.z[k - 1]);
        }
        for k in 1..=m {
            let mut sel = DMatrix::zeros(n, dim);
            sel.view_mut((0, k * n), (n, n)).fill_with_identity();
            let mut minus_a = sel.view_mut((0, (k - 1) * n), (n, n));
            minus_a -= &self.a;
            let drive = if self.b.ncols() > 0 {
                &self.b * &w.u_win[k - 1]
            } else {
                DVector::zeros(n)
            };
            add(&sel, &q_inv, &drive);
        }
        h.lu().solve(&rhs).unwrap()
    }
}

pub fn window_from_outputs(u: Vec<DVector<f64>>, ys: &[DVector<f64>]) -> Window {
    let m = u.len();
    Window {
        u_win: u,
        z: ys[1..m].to_vec(),
        y_target: ys[m].clone(),
        origin: WindowOrigin { trajectory: 0, offset: 0 },
    }
}

/// Random scalar window with outputs of unit scale.
pub fn scalar_window(m: usize, rng: &mut ChaCha8Rng) -> Window {
    let ys: Vec<DVector<f64>> = (0..=m).map(|_| DVector::from_element(1, rng.random_range(-3.0..3.0))).collect();
    window_from_outputs(vec![DVector::zeros(0); m], &ys)
}

/// Random window for a linear model with `q` inputs and `p` outputs.
pub fn linear_window(m: usize, q: usize, p: usize, rng: &mut ChaCha8Rng) -> Window {
    let u = (0..m).map(|_| DVector::from_fn(q, |_, _| rng.random_range(-1.0..1.0))).collect();
    let ys: Vec<DVector<f64>> = (0..=m).map(|_| DVector::from_fn(p, |_, _| rng.random_range(-3.0..3.0))).collect();
    window_from_outputs(u, &ys)
}

/// Random stable 3-state system with two inputs and two outputs.
pub fn random_linear_model(rng: &mut ChaCha8Rng) -> (LinearModel, DVector<f64>) {
    let mut rand_mat = |r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s));
    let a = rand_mat(3, 3, 0.5);
    let b = rand_mat(3, 2, 1.0);
    let c = rand_mat(2, 3, 1.0) + DMatrix::from_fn(2, 3, |i, j| if i == j { 1.0 } else { 0.0 });
    let gq = rand_mat(3, 3, 0.5);
    let gr = rand_mat(2, 2, 0.5);
    let q = &gq * gq.transpose() + DMatrix::identity(3, 3) * 0.5;
    let r = &gr * gr.transpose() + DMatrix::identity(2, 2) * 0.5;
    (LinearModel::new(b, c, q, r), LinearModel::pack_state_matrix(&a))
}

/// Random positive definite covariance.
pub fn random_covariance(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &g * g.transpose() + DMatrix::identity(n, n) * 0.3
}

/// Inner solve with a tight tolerance, warm-started from `warm`.
pub fn tight_solve(
    model: &dyn ParametricModel,
    w: &Window,
    theta: &DVector<f64>,
    eta: &DVector<f64>,
    base: &ArrivalParams,
    warm: &DVector<f64>,
) -> MheSolution {
    let eta = ArrivalParams::from_packed(eta, base.state_dim(), base.mode).unwrap();
    let problem = MheProblem::new(model, theta, &eta).unwrap();
    let opts = MheOptions { tol: 1e-12, max_iter: 200, ..Default::default() };
    problem.solve(w, Some(warm), &opts).unwrap()
}

/// Central differences of `out(re-solve)` over the packed `(theta, eta)`.
pub fn resolve_difference(
    model: &dyn ParametricModel,
    w: &Window,
    theta: &DVector<f64>,
    eta: &ArrivalParams,
    warm: &DVector<f64>,
    step: f64,
    out: impl Fn(&MheSolution, &DVector<f64>) -> DVector<f64>,
) -> DMatrix<f64> {
    let packed = eta.pack();
    let nt = theta.len();
    let total = nt + packed.len();
    let mut cols = Vec::with_capacity(total);
    for j in 0..total {
        let mut p = DVector::from_iterator(total, theta.iter().chain(packed.iter()).copied());
        let h = step * p[j].abs().max(1.0);
        let eval = |p: &DVector<f64>| {
            let t = p.rows(0, nt).into_owned();
            let e = p.rows(nt, packed.len()).into_owned();
            out(&tight_solve(model, w, &t, &e, eta, warm), &t)
        };
        p[j] += h;
        let plus = eval(&p);
        p[j] -= 2.0 * h;
        let minus = eval(&p);
        cols.push((plus - minus) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}

pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn std_dev(v: &[f64]) -> f64 {
    let mu = mean(v);
    (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}
