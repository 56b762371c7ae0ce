//! Moving horizon estimation on a single window.
//!
//! For a window of horizon `m` the estimator minimizes over `x_0..x_m`
//!
//! ```text
//! |L^T (x_0 - s_bar)|^2
//!   + sum_{k=1}^{m-1} |z_k - g(x_k)|^2_{R^-1}
//!   + sum_{k=1}^{m}   |x_k - f(x_{k-1}, u_{k-1})|^2_{Q^-1}
//! ```
//!
//! The output at `x_m` is not measured inside the window; it is the prediction target.
//! The normal equations of this least-squares problem are block tridiagonal, so each
//! Gauss-Newton step costs `O(m n^3)`.

mod blocktri;

pub use blocktri::{block_tridiag_solve, BlockCholesky, BlockTridiagonal};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::arrival::{ArrivalMode, ArrivalParams};
use crate::data::Window;
use crate::error::{Error, Result};
use crate::model::ParametricModel;

/// Difference step for the residual-curvature part of the exact Hessian.
pub const EXACT_HESSIAN_STEP: f64 = 1e-5;

/// Inner solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MheOptions {
    /// Convergence threshold on the infinity norm of the cost gradient.
    pub tol: f64,
    pub max_iter: usize,
    /// First Levenberg damping used when a plain Gauss-Newton step is rejected.
    pub damping_init: f64,
}

impl Default for MheOptions {
    fn default() -> Self {
        MheOptions {
            tol: 1e-8,
            max_iter: 50,
            damping_init: 1e-4,
        }
    }
}

impl MheOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.damping_init > 0.0) {
            return Err(Error::InvalidArgument(
                "mhe tol and damping_init must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Estimated trajectory of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct MheSolution {
    /// Stacked states `x_0..x_m`, `(m + 1) n` entries.
    pub x_hat: DVector<f64>,
    pub state_dim: usize,
    pub cost: f64,
    /// Infinity norm of the cost gradient at `x_hat`.
    pub kkt_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl MheSolution {
    pub fn horizon(&self) -> usize {
        self.x_hat.len() / self.state_dim - 1
    }

    pub fn state(&self, k: usize) -> DVector<f64> {
        self.x_hat.rows(k * self.state_dim, self.state_dim).into_owned()
    }

    /// The estimate `x_m` used for prediction.
    pub fn terminal(&self) -> DVector<f64> {
        self.state(self.horizon())
    }
}

/// Gauss-Newton model of the cost at a point: `H = J^T J` and `J^T r`.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub hessian: BlockTridiagonal,
    pub half_gradient: DVector<f64>,
    pub cost: f64,
}

fn window_label(w: &Window) -> String {
    format!(
        "window (trajectory {}, offset {})",
        w.origin.trajectory, w.origin.offset
    )
}

/// Inverse Cholesky factor `W` with `W^T W = M^{-1}` for a covariance `M`.
fn inverse_factor(cov: &DMatrix<f64>, which: &'static str, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let fail = || Error::IndefiniteWeight {
        which,
        theta: theta.iter().copied().collect(),
    };
    if cov.iter().any(|v| !v.is_finite()) || (cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
        return Err(fail());
    }
    let l = cov.clone().cholesky().ok_or_else(fail)?.l();
    let mut w = DMatrix::identity(cov.nrows(), cov.nrows());
    if !l.solve_lower_triangular_mut(&mut w) {
        return Err(fail());
    }
    Ok(w)
}

/// The MHE cost of one parameter setting, with weights factored once and shared by
/// every window evaluated at that setting.
pub struct MheProblem<'a> {
    model: &'a dyn ParametricModel,
    theta: DVector<f64>,
    /// `(L^T, s_bar)` when the arrival term is active.
    arrival: Option<(DMatrix<f64>, DVector<f64>)>,
    w_q: DMatrix<f64>,
    w_r: DMatrix<f64>,
    q_inv: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    arrival_info: Option<DMatrix<f64>>,
}

impl<'a> MheProblem<'a> {
    pub fn new(model: &'a dyn ParametricModel, theta: &DVector<f64>, eta: &ArrivalParams) -> Result<Self> {
        let n = model.state_dim();
        if theta.len() != model.param_dim() {
            return Err(Error::dimension("parameter vector", model.param_dim(), theta.len()));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("parameter vector"));
        }
        if eta.state_dim() != n {
            return Err(Error::dimension("arrival state", n, eta.state_dim()));
        }
        let w_q = inverse_factor(&model.process_cov(theta), "process noise", theta)?;
        let w_r = inverse_factor(&model.measurement_cov(theta), "measurement noise", theta)?;
        let (arrival, arrival_info) = match eta.mode {
            ArrivalMode::Constant => {
                let l = eta.weight_factor()?;
                let info = &l * l.transpose();
                (Some((l.transpose(), eta.s_bar.clone())), Some(info))
            }
            ArrivalMode::None => (None, None),
        };
        Ok(MheProblem {
            model,
            theta: theta.clone(),
            arrival,
            q_inv: w_q.tr_mul(&w_q),
            r_inv: w_r.tr_mul(&w_r),
            w_q,
            w_r,
            arrival_info,
        })
    }

    pub fn model(&self) -> &dyn ParametricModel {
        self.model
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    fn check_window(&self, w: &Window) -> Result<()> {
        let m = w.horizon();
        if m < 2 || w.z.len() != m - 1 {
            return Err(Error::InvalidArgument(format!(
                "{} has horizon {m} with {} in-window outputs",
                window_label(w),
                w.z.len()
            )));
        }
        let (q, p) = (self.model.input_dim(), self.model.output_dim());
        if let Some(u) = w.u_win.iter().find(|u| u.len() != q) {
            return Err(Error::dimension(format!("inputs of {}", window_label(w)), q, u.len()));
        }
        if let Some(z) = w.z.iter().chain(std::iter::once(&w.y_target)).find(|z| z.len() != p) {
            return Err(Error::dimension(format!("outputs of {}", window_label(w)), p, z.len()));
        }
        Ok(())
    }

    fn check_trajectory(&self, w: &Window, x: &DVector<f64>) -> Result<()> {
        let len = (w.horizon() + 1) * self.model.state_dim();
        if x.len() != len {
            return Err(Error::dimension(format!("trajectory of {}", window_label(w)), len, x.len()));
        }
        Ok(())
    }

    fn state(&self, x: &DVector<f64>, k: usize) -> DVector<f64> {
        let n = self.model.state_dim();
        x.rows(k * n, n).into_owned()
    }

    /// Noise-free rollout from the arrival mean (or the origin when there is no arrival term).
    pub fn rollout(&self, w: &Window) -> Result<DVector<f64>> {
        self.check_window(w)?;
        let n = self.model.state_dim();
        let m = w.horizon();
        let mut x = DVector::zeros((m + 1) * n);
        let mut state = match &self.arrival {
            Some((_, s_bar)) => s_bar.clone(),
            None => DVector::zeros(n),
        };
        x.rows_mut(0, n).copy_from(&state);
        for k in 1..=m {
            state = self.model.dynamics(&state, &w.u_win[k - 1], &self.theta);
            if state.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("rollout of {} at step {k}", window_label(w))));
            }
            x.rows_mut(k * n, n).copy_from(&state);
        }
        Ok(x)
    }

    /// Value of the MHE cost.
    pub fn cost(&self, w: &Window, x: &DVector<f64>) -> Result<f64> {
        self.check_window(w)?;
        self.check_trajectory(w, x)?;
        let m = w.horizon();
        let mut cost = 0.0;
        let x0 = self.state(x, 0);
        if let Some((lt, s_bar)) = &self.arrival {
            cost += (lt * (&x0 - s_bar)).norm_squared();
        }
        let mut prev = x0;
        for k in 1..=m {
            let xk = self.state(x, k);
            if k < m {
                let e = &w.z[k - 1] - self.model.output(&xk, &self.theta);
                cost += (&self.w_r * e).norm_squared();
            }
            let e = &xk - self.model.dynamics(&prev, &w.u_win[k - 1], &self.theta);
            cost += (&self.w_q * e).norm_squared();
            prev = xk;
        }
        if !cost.is_finite() {
            return Err(Error::non_finite(format!("cost of {}", window_label(w))));
        }
        Ok(cost)
    }

    /// Gauss-Newton linearization at `x`.
    pub fn linearize(&self, w: &Window, x: &DVector<f64>) -> Result<Linearization> {
        self.check_window(w)?;
        self.check_trajectory(w, x)?;
        let n = self.model.state_dim();
        let m = w.horizon();
        let mut hessian = BlockTridiagonal::zeros(m + 1, n);
        let mut grad = DVector::zeros((m + 1) * n);
        let mut cost = 0.0;

        let x0 = self.state(x, 0);
        if let (Some((lt, s_bar)), Some(info)) = (&self.arrival, &self.arrival_info) {
            let r = lt * (&x0 - s_bar);
            cost += r.norm_squared();
            hessian.diag[0] += info;
            let g = lt.tr_mul(&r);
            let mut rows = grad.rows_mut(0, n);
            rows += g;
        }
        let mut prev = x0;
        for k in 1..=m {
            let xk = self.state(x, k);
            if k < m {
                let e = &w.z[k - 1] - self.model.output(&xk, &self.theta);
                let g_x = self.model.output_jac_x(&xk, &self.theta);
                let weighted = &self.r_inv * &e;
                cost += (&self.w_r * &e).norm_squared();
                hessian.diag[k] += g_x.tr_mul(&(&self.r_inv * &g_x));
                let mut rows = grad.rows_mut(k * n, n);
                rows -= g_x.tr_mul(&weighted);
            }
            let (f, f_x) = self.model.dynamics_and_jac_x(&prev, &w.u_win[k - 1], &self.theta);
            let e = &xk - f;
            let weighted = &self.q_inv * &e;
            cost += (&self.w_q * &e).norm_squared();
            let qf = &self.q_inv * &f_x;
            hessian.diag[k] += &self.q_inv;
            hessian.diag[k - 1] += f_x.tr_mul(&qf);
            hessian.lower[k - 1] -= qf;
            {
                let mut rows = grad.rows_mut(k * n, n);
                rows += &weighted;
            }
            let mut rows = grad.rows_mut((k - 1) * n, n);
            rows -= f_x.tr_mul(&weighted);
            prev = xk;
        }
        if !cost.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("linearization of {}", window_label(w))));
        }
        Ok(Linearization {
            hessian,
            half_gradient: grad,
            cost,
        })
    }

    /// Exact gradient of the cost with respect to the stacked trajectory.
    pub fn gradient(&self, w: &Window, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_window(w)?;
        self.check_trajectory(w, x)?;
        let n = self.model.state_dim();
        let m = w.horizon();
        let mut grad = DVector::zeros((m + 1) * n);
        let x0 = self.state(x, 0);
        if let Some((lt, s_bar)) = &self.arrival {
            let mut rows = grad.rows_mut(0, n);
            rows += lt.tr_mul(&(lt * (&x0 - s_bar))) * 2.0;
        }
        let mut prev = x0;
        for k in 1..=m {
            let xk = self.state(x, k);
            if k < m {
                let e = &w.z[k - 1] - self.model.output(&xk, &self.theta);
                let g_x = self.model.output_jac_x(&xk, &self.theta);
                let mut rows = grad.rows_mut(k * n, n);
                rows -= g_x.tr_mul(&(&self.r_inv * e)) * 2.0;
            }
            let (f, f_x) = self.model.dynamics_and_jac_x(&prev, &w.u_win[k - 1], &self.theta);
            let weighted = &self.q_inv * (&xk - f) * 2.0;
            {
                let mut rows = grad.rows_mut((k - 1) * n, n);
                rows -= f_x.tr_mul(&weighted);
            }
            let mut rows = grad.rows_mut(k * n, n);
            rows += weighted;
            prev = xk;
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("gradient of {}", window_label(w))));
        }
        Ok(grad)
    }

    /// Half of the exact Hessian of the cost with respect to the trajectory: the
    /// Gauss-Newton matrix plus the residual-curvature terms of `f` and `g`. The
    /// curvature terms are central differences of the analytic model Jacobians.
    pub fn exact_half_hessian(&self, w: &Window, x: &DVector<f64>, step: f64) -> Result<BlockTridiagonal> {
        let mut h = self.linearize(w, x)?.hessian;
        let n = self.model.state_dim();
        let m = w.horizon();
        let curvature = |at: &DVector<f64>, weight: &DVector<f64>, jac: &dyn Fn(&DVector<f64>) -> DMatrix<f64>| {
            // d/dx [J(x)^T weight], symmetrized.
            let mut c = DMatrix::zeros(n, n);
            let mut probe = at.clone();
            for i in 0..n {
                let hi = step * at[i].abs().max(1.0);
                probe[i] = at[i] + hi;
                let plus = jac(&probe).tr_mul(weight);
                probe[i] = at[i] - hi;
                let minus = jac(&probe).tr_mul(weight);
                probe[i] = at[i];
                c.set_column(i, &((plus - minus) / (2.0 * hi)));
            }
            (&c + c.transpose()) * 0.5
        };
        for k in 1..=m {
            let xk = self.state(x, k);
            let prev = self.state(x, k - 1);
            if k < m {
                let e = &w.z[k - 1] - self.model.output(&xk, &self.theta);
                let weight = &self.r_inv * e;
                let c = curvature(&xk, &weight, &|s| self.model.output_jac_x(s, &self.theta));
                h.diag[k] -= c;
            }
            let u = &w.u_win[k - 1];
            let e = &xk - self.model.dynamics(&prev, u, &self.theta);
            let weight = &self.q_inv * e;
            let c = curvature(&prev, &weight, &|s| self.model.dynamics_jac_x(s, u, &self.theta));
            h.diag[k - 1] -= c;
        }
        if h.diag.iter().any(|d| d.iter().any(|v| !v.is_finite())) {
            return Err(Error::non_finite(format!("Hessian of {}", window_label(w))));
        }
        Ok(h)
    }

    /// Damped Gauss-Newton solve starting from `warm` when it is a better start than the
    /// rollout.
    pub fn solve(&self, w: &Window, warm: Option<&DVector<f64>>, opts: &MheOptions) -> Result<MheSolution> {
        let n = self.model.state_dim();
        let mut x = self.rollout(w)?;
        if let Some(start) = warm {
            if start.len() == x.len() && start.iter().all(|v| v.is_finite()) {
                if let Ok(c) = self.cost(w, start) {
                    if c < self.cost(w, &x)? {
                        x = start.clone();
                    }
                }
            }
        }
        let mut lin = self.linearize(w, &x)?;
        let mut kkt = 2.0 * lin.half_gradient.amax();
        let mut iterations = 0;
        let mut mu = 0.0;
        let mut stalled = false;

        while kkt > opts.tol && iterations < opts.max_iter && !stalled {
            iterations += 1;
            let floor = 1e-12 * lin.hessian.max_diagonal().max(1e-300);
            loop {
                let mut system = lin.hessian.clone();
                if mu > 0.0 {
                    system.add_scaled_diagonal(mu, floor);
                }
                let step = match system.factor() {
                    Ok(f) => -f.solve(&lin.half_gradient),
                    Err(_) => {
                        mu = (mu * 10.0).max(opts.damping_init);
                        if mu > 1e12 {
                            stalled = true;
                            break;
                        }
                        continue;
                    }
                };
                let trial = &x + &step;
                let trial_cost = self.cost(w, &trial).unwrap_or(f64::INFINITY);
                // Near the optimum the decrease drops below rounding in the cost; there
                // the step is accepted when it stays within rounding of the current cost.
                let predicted = -(2.0 * lin.half_gradient.dot(&step)
                    + step.dot(&lin.hessian.mul_vec(&step)));
                let noise = 64.0 * f64::EPSILON * lin.cost.max(f64::MIN_POSITIVE);
                let accept = trial_cost <= lin.cost
                    || (predicted <= noise && trial_cost <= lin.cost + noise);
                if accept {
                    let trial_lin = self.linearize(w, &trial)?;
                    let trial_kkt = 2.0 * trial_lin.half_gradient.amax();
                    if trial_cost > lin.cost && trial_kkt >= kkt {
                        // Rounding-level move that does not help either.
                        stalled = true;
                        break;
                    }
                    x = trial;
                    lin = trial_lin;
                    kkt = trial_kkt;
                    mu = if mu > opts.damping_init { mu / 10.0 } else { 0.0 };
                    break;
                }
                mu = (mu * 10.0).max(opts.damping_init);
                if mu > 1e12 {
                    stalled = true;
                    break;
                }
            }
        }
        Ok(MheSolution {
            x_hat: x,
            state_dim: n,
            cost: lin.cost,
            kkt_norm: kkt,
            iterations,
            converged: kkt <= opts.tol,
        })
    }

    /// One-step-ahead prediction `g(x_m)` from a solution and its error against the target.
    pub fn prediction(&self, w: &Window, sol: &MheSolution) -> (DVector<f64>, DVector<f64>) {
        let y_hat = self.model.output(&sol.terminal(), &self.theta);
        let eps = &w.y_target - &y_hat;
        (y_hat, eps)
    }
}

/// MHE cost of `x_hat` on `window`.
pub fn mhe_cost(
    model: &dyn ParametricModel,
    window: &Window,
    x_hat: &DVector<f64>,
    theta: &DVector<f64>,
    eta: &ArrivalParams,
) -> Result<f64> {
    MheProblem::new(model, theta, eta)?.cost(window, x_hat)
}

/// Gradient of the MHE cost with respect to `x_hat`; zero at inner stationary points.
pub fn mhe_stationarity(
    model: &dyn ParametricModel,
    window: &Window,
    x_hat: &DVector<f64>,
    theta: &DVector<f64>,
    eta: &ArrivalParams,
) -> Result<DVector<f64>> {
    MheProblem::new(model, theta, eta)?.gradient(window, x_hat)
}

/// Minimizes the MHE cost of one window from the rollout initialization.
pub fn mhe_solve(
    model: &dyn ParametricModel,
    window: &Window,
    theta: &DVector<f64>,
    eta: &ArrivalParams,
    opts: &MheOptions,
) -> Result<MheSolution> {
    MheProblem::new(model, theta, eta)?.solve(window, None, opts)
}

/// Solution of a window together with its one-step-ahead prediction.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub y_hat: DVector<f64>,
    pub eps: DVector<f64>,
    pub sol: MheSolution,
}

pub fn predict(
    model: &dyn ParametricModel,
    window: &Window,
    theta: &DVector<f64>,
    eta: &ArrivalParams,
    opts: &MheOptions,
) -> Result<Prediction> {
    let problem = MheProblem::new(model, theta, eta)?;
    let sol = problem.solve(window, None, opts)?;
    let (y_hat, eps) = problem.prediction(window, &sol);
    Ok(Prediction { y_hat, eps, sol })
}

#[cfg(test)]
mod tests;
