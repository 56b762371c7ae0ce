//! Derivatives of converged window estimates with respect to the packed parameters
//! `p = (theta, eta)`.
//!
//! At a stationary point `grad_x L(x*, p) = 0`, so `dx*/dp = -H^{-1} G` with `H` the
//! Hessian of the cost in `x` and `G = d(grad_x L)/dp`. `G` is a central difference of
//! the analytic gradient; `H` keeps the residual-curvature terms so the derivative is
//! exact for nonlinear models too.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::arrival::ArrivalParams;
use crate::data::Window;
use crate::error::{Error, Result};
use crate::mhe::{BlockTridiagonal, MheProblem, MheSolution};
use crate::model::ParametricModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityOptions {
    /// Relative central-difference step for `G`, scaled by `max(1, |p_j|)`.
    pub fd_step: f64,
    /// Include the second derivatives of `f` and `g` in `H`. Without them the
    /// derivative is only exact for linear models.
    pub exact_hessian: bool,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        SensitivityOptions {
            fd_step: 1e-6,
            exact_hessian: true,
        }
    }
}

impl SensitivityOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.fd_step > 0.0 && self.fd_step < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fd_step must lie in (0, 1), got {}",
                self.fd_step
            )));
        }
        Ok(())
    }
}

/// Jacobian of one window's prediction error.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowJacobian {
    /// `p x (n_theta + n_eta)`.
    pub d_eps: DMatrix<f64>,
    pub kkt_norm_at_eval: f64,
}

struct Perturbation<'a> {
    plus: MheProblem<'a>,
    minus: MheProblem<'a>,
    width: f64,
}

/// Base and perturbed problems at one parameter point, built once and shared by all
/// windows.
pub struct SensitivityContext<'a> {
    base: MheProblem<'a>,
    perturbations: Vec<Perturbation<'a>>,
    n_theta: usize,
    opts: SensitivityOptions,
}

fn perturbed<'a>(
    model: &'a dyn ParametricModel,
    theta: &DVector<f64>,
    eta: &ArrivalParams,
    j: usize,
    delta: f64,
) -> Result<MheProblem<'a>> {
    let n_theta = theta.len();
    if j < n_theta {
        let mut t = theta.clone();
        t[j] += delta;
        MheProblem::new(model, &t, eta)
    } else {
        let mut packed = eta.pack();
        packed[j - n_theta] += delta;
        let e = ArrivalParams::from_packed(&packed, eta.state_dim(), eta.mode)?;
        MheProblem::new(model, theta, &e)
    }
}

impl<'a> SensitivityContext<'a> {
    pub fn new(
        model: &'a dyn ParametricModel,
        theta: &DVector<f64>,
        eta: &ArrivalParams,
        opts: &SensitivityOptions,
    ) -> Result<Self> {
        opts.validate()?;
        let base = MheProblem::new(model, theta, eta)?;
        let packed_eta = eta.pack();
        let n_theta = theta.len();
        let mut perturbations = Vec::with_capacity(n_theta + packed_eta.len());
        for j in 0..n_theta + packed_eta.len() {
            let value = if j < n_theta { theta[j] } else { packed_eta[j - n_theta] };
            let h = opts.fd_step * value.abs().max(1.0);
            perturbations.push(Perturbation {
                plus: perturbed(model, theta, eta, j, h)?,
                minus: perturbed(model, theta, eta, j, -h)?,
                width: 2.0 * h,
            });
        }
        Ok(SensitivityContext {
            base,
            perturbations,
            n_theta,
            opts: *opts,
        })
    }

    pub fn param_dim(&self) -> usize {
        self.perturbations.len()
    }

    pub fn problem(&self) -> &MheProblem<'a> {
        &self.base
    }

    /// `G = d(grad_x L)/dp` at `x`.
    fn mixed_partials(&self, w: &Window, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut g = DMatrix::zeros(x.len(), self.param_dim());
        for (j, p) in self.perturbations.iter().enumerate() {
            let col = (p.plus.gradient(w, x)? - p.minus.gradient(w, x)?) / p.width;
            g.set_column(j, &col);
        }
        Ok(g)
    }

    fn hessians(&self, w: &Window, x: &DVector<f64>) -> Result<Vec<BlockTridiagonal>> {
        let gauss_newton = self.base.linearize(w, x)?.hessian;
        let mut candidates = Vec::with_capacity(3);
        if self.opts.exact_hessian {
            candidates.push(self.base.exact_half_hessian(w, x, crate::mhe::EXACT_HESSIAN_STEP)?);
        }
        let mut damped = gauss_newton.clone();
        damped.add_scaled_diagonal(1e-8, 1e-12 * gauss_newton.max_diagonal().max(1e-300));
        candidates.push(gauss_newton);
        candidates.push(damped);
        Ok(candidates)
    }

    /// `dx*/dp`, `(m + 1) n x (n_theta + n_eta)`.
    pub fn solution_sensitivity(&self, w: &Window, sol: &MheSolution) -> Result<DMatrix<f64>> {
        if !sol.converged {
            return Err(Error::Sensitivity(format!(
                "window (trajectory {}, offset {}) is not converged (kkt {:.3e})",
                w.origin.trajectory, w.origin.offset, sol.kkt_norm
            )));
        }
        let g = self.mixed_partials(w, &sol.x_hat)?;
        for h in self.hessians(w, &sol.x_hat)? {
            if let Ok(factor) = h.factor() {
                // The half Hessian pairs with half of G.
                let mut s = g.clone() * -0.5;
                factor.solve_mut(&mut s);
                if s.iter().all(|v| v.is_finite()) {
                    return Ok(s);
                }
            }
        }
        Err(Error::Sensitivity(format!(
            "Hessian of window (trajectory {}, offset {}) is singular after damping",
            w.origin.trajectory, w.origin.offset
        )))
    }

    /// Jacobian of `eps = y_target - g(x_m; theta)` with respect to `p`.
    pub fn prediction_jacobian(&self, w: &Window, sol: &MheSolution) -> Result<WindowJacobian> {
        let s = self.solution_sensitivity(w, sol)?;
        let model = self.base.model();
        let theta = self.base.theta();
        let n = model.state_dim();
        let x_m = sol.terminal();
        let s_m = s.rows(sol.horizon() * n, n);
        let mut d_y = model.output_jac_x(&x_m, theta) * s_m;
        {
            let mut cols = d_y.columns_mut(0, self.n_theta);
            cols += model.output_jac_theta(&x_m, theta);
        }
        let d_eps = -d_y;
        if d_eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("prediction Jacobian"));
        }
        Ok(WindowJacobian {
            d_eps,
            kkt_norm_at_eval: sol.kkt_norm,
        })
    }
}

pub fn solution_sensitivity(
    model: &dyn ParametricModel,
    window: &Window,
    sol: &MheSolution,
    theta: &DVector<f64>,
    eta: &ArrivalParams,
    opts: &SensitivityOptions,
) -> Result<DMatrix<f64>> {
    SensitivityContext::new(model, theta, eta, opts)?.solution_sensitivity(window, sol)
}

pub fn prediction_jacobian(
    model: &dyn ParametricModel,
    window: &Window,
    sol: &MheSolution,
    theta: &DVector<f64>,
    eta: &ArrivalParams,
    opts: &SensitivityOptions,
) -> Result<WindowJacobian> {
    SensitivityContext::new(model, theta, eta, opts)?.prediction_jacobian(window, sol)
}
