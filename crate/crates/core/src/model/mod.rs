//! Parametric state-space models.
//!
//! A model describes the discrete-time system
//!
//! ```text
//! x[t+1] = f(x[t], u[t]; theta) + w[t],   w ~ (0, Q(theta))
//! y[t]   = g(x[t]; theta) + v[t],         v ~ (0, R(theta))
//! ```
//!
//! together with the analytic Jacobians of `f` and `g`. Jacobians are supplied by the
//! implementor and can be verified against central differences with [`check_jacobians`].

mod builtin;
mod integrate;

pub use builtin::{
    builtin_model, BuiltinModel, LinearModel, LorenzField, LtiScalar, ModelOptions,
    OscillatorField, Rk4Model, VectorField,
};
pub use integrate::rk4_with_jacobians;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Box constraints on the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ParamBounds {
    pub fn project(&self, theta: &mut DVector<f64>) {
        for i in 0..theta.len() {
            theta[i] = theta[i].max(self.lower[i]).min(self.upper[i]);
        }
    }

    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        theta
            .iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(t, (lo, hi))| *t >= *lo && *t <= *hi)
    }
}

/// The model contract.
///
/// Implementations must be pure: every method is a deterministic function of its
/// arguments, and the model may be evaluated from many threads at once.
pub trait ParametricModel: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    /// Noise-free dynamics `f(x, u; theta)`.
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>)
        -> DVector<f64>;
    /// Noise-free output map `g(x; theta)`.
    fn output(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;

    fn dynamics_jac_x(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> DMatrix<f64>;
    fn dynamics_jac_theta(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> DMatrix<f64>;
    fn output_jac_x(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64>;
    fn output_jac_theta(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64>;

    /// Process noise covariance `Q(theta)`.
    fn process_cov(&self, theta: &DVector<f64>) -> DMatrix<f64>;
    /// Measurement noise covariance `R(theta)`.
    fn measurement_cov(&self, theta: &DVector<f64>) -> DMatrix<f64>;

    /// Dynamics value together with its state Jacobian. Override when both share work.
    fn dynamics_and_jac_x(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        (self.dynamics(x, u, theta), self.dynamics_jac_x(x, u, theta))
    }

    /// General parameter constraints; `theta` is feasible iff every entry is `<= 0`.
    fn constraints(&self, _theta: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn bounds(&self) -> Option<ParamBounds> {
        None
    }
}

fn check_len(context: &str, expected: usize, v: &DVector<f64>) -> Result<()> {
    if v.len() != expected {
        return Err(Error::dimension(context, expected, v.len()));
    }
    Ok(())
}

fn check_finite_vec(context: &str, v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(context))
    }
}

/// Evaluates `f(x, u; theta)` with dimension and finiteness checks.
pub fn eval_dynamics(
    model: &dyn ParametricModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len("dynamics state", model.state_dim(), x)?;
    check_len("dynamics input", model.input_dim(), u)?;
    check_len("dynamics parameter", model.param_dim(), theta)?;
    check_finite_vec("dynamics parameter", theta)?;
    let next = model.dynamics(x, u, theta);
    check_len("dynamics result", model.state_dim(), &next)?;
    check_finite_vec("dynamics result", &next)?;
    Ok(next)
}

/// Evaluates `g(x; theta)` with dimension and finiteness checks.
pub fn eval_output(
    model: &dyn ParametricModel,
    x: &DVector<f64>,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len("output state", model.state_dim(), x)?;
    check_len("output parameter", model.param_dim(), theta)?;
    check_finite_vec("output parameter", theta)?;
    let y = model.output(x, theta);
    check_len("output result", model.output_dim(), &y)?;
    check_finite_vec("output result", &y)?;
    Ok(y)
}

/// One evaluation point for [`check_jacobians`].
#[derive(Debug, Clone)]
pub struct JacobianSample {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub theta: DVector<f64>,
}

/// Worst-case relative error of each supplied Jacobian against central differences.
#[derive(Debug, Clone, Serialize)]
pub struct JacobianReport {
    pub dynamics_x: f64,
    pub dynamics_theta: f64,
    pub output_x: f64,
    pub output_theta: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl JacobianReport {
    pub fn worst(&self) -> f64 {
        self.dynamics_x
            .max(self.dynamics_theta)
            .max(self.output_x)
            .max(self.output_theta)
    }
}

/// Pass/fail threshold of [`check_jacobians`].
pub const JACOBIAN_TOLERANCE: f64 = 1e-5;

/// Relative error `max|A - B| / max(1, max|B|)`.
fn relative_error(supplied: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    if supplied.shape() != reference.shape() {
        return f64::INFINITY;
    }
    let scale = reference.amax().max(1.0);
    (supplied - reference).amax() / scale
}

/// Central-difference Jacobian of `fun` at `at`, with per-coordinate step
/// `step * max(1, |at_j|)`.
pub(crate) fn central_difference<F>(
    at: &DVector<f64>,
    rows: usize,
    step: f64,
    mut fun: F,
) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut jac = DMatrix::zeros(rows, at.len());
    let mut probe = at.clone();
    for j in 0..at.len() {
        let h = step * at[j].abs().max(1.0);
        probe[j] = at[j] + h;
        let plus = fun(&probe)?;
        probe[j] = at[j] - h;
        let minus = fun(&probe)?;
        probe[j] = at[j];
        jac.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

/// Compares the model's analytic Jacobians with central finite differences.
pub fn check_jacobians(
    model: &dyn ParametricModel,
    samples: &[JacobianSample],
    step: f64,
) -> Result<JacobianReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let (n, p) = (model.state_dim(), model.output_dim());
    let mut report = JacobianReport {
        dynamics_x: 0.0,
        dynamics_theta: 0.0,
        output_x: 0.0,
        output_theta: 0.0,
        threshold: JACOBIAN_TOLERANCE,
        passed: false,
    };
    for (k, s) in samples.iter().enumerate() {
        let named = |e: Error| match e {
            Error::NonFinite { context } => Error::non_finite(format!("{context} at sample {k}")),
            other => other,
        };
        let fd_fx = central_difference(&s.x, n, step, |x| eval_dynamics(model, x, &s.u, &s.theta))
            .map_err(named)?;
        let fd_ft = central_difference(&s.theta, n, step, |t| eval_dynamics(model, &s.x, &s.u, t))
            .map_err(named)?;
        let fd_gx =
            central_difference(&s.x, p, step, |x| eval_output(model, x, &s.theta)).map_err(named)?;
        let fd_gt =
            central_difference(&s.theta, p, step, |t| eval_output(model, &s.x, t)).map_err(named)?;

        let fx = model.dynamics_jac_x(&s.x, &s.u, &s.theta);
        let ft = model.dynamics_jac_theta(&s.x, &s.u, &s.theta);
        let gx = model.output_jac_x(&s.x, &s.theta);
        let gt = model.output_jac_theta(&s.x, &s.theta);
        for (m, what) in [(&fx, "f_x"), (&ft, "f_theta"), (&gx, "g_x"), (&gt, "g_theta")] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("Jacobian {what} at sample {k}")));
            }
        }
        report.dynamics_x = report.dynamics_x.max(relative_error(&fx, &fd_fx));
        report.dynamics_theta = report.dynamics_theta.max(relative_error(&ft, &fd_ft));
        report.output_x = report.output_x.max(relative_error(&gx, &fd_gx));
        report.output_theta = report.output_theta.max(relative_error(&gt, &fd_gt));
    }
    report.passed = report.worst() <= JACOBIAN_TOLERANCE;
    Ok(report)
}
