use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::integrate::{rk4_value, rk4_with_jacobians};
use super::{ParamBounds, ParametricModel};
use crate::error::{Error, Result};

/// Construction options for the built-in models. Unset fields take model defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOptions {
    /// Sampling period of discretized continuous models.
    pub dt: Option<f64>,
    /// RK4 steps per sampling period.
    pub substeps: Option<usize>,
    /// Process noise variance; `Q = process_var * I`.
    pub process_var: Option<f64>,
    /// Measurement noise variance; `R = measurement_var * I`.
    pub measurement_var: Option<f64>,
    pub theta_lower: Option<Vec<f64>>,
    pub theta_upper: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinModel {
    LtiScalar,
    Lorenz,
    Oscillator,
}

impl std::str::FromStr for BuiltinModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lti_scalar" => Ok(BuiltinModel::LtiScalar),
            "lorenz" => Ok(BuiltinModel::Lorenz),
            "oscillator" => Ok(BuiltinModel::Oscillator),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }
}

impl BuiltinModel {
    pub fn param_dim(self) -> usize {
        match self {
            BuiltinModel::LtiScalar | BuiltinModel::Oscillator => 1,
            BuiltinModel::Lorenz => 2,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
    }
}

/// Builds a registered model by name.
pub fn builtin_model(name: &str, opts: &ModelOptions) -> Result<Arc<dyn ParametricModel>> {
    let kind: BuiltinModel = name.parse()?;
    let bounds = match (&opts.theta_lower, &opts.theta_upper) {
        (None, None) => None,
        (lo, hi) => {
            let d = kind.param_dim();
            let lower = lo.clone().unwrap_or_else(|| vec![f64::NEG_INFINITY; d]);
            let upper = hi.clone().unwrap_or_else(|| vec![f64::INFINITY; d]);
            if lower.len() != d || upper.len() != d {
                return Err(Error::dimension("parameter bounds", d, lower.len().max(upper.len())));
            }
            if lower.iter().zip(&upper).any(|(l, u)| l > u) {
                return Err(Error::InvalidArgument("lower bound above upper bound".into()));
            }
            Some(ParamBounds {
                lower: DVector::from_vec(lower),
                upper: DVector::from_vec(upper),
            })
        }
    };
    let substeps = opts.substeps.unwrap_or(1);
    if substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be at least 1".into()));
    }
    let dt = |default: f64| -> Result<f64> {
        let dt = opts.dt.unwrap_or(default);
        if dt >= 0.0 && dt.is_finite() {
            Ok(dt)
        } else {
            Err(Error::InvalidArgument(format!("dt must be non-negative, got {dt}")))
        }
    };
    let model: Arc<dyn ParametricModel> = match kind {
        BuiltinModel::LtiScalar => Arc::new(LtiScalar {
            process_var: positive("process_var", opts.process_var.unwrap_or(1.0))?,
            measurement_var: positive("measurement_var", opts.measurement_var.unwrap_or(1.0))?,
            bounds,
        }),
        BuiltinModel::Lorenz => {
            let mut m = Rk4Model::lorenz(dt(0.02)?, substeps);
            m.process_cov *= positive("process_var", opts.process_var.unwrap_or(1.0 / 48.0))?
                * 48.0;
            m.measurement_cov *=
                positive("measurement_var", opts.measurement_var.unwrap_or(1.0 / 3.0))? * 3.0;
            m.bounds = bounds;
            Arc::new(m)
        }
        BuiltinModel::Oscillator => {
            let mut m = Rk4Model::oscillator(
                dt(0.5)?,
                substeps,
                positive("process_var", opts.process_var.unwrap_or(1e-3))?,
                positive("measurement_var", opts.measurement_var.unwrap_or(1e-2))?,
            );
            m.bounds = bounds;
            Arc::new(m)
        }
    };
    Ok(model)
}

/// Scalar system `x+ = theta x + w`, `y = x + v`.
#[derive(Debug, Clone)]
pub struct LtiScalar {
    pub process_var: f64,
    pub measurement_var: f64,
    pub bounds: Option<ParamBounds>,
}

impl Default for LtiScalar {
    fn default() -> Self {
        LtiScalar {
            process_var: 1.0,
            measurement_var: 1.0,
            bounds: None,
        }
    }
}

impl ParametricModel for LtiScalar {
    fn name(&self) -> &str {
        "lti_scalar"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn input_dim(&self) -> usize {
        0
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn dynamics(&self, x: &DVector<f64>, _u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        x * theta[0]
    }
    fn output(&self, x: &DVector<f64>, _theta: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn dynamics_jac_x(&self, _x: &DVector<f64>, _u: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, theta[0])
    }
    fn dynamics_jac_theta(&self, x: &DVector<f64>, _u: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x[0])
    }
    fn output_jac_x(&self, _x: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }
    fn output_jac_theta(&self, _x: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }
    fn process_cov(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.process_var)
    }
    fn measurement_cov(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.measurement_var)
    }
    fn bounds(&self) -> Option<ParamBounds> {
        self.bounds.clone()
    }
}

/// Linear system `x+ = A x + B u`, `y = C x` whose parameters are the entries of `A`
/// in row-major order. Input and output matrices and the noise covariances are fixed.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub input: DMatrix<f64>,
    pub observation: DMatrix<f64>,
    pub process_cov: DMatrix<f64>,
    pub measurement_cov: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(
        input: DMatrix<f64>,
        observation: DMatrix<f64>,
        process_cov: DMatrix<f64>,
        measurement_cov: DMatrix<f64>,
    ) -> Self {
        LinearModel {
            input,
            observation,
            process_cov,
            measurement_cov,
        }
    }

    /// Unpacks `theta` into the state matrix.
    pub fn state_matrix(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim();
        DMatrix::from_row_slice(n, n, theta.as_slice())
    }

    pub fn pack_state_matrix(a: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(a.len(), a.transpose().iter().copied())
    }
}

impl ParametricModel for LinearModel {
    fn name(&self) -> &str {
        "linear"
    }
    fn state_dim(&self) -> usize {
        self.observation.ncols()
    }
    fn input_dim(&self) -> usize {
        self.input.ncols()
    }
    fn output_dim(&self) -> usize {
        self.observation.nrows()
    }
    fn param_dim(&self) -> usize {
        self.state_dim() * self.state_dim()
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let mut next = self.state_matrix(theta) * x;
        if u.len() > 0 {
            next += &self.input * u;
        }
        next
    }
    fn output(&self, x: &DVector<f64>, _theta: &DVector<f64>) -> DVector<f64> {
        &self.observation * x
    }
    fn dynamics_jac_x(&self, _x: &DVector<f64>, _u: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        self.state_matrix(theta)
    }
    fn dynamics_jac_theta(&self, x: &DVector<f64>, _u: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut jac = DMatrix::zeros(n, n * n);
        for i in 0..n {
            for j in 0..n {
                jac[(i, i * n + j)] = x[j];
            }
        }
        jac
    }
    fn output_jac_x(&self, _x: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        self.observation.clone()
    }
    fn output_jac_theta(&self, _x: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.output_dim(), self.param_dim())
    }
    fn process_cov(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        self.process_cov.clone()
    }
    fn measurement_cov(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        self.measurement_cov.clone()
    }
}

/// A parametric continuous-time vector field `dx/dt = F(x; theta)` with Jacobians.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;
    fn jac_x(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64>;
    fn jac_theta(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64>;
}

/// Lorenz system with `sigma = theta[0]`, `rho = theta[1]` and `beta = 2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LorenzField;

impl VectorField for LorenzField {
    fn dim(&self) -> usize {
        3
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn eval(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![
            theta[0] * (x[1] - x[0]),
            x[0] * (theta[1] - x[2]) - x[1],
            x[0] * x[1] - 2.0 * x[2],
        ])
    }
    fn jac_x(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            3,
            3,
            &[
                -theta[0], theta[0], 0.0, //
                theta[1] - x[2], -1.0, -x[0], //
                x[1], x[0], -2.0,
            ],
        )
    }
    fn jac_theta(&self, x: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 2, &[x[1] - x[0], 0.0, 0.0, x[0], 0.0, 0.0])
    }
}

/// Harmonic oscillator `x'' = -omega^2 x` in first-order form, `theta = [omega]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct OscillatorField;

impl VectorField for OscillatorField {
    fn dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[1], -theta[0] * theta[0] * x[0]])
    }
    fn jac_x(&self, _x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -theta[0] * theta[0], 0.0])
    }
    fn jac_theta(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 1, &[0.0, -2.0 * theta[0] * x[0]])
    }
}

/// A continuous vector field discretized by `substeps` RK4 steps per sampling period
/// and observed through a subset of its states.
#[derive(Debug, Clone)]
pub struct Rk4Model<F> {
    pub field: F,
    pub name: String,
    pub dt: f64,
    pub substeps: usize,
    /// Indices of the measured states.
    pub observed: Vec<usize>,
    pub process_cov: DMatrix<f64>,
    pub measurement_cov: DMatrix<f64>,
    pub bounds: Option<ParamBounds>,
}

impl Rk4Model<LorenzField> {
    /// Lorenz model measuring the first two states, with `R = I/3`, `Q = I/48`.
    pub fn lorenz(dt: f64, substeps: usize) -> Self {
        Rk4Model {
            field: LorenzField,
            name: "lorenz".into(),
            dt,
            substeps,
            observed: vec![0, 1],
            process_cov: DMatrix::identity(3, 3) / 48.0,
            measurement_cov: DMatrix::identity(2, 2) / 3.0,
            bounds: None,
        }
    }
}

impl Rk4Model<OscillatorField> {
    /// Oscillator measuring its position.
    pub fn oscillator(dt: f64, substeps: usize, process_var: f64, measurement_var: f64) -> Self {
        Rk4Model {
            field: OscillatorField,
            name: "oscillator".into(),
            dt,
            substeps,
            observed: vec![0],
            process_cov: DMatrix::identity(2, 2) * process_var,
            measurement_cov: DMatrix::identity(1, 1) * measurement_var,
            bounds: None,
        }
    }
}

impl<F: VectorField> Rk4Model<F> {
    fn step(&self) -> f64 {
        self.dt / self.substeps as f64
    }

    fn propagate(&self, x: &DVector<f64>, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let h = self.step();
        let (mut state, mut jx, mut jt) = rk4_with_jacobians(&self.field, x, theta, h);
        for _ in 1..self.substeps {
            let (next, sx, st) = rk4_with_jacobians(&self.field, &state, theta, h);
            jt = &sx * jt + st;
            jx = sx * jx;
            state = next;
        }
        (state, jx, jt)
    }
}

impl<F: VectorField> ParametricModel for Rk4Model<F> {
    fn name(&self) -> &str {
        &self.name
    }
    fn state_dim(&self) -> usize {
        self.field.dim()
    }
    fn input_dim(&self) -> usize {
        0
    }
    fn output_dim(&self) -> usize {
        self.observed.len()
    }
    fn param_dim(&self) -> usize {
        self.field.param_dim()
    }
    fn dynamics(&self, x: &DVector<f64>, _u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let h = self.step();
        let mut state = x.clone();
        for _ in 0..self.substeps {
            state = rk4_value(&self.field, &state, theta, h);
        }
        state
    }
    fn output(&self, x: &DVector<f64>, _theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.observed.len(), self.observed.iter().map(|&i| x[i]))
    }
    fn dynamics_jac_x(&self, x: &DVector<f64>, _u: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        self.propagate(x, theta).1
    }
    fn dynamics_jac_theta(&self, x: &DVector<f64>, _u: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        self.propagate(x, theta).2
    }
    fn dynamics_and_jac_x(
        &self,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let (next, jx, _) = self.propagate(x, theta);
        (next, jx)
    }
    fn output_jac_x(&self, _x: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.observed.len(), self.field.dim());
        for (row, &i) in self.observed.iter().enumerate() {
            c[(row, i)] = 1.0;
        }
        c
    }
    fn output_jac_theta(&self, _x: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.observed.len(), self.field.param_dim())
    }
    fn process_cov(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        self.process_cov.clone()
    }
    fn measurement_cov(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        self.measurement_cov.clone()
    }
    fn bounds(&self) -> Option<ParamBounds> {
        self.bounds.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lorenz_field_hand_value() {
        let v = LorenzField.eval(
            &DVector::from_vec(vec![1.0, 1.0, 1.0]),
            &DVector::from_vec(vec![10.0, 30.0]),
        );
        assert_eq!(v.as_slice(), &[0.0, 28.0, -1.0]);
    }

    #[test]
    fn linear_model_packing() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let theta = LinearModel::pack_state_matrix(&a);
        assert_eq!(theta.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        let m = LinearModel::new(
            DMatrix::zeros(2, 0),
            DMatrix::identity(1, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
        );
        assert_eq!(m.state_matrix(&theta), a);
    }

    #[test]
    fn negative_dt_rejected() {
        let opts = ModelOptions {
            dt: Some(-0.1),
            ..Default::default()
        };
        assert!(builtin_model("lorenz", &opts).is_err());
    }
}
