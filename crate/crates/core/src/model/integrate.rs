use nalgebra::{DMatrix, DVector};

use super::builtin::VectorField;

/// One classical RK4 step of `field` with step `h`, returning the next state and the
/// exact derivatives of the discrete map with respect to the state and the parameters.
///
/// Derivatives are propagated through the four stages, so they are the Jacobians of
/// the discretized map itself rather than of the continuous flow.
pub fn rk4_with_jacobians<F: VectorField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    theta: &DVector<f64>,
    h: f64,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = x.len();
    let eye = DMatrix::<f64>::identity(n, n);

    let k1 = field.eval(x, theta);
    let a1 = field.jac_x(x, theta);
    let d1x = a1.clone();
    let d1t = field.jac_theta(x, theta);

    let x2 = x + &k1 * (0.5 * h);
    let k2 = field.eval(&x2, theta);
    let a2 = field.jac_x(&x2, theta);
    let d2x = &a2 * (&eye + &d1x * (0.5 * h));
    let d2t = &a2 * &d1t * (0.5 * h) + field.jac_theta(&x2, theta);

    let x3 = x + &k2 * (0.5 * h);
    let k3 = field.eval(&x3, theta);
    let a3 = field.jac_x(&x3, theta);
    let d3x = &a3 * (&eye + &d2x * (0.5 * h));
    let d3t = &a3 * &d2t * (0.5 * h) + field.jac_theta(&x3, theta);

    let x4 = x + &k3 * h;
    let k4 = field.eval(&x4, theta);
    let a4 = field.jac_x(&x4, theta);
    let d4x = &a4 * (&eye + &d3x * h);
    let d4t = &a4 * &d3t * h + field.jac_theta(&x4, theta);

    let w = h / 6.0;
    let next = x + (k1 + (k2 + k3) * 2.0 + k4) * w;
    let jx = eye + (d1x + (d2x + d3x) * 2.0 + d4x) * w;
    let jt = (d1t + (d2t + d3t) * 2.0 + d4t) * w;
    (next, jx, jt)
}

/// Plain RK4 step without derivatives.
pub(crate) fn rk4_value<F: VectorField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    theta: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    let k1 = field.eval(x, theta);
    let k2 = field.eval(&(x + &k1 * (0.5 * h)), theta);
    let k3 = field.eval(&(x + &k2 * (0.5 * h)), theta);
    let k4 = field.eval(&(x + &k3 * h), theta);
    x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
}
