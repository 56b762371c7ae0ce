//! Constant arrival cost `|x0 - s_bar|^2` weighted by `Sigma^{-1} = L L^T`.
//!
//! The free parameter vector is `eta = (s_bar, l_free)` where `l_free` lists the lower
//! triangle of `L` row by row with diagonal entries stored as logarithms. Every finite
//! `eta` therefore yields a positive definite weight and the outer optimizer can treat
//! `eta` as unconstrained.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalMode {
    /// Arrival term present with tunable mean and weight.
    Constant,
    /// Arrival term removed.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalParams {
    pub s_bar: DVector<f64>,
    pub l_free: DVector<f64>,
    pub mode: ArrivalMode,
    n: usize,
}

/// Number of free entries of an `n x n` lower-triangular factor.
pub fn triangle_len(n: usize) -> usize {
    n * (n + 1) / 2
}

impl ArrivalParams {
    /// Arrival term disabled for an `n`-dimensional state.
    pub fn none(n: usize) -> Self {
        ArrivalParams {
            s_bar: DVector::zeros(0),
            l_free: DVector::zeros(0),
            mode: ArrivalMode::None,
            n,
        }
    }

    /// Weak default prior: `s_bar = 0`, `Sigma = 100 I`.
    pub fn default_prior(n: usize) -> Self {
        let mut l_free = DVector::zeros(triangle_len(n));
        for i in 0..n {
            l_free[diag_index(i)] = 0.1f64.ln();
        }
        ArrivalParams {
            s_bar: DVector::zeros(n),
            l_free,
            mode: ArrivalMode::Constant,
            n,
        }
    }

    /// Prior with mean `s_bar` and covariance `sigma`.
    pub fn from_covariance(s_bar: DVector<f64>, sigma: &DMatrix<f64>) -> Result<Self> {
        let n = s_bar.len();
        if sigma.shape() != (n, n) {
            return Err(Error::dimension("arrival covariance", n, sigma.nrows()));
        }
        let info = sigma
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("arrival covariance is singular".into()))?;
        let info = (&info + info.transpose()) * 0.5;
        let chol = info
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("arrival covariance is not positive definite".into()))?;
        Self::from_factor(s_bar, &chol.l())
    }

    /// Prior with the sample mean and covariance of `samples`. A small ridge keeps the
    /// covariance invertible for degenerate samples.
    pub fn from_moments(samples: &[DVector<f64>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("no samples for the arrival prior".into()))?;
        let n = first.len();
        if let Some(s) = samples.iter().find(|s| s.len() != n) {
            return Err(Error::dimension("arrival prior sample", n, s.len()));
        }
        let count = samples.len() as f64;
        let mean = samples.iter().fold(DVector::zeros(n), |acc, s| acc + s) / count;
        let mut cov = samples.iter().fold(DMatrix::zeros(n, n), |acc, s| {
            let d = s - &mean;
            acc + &d * d.transpose()
        }) / (count - 1.0).max(1.0);
        let ridge = 1e-9 * (1.0 + cov.diagonal().amax());
        for i in 0..n {
            cov[(i, i)] += ridge;
        }
        Self::from_covariance(mean, &cov)
    }

    /// Packs a mean and a lower-triangular factor with positive diagonal.
    pub fn from_factor(s_bar: DVector<f64>, l: &DMatrix<f64>) -> Result<Self> {
        let v = pack_eta(&s_bar, l)?;
        unpack_eta(&v, s_bar.len())
    }

    /// Builds from a packed vector; `v` must be empty for [`ArrivalMode::None`].
    pub fn from_packed(v: &DVector<f64>, n: usize, mode: ArrivalMode) -> Result<Self> {
        match mode {
            ArrivalMode::Constant => unpack_eta(v, n),
            ArrivalMode::None if v.is_empty() => Ok(Self::none(n)),
            ArrivalMode::None => Err(Error::dimension("packed arrival parameters", 0, v.len())),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// Length of the packed vector (zero when the arrival term is disabled).
    pub fn param_dim(&self) -> usize {
        match self.mode {
            ArrivalMode::Constant => self.n + triangle_len(self.n),
            ArrivalMode::None => 0,
        }
    }

    pub fn pack(&self) -> DVector<f64> {
        match self.mode {
            ArrivalMode::Constant => {
                let mut v = DVector::zeros(self.param_dim());
                v.rows_mut(0, self.n).copy_from(&self.s_bar);
                v.rows_mut(self.n, self.l_free.len()).copy_from(&self.l_free);
                v
            }
            ArrivalMode::None => DVector::zeros(0),
        }
    }

    /// Materialized factor `L`; see [`eta_to_weight`].
    pub fn weight_factor(&self) -> Result<DMatrix<f64>> {
        eta_to_weight(self)
    }

    /// `Sigma^{-1} = L L^T`.
    pub fn information(&self) -> Result<DMatrix<f64>> {
        let l = self.weight_factor()?;
        Ok(&l * l.transpose())
    }

    /// Arrival parameters with the covariance scaled `Sigma -> c Sigma`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        if self.mode == ArrivalMode::Constant {
            let shift = -0.5 * c.ln();
            for i in 0..self.n {
                out.l_free[diag_index(i)] += shift;
            }
            let s = 1.0 / c.sqrt();
            for i in 0..self.n {
                for j in 0..i {
                    out.l_free[diag_index(i) - i + j] *= s;
                }
            }
        }
        out
    }
}

/// Position of `L[i][i]` in the row-major lower triangle.
fn diag_index(i: usize) -> usize {
    triangle_len(i + 1) - 1
}

/// Materializes the lower-triangular `L` with `Sigma^{-1} = L L^T`. The arrival residual
/// is `L^T (x0 - s_bar)`.
pub fn eta_to_weight(eta: &ArrivalParams) -> Result<DMatrix<f64>> {
    if eta.mode == ArrivalMode::None {
        return Err(Error::InvalidArgument(
            "arrival term is disabled; there is no weight factor".into(),
        ));
    }
    let n = eta.n;
    let mut l = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            let v = eta.l_free[k];
            l[(i, j)] = if i == j { v.exp() } else { v };
            k += 1;
        }
    }
    if l.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("arrival weight factor"));
    }
    Ok(l)
}

/// Flattens `(s_bar, L)` into `eta`. Requires a lower-triangular `L` with positive diagonal.
pub fn pack_eta(s_bar: &DVector<f64>, l: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = s_bar.len();
    if l.shape() != (n, n) {
        return Err(Error::dimension("arrival factor", n, l.nrows()));
    }
    let mut v = DVector::zeros(n + triangle_len(n));
    v.rows_mut(0, n).copy_from(s_bar);
    let mut k = n;
    for i in 0..n {
        for j in 0..=i {
            let e = l[(i, j)];
            v[k] = if i == j {
                if !(e > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "arrival factor diagonal entry {i} is not positive: {e}"
                    )));
                }
                e.ln()
            } else {
                e
            };
            k += 1;
        }
    }
    Ok(v)
}

/// Inverse of [`pack_eta`] for an `n`-dimensional state.
pub fn unpack_eta(v: &DVector<f64>, n: usize) -> Result<ArrivalParams> {
    let len = n + triangle_len(n);
    if v.len() != len {
        return Err(Error::dimension("packed arrival parameters", len, v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("packed arrival parameters"));
    }
    Ok(ArrivalParams {
        s_bar: v.rows(0, n).into_owned(),
        l_free: v.rows(n, triangle_len(n)).into_owned(),
        mode: ArrivalMode::Constant,
        n,
    })
}

/// JSON form `{ "s_bar": [...], "L": [[...]] }` with `L` materialized; both fields are
/// `null` when the arrival term is disabled.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArrivalJson {
    pub s_bar: Option<Vec<f64>>,
    #[serde(rename = "L")]
    pub l: Option<Vec<Vec<f64>>>,
}

impl ArrivalParams {
    pub fn to_json(&self) -> ArrivalJson {
        match self.weight_factor() {
            Ok(l) => ArrivalJson {
                s_bar: Some(self.s_bar.iter().copied().collect()),
                l: Some((0..l.nrows()).map(|i| l.row(i).iter().copied().collect()).collect()),
            },
            Err(_) => ArrivalJson {
                s_bar: None,
                l: None,
            },
        }
    }

    pub fn from_json(j: &ArrivalJson, n: usize) -> Result<Self> {
        match (&j.s_bar, &j.l) {
            (None, None) => Ok(Self::none(n)),
            (Some(s), Some(rows)) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::dimension("arrival factor rows", n, rows.len()));
                }
                let l = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
                if (0..n).any(|i| (i + 1..n).any(|j| l[(i, j)] != 0.0)) {
                    return Err(Error::InvalidArgument("arrival factor is not lower triangular".into()));
                }
                Self::from_factor(DVector::from_vec(s.clone()), &l)
            }
            _ => Err(Error::InvalidArgument(
                "arrival parameters need both s_bar and L, or neither".into(),
            )),
        }
    }
}
