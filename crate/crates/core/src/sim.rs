//! Seeded data generators for the built-in systems.
//!
//! Each trajectory draws from its own ChaCha8 stream (`seed`, stream = trajectory
//! index), so trajectories are independent of each other and of how many are
//! generated. Within a trajectory the draws are: initial state, then per sample the
//! measurement noise of `y[k]` followed by the process noise of the step to `x[k+1]`.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::model::{builtin_model, BuiltinModel, ModelOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseDist {
    Gaussian { sigma: f64 },
    Uniform { low: f64, high: f64 },
    Zero,
}

impl NoiseDist {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseDist::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => Err(
                Error::InvalidArgument(format!("gaussian sigma must be non-negative, got {sigma}")),
            ),
            NoiseDist::Uniform { low, high } if !(low < high && low.is_finite() && high.is_finite()) => {
                Err(Error::InvalidArgument(format!(
                    "uniform bounds must satisfy low < high, got ({low}, {high})"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            NoiseDist::Uniform { low, high } => 0.5 * (low + high),
            _ => 0.0,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            NoiseDist::Gaussian { sigma } => sigma * sigma,
            NoiseDist::Uniform { low, high } => (high - low).powi(2) / 12.0,
            NoiseDist::Zero => 0.0,
        }
    }
}

/// One draw from `dist`.
pub fn sample<R: Rng + ?Sized>(dist: &NoiseDist, rng: &mut R) -> Result<f64> {
    dist.validate()?;
    Ok(match *dist {
        NoiseDist::Gaussian { sigma } => Normal::new(0.0, sigma)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .sample(rng),
        NoiseDist::Uniform { low, high } => Uniform::new(low, high)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .sample(rng),
        NoiseDist::Zero => 0.0,
    })
}

fn sample_vec<R: Rng + ?Sized>(dist: &NoiseDist, len: usize, rng: &mut R) -> Result<DVector<f64>> {
    let mut v = DVector::zeros(len);
    for x in v.iter_mut() {
        *x = sample(dist, rng)?;
    }
    Ok(v)
}

/// One classical Runge-Kutta step of `x' = field(x, theta)`.
pub fn rk4_step<F>(field: F, x: &DVector<f64>, theta: &DVector<f64>, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be non-negative, got {dt}")));
    }
    let eval = |at: &DVector<f64>| -> Result<DVector<f64>> {
        let k = field(at, theta);
        if k.len() != x.len() {
            return Err(Error::dimension("vector field", x.len(), k.len()));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("vector field"));
        }
        Ok(k)
    };
    let k1 = eval(x)?;
    let k2 = eval(&(x + &k1 * (0.5 * dt)))?;
    let k3 = eval(&(x + &k2 * (0.5 * dt)))?;
    let k4 = eval(&(x + &k3 * dt))?;
    Ok(x + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    Fixed(Vec<f64>),
    Uniform { low: f64, high: f64 },
}

/// Simulation settings. Unset fields take per-system defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub system: BuiltinModel,
    #[serde(default)]
    pub theta_star: Option<Vec<f64>>,
    /// Samples per trajectory.
    #[serde(default)]
    pub length: Option<usize>,
    /// Duration per trajectory in seconds; `length = round(duration / dt)`.
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
    /// RK4 steps per sample for continuous systems.
    #[serde(default)]
    pub substeps: Option<usize>,
    pub seed: u64,
    #[serde(default = "one")]
    pub trajectories: usize,
    #[serde(default)]
    pub process_noise: Option<NoiseDist>,
    #[serde(default)]
    pub measurement_noise: Option<NoiseDist>,
    #[serde(default)]
    pub x0: Option<InitialState>,
}

fn one() -> usize {
    1
}

/// Fully resolved simulation settings.
#[derive(Debug, Clone, PartialEq)]
struct Resolved {
    theta: DVector<f64>,
    length: usize,
    dt: f64,
    process_noise: NoiseDist,
    measurement_noise: NoiseDist,
    x0: InitialState,
}

impl SimConfig {
    pub fn new(system: BuiltinModel, seed: u64) -> Self {
        SimConfig {
            system,
            theta_star: None,
            length: None,
            duration: None,
            dt: None,
            substeps: None,
            seed,
            trajectories: 1,
            process_noise: None,
            measurement_noise: None,
            x0: None,
        }
    }

    /// Same settings with both noise sources switched off.
    pub fn noiseless(mut self) -> Self {
        self.process_noise = Some(NoiseDist::Zero);
        self.measurement_noise = Some(NoiseDist::Zero);
        self
    }

    pub fn dt(&self) -> f64 {
        self.dt.unwrap_or(match self.system {
            BuiltinModel::LtiScalar => 1.0,
            BuiltinModel::Lorenz => 0.02,
            BuiltinModel::Oscillator => 0.5,
        })
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            dt: Some(self.dt()),
            substeps: self.substeps,
            ..Default::default()
        }
    }

    fn resolve(&self) -> Result<Resolved> {
        let dt = self.dt();
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if self.trajectories == 0 {
            return Err(Error::InvalidArgument("trajectories must be at least 1".into()));
        }
        let (theta, length, process_noise, measurement_noise, x0) = match self.system {
            BuiltinModel::LtiScalar => (
                vec![0.8],
                100,
                NoiseDist::Gaussian { sigma: 1.0 },
                NoiseDist::Gaussian { sigma: 1.0 },
                InitialState::Fixed(vec![0.0]),
            ),
            BuiltinModel::Lorenz => (
                vec![10.0, 30.0],
                (3.5 / dt).round() as usize,
                NoiseDist::Uniform { low: -0.25, high: 0.25 },
                NoiseDist::Uniform { low: -1.0, high: 1.0 },
                InitialState::Uniform { low: -10.0, high: 10.0 },
            ),
            BuiltinModel::Oscillator => (
                vec![1.0],
                40,
                NoiseDist::Gaussian { sigma: 1e-3f64.sqrt() },
                NoiseDist::Gaussian { sigma: 0.1 },
                InitialState::Fixed(vec![1.0, 0.0]),
            ),
        };
        let length = match (self.length, self.duration) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidArgument("set either length or duration, not both".into()))
            }
            (Some(l), None) => l,
            (None, Some(t)) if t > 0.0 && t.is_finite() => (t / dt).round() as usize,
            (None, Some(t)) => {
                return Err(Error::InvalidArgument(format!("duration must be positive, got {t}")))
            }
            (None, None) => length,
        };
        if length == 0 {
            return Err(Error::InvalidArgument("trajectory length must be positive".into()));
        }
        let theta = self.theta_star.clone().unwrap_or(theta);
        if theta.len() != self.system.param_dim() {
            return Err(Error::dimension("theta_star", self.system.param_dim(), theta.len()));
        }
        let resolved = Resolved {
            theta: DVector::from_vec(theta),
            length,
            dt,
            process_noise: self.process_noise.unwrap_or(process_noise),
            measurement_noise: self.measurement_noise.unwrap_or(measurement_noise),
            x0: self.x0.clone().unwrap_or(x0),
        };
        resolved.process_noise.validate()?;
        resolved.measurement_noise.validate()?;
        if let InitialState::Uniform { low, high } = resolved.x0 {
            NoiseDist::Uniform { low, high }.validate()?;
        }
        Ok(resolved)
    }
}

/// A simulated trajectory together with its hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub trajectory: Trajectory,
    pub states: Vec<DVector<f64>>,
}

/// Simulates every trajectory of `config`, keeping the states.
pub fn simulate_runs(config: &SimConfig) -> Result<Vec<SimRun>> {
    let r = config.resolve()?;
    let model = builtin_model(
        match config.system {
            BuiltinModel::LtiScalar => "lti_scalar",
            BuiltinModel::Lorenz => "lorenz",
            BuiltinModel::Oscillator => "oscillator",
        },
        &config.model_options(),
    )?;
    let n = model.state_dim();
    let p = model.output_dim();
    let u = DVector::zeros(0);
    (0..config.trajectories)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let mut x = match &r.x0 {
                InitialState::Fixed(v) if v.len() == n => DVector::from_column_slice(v),
                InitialState::Fixed(v) => return Err(Error::dimension("x0", n, v.len())),
                InitialState::Uniform { low, high } => {
                    sample_vec(&NoiseDist::Uniform { low: *low, high: *high }, n, &mut rng)?
                }
            };
            let mut states = Vec::with_capacity(r.length);
            let mut ys = Vec::with_capacity(r.length);
            for k in 0..r.length {
                ys.push(model.output(&x, &r.theta) + sample_vec(&r.measurement_noise, p, &mut rng)?);
                states.push(x.clone());
                if k + 1 < r.length {
                    x = model.dynamics(&x, &u, &r.theta) + sample_vec(&r.process_noise, n, &mut rng)?;
                    if x.iter().any(|v| !v.is_finite()) {
                        return Err(Error::non_finite(format!("simulated state of trajectory {i} at step {}", k + 1)));
                    }
                }
            }
            Ok(SimRun {
                trajectory: Trajectory::new(Vec::new(), ys, r.dt)?,
                states,
            })
        })
        .collect()
}

/// Simulates every trajectory of `config`.
pub fn simulate(config: &SimConfig) -> Result<Vec<Trajectory>> {
    Ok(simulate_runs(config)?.into_iter().map(|r| r.trajectory).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::extract_windows;
    use crate::model::{LorenzField, VectorField};

    fn moments(dist: NoiseDist, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| sample(&dist, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mean, var)
    }

    #[test]
    fn uniform_moments() {
        for (low, high) in [(-1.0, 1.0), (-0.25, 0.25)] {
            let dist = NoiseDist::Uniform { low, high };
            let (mean, var) = moments(dist, 1);
            let expected = (high - low) * (high - low) / 12.0;
            assert!((var - expected).abs() <= 0.01 * expected, "{var} vs {expected}");
            assert!(mean.abs() <= 0.005 * (high - low));
        }
    }

    #[test]
    fn gaussian_moments() {
        let (mean, var) = moments(NoiseDist::Gaussian { sigma: 1.0 }, 2);
        assert!(mean.abs() <= 0.005);
        assert!((var - 1.0).abs() <= 0.01);
    }

    #[test]
    fn invalid_distributions_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample(&NoiseDist::Uniform { low: 1.0, high: 1.0 }, &mut rng).is_err());
        assert!(sample(&NoiseDist::Uniform { low: 2.0, high: 1.0 }, &mut rng).is_err());
        assert!(sample(&NoiseDist::Gaussian { sigma: -1.0 }, &mut rng).is_err());
    }

    #[test]
    fn rk4_constant_and_exponential() {
        let x = DVector::from_vec(vec![1.5, -2.0]);
        let theta = DVector::zeros(0);
        let still = rk4_step(|x: &DVector<f64>, _: &DVector<f64>| DVector::zeros(x.len()), &x, &theta, 0.3).unwrap();
        assert_eq!(still, x);
        let h: f64 = 0.02;
        let grown = rk4_step(|x: &DVector<f64>, _: &DVector<f64>| x.clone(), &x, &theta, h).unwrap();
        let multiplier = grown[0] / x[0];
        // RK4 reproduces the exponential series through h^4; the remainder is h^5/120.
        let series = 1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((multiplier - series).abs() <= 1e-15);
        assert!((multiplier - h.exp()).abs() <= 1.01 * h.powi(5) / 120.0);
        assert!((grown - &x * multiplier).amax() <= 1e-15);
    }

    #[test]
    fn rk4_lorenz_matches_hand_stages() {
        let x = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let theta = DVector::from_vec(vec![10.0, 30.0]);
        let h = 0.02;
        let f = |v: [f64; 3]| [10.0 * (v[1] - v[0]), v[0] * (30.0 - v[2]) - v[1], v[0] * v[1] - 2.0 * v[2]];
        let axpy = |a: [f64; 3], s: f64, k: [f64; 3]| [a[0] + s * k[0], a[1] + s * k[1], a[2] + s * k[2]];
        let x0 = [1.0, 1.0, 1.0];
        let k1 = f(x0);
        assert_eq!(k1, [0.0, 28.0, -1.0]);
        let k2 = f(axpy(x0, h / 2.0, k1));
        let k3 = f(axpy(x0, h / 2.0, k2));
        let k4 = f(axpy(x0, h, k3));
        let expected: Vec<f64> = (0..3)
            .map(|i| x0[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        let got = rk4_step(|x: &DVector<f64>, t: &DVector<f64>| LorenzField.eval(x, t), &x, &theta, h).unwrap();
        assert!((got - DVector::from_vec(expected)).amax() <= 1e-12);
    }

    #[test]
    fn rk4_rejects_bad_input() {
        let x = DVector::from_vec(vec![1.0]);
        let t = DVector::zeros(0);
        assert!(rk4_step(|x: &DVector<f64>, _: &DVector<f64>| x.clone(), &x, &t, -0.1).is_err());
        assert!(rk4_step(|x: &DVector<f64>, _: &DVector<f64>| x.clone(), &x, &t, f64::NAN).is_err());
        let err = rk4_step(|x: &DVector<f64>, _: &DVector<f64>| x * f64::INFINITY, &x, &t, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    fn lorenz_config(seed: u64) -> SimConfig {
        SimConfig {
            trajectories: 50,
            duration: Some(3.5),
            ..SimConfig::new(BuiltinModel::Lorenz, seed)
        }
    }

    #[test]
    fn lorenz_dataset_shape() {
        let trajs = simulate(&lorenz_config(7)).unwrap();
        assert_eq!(trajs.len(), 50);
        assert!(trajs.iter().all(|t| t.len() == 175 && t.output_dim() == 2));
        assert_eq!(extract_windows(&trajs, 10, 25).unwrap().len(), 350);
    }

    #[test]
    fn zero_noise_lti_is_identically_zero() {
        let config = SimConfig { length: Some(50), ..SimConfig::new(BuiltinModel::LtiScalar, 3) }.noiseless();
        let run = &simulate_runs(&config).unwrap()[0];
        assert!(run.states.iter().chain(&run.trajectory.y).all(|v| v[0] == 0.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = simulate(&lorenz_config(7)).unwrap();
        assert_eq!(a, simulate(&lorenz_config(7)).unwrap());
        assert_ne!(a, simulate(&lorenz_config(8)).unwrap());
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn shorter_run_is_a_prefix() {
        let long = SimConfig { length: Some(200), ..SimConfig::new(BuiltinModel::LtiScalar, 11) };
        let short = SimConfig { length: Some(50), ..long.clone() };
        let a = simulate(&long).unwrap().remove(0);
        let b = simulate(&short).unwrap().remove(0);
        assert_eq!(&a.y[..50], &b.y[..]);
    }

    #[test]
    fn trajectories_do_not_depend_on_count() {
        let few = SimConfig { trajectories: 2, ..lorenz_config(5) };
        assert_eq!(simulate(&few).unwrap()[..], simulate(&lorenz_config(5)).unwrap()[..2]);
    }

    #[test]
    fn noiseless_lorenz_stays_bounded() {
        for run in simulate_runs(&lorenz_config(13).noiseless()).unwrap() {
            assert!(run.states.iter().all(|x| x.amax() <= 100.0));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let zero_dt = SimConfig { dt: Some(0.0), ..SimConfig::new(BuiltinModel::Lorenz, 0) };
        assert!(simulate(&zero_dt).is_err());
        let both = SimConfig { length: Some(3), duration: Some(1.0), ..SimConfig::new(BuiltinModel::Lorenz, 0) };
        assert!(simulate(&both).is_err());
        let bad_theta = SimConfig { theta_star: Some(vec![1.0]), ..SimConfig::new(BuiltinModel::Lorenz, 0) };
        assert!(matches!(simulate(&bad_theta), Err(Error::Dimension { .. })));
        let bad_x0 = SimConfig { x0: Some(InitialState::Fixed(vec![0.0; 2])), ..SimConfig::new(BuiltinModel::Lorenz, 0) };
        assert!(simulate(&bad_x0).is_err());
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let ok: SimConfig = serde_json::from_str(
            r#"{"system":"lorenz","seed":7,"trajectories":50,"duration":3.5,
                "process_noise":{"uniform":{"low":-0.25,"high":0.25}}}"#,
        )
        .unwrap();
        assert_eq!(ok.trajectories, 50);
        assert!(serde_json::from_str::<SimConfig>(r#"{"system":"lorenz","seed":7,"typo":1}"#).is_err());
    }
}
