//! Run configuration: one JSON file per run.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mhe_sysid::arrival::ArrivalJson;
use mhe_sysid::data::{extract_windows, DatasetManifest, Trajectory, Window};
use mhe_sysid::model::{builtin_model, BuiltinModel, ModelOptions, ParametricModel};
use mhe_sysid::pem::output_moment_prior;
use mhe_sysid::sim::{simulate, SimConfig};
use mhe_sysid::{ArrivalMode, ArrivalParams, Error, PemOptions, Result};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: BuiltinModel,
    #[serde(default)]
    pub options: ModelOptions,
}

/// Where the data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Simulate(SimConfig),
    /// Path of a dataset manifest written by `simulate`.
    Manifest(PathBuf),
}

/// Parameters swept by `experiment`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub seeds: Vec<u64>,
    /// Dataset sizes; each run simulates one trajectory long enough for this many windows.
    #[serde(default)]
    pub n_windows: Option<Vec<usize>>,
    #[serde(default)]
    pub arrival_modes: Option<Vec<ArrivalMode>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub data: DataSource,
    /// Window length; defaults to the manifest value or a per-system default.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default = "constant")]
    pub arrival: ArrivalMode,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub eta0: Option<ArrivalJson>,
    #[serde(default)]
    pub solver: PemOptions,
    /// Overrides the simulation seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Overrides `solver.workers`.
    #[serde(default)]
    pub workers: Option<usize>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

fn constant() -> ArrivalMode {
    ArrivalMode::Constant
}

/// Default `(m, stride)` of each system.
pub fn default_windowing(system: BuiltinModel) -> (usize, usize) {
    match system {
        BuiltinModel::LtiScalar => (3, 1),
        BuiltinModel::Lorenz => (10, 25),
        BuiltinModel::Oscillator => (5, 1),
    }
}

pub fn model_name(system: BuiltinModel) -> &'static str {
    match system {
        BuiltinModel::LtiScalar => "lti_scalar",
        BuiltinModel::Lorenz => "lorenz",
        BuiltinModel::Oscillator => "oscillator",
    }
}

/// A loaded dataset cut into windows.
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub windows: Vec<Window>,
    pub m: usize,
    pub stride: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: RunConfig = serde_json::from_reader(File::open(path)?)?;
        if let DataSource::Manifest(p) = &mut config.data {
            if p.is_relative() {
                *p = path.parent().unwrap_or_else(|| Path::new(".")).join(&*p);
            }
        }
        Ok(config)
    }

    /// Applies command-line overrides and checks the settings that need no data.
    pub fn finish(&mut self, seed: Option<u64>, workers: Option<usize>) -> Result<()> {
        if let Some(s) = seed {
            self.seed = Some(s);
        }
        if let Some(w) = workers {
            self.workers = Some(w);
        }
        if let Some(w) = self.workers {
            self.solver.workers = w;
        }
        if let (Some(s), DataSource::Simulate(sim)) = (self.seed, &mut self.data) {
            sim.seed = s;
        }
        if let DataSource::Simulate(sim) = &self.data {
            if sim.system != self.model.name {
                return Err(Error::InvalidArgument(format!(
                    "simulated system {:?} differs from model {:?}",
                    sim.system, self.model.name
                )));
            }
            if let Some(dt) = sim.dt {
                if !(dt > 0.0 && dt.is_finite()) {
                    return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
                }
            }
        }
        if self.m == Some(0) || self.stride == Some(0) {
            return Err(Error::InvalidArgument("m and stride must be positive".into()));
        }
        if self.eta0.is_some() && self.arrival == ArrivalMode::None {
            return Err(Error::InvalidArgument("eta0 given but the arrival term is disabled".into()));
        }
        if let Some(theta) = &self.theta0 {
            let d = self.model.name.param_dim();
            if theta.len() != d {
                return Err(Error::Dimension {
                    context: "theta0".into(),
                    expected: d,
                    got: theta.len(),
                });
            }
        }
        self.solver.validate()?;
        Ok(())
    }

    /// Model options, taking the sampling period from the simulation when unset.
    pub fn model_options(&self) -> ModelOptions {
        let mut opts = self.model.options.clone();
        if let DataSource::Simulate(sim) = &self.data {
            opts.dt = opts.dt.or(Some(sim.dt()));
            opts.substeps = opts.substeps.or(sim.substeps);
        }
        opts
    }

    pub fn build_model(&self) -> Result<Arc<dyn ParametricModel>> {
        builtin_model(model_name(self.model.name), &self.model_options())
    }

    pub fn windowing(&self, manifest: Option<&DatasetManifest>) -> (usize, usize) {
        let (m, stride) = manifest
            .map(|d| (d.m, d.stride))
            .unwrap_or_else(|| default_windowing(self.model.name));
        (self.m.unwrap_or(m), self.stride.unwrap_or(stride))
    }

    /// Simulation settings of the configured data source.
    pub fn sim_config(&self) -> Result<&SimConfig> {
        match &self.data {
            DataSource::Simulate(sim) => Ok(sim),
            DataSource::Manifest(_) => Err(Error::InvalidArgument(
                "this command needs a `simulate` data source".into(),
            )),
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let (trajectories, manifest) = match &self.data {
            DataSource::Simulate(sim) => (simulate(sim)?, None),
            DataSource::Manifest(path) => {
                let (manifest, trajs) = DatasetManifest::load(path)?;
                (trajs, Some(manifest))
            }
        };
        self.window(trajectories, manifest.as_ref())
    }

    pub fn window(&self, trajectories: Vec<Trajectory>, manifest: Option<&DatasetManifest>) -> Result<Dataset> {
        let (m, stride) = self.windowing(manifest);
        if let Some((i, t)) = trajectories.iter().enumerate().find(|(_, t)| t.len() <= m) {
            return Err(Error::Data(format!(
                "trajectory {i} has {} samples, too short for windows of m = {m}",
                t.len()
            )));
        }
        let windows = extract_windows(&trajectories, m, stride)?;
        Ok(Dataset {
            trajectories,
            windows,
            m,
            stride,
        })
    }

    pub fn theta0(&self) -> Result<DVector<f64>> {
        self.theta0
            .as_ref()
            .map(|t| DVector::from_column_slice(t))
            .ok_or_else(|| Error::InvalidArgument("theta0 is required".into()))
    }

    /// Initial arrival parameters: `eta0` when given, else the output moments for models
    /// that observe their full state, else the default prior.
    pub fn eta0(&self, model: &dyn ParametricModel, dataset: &Dataset) -> Result<ArrivalParams> {
        let n = model.state_dim();
        match (self.arrival, &self.eta0) {
            (ArrivalMode::None, _) => Ok(ArrivalParams::none(n)),
            (ArrivalMode::Constant, Some(j)) => ArrivalParams::from_json(j, n),
            (ArrivalMode::Constant, None) if model.output_dim() == n => {
                output_moment_prior(model, &dataset.trajectories)
            }
            (ArrivalMode::Constant, None) => Ok(ArrivalParams::default_prior(n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn load(text: &str) -> (tempfile::TempDir, Result<RunConfig>) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, text).unwrap();
        let config = RunConfig::load(&path).and_then(|mut c| c.finish(None, None).map(|_| c));
        (dir, config)
    }

    #[test]
    fn manifest_path_is_relative_to_the_config() {
        let (dir, config) = load(r#"{"model": {"name": "lorenz"}, "data": {"manifest": "d/m.json"}, "output_dir": "o"}"#);
        let DataSource::Manifest(p) = config.unwrap().data else { panic!("manifest expected") };
        assert_eq!(p, dir.path().join("d/m.json"));
    }

    #[test]
    fn overrides_reach_the_simulation_and_solver() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(
            &path,
            r#"{"model": {"name": "lti_scalar"}, "data": {"simulate": {"system": "lti_scalar", "seed": 1}}, "output_dir": "o"}"#,
        )
        .unwrap();
        let mut config = RunConfig::load(&path).unwrap();
        config.finish(Some(9), Some(3)).unwrap();
        assert_eq!(config.sim_config().unwrap().seed, 9);
        assert_eq!(config.solver.workers, 3);
        assert_eq!(config.windowing(None), (3, 1));
    }

    #[test]
    fn eta0_without_arrival_term_is_rejected() {
        let (_dir, config) = load(
            r#"{"model": {"name": "lti_scalar"}, "data": {"manifest": "m.json"}, "arrival": "none",
                "eta0": {"s_bar": [0.0]}, "output_dir": "o"}"#,
        );
        assert!(matches!(config, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mismatched_system_is_rejected() {
        let (_dir, config) = load(
            r#"{"model": {"name": "lorenz"}, "data": {"simulate": {"system": "lti_scalar", "seed": 1}}, "output_dir": "o"}"#,
        );
        assert!(config.is_err());
    }

    #[test]
    fn missing_theta0_is_reported() {
        let (_dir, config) = load(r#"{"model": {"name": "lorenz"}, "data": {"manifest": "m.json"}, "output_dir": "o"}"#);
        assert!(config.unwrap().theta0().is_err());
    }
}
