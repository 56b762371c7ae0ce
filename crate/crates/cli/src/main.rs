//! `mhe-sysid`: simulate, identify, evaluate and check from JSON run configurations.
//!
//! Exit codes: 0 success, 1 numeric failure, 2 configuration or validation error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mhe_sysid::data::{save_trajectory_csv, DatasetManifest};
use mhe_sysid::model::{check_jacobians, JacobianSample};
use mhe_sysid::pem::write_eps_csv;
use mhe_sysid::{evaluate_objective, identify, ArrivalMode, Error, Result};
use nalgebra::DVector;
use serde::Serialize;

use config::{DataSource, RunConfig};

#[derive(Parser)]
#[command(name = "mhe-sysid", version, about = "System identification by tuning a moving horizon estimator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories and write them with a dataset manifest.
    Simulate(Args),
    /// Estimate theta and the arrival cost.
    Identify(Args),
    /// Evaluate the objective at theta0 and eta0.
    Eval(Args),
    /// Compare the model's Jacobians with finite differences.
    Check(Args),
    /// Run `identify` over the seeds, dataset sizes and arrival modes of `sweep`.
    Experiment(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Run configuration (JSON).
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, run): (&Args, fn(&RunConfig) -> Result<u8>) = match &cli.command {
        Command::Simulate(a) => (a, cmd_simulate),
        Command::Identify(a) => (a, cmd_identify),
        Command::Eval(a) => (a, cmd_eval),
        Command::Check(a) => (a, cmd_check),
        Command::Experiment(a) => (a, cmd_experiment),
    };
    let outcome = RunConfig::load(&args.config)
        .and_then(|mut c| c.finish(args.seed, args.workers).map(|_| c))
        .and_then(|c| {
            fs::create_dir_all(&c.output_dir)?;
            run(&c)
        });
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        1
    } else {
        2
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_simulate(config: &RunConfig) -> Result<u8> {
    let dataset = config.load_dataset()?;
    if !matches!(config.data, DataSource::Simulate(_)) {
        return Err(Error::InvalidArgument("simulate needs a `simulate` data source".into()));
    }
    let dir = config.output_dir.join("trajectories");
    fs::create_dir_all(&dir)?;
    let mut files = Vec::with_capacity(dataset.trajectories.len());
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        let name = PathBuf::from("trajectories").join(format!("traj_{i:04}.csv"));
        save_trajectory_csv(traj, &config.output_dir.join(&name))?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        trajectories: files,
        m: dataset.m,
        stride: dataset.stride,
    };
    manifest.save(&config.output_dir.join("manifest.json"))?;
    println!(
        "wrote {} trajectories ({} windows of m = {}) to {}",
        dataset.trajectories.len(),
        dataset.windows.len(),
        dataset.m,
        config.output_dir.display()
    );
    Ok(0)
}

fn cmd_identify(config: &RunConfig) -> Result<u8> {
    let model = config.build_model()?;
    let theta0 = config.theta0()?;
    let dataset = config.load_dataset()?;
    let eta0 = config.eta0(model.as_ref(), &dataset)?;
    let result = identify(&dataset.windows, model.as_ref(), &theta0, &eta0, &config.solver)?;
    result.write_json(&config.output_dir.join("result.json"))?;
    result.write_trace_csv(&config.output_dir.join("trace.csv"))?;
    let eval = evaluate_objective(
        &dataset.windows,
        model.as_ref(),
        &result.theta_hat,
        &result.eta_hat,
        &config.solver,
    )?;
    write_eps_csv(&dataset.windows, &eval, &config.output_dir.join("eps.csv"))?;
    println!(
        "theta_hat = {:?}, V_N = {:.6e}, {} iterations ({}), {:.2} s",
        result.theta_hat.as_slice(),
        result.objective,
        result.iterations,
        result.termination,
        result.wall_time
    );
    Ok(0)
}

#[derive(Serialize)]
struct EvalJson {
    objective: f64,
    windows: usize,
    excluded: usize,
}

fn cmd_eval(config: &RunConfig) -> Result<u8> {
    let model = config.build_model()?;
    let theta = config.theta0()?;
    let dataset = config.load_dataset()?;
    let eta = config.eta0(model.as_ref(), &dataset)?;
    let eval = evaluate_objective(&dataset.windows, model.as_ref(), &theta, &eta, &config.solver)?;
    write_eps_csv(&dataset.windows, &eval, &config.output_dir.join("eps.csv"))?;
    let summary = EvalJson {
        objective: eval.objective,
        windows: dataset.windows.len(),
        excluded: eval.excluded,
    };
    write_json(&summary, &config.output_dir.join("eval.json"))?;
    println!(
        "V_N = {:.6e} over {} windows ({} excluded)",
        eval.objective,
        dataset.windows.len() - eval.excluded,
        eval.excluded
    );
    Ok(0)
}

/// Parameters used by `check` when the configuration gives no `theta0`.
fn nominal_theta(config: &RunConfig) -> DVector<f64> {
    use mhe_sysid::model::BuiltinModel;
    match config.model.name {
        BuiltinModel::LtiScalar => DVector::from_element(1, 0.8),
        BuiltinModel::Lorenz => DVector::from_vec(vec![10.0, 30.0]),
        BuiltinModel::Oscillator => DVector::from_element(1, 1.0),
    }
}

fn cmd_check(config: &RunConfig) -> Result<u8> {
    let model = config.build_model()?;
    let theta = config.theta0().unwrap_or_else(|_| nominal_theta(config));
    let (n, q) = (model.state_dim(), model.input_dim());
    let samples: Vec<JacobianSample> = (0..8)
        .map(|k| JacobianSample {
            x: DVector::from_fn(n, |i, _| 5.0 * (1.3 * k as f64 + 0.7 * i as f64).sin()),
            u: DVector::from_fn(q, |i, _| (0.9 * k as f64 + 0.4 * i as f64).cos()),
            theta: theta.clone(),
        })
        .collect();
    let report = check_jacobians(model.as_ref(), &samples, 1e-6)?;
    write_json(&report, &config.output_dir.join("check.json"))?;
    println!(
        "{}: worst relative Jacobian error {:.3e} (threshold {:.1e})",
        if report.passed { "pass" } else { "FAIL" },
        report.worst(),
        report.threshold
    );
    Ok(if report.passed { 0 } else { 1 })
}

fn cmd_experiment(config: &RunConfig) -> Result<u8> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("experiment needs a `sweep` section".into()))?;
    config.sim_config()?;
    let model = config.build_model()?;
    let theta0 = config.theta0()?;
    let modes = sweep.arrival_modes.clone().unwrap_or_else(|| vec![config.arrival]);
    let sizes: Vec<Option<usize>> = match &sweep.n_windows {
        Some(v) => v.iter().map(|&n| Some(n)).collect(),
        None => vec![None],
    };
    let (m, stride) = config.windowing(None);

    let path = config.output_dir.join("sweep.csv");
    let mut out = csv::Writer::from_path(&path).map_err(Error::from)?;
    let mut header: Vec<String> = ["arrival", "n_windows", "seed"].iter().map(|s| s.to_string()).collect();
    header.extend((0..theta0.len()).map(|j| format!("theta_hat_{j}")));
    header.extend(["objective", "excluded", "converged", "iterations", "wall_time"].iter().map(|s| s.to_string()));
    out.write_record(&header)?;

    for &mode in &modes {
        for &size in &sizes {
            for &seed in &sweep.seeds {
                let mut run = config.clone();
                run.arrival = mode;
                if mode == ArrivalMode::None {
                    run.eta0 = None;
                }
                if let DataSource::Simulate(sim) = &mut run.data {
                    sim.seed = seed;
                    if let Some(n) = size {
                        sim.trajectories = 1;
                        sim.duration = None;
                        sim.length = Some((n.max(1) - 1) * stride + m + 1);
                    }
                }
                let dataset = run.load_dataset()?;
                let eta0 = run.eta0(model.as_ref(), &dataset)?;
                let result = identify(&dataset.windows, model.as_ref(), &theta0, &eta0, &run.solver)?;
                let excluded = result.window_diagnostics.iter().filter(|d| d.excluded).count();
                let mut row = vec![
                    match mode {
                        ArrivalMode::Constant => "constant".to_string(),
                        ArrivalMode::None => "none".to_string(),
                    },
                    dataset.windows.len().to_string(),
                    seed.to_string(),
                ];
                row.extend(result.theta_hat.iter().map(|v| format!("{v:?}")));
                row.push(format!("{:?}", result.objective));
                row.push(excluded.to_string());
                row.push(result.converged.to_string());
                row.push(result.iterations.to_string());
                row.push(format!("{:.3}", result.wall_time));
                out.write_record(&row)?;
                out.flush()?;
                eprintln!(
                    "{:?} N={} seed={}: theta_hat = {:?}",
                    mode,
                    dataset.windows.len(),
                    seed,
                    result.theta_hat.as_slice()
                );
            }
        }
    }
    println!("wrote {}", path.display());
    Ok(0)
}
