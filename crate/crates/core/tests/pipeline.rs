use mhe_sysid::data::{save_trajectory_csv, DatasetManifest};
use mhe_sysid::model::{BuiltinModel, LtiScalar};
use mhe_sysid::pem::write_eps_csv;
use mhe_sysid::sim::{simulate, SimConfig};
use mhe_sysid::{builtin_model, evaluate_objective, extract_windows, identify, ArrivalParams, PemOptions};
use nalgebra::DVector;

#[test]
fn file_round_trip_preserves_the_objective() {
    let dir = tempfile::tempdir().unwrap();
    let sim = SimConfig {
        theta_star: Some(vec![10.0, 30.0]),
        duration: Some(1.0),
        trajectories: 3,
        ..SimConfig::new(BuiltinModel::Lorenz, 11)
    };
    let trajs = simulate(&sim).unwrap();
    let mut files = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        let name = format!("traj_{i}.csv");
        save_trajectory_csv(t, &dir.path().join(&name)).unwrap();
        files.push(name.into());
    }
    let manifest = DatasetManifest { trajectories: files, m: 10, stride: 5 };
    manifest.save(&dir.path().join("manifest.json")).unwrap();
    let (loaded, reloaded) = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, manifest);

    let direct = extract_windows(&trajs, 10, 5).unwrap();
    let from_files = extract_windows(&reloaded, 10, 5).unwrap();
    assert_eq!(direct.len(), from_files.len());

    let model = builtin_model("lorenz", &sim.model_options()).unwrap();
    let theta = DVector::from_vec(vec![10.0, 30.0]);
    let eta = ArrivalParams::default_prior(3);
    let opts = PemOptions::default();
    let a = evaluate_objective(&direct, model.as_ref(), &theta, &eta, &opts).unwrap();
    let b = evaluate_objective(&from_files, model.as_ref(), &theta, &eta, &opts).unwrap();
    assert!((a.objective - b.objective).abs() <= 1e-12 * a.objective);

    let eps_path = dir.path().join("eps.csv");
    write_eps_csv(&from_files, &b, &eps_path).unwrap();
    let rows = csv::Reader::from_path(&eps_path).unwrap().records().count();
    assert_eq!(rows, from_files.len());
}

#[test]
fn noiseless_data_at_the_truth_has_no_prediction_error() {
    let sim = SimConfig {
        theta_star: Some(vec![0.8]),
        length: Some(200),
        ..SimConfig::new(BuiltinModel::LtiScalar, 2)
    }
    .noiseless();
    let windows = extract_windows(&simulate(&sim).unwrap(), 3, 1).unwrap();
    let eval = evaluate_objective(
        &windows,
        &LtiScalar::default(),
        &DVector::from_element(1, 0.8),
        &ArrivalParams::none(1),
        &PemOptions::default(),
    )
    .unwrap();
    assert!(eval.objective <= 1e-24, "objective {}", eval.objective);
    assert_eq!(eval.excluded, 0);
}

#[test]
fn identification_recovers_the_scalar_pole() {
    let sim = SimConfig {
        theta_star: Some(vec![0.8]),
        length: Some(5003),
        ..SimConfig::new(BuiltinModel::LtiScalar, 9)
    };
    let windows = extract_windows(&simulate(&sim).unwrap(), 3, 1).unwrap();
    let res = identify(
        &windows,
        &LtiScalar::default(),
        &DVector::from_element(1, 0.5),
        &ArrivalParams::default_prior(1),
        &PemOptions::default(),
    )
    .unwrap();
    assert!(res.converged, "{}", res.termination);
    assert!((res.theta_hat[0] - 0.8).abs() < 0.05, "theta_hat {}", res.theta_hat[0]);
    let accepted: Vec<f64> = res.trace.iter().filter(|t| t.accepted).map(|t| t.v_n).collect();
    assert!(accepted.windows(2).all(|p| p[1] <= p[0]));
}
