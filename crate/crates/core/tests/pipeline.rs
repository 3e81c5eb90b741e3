use nalgebra::DMatrix;
use qvpf_core::linalg::rmse;
use qvpf_core::linear_gaussian::normal_equations;
use qvpf_core::pipeline::*;
use qvpf_core::*;

fn linear_twin() -> TwinConfig {
    TwinConfig {
        model: DynamicsModel::linear(DMatrix::from_row_slice(2, 2, &[0.95, 0.1, -0.2, 0.9])),
        window: 5,
        truth_center: vec![1.0, 2.0],
        truth_cov: None,
        background_cov: Covariance::scalar(2, 1.0).unwrap(),
        obs_operator: ObservationOperator::identity(2),
        obs_cov: Covariance::scalar(2, 0.3).unwrap(),
        background_perturbation: 1.0,
        obs_perturbation: 1.0,
        model_error_cov: None,
    }
}

fn config(method: &str) -> PipelineConfig {
    PipelineConfig {
        seed: 11,
        twin: linear_twin(),
        method: serde_json::from_str(method).unwrap(),
        output: None,
        timings: false,
    }
}

const QVPF: &str = r#"{"kind":"qvpf","grid":{"bits_per_dim":3},"particles":64,"cycle_length":2}"#;

#[test]
fn config_round_trips_through_a_file() {
    let c = config(QVPF);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, c.to_json().unwrap()).unwrap();
    assert_eq!(load_config(&path).unwrap(), c);
}

#[test]
fn missing_field_is_named_with_its_line() {
    let mut v = serde_json::to_value(config(QVPF)).unwrap();
    v.as_object_mut().unwrap().remove("seed");
    let text = serde_json::to_string_pretty(&v).unwrap();
    let msg = parse_config(&text).unwrap_err().to_string();
    assert!(msg.contains("seed") && msg.contains("line"), "{msg}");

    let bad = r#"{"seed": 1, "twin": {}, "method": {"kind": "fourdvar"}, "colour": 3}"#;
    assert!(parse_config(bad).unwrap_err().is_validation());
}

#[test]
fn report_files_echo_the_config() {
    let c = config(QVPF);
    let report = run(&c).unwrap();
    assert_eq!(report.rmse.len(), c.twin.window);
    assert_eq!(report.version, VERSION);
    let dir = tempfile::tempdir().unwrap();
    let written = write_report(&report, dir.path()).unwrap();
    let names: Vec<_> = written
        .iter()
        .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
        .collect();
    assert_eq!(
        names,
        [
            "report.json",
            "trace_rmse.csv",
            "trace_cycles.csv",
            "trace_qaoa.csv",
            "plotdata_trajectory.csv"
        ]
    );
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let back: AssimilationReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back.config, c);
    assert_eq!(back, report);
    let rows = std::fs::read_to_string(dir.path().join("trace_rmse.csv")).unwrap();
    assert_eq!(rows.lines().count(), c.twin.window + 1);
}

#[test]
fn comparison_runs_every_method_on_one_twin() {
    let configs = vec![
        config(r#"{"kind":"fourdvar"}"#),
        config(r#"{"kind":"pf","particles":200}"#),
        config(r#"{"kind":"qaoa","grid":{"bits_per_dim":3},"depth":2}"#),
        config(r#"{"kind":"qmcmc","grid":{"bits_per_dim":3},"steps":400,"burn_in":50}"#),
        config(QVPF),
        config(r#"{"kind":"fourdvar"}"#),
    ];
    let table = compare_methods(&configs).unwrap();
    assert_eq!(table.rows.len(), configs.len());
    assert_eq!(table.rows[0], table.rows[5]);
    assert!(table.rows.iter().all(|r| r.error.is_none()), "{:?}", table.rows);

    let twin = twin_for(&configs[0]).unwrap();
    let x0 = normal_equations(&twin.problem).unwrap();
    let oracle = twin.problem.trajectory(&x0).unwrap();
    let final_oracle = rmse(oracle.last().unwrap(), twin.truth.last().unwrap());
    assert!((table.rows[0].final_rmse.unwrap() - final_oracle).abs() < 1e-6);

    assert!(table.rows[3].acceptance_rate.is_some() && table.rows[3].oracle_calls.is_some());
    assert!(table.rows[1].mean_ess.is_some());

    let mut other = configs.clone();
    other[1].seed += 1;
    assert!(matches!(compare_methods(&other), Err(Error::Precondition(_))));

    let dir = tempfile::tempdir().unwrap();
    write_comparison(&table, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("plotdata_comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), configs.len() + 1);
}

#[test]
fn lorenz_filter_beats_the_free_run() {
    let mut c = config(r#"{"kind":"pf","particles":500}"#);
    c.twin = TwinConfig {
        model: DynamicsModel::lorenz63(0.01, 5),
        window: 20,
        truth_center: vec![1.0, 1.0, 20.0],
        truth_cov: Some(Covariance::scalar(3, 4.0).unwrap()),
        background_cov: Covariance::scalar(3, 2.0).unwrap(),
        obs_operator: ObservationOperator::identity(3),
        obs_cov: Covariance::scalar(3, 0.5).unwrap(),
        background_perturbation: 1.0,
        obs_perturbation: 1.0,
        model_error_cov: Some(Covariance::scalar(3, 0.05).unwrap()),
    };
    let r = run(&c).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&r.rmse) < mean(&r.background_rmse),
        "{:?} vs {:?}",
        r.rmse,
        r.background_rmse
    );
    assert!(r
        .diagnostics
        .filter
        .iter()
        .all(|s| s.ess >= 1.0 && s.ess <= 500.0 + 1e-9));
    assert!(!r.notes.is_empty());
}

#[test]
fn zero_obs_noise_rejected_for_variational_method() {
    let mut c = config(r#"{"kind":"fourdvar"}"#);
    c.twin.obs_cov = Covariance::zero(2);
    let err = run(&c).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("fourdvar"));
}

#[test]
fn scaling_sweeps_report_fits() {
    let eps = scaling_experiment(&ScalingConfig {
        kind: ScalingKind::EpsilonScaling,
        grid: (2..=8).map(|n| 0.5f64.powi(n)).collect(),
        seed: 3,
        trials: Some(200),
    })
    .unwrap();
    let q = eps.series("quantum").unwrap();
    let c = eps.series("classical").unwrap();
    assert_eq!(q.fit.residuals.len(), 7);
    assert!((q.fit.slope + 0.5).abs() < 0.15, "{}", q.fit.slope);
    assert!((c.fit.slope + 1.0).abs() < 0.15, "{}", c.fit.slope);

    let dir = tempfile::tempdir().unwrap();
    write_scaling(&eps, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("plotdata_scaling.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 14);
}
