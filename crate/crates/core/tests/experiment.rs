use std::path::PathBuf;

use dyntomo::bench::Metrics;
use dyntomo::experiment::{
    compare, read_metrics_csv, run_baseline, run_simulation, write_metrics_csv, ExperimentConfig, MetricRow,
};
use dyntomo::solver::ForwardMode;
use dyntomo::Error;

fn config_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_dir().join(name)).unwrap()
}

fn tiny() -> ExperimentConfig {
    let mut cfg = load("suite1.toml");
    cfg.grid.nx = 32;
    cfg.grid.ny = 32;
    cfg.gates = 2;
    cfg.acquisition.bins = 48;
    cfg.baseline.iterations = 5;
    cfg
}

#[test]
fn shipped_configs_round_trip() {
    for entry in std::fs::read_dir(config_dir()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg, "{}", path.display());
    }
}

#[test]
fn infinite_snr_parses() {
    let cfg = load("suite1.toml");
    assert_eq!(cfg.snr_db, f64::INFINITY);
    assert_eq!(load("suite2.toml").snr_db, 14.6);
}

#[test]
fn unknown_keys_are_rejected() {
    let text = std::fs::read_to_string(config_dir().join("suite1.toml")).unwrap();
    for (from, to) in [("mu2 = 1e-7", "mu2 = 1e-7\nmu_2 = 1e-7"), ("seed = 1\n", "seed = 1\nsed = 2\n"), ("count = 6", "count = 6\nradius = 1.0")] {
        let err = ExperimentConfig::from_toml(&text.replacen(from, to, 1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}

#[test]
fn invalid_values_are_config_errors() {
    let text = std::fs::read_to_string(config_dir().join("suite1.toml")).unwrap();
    for (from, to) in [("gates = 5", "gates = 0"), ("eps_tv = 1e-4", "eps_tv = 0.0"), ("sigma = 2.0", "sigma = -1.0"), ("beta = 0.1", "beta = 0.0"), ("nx = 128", "nx = 0")] {
        let err = ExperimentConfig::from_toml(&text.replacen(from, to, 1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{from} -> {to}: {err}");
    }
}

#[test]
fn registration_dataset_keeps_the_template_frame() {
    let cfg = load("registration.toml");
    assert_eq!(cfg.model.forward, ForwardMode::Identity);
    let data = run_simulation(&cfg).unwrap();
    assert!(data.gates.is_empty());
    assert_eq!(data.ground_truth.len(), cfg.gates + 1);
}

#[test]
fn single_gate_config_degenerates_to_static_ct() {
    let mut cfg = tiny();
    cfg.gates = 1;
    let data = run_simulation(&cfg).unwrap();
    assert_eq!(data.gates.len(), 1);
    let b = run_baseline(&cfg, &data).unwrap();
    assert_eq!(b.per_gate[0], b.pooled);
}

#[test]
fn zero_data_baseline_returns_zero_images() {
    let cfg = tiny();
    let mut data = run_simulation(&cfg).unwrap();
    for g in &mut data.gates {
        g.noisy = g.noisy.scaled(0.0);
    }
    let b = run_baseline(&cfg, &data).unwrap();
    assert!(b.per_gate.iter().chain(std::iter::once(&b.pooled)).all(|f| f.max() == 0.0 && f.min() == 0.0));
}

fn rows(method: &str, n: usize, ssim: f64) -> Vec<MetricRow> {
    (1..=n)
        .map(|g| {
            let m = Metrics { ssim, psnr: 30.0 + g as f64, nrmse: 0.1, mass: 1.0, mass_truth: 1.0 };
            MetricRow::new(method, g, m)
        })
        .collect()
}

#[test]
fn comparison_of_three_methods_has_three_rows_per_gate() {
    let runs = vec![
        ("a".to_string(), rows("proposed", 5, 0.9)),
        ("b".to_string(), rows("tv", 5, 0.8)),
        ("c".to_string(), rows("l2", 5, 0.7)),
    ];
    let table = compare(&runs);
    assert_eq!(table.len(), 15);
    assert!(table.iter().all(|r| r.delta_ssim == 0.0));
    let again = compare(&[runs[0].clone(), ("a2".to_string(), rows("proposed", 5, 0.95))]);
    assert!((again[7].delta_ssim - 0.05).abs() < 1e-12);
}

#[test]
fn metrics_csv_round_trips_infinite_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rows("tv", 2, 1.0);
    r[0].psnr = f64::INFINITY;
    let path = dir.path().join("m.csv");
    write_metrics_csv(&path, &r).unwrap();
    assert_eq!(read_metrics_csv(&path).unwrap(), r);
}
