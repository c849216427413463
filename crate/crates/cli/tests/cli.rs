use std::fs;
use std::process::Command;

use fedbnr_cli::config::{load_config, parse_config, Benchmark};
use fedbnr_cli::experiment::cmd_run;
use fedbnr_cli::fig2::{synthetic_fig2, write_fig2, Fig2Options};
use fedbnr_cli::CliError;

const SYNTHETIC: &str = r#"{
    "name": "tiny",
    "dataset": {"kind": "synthetic-1d", "function": "x-sin-x", "n": 120, "noise": 0.5, "seed": 3},
    "partition": {"kind": "range", "boundaries": [0.0]},
    "kernel": {"extractor": [{"width": 8, "activation": "tanh"}, {"width": 2, "activation": "identity"}],
               "shifter": null, "m": 10},
    "run": {"local_epochs": 3, "max_rounds": 3, "lr": 0.01, "kd_epochs": 3},
    "seeds": [0, 1]
}"#;

#[test]
fn unknown_key_is_reported_with_its_path() {
    let text = SYNTHETIC.replace("\"local_epochs\"", "\"local_epoch\"");
    match parse_config(&text) {
        Err(CliError::Config { path, message }) => {
            assert_eq!(path, "run.local_epoch");
            assert!(message.contains("local_epoch"), "{message}");
        }
        other => panic!("expected a config error, got {other:?}"),
    }
    let text = SYNTHETIC.replace("\"seeds\"", "\"seedz\"");
    assert!(matches!(parse_config(&text), Err(CliError::Config { message, .. }) if message.contains("seedz")));
}

#[test]
fn invalid_values_are_rejected_before_running() {
    let text = SYNTHETIC.replace("\"seeds\": [0, 1]", "\"seeds\": []");
    assert!(matches!(parse_config(&text), Err(CliError::Config { path, .. }) if path == "seeds"));
    let text = SYNTHETIC.replace("\"lr\": 0.01", "\"lr\": -1.0");
    assert!(matches!(parse_config(&text), Err(CliError::Config { path, .. }) if path == "run"));
}

#[test]
fn hash_is_stable_and_sensitive() {
    let a = parse_config(SYNTHETIC).unwrap();
    let b = parse_config(SYNTHETIC).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
    let c = parse_config(&SYNTHETIC.replace("\"m\": 10", "\"m\": 11")).unwrap();
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn kd_weight_follows_benchmark_table() {
    assert_eq!(Benchmark::Skillcraft.kd_alpha(10), 10.0);
    assert_eq!(Benchmark::Bike.kd_alpha(100), 0.5);
    let cfg =
        parse_config(&SYNTHETIC.replace(
            "synthetic-1d\", \"function\": \"x-sin-x\", \"n\": 120, \"noise\": 0.5,",
            "ccpp-like\", \"n\": 120,",
        ))
        .unwrap();
    assert_eq!(cfg.run.resolve(cfg.dataset.benchmark(), 10).kd_alpha, 5.0);
    let plain = parse_config(SYNTHETIC).unwrap();
    assert_eq!(plain.run.resolve(plain.dataset.benchmark(), 10).kd_alpha, 1.0);
}

#[test]
fn two_seeds_write_two_records_and_one_summary_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, SYNTHETIC).unwrap();
    let cfg = load_config(&cfg_path).unwrap();
    let out = dir.path().join("out");
    let report = cmd_run(&cfg, false, &out).unwrap();
    let records: Vec<_> = fs::read_dir(out.join("records")).unwrap().collect();
    assert_eq!(records.len(), 2);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2, "{summary}");
    assert!(summary.starts_with("name,mode,num_seeds,rmse_mean,rmse_sem"));
    let row = &report.summary[0];
    let rmses: Vec<f64> = report.records.iter().map(|r| r.test.rmse).collect();
    assert!((row.rmse_mean - (rmses[0] + rmses[1]) / 2.0).abs() < 1e-12);
    assert!((row.rmse_sem - (rmses[0] - rmses[1]).abs() / 2.0).abs() < 1e-12);
    for r in &report.records {
        assert_eq!(r.config_hash, cfg.hash());
        assert!(!r.rounds.is_empty());
        assert_eq!(r.client_sizes.len(), 2);
    }
}

#[test]
fn ablation_sweep_writes_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&SYNTHETIC.replace("[0, 1]", "[4]")).unwrap();
    let report = cmd_run(&cfg, true, dir.path()).unwrap();
    assert_eq!(report.summary.len(), 6);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 7);
    let kd = report.records.iter().find(|r| r.mode.to_string() == "kd+global").unwrap();
    assert!(kd.n_kd > 0);
}

#[test]
fn records_are_reproducible() {
    let cfg = parse_config(SYNTHETIC).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_run(&cfg, false, a.path()).unwrap();
    cmd_run(&cfg, false, b.path()).unwrap();
    for seed in [0, 1] {
        let name = format!("records/avg-global_seed{seed}.json");
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
}

#[test]
fn csv_dataset_paths_resolve_next_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("a,b,target\n");
    for i in 0..60 {
        let x = i as f64 / 10.0;
        csv.push_str(&format!("{x},{},{}\n", (x * 1.3).cos(), x.sin() + 0.1 * x));
    }
    fs::write(dir.path().join("data.csv"), csv).unwrap();
    let cfg = r#"{"name": "csv", "dataset": {"kind": "csv", "path": "data.csv", "target": "target", "max_rows": 50},
        "partition": {"kind": "correlation-sorted", "num_clients": 3},
        "kernel": {"m": 5}, "run": {"local_epochs": 2, "max_rounds": 1}}"#;
    fs::write(dir.path().join("cfg.json"), cfg).unwrap();
    let cfg = load_config(&dir.path().join("cfg.json")).unwrap();
    let report = cmd_run(&cfg, false, &dir.path().join("out")).unwrap();
    assert_eq!(report.records[0].client_sizes.iter().sum::<usize>(), 40);
}

#[test]
fn fig2_outputs() {
    let opts = Fig2Options { new_client_sizes: vec![10, 50, 200], ..Fig2Options::default() };
    let out = synthetic_fig2(&opts).unwrap();
    assert!(out.grid.len() >= 200);
    assert_eq!(out.grid.first().unwrap().x, -5.0);
    assert_eq!(out.grid.last().unwrap().x, 5.0);
    for row in &out.grid {
        assert!(row.lower95 < row.mean && row.mean < row.upper95);
    }
    let curve: Vec<f64> = out.new_client.iter().filter(|r| r.range == "[-5,5]").map(|r| r.fedbnr_rmse).collect();
    let mean = curve.iter().sum::<f64>() / curve.len() as f64;
    assert!(curve.iter().all(|v| (v - mean).abs() <= 0.2 * mean), "{curve:?}");

    let dir = tempfile::tempdir().unwrap();
    write_fig2(&out, dir.path()).unwrap();
    let prediction = fs::read_to_string(dir.path().join("prediction.csv")).unwrap();
    assert!(prediction.starts_with("x,mean,lower95,upper95\n"));
    assert_eq!(prediction.lines().count(), out.grid.len() + 1);
    assert!(dir.path().join("new_client.csv").exists());
}

#[test]
fn binary_runs_kernel_check() {
    let output = Command::new(env!("CARGO_BIN_EXE_fedbnr"))
        .args(["kernel-check", "--m-max", "10000"])
        .env("FEDBNR_THREADS", "2")
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("psd: 50 configs"));
    assert!(text.contains("rff: error decreasing with m: true"), "{text}");
}

#[test]
fn binary_reports_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, SYNTHETIC.replace("\"noise\"", "\"nois\"")).unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_fedbnr")).arg("run").arg(&path).output().unwrap();
    assert!(!output.status.success());
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("config error") && err.contains("nois"), "{err}");
}
