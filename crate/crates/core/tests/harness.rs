//! Report schema, table layouts, determinism of emitted files and the CLI.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

use feddapl::data::GenConfig;
use feddapl::harness::{
    baseline_matrix, matrix_csv, mu_sweep, run_suite, suite_csv, sweep_csv, ExperimentConfig, SCHEMA_VERSION,
};
use feddapl::objective::Algorithm;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        algorithm: Algorithm::Feddapl,
        mu: 40.0,
        seeds: vec![0, 1],
        gen: GenConfig { train_samples: 150, ood_samples: 60, ..GenConfig::default() },
        ..ExperimentConfig::default()
    };
    cfg.train.model.fe_hidden = vec![6];
    cfg.train.model.feature_dim = 4;
    cfg.train.model.disc_hidden = vec![6];
    cfg.train.centralized_epochs = 4;
    cfg.train.validate_every = 2;
    cfg.train.schedule.warmup_epochs = 1;
    cfg.fed.rounds = 2;
    cfg.fed.local_epochs = 2;
    cfg
}

/// Every key path of a JSON value, with array positions collapsed to `[]`.
fn key_paths(v: &Value, prefix: &str, out: &mut BTreeSet<String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let p = format!("{prefix}.{k}");
                out.insert(p.clone());
                key_paths(x, &p, out);
            }
        }
        Value::Array(a) => {
            for x in a {
                key_paths(x, &format!("{prefix}[]"), out);
            }
        }
        _ => {}
    }
}

fn schema_of(v: &Value) -> String {
    let mut paths = BTreeSet::new();
    key_paths(v, "", &mut paths);
    paths.into_iter().collect::<Vec<_>>().join("\n") + "\n"
}

#[test]
fn report_schema_matches_golden_file() {
    let report = run_suite(&tiny()).unwrap();
    assert_eq!(report.schema_version, SCHEMA_VERSION);
    let got = schema_of(&serde_json::to_value(&report).unwrap());
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/report_schema.txt");
    if std::env::var_os("FEDDAPL_BLESS").is_some() {
        fs::write(&golden, &got).unwrap();
    }
    let want = fs::read_to_string(&golden).unwrap();
    assert_eq!(got, want, "report layout changed; bump SCHEMA_VERSION and rerun with FEDDAPL_BLESS=1");
}

#[test]
fn every_number_is_traceable_to_hash_and_seed() {
    let cfg = tiny();
    let report = run_suite(&cfg).unwrap();
    assert_eq!(report.config_hash, cfg.hash());
    assert_eq!(report.config, cfg);
    for s in &report.per_seed {
        assert_eq!(s.data_seed, Some(cfg.data_seed_for(s.seed)));
        assert!(s.final_mae.is_some());
        assert_eq!(s.curve.len(), cfg.fed.rounds);
        assert_eq!(s.curve.last().unwrap().ood_mae, s.final_mae.unwrap());
    }
}

#[test]
fn repeated_and_single_seeds() {
    let mut cfg = tiny();
    cfg.seeds = vec![3, 3];
    let r = run_suite(&cfg).unwrap();
    assert_eq!(r.per_seed[0], r.per_seed[1]);
    assert_eq!(r.mae_std, Some(0.0));
    assert!(!r.single_seed);
    cfg.seeds = vec![3];
    let r = run_suite(&cfg).unwrap();
    assert!(r.single_seed);
    assert_eq!(r.mae_std, Some(0.0));
}

#[test]
fn sweep_has_table_layout_and_zero_mu_is_naive() {
    let cfg = tiny();
    let mus = [0.0, 10.0, 20.0, 40.0, 100.0];
    let sweep = mu_sweep(&cfg, &mus).unwrap();
    let csv = sweep_csv(&sweep);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,mu_0,mu_10,mu_20,mu_40,mu_100");
    let methods: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["fedprox_adam", "fedprox_sgd", "feddapl_adam", "feddapl_sgd"]);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 1 + mus.len()));

    let mut naive = cfg.clone();
    naive.algorithm = Algorithm::NaiveFeddann;
    naive.mu = 0.0;
    let naive_adam = run_suite(&naive).unwrap();
    naive.train.optim.kind = feddapl::optim::OptimizerKind::Sgd;
    let naive_sgd = run_suite(&naive).unwrap();
    for row in &sweep.rows {
        let want = if row.method.ends_with("adam") { &naive_adam } else { &naive_sgd };
        assert_eq!(row.mae_mean[0], want.mae_mean, "{}", row.method);
    }
    assert_eq!(sweep_csv(&mu_sweep(&cfg, &mus).unwrap()), csv);
}

#[test]
fn matrix_columns_and_deltas() {
    let cfg = tiny();
    let m = baseline_matrix(&cfg).unwrap();
    let csv = matrix_csv(&m);
    assert_eq!(csv.lines().next().unwrap(), "method,mae_mean,mae_std,delta_erm,delta_fedavg");
    let methods: Vec<&str> = m.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(
        methods,
        ["erm", "dann", "fedavg", "naive_feddann", "fedprox_adam", "fedprox_sgd", "feddapl_adam", "feddapl_sgd"]
    );
    assert_eq!(m.rows[0].delta_erm, Some(0.0));
    let erm = m.rows[0].mae_mean.unwrap();
    let fedavg = m.rows[2].mae_mean.unwrap();
    for r in &m.rows {
        let mean = r.mae_mean.unwrap();
        assert!(r.delta_erm.unwrap().signum() * (mean - erm).signum() >= 0.0);
        assert_eq!(r.delta_erm.unwrap(), mean - erm);
        if let Some(d) = r.delta_fedavg {
            assert_eq!(d, mean - fedavg);
        }
    }
    assert!(m.rows[..3].iter().all(|r| r.delta_fedavg.is_none()));
    assert!(m.rows[3..].iter().all(|r| r.delta_fedavg.is_some()));
    assert_eq!(matrix_csv(&baseline_matrix(&cfg).unwrap()), csv);
}

#[test]
fn suite_csv_is_byte_identical_on_rerun() {
    let cfg = tiny();
    assert_eq!(suite_csv(&run_suite(&cfg).unwrap()), suite_csv(&run_suite(&cfg).unwrap()));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_feddapl")).args(args).output().unwrap()
}

#[test]
fn cli_train_writes_the_output_layout() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    fs::write(&config, serde_json::to_vec(&tiny()).unwrap()).unwrap();
    let out = dir.path().join("out");
    let args = ["train", "--config", config.to_str().unwrap(), "--seeds", "0,1", "--out", out.to_str().unwrap()];
    let o = cli(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "feddapl_adam");
    assert!(out.join("seeds.csv").exists());
    for seed in [0, 1] {
        for round in 0..2 {
            assert!(out.join(format!("checkpoints/seed{seed}/round{round:03}.fdps")).exists());
        }
    }
    let first = fs::read(out.join("seeds.csv")).unwrap();
    assert!(cli(&args).status.success());
    assert_eq!(fs::read(out.join("seeds.csv")).unwrap(), first);

    let ck = out.join("checkpoints/seed0/round001.fdps");
    let eval_out = dir.path().join("eval");
    let o = cli(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--seeds",
        "1",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval: Value = serde_json::from_slice(&fs::read(eval_out.join("eval.json")).unwrap()).unwrap();
    let trained = report["per_seed"][0]["final_mae"].as_f64().unwrap();
    assert_eq!(eval["ood_mae"].as_f64().unwrap(), trained);
}

#[test]
fn cli_gen_data_writes_a_loadable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["gen-data", "--data-seed", "5", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let loaded = feddapl::data::load_csv(&dir.path().join("data.csv")).unwrap();
    let generated = feddapl::data::generate(&GenConfig::default(), 5).unwrap();
    assert_eq!(loaded.train, generated.train);
}

#[test]
fn cli_rejects_bad_input_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"seeds": []}"#).unwrap();
    let o = cli(&["train", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("config error"));
    let o = cli(&["train", "--algo", "fedsomething"]);
    assert!(!o.status.success());
    let o = cli(&["train", "--mu", "-1", "--seeds", "1", "--rounds", "1", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
}
