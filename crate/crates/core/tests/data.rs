//! Generator invariants, the tabular ingestion path and convergence on a
//! degenerate target.

use std::fs;

use feddapl::data::{
    generate, load_csv, load_csv_pair, shortcut_correlation, write_csv, DatasetSplit, GenConfig, SiteShard,
};
use feddapl::fed::{client_shares, partition_sites, run_federated, FedConfig, Hooks, TrainConfig};
use feddapl::harness::linear_probe_accuracy;
use feddapl::objective::{AlgoConfig, Algorithm};
use feddapl::tensor::Tensor;
use feddapl::Error;

#[test]
fn default_sites_are_identifiable_by_a_linear_probe() {
    let data = generate(&GenConfig::default(), 0).unwrap();
    let batch = data.pooled_train().unwrap();
    let acc =
        linear_probe_accuracy(&batch.features, batch.d_true.as_ref().unwrap(), data.n_train_sites(), 300).unwrap();
    assert!(acc > 0.9, "site probe accuracy {acc}");
}

#[test]
fn shortcut_is_present_on_training_sites_only() {
    let cfg = GenConfig::default();
    let mut train_rho = Vec::new();
    let mut ood_rho = Vec::new();
    for seed in 0..10 {
        let data = generate(&cfg, seed).unwrap();
        for shard in data.train.iter() {
            train_rho.push(shortcut_correlation(shard, &data.site_specs[shard.site_id], cfg.d_signal).unwrap());
        }
        for shard in data.ood.iter() {
            ood_rho.push(shortcut_correlation(shard, &data.site_specs[shard.site_id], cfg.d_signal).unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&train_rho).abs() > 0.3, "train correlation {}", mean(&train_rho));
    assert!(mean(&ood_rho).abs() < 0.05, "OOD correlation {}", mean(&ood_rho));
}

#[test]
fn dominant_client_holds_sixty_percent() {
    let cfg = GenConfig::default();
    for seed in 0..10 {
        let data = generate(&cfg, seed).unwrap();
        assert_eq!(data.train_samples(), 1587);
        assert_eq!(data.ood.iter().map(SiteShard::len).sum::<usize>(), 594);
        assert_eq!((data.train.len(), data.ood.len()), (15, 19));
        let counts: Vec<(usize, usize)> = data.train.iter().map(|s| (s.site_id, s.len())).collect();
        let assignment = partition_sites(&counts, 5, seed).unwrap();
        assert!(assignment.iter().all(|c| c.len() == 3));
        let shares = client_shares(&assignment, &data);
        let top = shares.iter().cloned().fold(0.0, f64::max);
        assert!((top - 0.6).abs() <= 0.02, "seed {seed}: dominant share {top}");
        assert!((shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn default_ages_stay_in_cohort_ranges() {
    let data = generate(&GenConfig::default(), 3).unwrap();
    assert!(data.train.iter().flat_map(|s| &s.ages).all(|a| (6.0..=64.0).contains(a)));
    assert!(data.ood.iter().flat_map(|s| &s.ages).all(|a| (6.0..=79.0).contains(a)));
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let data = generate(&GenConfig::default(), 9).unwrap();
    write_csv(&data, &path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back.train, data.train);
    assert_eq!(back.ood, data.ood);
    assert!(back.site_specs.is_empty());
}

fn split_file(dir: &std::path::Path, data: &DatasetSplit) -> (std::path::PathBuf, std::path::PathBuf) {
    let path = dir.join("all.csv");
    write_csv(data, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let (mut train, mut ood) = (vec![header.clone()], vec![header]);
    for l in lines {
        if l.split(',').nth(2) == Some("ood") {
            ood.push(l.to_string());
        } else {
            train.push(l.to_string());
        }
    }
    let (tp, op) = (dir.join("train.csv"), dir.join("ood.csv"));
    fs::write(&tp, train.join("\n") + "\n").unwrap();
    fs::write(&op, ood.join("\n") + "\n").unwrap();
    (tp, op)
}

#[test]
fn csv_pair_loads_and_rejects_shared_sites() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&GenConfig::default(), 4).unwrap();
    let (tp, op) = split_file(dir.path(), &data);
    let back = load_csv_pair(&tp, &op).unwrap();
    assert_eq!(back.train, data.train);
    assert_eq!(back.ood, data.ood);
    // loading the training file as the OOD file makes every site overlap
    assert!(matches!(load_csv_pair(&tp, &tp), Err(Error::Data(_))));
}

#[test]
fn malformed_csv_is_a_data_error_naming_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "id,site,split,y,f1\n0,0,train,30,1.0\n1,0,train,oops,2.0\n2,1,ood,40,3.0\n").unwrap();
    match load_csv(&path) {
        Err(Error::Data(msg)) => assert!(msg.contains("row"), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
    fs::write(&path, "id,split,y,f1\n0,train,30,1.0\n").unwrap();
    match load_csv(&path) {
        Err(Error::Data(msg)) => assert!(msg.contains("site"), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn empty_site_shard_is_rejected() {
    let mut data = generate(&GenConfig::default(), 1).unwrap();
    data.train[2] = SiteShard {
        site_id: data.train[2].site_id,
        features: Tensor::matrix(1, 16, vec![0.0; 16]).unwrap(),
        ages: vec![],
    };
    assert!(matches!(data.validate(), Err(Error::Data(_))));
}

#[test]
fn constant_labels_converge_to_the_label_mean_predictor() {
    // no site shift, so the only error left is the spread of OOD ages
    let cfg = GenConfig {
        train_samples: 300,
        ood_samples: 150,
        leak: 0.0,
        nuisance_bias_scale: 0.0,
        signal_bias_scale: 0.0,
        gain_log_sd: 0.0,
        ..GenConfig::default()
    };
    let mut data = generate(&cfg, 5).unwrap();
    let target = 30.0;
    for s in &mut data.train {
        s.ages.iter_mut().for_each(|a| *a = target);
    }
    let ood_ages: Vec<f64> = data.ood.iter().flat_map(|s| s.ages.clone()).collect();
    let oracle = ood_ages.iter().map(|a| (a - target).abs()).sum::<f64>() / ood_ages.len() as f64;
    let mut train = TrainConfig::default();
    train.model.disc_hidden = vec![16];
    let fed = FedConfig { rounds: 15, local_epochs: 5, ..FedConfig::default() };
    let run =
        run_federated(&train, &fed, &AlgoConfig::new(Algorithm::Fedavg, 0.0).unwrap(), &data, 5, 5, Hooks::default())
            .unwrap();
    let gap = (run.final_mae - oracle).abs();
    let first = (run.rounds[0].ood_mae - oracle).abs();
    assert!(gap < 0.05 * oracle, "MAE {} vs label-mean error {oracle}", run.final_mae);
    assert!(gap < 0.5 * first, "gap {gap}, after the first round {first}");
}
