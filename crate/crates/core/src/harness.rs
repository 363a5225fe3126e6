//! Experiment runner: multi-seed suites, μ sweeps, the baseline matrix and
//! report emission.
//!
//! Every report embeds the resolved configuration and its SHA-256 hash, so any
//! number can be traced back to `(config hash, seed)`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate, load_csv, load_csv_pair, DatasetSplit, GenConfig};
use crate::error::{Error, Result};
use crate::fed::{
    derive_seed, run_centralized, run_federated, FedConfig, Hooks, RoundCallback, RoundReport, TrainConfig,
};
use crate::nn::{Group, ParamEntry, ParamSet};
use crate::objective::{loss_d, AlgoConfig, Algorithm, LossBreakdown};
use crate::optim::{adam_step, AdamHyper, OptState, OptimizerKind};
use crate::tensor::{Tape, Tensor};

/// Report layout version; bump when the JSON shape changes.
pub const SCHEMA_VERSION: u32 = 1;

const STREAM_DATA: u64 = 4;

/// The proximal weights swept by [`mu_sweep`].
pub const DEFAULT_MUS: [f64; 5] = [0.0, 10.0, 20.0, 40.0, 100.0];

/// A pre-extracted tabular dataset used instead of the generator: either one
/// file with a `split` column, or a training file plus a separate OOD file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default)]
    pub ood: Option<PathBuf>,
}

impl CsvSource {
    pub fn load(&self) -> Result<DatasetSplit> {
        match &self.ood {
            Some(ood) => load_csv_pair(&self.path, ood),
            None => load_csv(&self.path),
        }
    }
}

/// Everything needed to reproduce an experiment. Missing JSON fields take
/// their defaults, which form the reference synthetic configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub mu: f64,
    pub seeds: Vec<u64>,
    /// Fixed generator seed for every run. When absent each training seed
    /// gets its own dataset and site partition.
    pub data_seed: Option<u64>,
    pub csv: Option<CsvSource>,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub fed: FedConfig,
    /// Proximal weights of the FedProx and FedDAPL rows of the baseline matrix.
    pub matrix_fedprox_mu: f64,
    pub matrix_feddapl_mu: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Feddapl,
            mu: 40.0,
            seeds: (0..10).collect(),
            data_seed: None,
            csv: None,
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            fed: FedConfig::default(),
            matrix_fedprox_mu: 20.0,
            matrix_feddapl_mu: 40.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        self.algo()?;
        self.train.validate()?;
        self.fed.validate()?;
        if self.csv.is_none() {
            self.gen.validate()?;
        }
        Ok(())
    }

    pub fn algo(&self) -> Result<AlgoConfig> {
        AlgoConfig::new(self.algorithm, self.mu)
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config is always serializable");
        hex::encode(Sha256::digest(bytes))
    }

    /// Generator seed used for training seed `seed`. The site partition uses
    /// the same value.
    pub fn data_seed_for(&self, seed: u64) -> u64 {
        self.data_seed.unwrap_or_else(|| derive_seed(seed, &[STREAM_DATA]))
    }

    pub fn dataset(&self, seed: u64) -> Result<DatasetSplit> {
        match &self.csv {
            Some(src) => src.load(),
            None => generate(&self.gen, self.data_seed_for(seed)),
        }
    }

    fn with_method(&self, algorithm: Algorithm, mu: f64, optimizer: OptimizerKind) -> Self {
        let mut cfg = self.clone();
        cfg.algorithm = algorithm;
        cfg.mu = if algorithm.default_scope() == crate::objective::ProxScope::None { 0.0 } else { mu };
        cfg.train.optim.kind = optimizer;
        cfg
    }
}

/// One point of a training curve: a federated round or a centralized
/// validation epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lambda: f64,
    pub lr_predictor: f64,
    pub losses: LossBreakdown,
    pub ood_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub data_seed: Option<u64>,
    /// `None` when the run failed; `error` then says why.
    pub final_mae: Option<f64>,
    pub error: Option<String>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub method: String,
    pub algorithm: Algorithm,
    pub mu: f64,
    pub optimizer: OptimizerKind,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedResult>,
    /// Statistics over the seeds that finished.
    pub mae_mean: Option<f64>,
    pub mae_std: Option<f64>,
    /// Set when only one seed finished, in which case `mae_std` is 0.
    pub single_seed: bool,
    pub diverged: usize,
}

impl ExperimentReport {
    pub fn maes(&self) -> Vec<f64> {
        self.per_seed.iter().filter_map(|s| s.final_mae).collect()
    }
}

/// Mean and sample standard deviation. The deviation of a single value is 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// Row label used in tables, e.g. `feddapl_adam`.
pub fn method_label(algorithm: Algorithm, optimizer: OptimizerKind) -> String {
    match algorithm {
        Algorithm::Fedprox | Algorithm::Feddapl => format!("{}_{}", algorithm.name(), optimizer),
        _ => algorithm.name().to_string(),
    }
}

fn round_point(r: &RoundReport) -> CurvePoint {
    CurvePoint {
        step: r.round,
        lambda: r.lambda_last,
        lr_predictor: r.lr_predictor,
        losses: LossBreakdown::mean(&r.client_losses),
        ood_mae: r.ood_mae,
    }
}

/// Runs one training seed. `on_round` receives every round of a federated run.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    on_round: Option<RoundCallback<'_>>,
) -> Result<(f64, Vec<CurvePoint>)> {
    let algo = cfg.algo()?;
    let data = cfg.dataset(seed)?;
    if algo.algorithm.is_federated() {
        let hooks = Hooks { uplink: None, on_round };
        let run = run_federated(&cfg.train, &cfg.fed, &algo, &data, cfg.data_seed_for(seed), seed, hooks)?;
        Ok((run.final_mae, run.rounds.iter().map(round_point).collect()))
    } else {
        let run = run_centralized(&cfg.train, &algo, &data, seed)?;
        let curve = run
            .validations
            .iter()
            .map(|v| CurvePoint {
                step: v.epoch,
                lambda: v.lambda,
                lr_predictor: v.lr_predictor,
                losses: v.train_losses,
                ood_mae: v.ood_mae,
            })
            .collect();
        Ok((run.final_mae, curve))
    }
}

fn summarize(cfg: &ExperimentConfig, per_seed: Vec<SeedResult>) -> ExperimentReport {
    let maes: Vec<f64> = per_seed.iter().filter_map(|s| s.final_mae).collect();
    let stats = mean_std(&maes);
    ExperimentReport {
        schema_version: SCHEMA_VERSION,
        method: method_label(cfg.algorithm, cfg.train.optim.kind),
        algorithm: cfg.algorithm,
        mu: cfg.mu,
        optimizer: cfg.train.optim.kind,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        diverged: per_seed.len() - maes.len(),
        per_seed,
        mae_mean: stats.map(|s| s.0),
        mae_std: stats.map(|s| s.1),
        single_seed: maes.len() == 1,
    }
}

fn seed_result(cfg: &ExperimentConfig, seed: u64, outcome: Result<(f64, Vec<CurvePoint>)>) -> Result<SeedResult> {
    let data_seed = cfg.csv.is_none().then(|| cfg.data_seed_for(seed));
    match outcome {
        Ok((mae, curve)) => Ok(SeedResult { seed, data_seed, final_mae: Some(mae), error: None, curve }),
        Err(e @ Error::Diverged { .. }) => {
            Ok(SeedResult { seed, data_seed, final_mae: None, error: Some(e.to_string()), curve: Vec::new() })
        }
        Err(e) => Err(e),
    }
}

/// Runs every seed of `cfg` in parallel. Diverged seeds stay in the report
/// with their error; configuration and I/O errors abort.
pub fn run_suite(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| seed_result(cfg, seed, run_seed(cfg, seed, None)))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(cfg, per_seed))
}

/// Like [`run_suite`] but sequential, writing a parameter checkpoint per
/// round and a JSON round log per seed under `dir`.
pub fn run_suite_with_checkpoints(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let seed_dir = dir.join(format!("seed{seed}"));
        fs::create_dir_all(&seed_dir)?;
        let mut log: Vec<RoundReport> = Vec::new();
        let mut save = |r: &RoundReport, p: &ParamSet| -> Result<()> {
            fs::write(seed_dir.join(format!("round{:03}.fdps", r.round)), p.to_bytes())?;
            log.push(r.clone());
            Ok(())
        };
        let outcome = run_seed(cfg, seed, Some(&mut save));
        fs::write(seed_dir.join("rounds.json"), serde_json::to_vec_pretty(&log)?)?;
        per_seed.push(seed_result(cfg, seed, outcome)?);
    }
    Ok(summarize(cfg, per_seed))
}

/// One row of the baseline table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub method: String,
    pub mae_mean: Option<f64>,
    pub mae_std: Option<f64>,
    pub delta_erm: Option<f64>,
    pub delta_fedavg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub rows: Vec<MatrixRow>,
    pub runs: Vec<ExperimentReport>,
}

/// The methods of the baseline table, in row order.
pub fn matrix_methods(cfg: &ExperimentConfig) -> Vec<(Algorithm, f64, OptimizerKind)> {
    use Algorithm::*;
    use OptimizerKind::*;
    vec![
        (Erm, 0.0, Adam),
        (Dann, 0.0, Adam),
        (Fedavg, 0.0, Adam),
        (NaiveFeddann, 0.0, Adam),
        (Fedprox, cfg.matrix_fedprox_mu, Adam),
        (Fedprox, cfg.matrix_fedprox_mu, Sgd),
        (Feddapl, cfg.matrix_feddapl_mu, Adam),
        (Feddapl, cfg.matrix_feddapl_mu, Sgd),
    ]
}

/// Runs every baseline over `cfg.seeds` and tabulates mean, std and the
/// differences to ERM and FedAvg.
pub fn baseline_matrix(cfg: &ExperimentConfig) -> Result<MatrixReport> {
    let runs = matrix_methods(cfg)
        .into_iter()
        .map(|(a, mu, opt)| run_suite(&cfg.with_method(a, mu, opt)))
        .collect::<Result<Vec<_>>>()?;
    let find = |a: Algorithm| runs.iter().find(|r| r.algorithm == a).and_then(|r| r.mae_mean);
    let (erm, fedavg) = (find(Algorithm::Erm), find(Algorithm::Fedavg));
    let rows = runs
        .iter()
        .map(|r| MatrixRow {
            method: r.method.clone(),
            mae_mean: r.mae_mean,
            mae_std: r.mae_std,
            delta_erm: r.mae_mean.zip(erm).map(|(m, e)| m - e),
            delta_fedavg: match r.algorithm {
                Algorithm::Erm | Algorithm::Dann | Algorithm::Fedavg => None,
                _ => r.mae_mean.zip(fedavg).map(|(m, f)| m - f),
            },
        })
        .collect();
    Ok(MatrixReport { schema_version: SCHEMA_VERSION, config_hash: cfg.hash(), rows, runs })
}

/// One row of the μ table: a method and its mean MAE at every μ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub mae_mean: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub mus: Vec<f64>,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<ExperimentReport>,
}

/// FedProx and FedDAPL under Adam and SGD at every μ in `mus`.
pub fn mu_sweep(cfg: &ExperimentConfig, mus: &[f64]) -> Result<SweepReport> {
    if mus.is_empty() {
        return Err(Error::config("mu sweep needs at least one value"));
    }
    let methods = [
        (Algorithm::Fedprox, OptimizerKind::Adam),
        (Algorithm::Fedprox, OptimizerKind::Sgd),
        (Algorithm::Feddapl, OptimizerKind::Adam),
        (Algorithm::Feddapl, OptimizerKind::Sgd),
    ];
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (a, opt) in methods {
        let mut means = Vec::new();
        for &mu in mus {
            let report = run_suite(&cfg.with_method(a, mu, opt))?;
            means.push(report.mae_mean);
            runs.push(report);
        }
        rows.push(SweepRow { method: method_label(a, opt), mae_mean: means });
    }
    Ok(SweepReport { schema_version: SCHEMA_VERSION, config_hash: cfg.hash(), mus: mus.to_vec(), rows, runs })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn signed(v: Option<f64>) -> String {
    v.map(|x| format!("{x:+.4}")).unwrap_or_default()
}

/// `method,mae_mean,mae_std,delta_erm,delta_fedavg`.
pub fn matrix_csv(report: &MatrixReport) -> String {
    let mut out = String::from("method,mae_mean,mae_std,delta_erm,delta_fedavg\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.method,
            cell(r.mae_mean),
            cell(r.mae_std),
            signed(r.delta_erm),
            signed(r.delta_fedavg)
        );
    }
    out
}

/// `method,mu_0,mu_10,...`.
pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from("method");
    for mu in &report.mus {
        let _ = write!(out, ",mu_{mu}");
    }
    out.push('\n');
    for r in &report.rows {
        out.push_str(&r.method);
        for v in &r.mae_mean {
            let _ = write!(out, ",{}", cell(*v));
        }
        out.push('\n');
    }
    out
}

/// `seed,final_mae,error` for a single suite.
pub fn suite_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("seed,final_mae,error\n");
    for s in &report.per_seed {
        let err = s.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(out, "{},{},{}", s.seed, cell(s.final_mae), err);
    }
    out
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Training accuracy of a multinomial logistic probe fit to `(x, labels)` by
/// full-batch Adam. Inputs are standardized per column first.
pub fn linear_probe_accuracy(x: &Tensor, labels: &[usize], n_classes: usize, steps: usize) -> Result<f64> {
    let (n, d) = x.dims2()?;
    if labels.len() != n || n == 0 {
        return Err(Error::dim(format!("{} labels for {n} rows", labels.len())));
    }
    let mut z = x.clone();
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| x.data()[i * d + j]).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
        for i in 0..n {
            z.data_mut()[i * d + j] = (col[i] - m) / sd;
        }
    }
    let entry = |name: &str, t: Tensor| ParamEntry { name: name.into(), group: Group::Discriminator, tensor: t };
    let mut params = ParamSet::from_entries(vec![
        entry("probe.weight", Tensor::zeros(vec![d, n_classes])),
        entry("probe.bias", Tensor::zeros(vec![n_classes])),
    ])?;
    let mut state = OptState::new(&params, 0.05, 0.05);
    let mut logits = Tensor::zeros(vec![n, n_classes]);
    for step in 0..=steps {
        let mut tape = Tape::new();
        let xv = tape.constant(z.clone());
        let w = tape.param(params.entries()[0].tensor.clone());
        let b = tape.param(params.entries()[1].tensor.clone());
        let h = tape.matmul(xv, w)?;
        let out = tape.add_bias(h, b)?;
        if step == steps {
            logits = tape.value(out).clone();
            break;
        }
        let loss = loss_d(&mut tape, out, labels, 0.0)?;
        tape.backward(loss)?;
        let mut grads = params.zeros_like();
        for (g, v) in grads.entries_mut().iter_mut().zip([w, b]) {
            g.tensor.data_mut().copy_from_slice(tape.grad(v).expect("trainable").data());
        }
        adam_step(&mut params, &grads, &mut state, AdamHyper::default())?;
    }
    let hits = (0..n)
        .filter(|&i| {
            let row = logits.row(i).expect("in range");
            let best = (0..n_classes).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("classes");
            best == labels[i]
        })
        .count();
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_hand_values() {
        assert_eq!(mean_std(&[]), None);
        assert_eq!(mean_std(&[3.0]), Some((3.0, 0.0)));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn labels_name_the_optimizer_only_where_it_varies() {
        assert_eq!(method_label(Algorithm::Erm, OptimizerKind::Adam), "erm");
        assert_eq!(method_label(Algorithm::Feddapl, OptimizerKind::Sgd), "feddapl_sgd");
    }

    #[test]
    fn config_defaults_round_trip_and_hash_is_stable() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let again: ExperimentConfig = serde_json::from_slice(&serde_json::to_vec(&cfg).unwrap()).unwrap();
        assert_eq!(cfg.hash(), again.hash());
        let other = ExperimentConfig { mu: 10.0, ..cfg.clone() };
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"seeds": []}"#).is_err());
    }

    #[test]
    fn sweep_csv_has_one_column_per_mu() {
        let report = SweepReport {
            schema_version: SCHEMA_VERSION,
            config_hash: String::new(),
            mus: vec![0.0, 40.0],
            rows: vec![SweepRow { method: "feddapl_adam".into(), mae_mean: vec![Some(5.0), None] }],
            runs: Vec::new(),
        };
        assert_eq!(sweep_csv(&report), "method,mu_0,mu_40\nfeddapl_adam,5.0000,\n");
    }
}
