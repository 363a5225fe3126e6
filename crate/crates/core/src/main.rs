use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use feddapl::data::write_csv;
use feddapl::fed::evaluate_mae;
use feddapl::harness::{
    baseline_matrix, matrix_csv, mu_sweep, run_suite_with_checkpoints, suite_csv, sweep_csv, write_json,
    ExperimentConfig, DEFAULT_MUS,
};
use feddapl::nn::ParamSet;
use feddapl::objective::Algorithm;
use feddapl::optim::OptimizerKind;
use feddapl::{Error, Result};

/// Federated domain-adversarial training simulator.
#[derive(Parser)]
#[command(name = "feddapl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method over the configured seeds, with per-round checkpoints.
    Train(Common),
    /// Sweep the proximal weight for FedProx and FedDAPL.
    SweepMu {
        #[command(flatten)]
        common: Common,
        /// Comma-separated proximal weights.
        #[arg(long, value_delimiter = ',')]
        mus: Option<Vec<f64>>,
    },
    /// Run every baseline and tabulate the differences to ERM and FedAvg.
    Matrix(Common),
    /// Write the synthetic dataset of one seed as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Generator seed; defaults to the one used for the first training seed.
        #[arg(long)]
        data_seed: Option<u64>,
    },
    /// OOD MAE of a saved parameter checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algo: Option<Algorithm>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    /// Seeds as a list (`0,3,7`), a range (`0..10`) or a count (`10`).
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::usage(format!("cannot parse seeds '{text}'"));
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        return Ok((a..b).collect());
    }
    if text.contains(',') {
        return text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect();
    }
    let n: u64 = text.trim().parse().map_err(|_| bad())?;
    Ok((0..n).collect())
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(a) = self.algo {
            cfg.algorithm = a;
            if a.default_scope() == feddapl::objective::ProxScope::None {
                cfg.mu = 0.0;
            }
        }
        if let Some(mu) = self.mu {
            cfg.mu = mu;
        }
        if let Some(o) = self.optimizer {
            cfg.train.optim.kind = o;
        }
        if let Some(r) = self.rounds {
            cfg.fed.rounds = r;
        }
        if let Some(e) = self.local_epochs {
            cfg.fed.local_epochs = e;
        }
        if let Some(k) = self.clients {
            cfg.fed.clients = k;
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: &'a Path,
    config_hash: String,
    seed: u64,
    ood_mae: f64,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            fs::create_dir_all(&common.out)?;
            let report = run_suite_with_checkpoints(&cfg, &common.out.join("checkpoints"))?;
            write_json(&report, &common.out.join("report.json"))?;
            fs::write(common.out.join("seeds.csv"), suite_csv(&report))?;
            match (report.mae_mean, report.mae_std) {
                (Some(m), Some(s)) => {
                    println!("{} OOD MAE {m:.3} ± {s:.3} over {} seeds", report.method, report.maes().len())
                }
                _ => println!("{}: every seed diverged", report.method),
            }
            if report.diverged > 0 {
                return Err(Error::Diverged {
                    round: 0,
                    client: 0,
                    detail: format!("{} of {} seeds diverged; see report.json", report.diverged, cfg.seeds.len()),
                });
            }
        }
        Command::SweepMu { common, mus } => {
            let cfg = common.resolve()?;
            fs::create_dir_all(&common.out)?;
            let mus = mus.unwrap_or_else(|| DEFAULT_MUS.to_vec());
            let report = mu_sweep(&cfg, &mus)?;
            write_json(&report, &common.out.join("report.json"))?;
            let table = sweep_csv(&report);
            fs::write(common.out.join("sweep.csv"), &table)?;
            print!("{table}");
        }
        Command::Matrix(common) => {
            let cfg = common.resolve()?;
            fs::create_dir_all(&common.out)?;
            let report = baseline_matrix(&cfg)?;
            write_json(&report, &common.out.join("report.json"))?;
            let table = matrix_csv(&report);
            fs::write(common.out.join("matrix.csv"), &table)?;
            print!("{table}");
        }
        Command::GenData { common, data_seed } => {
            let mut cfg = common.resolve()?;
            if data_seed.is_some() {
                cfg.data_seed = data_seed;
            }
            fs::create_dir_all(&common.out)?;
            let data = cfg.dataset(cfg.seeds[0])?;
            let path = common.out.join("data.csv");
            write_csv(&data, &path)?;
            println!(
                "wrote {} training and {} OOD rows to {}",
                data.train_samples(),
                data.ood_batch()?.len(),
                path.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let params = ParamSet::from_bytes(&fs::read(&checkpoint)?)?;
            let seed = cfg.seeds[0];
            let data = cfg.dataset(seed)?;
            let spec = cfg.train.model_for(&data);
            let mae = evaluate_mae(&spec, &params, &data.ood_batch()?)?;
            println!("OOD MAE {mae:.4}");
            fs::create_dir_all(&common.out)?;
            let report = EvalReport { checkpoint: &checkpoint, config_hash: cfg.hash(), seed, ood_mae: mae };
            write_json(&report, &common.out.join("eval.json"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
