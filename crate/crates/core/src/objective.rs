//! Loss terms of the local client objective and the reversal-strength
//! schedule.
//!
//! The client loss is `L = L_y + L_d + L_prox`: mean squared age error, a
//! label-smoothed site cross-entropy, and `(mu/2)·‖θ_local − θ_global‖²` over
//! whichever parameter groups the proximal scope selects. `L_d` carries no
//! weight of its own; adversarial strength lives in the reversal layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Group, Network, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.06;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_y: f64,
    pub l_d: f64,
    pub l_prox: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Componentwise mean of a non-empty slice of breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            l_y: sum(|b| b.l_y),
            l_d: sum(|b| b.l_d),
            l_prox: sum(|b| b.l_prox),
            l_total: sum(|b| b.l_total),
        }
    }

    pub fn is_additive(&self) -> bool {
        self.l_total == (self.l_y + self.l_d) + self.l_prox
    }
}

/// `scale · (2 / (1 + exp(−steepness · p)) − 1)` with `p = epoch / horizon`,
/// held at zero during the warm-up epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrlSchedule {
    pub scale: f64,
    pub steepness: f64,
    pub horizon_epochs: usize,
    pub warmup_epochs: usize,
}

impl Default for GrlSchedule {
    fn default() -> Self {
        Self { scale: 8.5, steepness: 7.0, horizon_epochs: 75, warmup_epochs: 10 }
    }
}

impl GrlSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0) || !(self.steepness >= 0.0) || self.horizon_epochs == 0 {
            return Err(Error::config("schedule needs scale >= 0, steepness >= 0 and horizon >= 1"));
        }
        Ok(())
    }

    pub fn lambda(&self, epoch: usize) -> f64 {
        grl_lambda(self, epoch)
    }
}

pub fn grl_lambda(sched: &GrlSchedule, epoch: usize) -> f64 {
    if epoch < sched.warmup_epochs {
        return 0.0;
    }
    let p = epoch as f64 / sched.horizon_epochs as f64;
    sched.scale * (2.0 / (1.0 + (-sched.steepness * p).exp()) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Erm,
    Dann,
    Fedavg,
    Fedprox,
    NaiveFeddann,
    Feddapl,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Erm,
        Algorithm::Dann,
        Algorithm::Fedavg,
        Algorithm::Fedprox,
        Algorithm::NaiveFeddann,
        Algorithm::Feddapl,
    ];

    /// Whether the model carries a site discriminator behind a reversal layer.
    pub fn is_adversarial(self) -> bool {
        !matches!(self, Algorithm::Erm | Algorithm::Fedavg)
    }

    pub fn is_federated(self) -> bool {
        !matches!(self, Algorithm::Erm | Algorithm::Dann)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Erm => "erm",
            Algorithm::Dann => "dann",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Fedprox => "fedprox",
            Algorithm::NaiveFeddann => "naive_feddann",
            Algorithm::Feddapl => "feddapl",
        }
    }

    pub fn default_scope(self) -> ProxScope {
        match self {
            Algorithm::Feddapl => ProxScope::DiscriminatorOnly,
            Algorithm::Fedprox => ProxScope::AllParameters,
            _ => ProxScope::None,
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::config(format!("unknown algorithm '{s}'")))
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxScope {
    DiscriminatorOnly,
    AllParameters,
    None,
}

impl ProxScope {
    pub fn covers(self, group: Group) -> bool {
        match self {
            ProxScope::DiscriminatorOnly => group == Group::Discriminator,
            ProxScope::AllParameters => true,
            ProxScope::None => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    pub mu: f64,
    pub prox_scope: ProxScope,
}

impl AlgoConfig {
    pub fn new(algorithm: Algorithm, mu: f64) -> Result<Self> {
        let mu = if algorithm.default_scope() == ProxScope::None { 0.0 } else { mu };
        let cfg = Self { algorithm, mu, prox_scope: algorithm.default_scope() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::config(format!("mu must be finite and >= 0, got {}", self.mu)));
        }
        let ok = match self.algorithm {
            Algorithm::Feddapl => self.prox_scope == ProxScope::DiscriminatorOnly,
            Algorithm::Fedprox => self.prox_scope == ProxScope::AllParameters,
            _ => self.prox_scope == ProxScope::None || self.mu == 0.0,
        };
        if !ok {
            return Err(Error::config(format!(
                "{} is incompatible with proximal scope {:?} at mu={}",
                self.algorithm, self.prox_scope, self.mu
            )));
        }
        Ok(())
    }
}

/// Mean squared error over the batch.
pub fn loss_y(tape: &mut Tape, y_pred: Var, y_true: Var) -> Result<Var> {
    if tape.value(y_pred).numel() == 0 {
        return Err(Error::usage("empty batch"));
    }
    let diff = tape.sub(y_pred, y_true)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Label-smoothed cross-entropy, averaged over the batch. The target row is
/// `(1 − smoothing)·onehot + smoothing / C`.
pub fn loss_d(tape: &mut Tape, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let (rows, classes) = tape.value(logits).dims2()?;
    if labels.len() != rows {
        return Err(Error::dim(format!("{} labels for {rows} logit rows", labels.len())));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::config(format!("label smoothing must be in [0,1), got {smoothing}")));
    }
    let off = smoothing / classes as f64;
    let mut target = vec![off; rows * classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::data(format!("site label {label} out of range for {classes} classes (row {i})")));
        }
        target[i * classes + label] += 1.0 - smoothing;
    }
    let target = tape.constant(Tensor::matrix(rows, classes, target)?);
    let logp = tape.log_softmax(logits)?;
    let weighted = tape.mul(target, logp)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / rows as f64))
}

/// `(mu/2)·Σ‖θ_local − θ_global‖²` over the groups in `scope`. The global
/// reference enters as a constant. Returns a constant zero node when nothing
/// is in scope or `mu` is zero.
pub fn loss_prox(
    tape: &mut Tape,
    net: &Network<'_>,
    local: &ParamSet,
    global_ref: &ParamSet,
    mu: f64,
    scope: ProxScope,
) -> Result<Var> {
    if !(mu >= 0.0) {
        return Err(Error::config(format!("mu must be >= 0, got {mu}")));
    }
    local.check_same_architecture(global_ref)?;
    if net.vars().len() != local.len() {
        return Err(Error::config("bound network does not match parameter set"));
    }
    let mut acc: Option<Var> = None;
    if mu > 0.0 {
        for ((entry, global), &var) in local.entries().iter().zip(global_ref.entries()).zip(net.vars()) {
            if !scope.covers(entry.group) {
                continue;
            }
            let anchor = tape.constant(global.tensor.clone());
            let diff = tape.sub(var, anchor)?;
            let sq = tape.sum_sq(diff);
            acc = Some(match acc {
                Some(a) => tape.add(a, sq)?,
                None => sq,
            });
        }
    }
    Ok(match acc {
        Some(a) => tape.scale(a, mu / 2.0),
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

/// Sums the components in the fixed order `(l_y + l_d) + l_prox` and records
/// the breakdown. Missing components count as zero.
pub fn total_local_loss(
    tape: &mut Tape,
    l_y: Var,
    l_d: Option<Var>,
    l_prox: Option<Var>,
) -> Result<(Var, LossBreakdown)> {
    let zero = || Tensor::scalar(0.0);
    let l_d = match l_d {
        Some(v) => v,
        None => tape.constant(zero()),
    };
    let l_prox = match l_prox {
        Some(v) => v,
        None => tape.constant(zero()),
    };
    let partial = tape.add(l_y, l_d)?;
    let total = tape.add(partial, l_prox)?;
    let breakdown = LossBreakdown {
        l_y: tape.value(l_y).item()?,
        l_d: tape.value(l_d).item()?,
        l_prox: tape.value(l_prox).item()?,
        l_total: tape.value(total).item()?,
    };
    Ok((total, breakdown))
}
