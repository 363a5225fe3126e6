//! Adam and SGD+momentum with separate learning rates for the predictor
//! (feature extractor and regressor) and the discriminator, global-norm
//! clipping, and plateau-triggered learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Group, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::config(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipScope {
    DiscriminatorOnly,
    AllGroups,
}

impl ClipScope {
    pub fn covers(self, group: Group) -> bool {
        match self {
            ClipScope::DiscriminatorOnly => group == Group::Discriminator,
            ClipScope::AllGroups => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    /// Feature extractor and regressor rate for the non-adversarial models.
    pub lr_erm: f64,
    /// Feature extractor and regressor rate when a discriminator is trained.
    pub lr_adversarial: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub clip_scope: ClipScope,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr_erm: 8e-4,
            lr_adversarial: 8.5e-4,
            lr_disc: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            clip_norm: 10.0,
            clip_scope: ClipScope::DiscriminatorOnly,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_erm, self.lr_adversarial, self.lr_disc];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::config("learning rates must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("adam needs beta1, beta2 in [0,1) and eps > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0,1)"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be > 0"));
        }
        Ok(())
    }
}

/// Rescales the gradients of the selected groups so their joint L2 norm is
/// at most `max_norm`. Returns the norm observed before clipping.
pub fn clip_global_norm(grads: &mut ParamSet, select: impl Fn(Group) -> bool, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::config("max_norm must be > 0"));
    }
    let norm = grads.entries().iter().filter(|e| select(e.group)).map(|e| e.tensor.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for e in grads.entries_mut().iter_mut().filter(|e| select(e.group)) {
            e.tensor.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }
    Ok(norm)
}

/// Moment buffers, step counter and current per-group learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub step: u64,
    pub lr_predictor: f64,
    pub lr_disc: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(params: &ParamSet, lr_predictor: f64, lr_disc: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        Self { step: 0, lr_predictor, lr_disc, first: zeros.clone(), second: zeros }
    }

    pub fn lr_for(&self, group: Group) -> f64 {
        match group {
            Group::Discriminator => self.lr_disc,
            _ => self.lr_predictor,
        }
    }

    /// SGD velocity buffers share storage with Adam's first moment.
    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.first
    }

    fn check(&self, params: &ParamSet, grads: &ParamSet) -> Result<()> {
        if !params.same_architecture(grads)
            || self.first.len() != params.len()
            || self.first.iter().zip(params.entries()).any(|(b, e)| b.len() != e.tensor.numel())
        {
            return Err(Error::config("optimizer state does not match parameter shapes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut OptState, hp: AdamHyper) -> Result<()> {
    state.check(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, (p, g)) in params.entries_mut().iter_mut().zip(grads.entries()).enumerate() {
        let lr = state.lr_for(p.group);
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for (((w, gi), mi), vi) in
            p.tensor.data_mut().iter_mut().zip(g.tensor.data()).zip(m.iter_mut()).zip(v.iter_mut())
        {
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// `velocity = momentum·velocity + grad; param −= lr·velocity`.
pub fn sgd_momentum_step(params: &mut ParamSet, grads: &ParamSet, state: &mut OptState, momentum: f64) -> Result<()> {
    state.check(params, grads)?;
    state.step += 1;
    for (i, (p, g)) in params.entries_mut().iter_mut().zip(grads.entries()).enumerate() {
        let lr = state.lr_for(p.group);
        for ((w, gi), vel) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()).zip(state.first[i].iter_mut()) {
            *vel = momentum * *vel + gi;
            *w -= lr * *vel;
        }
    }
    Ok(())
}

/// Clips per the config, then applies one update of the configured kind.
pub fn apply_update(cfg: &OptimConfig, params: &mut ParamSet, mut grads: ParamSet, state: &mut OptState) -> Result<()> {
    clip_global_norm(&mut grads, |g| cfg.clip_scope.covers(g), cfg.clip_norm)?;
    match cfg.kind {
        OptimizerKind::Adam => {
            adam_step(params, &grads, state, AdamHyper { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps })
        }
        OptimizerKind::Sgd => sgd_momentum_step(params, &grads, state, cfg.momentum),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { factor: 0.5, patience: 3, threshold: 1e-4, min_lr: 1e-6 }
    }
}

/// Minimising plateau detector driving the predictor learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub cfg: PlateauConfig,
    pub lr: f64,
    pub best: f64,
    pub bad_calls: usize,
}

impl PlateauState {
    pub fn new(cfg: PlateauConfig, lr: f64) -> Self {
        Self { cfg, lr: lr.max(cfg.min_lr), best: f64::INFINITY, bad_calls: 0 }
    }

    /// Records a validation metric and returns the (possibly decayed) rate.
    pub fn update(&mut self, metric: f64) -> Result<f64> {
        plateau_update(self, metric)
    }
}

pub fn plateau_update(state: &mut PlateauState, metric: f64) -> Result<f64> {
    if !metric.is_finite() {
        return Err(Error::Diverged { round: 0, client: 0, detail: format!("validation metric is {metric}") });
    }
    if metric < state.best - state.cfg.threshold {
        state.best = metric;
        state.bad_calls = 0;
    } else {
        state.bad_calls += 1;
        if state.bad_calls >= state.cfg.patience {
            state.lr = (state.lr * state.cfg.factor).max(state.cfg.min_lr);
            state.bad_calls = 0;
        }
    }
    Ok(state.lr)
}
