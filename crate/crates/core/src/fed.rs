//! Federated and centralized training loops.
//!
//! A federated round broadcasts the global [`ParamSet`], lets every client run
//! `E` local epochs on its own shard, ships each update through a serialized
//! uplink, and averages the decoded updates in ascending client-id order. The
//! proximal anchor used by every local step is the snapshot broadcast at the
//! start of the round.
//!
//! All randomness is derived from `(experiment seed, purpose, client, epoch)`
//! so runs are bitwise reproducible whether clients train sequentially or in
//! parallel.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mae, Batch, DatasetSplit};
use crate::error::{Error, Result};
use crate::nn::{init_params, predict_age, Group, ModelSpec, Network, ParamSet};
use crate::objective::{
    loss_d, loss_prox, loss_y, total_local_loss, AlgoConfig, Algorithm, GrlSchedule, LossBreakdown, ProxScope,
    DEFAULT_LABEL_SMOOTHING,
};
use crate::optim::{apply_update, OptState, OptimConfig, PlateauConfig, PlateauState};
use crate::tensor::Tape;

const STREAM_INIT: u64 = 1;
const STREAM_PARTITION: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a base seed with a sequence of stream keys.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(base), |acc, k| splitmix(acc ^ splitmix(*k)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    BySampleCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub weighting: Weighting,
    /// Fresh optimizer moments at the start of every round.
    pub reset_optimizer_each_round: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: 5,
            rounds: 15,
            local_epochs: 5,
            weighting: Weighting::BySampleCount,
            reset_optimizer_each_round: true,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.rounds == 0 {
            return Err(Error::config("clients and rounds must be >= 1"));
        }
        Ok(())
    }
}

/// Settings shared by the federated and centralized loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub optim: OptimConfig,
    pub plateau: PlateauConfig,
    pub schedule: GrlSchedule,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub centralized_epochs: usize,
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            optim: OptimConfig::default(),
            plateau: PlateauConfig::default(),
            schedule: GrlSchedule::default(),
            label_smoothing: DEFAULT_LABEL_SMOOTHING,
            batch_size: 32,
            centralized_epochs: 75,
            validate_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::config("batch_size and validate_every must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing must be in [0,1)"));
        }
        Ok(())
    }

    /// Model spec with input width and site count taken from the data.
    pub fn model_for(&self, data: &DatasetSplit) -> ModelSpec {
        ModelSpec { input_dim: data.input_dim(), n_sites: data.n_train_sites().max(2), ..self.model.clone() }
    }

    fn predictor_lr(&self, algo: &AlgoConfig) -> f64 {
        if algo.algorithm.is_adversarial() {
            self.optim.lr_adversarial
        } else {
            self.optim.lr_erm
        }
    }
}

/// Initial parameters for `algo`; non-adversarial models drop the
/// discriminator group.
pub fn initial_params(spec: &ModelSpec, algo: &AlgoConfig, seed: u64) -> Result<ParamSet> {
    let params = init_params(spec, derive_seed(seed, &[STREAM_INIT]))?;
    Ok(if algo.algorithm.is_adversarial() { params } else { params.without_group(Group::Discriminator) })
}

/// Assigns training sites to `clients` groups of equal size. The largest site
/// goes to client 0; the rest are dealt out after a seeded shuffle. Each
/// client's site list is sorted.
pub fn partition_sites(site_counts: &[(usize, usize)], clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if clients == 0 || site_counts.is_empty() || !site_counts.len().is_multiple_of(clients) {
        return Err(Error::config(format!(
            "{} sites cannot be split evenly across {clients} clients",
            site_counts.len()
        )));
    }
    let per_client = site_counts.len() / clients;
    let largest = site_counts
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.1.cmp(&b.1).then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .expect("non-empty");
    let mut rest: Vec<usize> =
        site_counts.iter().enumerate().filter(|(i, _)| *i != largest).map(|(_, s)| s.0).collect();
    rest.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_PARTITION]));
    rest.shuffle(&mut rng);
    let mut order = vec![site_counts[largest].0];
    order.extend(rest);
    Ok(order
        .chunks(per_client)
        .map(|c| {
            let mut sites = c.to_vec();
            sites.sort_unstable();
            sites
        })
        .collect())
}

/// Share of training samples held by each client.
pub fn client_shares(assignment: &[Vec<usize>], data: &DatasetSplit) -> Vec<f64> {
    let total = data.train_samples() as f64;
    assignment
        .iter()
        .map(|sites| {
            data.train.iter().filter(|s| sites.contains(&s.site_id)).map(|s| s.len()).sum::<usize>() as f64 / total
        })
        .collect()
}

/// Normalised weighted mean of architecturally identical parameter sets,
/// reduced in input order relative to the first set.
pub fn fedavg_aggregate(params: &[ParamSet], weights: &[f64]) -> Result<ParamSet> {
    if params.is_empty() || params.len() != weights.len() {
        return Err(Error::config("need one weight per parameter set"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::config("aggregation weights must be finite and >= 0"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::config("aggregation weights sum to zero"));
    }
    for p in &params[1..] {
        params[0].check_same_architecture(p)?;
    }
    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
    // x0 + Σ w_i (x_i − x0): identical inputs come back bit for bit
    let mut out = params[0].clone();
    for (k, entry) in out.entries_mut().iter_mut().enumerate() {
        let base = params[0].entries()[k].tensor.data();
        let mut acc = vec![0.0; base.len()];
        for (p, w) in params.iter().zip(&norm).skip(1) {
            let src = p.entries()[k].tensor.data();
            acc.iter_mut().zip(src.iter().zip(base)).for_each(|(a, (s, b))| *a += w * (s - b));
        }
        entry.tensor.data_mut().iter_mut().zip(&acc).for_each(|(v, a)| *v += a);
    }
    Ok(out)
}

/// What a client sends to the server after local training. Only parameters
/// and scalar metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: usize,
    pub n_samples: usize,
    pub losses: LossBreakdown,
    pub params: ParamSet,
}

impl ClientUpdate {
    pub fn encode(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub lambda_first: f64,
    pub lambda_last: f64,
    pub lr_predictor: f64,
    /// Mean loss breakdown of each client over its local steps, by client id.
    pub client_losses: Vec<LossBreakdown>,
    pub ood_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub epoch: usize,
    pub lambda: f64,
    pub lr_predictor: f64,
    pub train_losses: LossBreakdown,
    pub ood_mae: f64,
}

/// The server's model at the end of round `round`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub params: ParamSet,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedRun {
    pub global: GlobalModel,
    pub rounds: Vec<RoundReport>,
    pub assignment: Vec<Vec<usize>>,
    pub final_mae: f64,
    /// Every loss breakdown of every local step, in client-id then step order.
    pub step_losses: Vec<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedRun {
    pub params: ParamSet,
    pub validations: Vec<ValidationReport>,
    pub final_mae: f64,
    pub step_losses: Vec<LossBreakdown>,
}

/// Sees every serialized client→server message before the server decodes it.
pub type UplinkTap<'a> = &'a mut dyn FnMut(&[u8]);

/// Called after aggregation and evaluation of every round.
pub type RoundCallback<'a> = &'a mut dyn FnMut(&RoundReport, &ParamSet) -> Result<()>;

/// Callbacks into a federated run. Defaults do nothing.
#[derive(Default)]
pub struct Hooks<'a> {
    pub uplink: Option<UplinkTap<'a>>,
    pub on_round: Option<RoundCallback<'a>>,
}

/// One optimizer step on `batch`. The proximal anchor `anchor` is treated as
/// a constant.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    cfg: &TrainConfig,
    spec: &ModelSpec,
    algo: &AlgoConfig,
    params: &mut ParamSet,
    anchor: &ParamSet,
    batch: &Batch,
    lambda: f64,
    state: &mut OptState,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let net = Network::bind(&mut tape, spec, params, true);
    let x = tape.constant(batch.features.clone());
    let y_true = tape.constant(batch.targets()?);
    let features = net.forward_features(&mut tape, x)?;
    let y_pred = net.forward_age(&mut tape, features)?;
    let l_y = loss_y(&mut tape, y_pred, y_true)?;
    let l_d = if algo.algorithm.is_adversarial() {
        let labels = batch.d_true.as_ref().ok_or_else(|| Error::data("training batch has no site labels"))?;
        let logits = net.forward_site(&mut tape, features, lambda)?;
        Some(loss_d(&mut tape, logits, labels, cfg.label_smoothing)?)
    } else {
        None
    };
    let l_prox = if algo.prox_scope != ProxScope::None {
        Some(loss_prox(&mut tape, &net, params, anchor, algo.mu, algo.prox_scope)?)
    } else {
        None
    };
    let (total, breakdown) = total_local_loss(&mut tape, l_y, l_d, l_prox)?;
    if !breakdown.l_total.is_finite() {
        return Err(Error::Diverged { round: 0, client: 0, detail: format!("loss is {}", breakdown.l_total) });
    }
    tape.backward(total)?;
    let grads = net.grads(&tape, params)?;
    apply_update(&cfg.optim, params, grads, state)?;
    if !params.all_finite() {
        return Err(Error::Diverged { round: 0, client: 0, detail: "parameters became non-finite".into() });
    }
    Ok(breakdown)
}

fn with_location(e: Error, round: usize, client: usize) -> Error {
    match e {
        Error::Diverged { detail, .. } => Error::Diverged { round, client, detail },
        other => other,
    }
}

/// One epoch of shuffled mini-batch steps. The permutation is keyed by
/// `(seed, stream, epoch)`.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    cfg: &TrainConfig,
    spec: &ModelSpec,
    algo: &AlgoConfig,
    params: &mut ParamSet,
    anchor: &ParamSet,
    shard: &Batch,
    lambda: f64,
    state: &mut OptState,
    shuffle_seed: u64,
    log: &mut Vec<LossBreakdown>,
) -> Result<()> {
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);
    for idx in order.chunks(cfg.batch_size) {
        let batch = shard.select(idx)?;
        log.push(train_step(cfg, spec, algo, params, anchor, &batch, lambda, state)?);
    }
    Ok(())
}

pub fn evaluate_mae(spec: &ModelSpec, params: &ParamSet, batch: &Batch) -> Result<f64> {
    let pred = predict_age(spec, params, &batch.features)?;
    mae(&pred, &batch.y_true)
}

/// Client-side state that survives between rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub sites: Vec<usize>,
    pub shard: Batch,
    pub opt: Option<OptState>,
}

impl ClientState {
    pub fn n_samples(&self) -> usize {
        self.shard.len()
    }
}

pub struct LocalContext<'a> {
    pub train: &'a TrainConfig,
    pub spec: &'a ModelSpec,
    pub algo: &'a AlgoConfig,
    pub local_epochs: usize,
    pub reset_optimizer: bool,
    pub lr_predictor: f64,
    pub seed: u64,
}

pub struct LocalOutcome {
    pub params: ParamSet,
    pub steps: Vec<LossBreakdown>,
    pub lambda_first: f64,
    pub lambda_last: f64,
}

/// `E` local epochs starting from the round's broadcast snapshot, which also
/// serves as the proximal anchor for every step.
pub fn local_train(
    ctx: &LocalContext<'_>,
    client: &mut ClientState,
    global: &GlobalModel,
    round: usize,
) -> Result<LocalOutcome> {
    let mut params = global.params.clone();
    let lr_disc = ctx.train.optim.lr_disc;
    let state = match client.opt.take() {
        Some(mut s) if !ctx.reset_optimizer => {
            s.lr_predictor = ctx.lr_predictor;
            s
        }
        _ => OptState::new(&params, ctx.lr_predictor, lr_disc),
    };
    let mut state = state;
    let mut steps = Vec::new();
    let first_epoch = round * ctx.local_epochs;
    for e in 0..ctx.local_epochs {
        let epoch = first_epoch + e;
        let lambda = ctx.train.schedule.lambda(epoch);
        let shuffle = derive_seed(ctx.seed, &[STREAM_SHUFFLE, client.client_id as u64, epoch as u64]);
        run_epoch(
            ctx.train,
            ctx.spec,
            ctx.algo,
            &mut params,
            &global.params,
            &client.shard,
            lambda,
            &mut state,
            shuffle,
            &mut steps,
        )
        .map_err(|e| with_location(e, round, client.client_id))?;
    }
    client.opt = Some(state);
    let last = (first_epoch + ctx.local_epochs).saturating_sub(1);
    Ok(LocalOutcome {
        params,
        steps,
        lambda_first: ctx.train.schedule.lambda(first_epoch),
        lambda_last: ctx.train.schedule.lambda(last.max(first_epoch)),
    })
}

/// `R` synchronous rounds of broadcast, local training, serialized uplink,
/// aggregation and OOD evaluation.
pub fn run_federated(
    train: &TrainConfig,
    fed: &FedConfig,
    algo: &AlgoConfig,
    data: &DatasetSplit,
    partition_seed: u64,
    seed: u64,
    mut hooks: Hooks<'_>,
) -> Result<FederatedRun> {
    train.validate()?;
    fed.validate()?;
    algo.validate()?;
    if !algo.algorithm.is_federated() {
        return Err(Error::config(format!("{} is not a federated algorithm", algo.algorithm)));
    }
    data.validate()?;
    let spec = train.model_for(data);
    let counts: Vec<(usize, usize)> = data.train.iter().map(|s| (s.site_id, s.len())).collect();
    let assignment = partition_sites(&counts, fed.clients, partition_seed)?;
    let mut clients = assignment
        .iter()
        .enumerate()
        .map(|(client_id, sites)| {
            Ok(ClientState { client_id, sites: sites.clone(), shard: data.train_batch(sites)?, opt: None })
        })
        .collect::<Result<Vec<_>>>()?;
    let ood = data.ood_batch()?;

    let mut global = GlobalModel { params: initial_params(&spec, algo, seed)?, round: 0 };
    let mut plateau = PlateauState::new(train.plateau, train.predictor_lr(algo));
    let mut rounds = Vec::with_capacity(fed.rounds);
    let mut step_losses = Vec::new();
    let mut final_mae = evaluate_mae(&spec, &global.params, &ood)?;

    for round in 0..fed.rounds {
        let ctx = LocalContext {
            train,
            spec: &spec,
            algo,
            local_epochs: fed.local_epochs,
            reset_optimizer: fed.reset_optimizer_each_round,
            lr_predictor: plateau.lr,
            seed,
        };
        let snapshot = &global;
        let outcomes: Vec<LocalOutcome> =
            clients.par_iter_mut().map(|c| local_train(&ctx, c, snapshot, round)).collect::<Result<Vec<_>>>()?;

        let mut updates = Vec::with_capacity(outcomes.len());
        let mut client_losses = Vec::with_capacity(outcomes.len());
        let (mut lambda_first, mut lambda_last) = (0.0, 0.0);
        for (client, outcome) in clients.iter().zip(outcomes) {
            let losses = LossBreakdown::mean(&outcome.steps);
            lambda_first = outcome.lambda_first;
            lambda_last = outcome.lambda_last;
            step_losses.extend(outcome.steps);
            let msg = ClientUpdate {
                client_id: client.client_id,
                round,
                n_samples: client.n_samples(),
                losses,
                params: outcome.params,
            };
            let bytes = msg.encode()?;
            if let Some(tap) = hooks.uplink.as_mut() {
                tap(&bytes);
            }
            let received = ClientUpdate::decode(&bytes)?;
            client_losses.push(received.losses);
            updates.push(received);
        }
        updates.sort_by_key(|u| u.client_id);
        let weights: Vec<f64> = updates
            .iter()
            .map(|u| match fed.weighting {
                Weighting::Uniform => 1.0,
                Weighting::BySampleCount => u.n_samples as f64,
            })
            .collect();
        let params: Vec<ParamSet> = updates.into_iter().map(|u| u.params).collect();
        global = GlobalModel { params: fedavg_aggregate(&params, &weights)?, round: round + 1 };
        if !global.params.all_finite() {
            return Err(Error::Diverged {
                round,
                client: usize::MAX,
                detail: "aggregated parameters are non-finite".into(),
            });
        }
        final_mae = evaluate_mae(&spec, &global.params, &ood)?;
        let lr_used = plateau.lr;
        plateau.update(final_mae).map_err(|e| with_location(e, round, usize::MAX))?;
        let report =
            RoundReport { round, lambda_first, lambda_last, lr_predictor: lr_used, client_losses, ood_mae: final_mae };
        if let Some(cb) = hooks.on_round.as_mut() {
            cb(&report, &global.params)?;
        }
        rounds.push(report);
    }
    Ok(FederatedRun { global, rounds, assignment, final_mae, step_losses })
}

/// Pooled training of ERM or DANN with validation every `validate_every`
/// epochs. Shuffles use the same keying as client 0 of a federated run.
pub fn run_centralized(
    train: &TrainConfig,
    algo: &AlgoConfig,
    data: &DatasetSplit,
    seed: u64,
) -> Result<CentralizedRun> {
    train.validate()?;
    algo.validate()?;
    if !matches!(algo.algorithm, Algorithm::Erm | Algorithm::Dann) {
        return Err(Error::config(format!("{} is not a centralized algorithm", algo.algorithm)));
    }
    data.validate()?;
    let spec = train.model_for(data);
    let pooled = data.pooled_train()?;
    let ood = data.ood_batch()?;
    let mut params = initial_params(&spec, algo, seed)?;
    let anchor = params.clone();
    let mut plateau = PlateauState::new(train.plateau, train.predictor_lr(algo));
    let mut state = OptState::new(&params, plateau.lr, train.optim.lr_disc);
    let mut validations = Vec::new();
    let mut step_losses = Vec::new();
    let mut since_validation = Vec::new();
    let mut final_mae = evaluate_mae(&spec, &params, &ood)?;
    for epoch in 0..train.centralized_epochs {
        let lambda = train.schedule.lambda(epoch);
        let shuffle = derive_seed(seed, &[STREAM_SHUFFLE, 0, epoch as u64]);
        let before = since_validation.len();
        run_epoch(
            train,
            &spec,
            algo,
            &mut params,
            &anchor,
            &pooled,
            lambda,
            &mut state,
            shuffle,
            &mut since_validation,
        )
        .map_err(|e| with_location(e, epoch, 0))?;
        debug_assert!(since_validation.len() > before);
        if (epoch + 1) % train.validate_every == 0 {
            final_mae = evaluate_mae(&spec, &params, &ood)?;
            let lr_used = plateau.lr;
            state.lr_predictor = plateau.update(final_mae).map_err(|e| with_location(e, epoch, 0))?;
            validations.push(ValidationReport {
                epoch: epoch + 1,
                lambda,
                lr_predictor: lr_used,
                train_losses: LossBreakdown::mean(&since_validation),
                ood_mae: final_mae,
            });
            step_losses.append(&mut since_validation);
        }
    }
    step_losses.append(&mut since_validation);
    if !train.centralized_epochs.is_multiple_of(train.validate_every) {
        final_mae = evaluate_mae(&spec, &params, &ood)?;
    }
    Ok(CentralizedRun { params, validations, final_mae, step_losses })
}

/// Every raw feature and age value of a batch.
pub fn raw_values(batch: &Batch) -> Vec<f64> {
    let mut v = batch.features.data().to_vec();
    v.extend_from_slice(&batch.y_true);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamEntry;
    use crate::tensor::Tensor;

    fn single(values: Vec<f64>) -> ParamSet {
        ParamSet::from_entries(vec![ParamEntry {
            name: "w".into(),
            group: Group::Regressor,
            tensor: Tensor::vector(values),
        }])
        .unwrap()
    }

    #[test]
    fn weighted_mean_examples() {
        let ps = vec![single(vec![0.0]), single(vec![4.0])];
        assert_eq!(fedavg_aggregate(&ps, &[3.0, 1.0]).unwrap().flatten(), vec![1.0]);
        assert_eq!(fedavg_aggregate(&ps, &[1.0, 1.0]).unwrap().flatten(), vec![2.0]);
        let same = vec![single(vec![0.3, -1.7]); 3];
        assert_eq!(fedavg_aggregate(&same, &[0.2, 0.5, 0.3]).unwrap().to_bytes(), same[0].to_bytes());
    }

    #[test]
    fn aggregation_rejects_bad_inputs() {
        let ps = vec![single(vec![0.0]), single(vec![4.0, 1.0])];
        assert!(matches!(fedavg_aggregate(&ps, &[1.0, 1.0]), Err(Error::Config(_))));
        let ps = vec![single(vec![0.0]), single(vec![4.0])];
        assert!(fedavg_aggregate(&ps, &[0.0, 0.0]).is_err());
        assert!(fedavg_aggregate(&ps, &[1.0]).is_err());
    }

    #[test]
    fn partition_covers_sites_disjointly() {
        let counts: Vec<(usize, usize)> = (0..15).map(|i| (i, if i == 7 { 800 } else { 50 })).collect();
        let a = partition_sites(&counts, 5, 1).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|s| s.len() == 3));
        assert!(a[0].contains(&7));
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..15).collect::<Vec<_>>());

        let one = partition_sites(&counts, 1, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 15);

        assert!(matches!(partition_sites(&counts, 4, 1), Err(Error::Config(_))));
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_eq!(derive_seed(5, &[1]), derive_seed(5, &[1]));
    }

    #[test]
    fn client_update_round_trips_bitwise() {
        let p = init_params(&ModelSpec::default(), 4).unwrap();
        let msg = ClientUpdate {
            client_id: 2,
            round: 1,
            n_samples: 10,
            losses: LossBreakdown { l_y: 0.1, l_d: 1.0 / 3.0, l_prox: 0.0, l_total: 0.1 + 1.0 / 3.0 },
            params: p,
        };
        let back = ClientUpdate::decode(&msg.encode().unwrap()).unwrap();
        assert_eq!(back.params.to_bytes(), msg.params.to_bytes());
        assert_eq!(back, msg);
    }
}
