//! The federated round engine.
//!
//! Each round every user runs local SGD on the composite objective from the
//! last broadcast `(θ, t)`, the channel relays one user's result, and the
//! server broadcasts it unchanged. FedAvg is the `gamma = 1` case.
//!
//! The engine never reads the channel's weights; it only calls
//! [`RamDistribution::relay`].

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{self, Dataset};
use crate::numerics::{self, argmax, cross_entropy_from_logits, ModelArch, ModelParams, NumericsError};
use crate::ram::{CandidatePool, RamDistribution, RamError, RamRng};
use crate::risk::{composite_grads, composite_loss, RiskConfig, RiskState};
use crate::seeding;

/// Rows per forward pass when sweeping a whole dataset.
const EVAL_CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("diverged: non-finite parameters at round {round}, user {user}, epoch {epoch}")]
    Divergence { round: usize, user: usize, epoch: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Ram(#[from] RamError),
    #[error("invalid training setup: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, FedError>;

/// How the per-round local updates are carried out.
///
/// `Eager` trains every user every round. `OnDemand` defers a user's
/// update until the channel actually relays it; since the selection stream
/// never looks at the candidates and every update has its own shuffle
/// stream, the global trajectory is bit-identical to `Eager`. A divergence
/// in a user that is never relayed goes unnoticed in `OnDemand`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Eager,
    OnDemand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub ram: u64,
    pub shuffle: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub num_users: usize,
    pub global_rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_t: f64,
    pub risk: RiskConfig,
    /// Initial threshold shared by every user.
    pub t_init: f64,
    pub seeds: Seeds,
    pub execution: Execution,
    /// Threads used for eager local updates; results do not depend on it.
    pub workers: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(FedError::Config(msg.into()));
        if self.num_users == 0 {
            return fail("num_users must be positive");
        }
        if self.local_epochs == 0 {
            return fail("local_epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.lr_theta > 0.0 && self.lr_theta.is_finite()) {
            return fail("lr_theta must be positive and finite");
        }
        if !(self.lr_t >= 0.0 && self.lr_t.is_finite()) {
            return fail("lr_t must be non-negative and finite");
        }
        if !self.t_init.is_finite() {
            return fail("t_init must be finite");
        }
        if self.workers == 0 {
            return fail("workers must be at least 1");
        }
        Ok(())
    }
}

/// A model and its threshold, the unit the channel relays.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPair {
    pub theta: ModelParams,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct UserShard {
    pub user_id: usize,
    pub data: Dataset,
    /// Result of the user's latest local update. Under `OnDemand` only the
    /// relayed user's result is kept.
    local: Option<LocalPair>,
}

impl UserShard {
    pub fn local(&self) -> Option<&LocalPair> {
        self.local.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub overall_acc: f64,
    /// `None` for classes with no test samples.
    pub per_class_acc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub selected_user: usize,
    pub t_global: f64,
    /// Full-shard loss of the relayed user at the broadcast parameters.
    pub train_loss_selected: f64,
    pub eval: Option<Metrics>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunHistory {
    pub records: Vec<RoundRecord>,
}

impl RunHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn selections(&self) -> impl Iterator<Item = usize> + '_ {
        self.records.iter().map(|r| r.selected_user)
    }
}

fn overflow_to_divergence(err: NumericsError, round: usize, user: usize, epoch: usize) -> FedError {
    match err {
        NumericsError::NumericalOverflow(_) => FedError::Divergence { round, user, epoch },
        other => other.into(),
    }
}

/// Mean cross-entropy over a whole dataset.
pub fn dataset_loss(theta: &ModelParams, data: &Dataset) -> std::result::Result<f64, NumericsError> {
    let (dim, c) = (data.dim(), theta.arch().num_classes());
    let mut total = 0.0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let logits = numerics::forward(theta, &data.features()[start * dim..end * dim], dim)?;
        let labels = &data.labels()[start..end];
        total += cross_entropy_from_logits(&logits, labels, c) * labels.len() as f64;
    }
    let value = total / data.len() as f64;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(NumericsError::NumericalOverflow("loss"))
    }
}

/// Full-shard composite objective `G_i(θ, t)`.
pub fn shard_objective(theta: &ModelParams, t: f64, data: &Dataset, risk: &RiskConfig) -> std::result::Result<f64, NumericsError> {
    Ok(composite_loss(dataset_loss(theta, data)?, RiskState { t }, risk))
}

fn run_local(
    shard: &UserShard,
    round: usize,
    start: &LocalPair,
    cfg: &TrainConfig,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<LocalPair> {
    let user = shard.user_id;
    let mut theta = start.theta.clone();
    let mut t = start.t;
    let seed = seeding::derive(cfg.seeds.shuffle, &[user as u64, round as u64]);
    for epoch in 0..cfg.local_epochs {
        for batch in data::batches(&shard.data, cfg.batch_size, seed, epoch as u64) {
            let (f, grad) = numerics::loss_and_grad(&theta, &batch)
                .map_err(|e| overflow_to_divergence(e, round, user, epoch))?;
            // θ and t both step from the same pre-step point.
            let (g_theta, g_t) = composite_grads(f, &grad, RiskState { t }, &cfg.risk);
            for (v, g) in theta.values_mut().iter_mut().zip(&g_theta) {
                *v -= cfg.lr_theta * g;
            }
            t -= cfg.lr_t * g_t;
            if !t.is_finite() || !theta.is_finite() {
                return Err(FedError::Divergence { round, user, epoch });
            }
        }
        if let Some(trace) = trace.as_deref_mut() {
            let g = shard_objective(&theta, t, &shard.data, &cfg.risk)
                .map_err(|e| overflow_to_divergence(e, round, user, epoch))?;
            trace.push(g);
        }
    }
    Ok(LocalPair { theta, t })
}

/// `H` epochs of joint `(θ, t)` SGD on the shard's composite objective,
/// starting from `start`. Batches are shuffled with a stream keyed by the
/// shuffle seed, the user and the round.
pub fn local_update(shard: &UserShard, round: usize, start: &LocalPair, cfg: &TrainConfig) -> Result<LocalPair> {
    run_local(shard, round, start, cfg, None)
}

/// [`local_update`] that also records the full-shard composite objective
/// after every epoch. The per-batch hinge makes each step a biased estimate
/// of the full-shard gradient; this trace shows what the steps do to `G_i`.
pub fn local_update_traced(
    shard: &UserShard,
    round: usize,
    start: &LocalPair,
    cfg: &TrainConfig,
) -> Result<(LocalPair, Vec<f64>)> {
    let mut trace = Vec::with_capacity(cfg.local_epochs);
    let pair = run_local(shard, round, start, cfg, Some(&mut trace))?;
    Ok((pair, trace))
}

/// Accuracy of `argmax` predictions, overall and per class.
pub fn evaluate(theta: &ModelParams, test: &Dataset) -> std::result::Result<Metrics, NumericsError> {
    let (dim, c) = (test.dim(), theta.arch().num_classes());
    let mut hits = vec![0usize; c];
    let mut seen = vec![0usize; c];
    for start in (0..test.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(test.len());
        let logits = numerics::forward(theta, &test.features()[start * dim..end * dim], dim)?;
        for (row, &y) in logits.chunks_exact(c).zip(&test.labels()[start..end]) {
            seen[y] += 1;
            if argmax(row) == y {
                hits[y] += 1;
            }
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(Metrics {
        overall_acc: correct as f64 / test.len() as f64,
        per_class_acc: hits
            .iter()
            .zip(&seen)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
            .collect(),
    })
}

struct EagerPool<'a>(&'a [UserShard]);

impl CandidatePool for EagerPool<'_> {
    type Candidate = LocalPair;
    type Error = FedError;

    fn len(&self) -> usize {
        self.0.len()
    }

    fn take(self, index: usize) -> Result<LocalPair> {
        Ok(self.0[index].local.clone().expect("eager users always hold a local pair"))
    }
}

struct OnDemandPool<'a> {
    users: &'a [UserShard],
    broadcast: &'a LocalPair,
    round: usize,
    cfg: &'a TrainConfig,
}

impl CandidatePool for OnDemandPool<'_> {
    type Candidate = LocalPair;
    type Error = FedError;

    fn len(&self) -> usize {
        self.users.len()
    }

    fn take(self, index: usize) -> Result<LocalPair> {
        local_update(&self.users[index], self.round, self.broadcast, self.cfg)
    }
}

/// Global training state: the last broadcast, every user's shard and local
/// pair, and the run history.
pub struct Federation {
    cfg: TrainConfig,
    users: Vec<UserShard>,
    ram: RamDistribution,
    ram_rng: RamRng,
    round: usize,
    broadcast: LocalPair,
    history: RunHistory,
    threads: Option<rayon::ThreadPool>,
}

impl Federation {
    /// Every user starts from the same `(θ¹, t¹)`.
    pub fn new(datasets: Vec<Dataset>, ram_weights: &[f64], arch: ModelArch, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if datasets.len() != cfg.num_users {
            return Err(FedError::Config(format!(
                "{} datasets for {} users",
                datasets.len(),
                cfg.num_users
            )));
        }
        if ram_weights.len() != cfg.num_users {
            return Err(FedError::Config(format!(
                "{} channel weights for {} users",
                ram_weights.len(),
                cfg.num_users
            )));
        }
        for (i, d) in datasets.iter().enumerate() {
            if d.dim() != arch.input_dim() || d.num_classes() != arch.num_classes() {
                return Err(FedError::Config(format!("user {i}: dataset shape does not match the model")));
            }
        }
        let ram = RamDistribution::new(ram_weights)?;
        let initial = LocalPair { theta: numerics::init_params(&arch, cfg.seeds.init), t: cfg.t_init };
        let users = datasets
            .into_iter()
            .enumerate()
            .map(|(user_id, data)| UserShard { user_id, data, local: None })
            .collect();
        let threads = if cfg.workers > 1 && cfg.execution == Execution::Eager {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.workers)
                    .build()
                    .map_err(|e| FedError::Config(format!("worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            ram_rng: RamRng::from_seed(cfg.seeds.ram),
            cfg,
            users,
            ram,
            round: 0,
            broadcast: initial,
            history: RunHistory::default(),
            threads,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn theta_global(&self) -> &ModelParams {
        &self.broadcast.theta
    }

    pub fn t_global(&self) -> f64 {
        self.broadcast.t
    }

    pub fn history(&self) -> &RunHistory {
        &self.history
    }

    pub fn users(&self) -> &[UserShard] {
        &self.users
    }

    /// Attaches evaluation metrics to the latest round record.
    pub fn record_eval(&mut self, metrics: Metrics) {
        if let Some(last) = self.history.records.last_mut() {
            last.eval = Some(metrics);
        }
    }

    /// Full-shard loss `f_i(θ)` of every user.
    pub fn user_losses(&self, theta: &ModelParams) -> Result<Vec<f64>> {
        self.users
            .iter()
            .map(|u| dataset_loss(theta, &u.data).map_err(FedError::from))
            .collect()
    }

    /// Local updates from the last broadcast, relay, broadcast; returns the
    /// new round's record.
    pub fn run_round(&mut self) -> Result<&RoundRecord> {
        let round = self.round;
        let (selected, pair) = match self.cfg.execution {
            Execution::Eager => {
                let (broadcast, cfg) = (&self.broadcast, &self.cfg);
                let update = |u: &UserShard| local_update(u, round, broadcast, cfg);
                let results: Vec<Result<LocalPair>> = match &self.threads {
                    Some(pool) => pool.install(|| self.users.par_iter().map(update).collect()),
                    None => self.users.iter().map(update).collect(),
                };
                for (user, result) in self.users.iter_mut().zip(results) {
                    user.local = Some(result?);
                }
                self.ram.relay(&mut self.ram_rng, EagerPool(&self.users))?
            }
            Execution::OnDemand => {
                for user in &mut self.users {
                    user.local = None;
                }
                let (selected, pair) = self.ram.relay(
                    &mut self.ram_rng,
                    OnDemandPool { users: &self.users, broadcast: &self.broadcast, round, cfg: &self.cfg },
                )?;
                self.users[selected].local = Some(pair.clone());
                (selected, pair)
            }
        };
        self.round += 1;
        self.broadcast = pair;
        let train_loss_selected = dataset_loss(&self.broadcast.theta, &self.users[selected].data)?;
        self.history.records.push(RoundRecord {
            round: self.round,
            selected_user: selected,
            t_global: self.broadcast.t,
            train_loss_selected,
            eval: None,
        });
        Ok(self.history.records.last().expect("pushed above"))
    }

    pub fn into_history(self) -> RunHistory {
        self.history
    }
}

/// Why a run stopped early, with everything recorded up to that point.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: FedError,
    pub history: RunHistory,
}

/// Runs `cfg.global_rounds` rounds from a common initialization.
pub fn train(
    datasets: Vec<Dataset>,
    ram_weights: &[f64],
    arch: ModelArch,
    cfg: TrainConfig,
) -> std::result::Result<Federation, TrainFailure> {
    let mut fed = Federation::new(datasets, ram_weights, arch, cfg)
        .map_err(|error| TrainFailure { error, history: RunHistory::default() })?;
    for _ in 0..fed.cfg.global_rounds {
        if let Err(error) = fed.run_round() {
            return Err(TrainFailure { error, history: fed.into_history() });
        }
    }
    Ok(fed)
}
