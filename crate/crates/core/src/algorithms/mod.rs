//! Server aggregation rules and client-side local training.

use serde::{Deserialize, Serialize};

use crate::distill::{distillation_round, DistillConfig, LogitsCache};
use crate::error::{Error, Result};
use crate::model::{ce_loss_and_grad, forward_logits, Batch, ModelParams};
use crate::optim::Adam;
use crate::rng::RngStream;
use crate::simulator::{ClientTrainer, LocalOutcome, ServerAlgorithm, UpdateStats};
use crate::tensor::DenseMatrix;

/// A client's contribution: `x_local − x_dispatched`, tagged with the round
/// whose global model it started from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: Vec<f64>,
    pub dispatch_round: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalWork {
    /// Full passes over the shard.
    Epochs(usize),
    /// A fixed number of minibatch steps.
    Steps(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServerRule {
    FedEcho(DistillConfig),
    FedBuff,
    /// Server-side Adam on the mean delta.
    AdaptiveServer { beta1: f64, beta2: f64, eps: f64 },
}

impl ServerRule {
    pub fn name(&self) -> &'static str {
        match self {
            ServerRule::FedEcho(_) => "fedecho",
            ServerRule::FedBuff => "fedbuff",
            ServerRule::AdaptiveServer { .. } => "adaptive_server",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgoConfig {
    pub eta_l: f64,
    pub eta: f64,
    pub local_work: LocalWork,
    pub local_batch: usize,
    pub weight_decay: f64,
    pub algorithm: ServerRule,
}

impl AlgoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_l >= 0.0 && self.eta_l.is_finite()) {
            return Err(Error::config(format!("local.eta_l must be finite and >= 0, got {}", self.eta_l)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("server.eta must be finite and > 0, got {}", self.eta)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "local.weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        match self.local_work {
            LocalWork::Epochs(0) => return Err(Error::config("local.epochs must be >= 1")),
            LocalWork::Steps(0) => return Err(Error::config("local.steps must be >= 1")),
            _ => {}
        }
        if self.local_batch == 0 {
            return Err(Error::config("local.batch_size must be >= 1"));
        }
        match self.algorithm {
            ServerRule::FedEcho(d) => d.validate(),
            ServerRule::FedBuff => Ok(()),
            ServerRule::AdaptiveServer { beta1, beta2, eps } => {
                crate::optim::OptimizerKind::Adam { beta1, beta2, eps }.validate()
            }
        }
    }
}

/// Minibatch SGD with weight decay starting from `dispatched`.
///
/// Training runs in delta coordinates: the iterate is `dispatched + Δ` and
/// only `Δ` is stepped, so adding the returned delta back onto the
/// checkpoint reproduces the client's final model exactly.
pub fn local_sgd(dispatched: &ModelParams, shard: &Batch, cfg: &AlgoConfig, rng: &mut RngStream) -> Result<Vec<f64>> {
    if shard.is_empty() {
        return Err(Error::config("local_sgd: empty shard"));
    }
    let n = shard.len();
    let batch = cfg.local_batch.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total = match cfg.local_work {
        LocalWork::Epochs(e) => e * steps_per_epoch,
        LocalWork::Steps(k) => k,
    };
    let mut delta = vec![0.0; dispatched.theta().len()];
    let mut order = Vec::new();
    let mut cursor = 0;
    for _ in 0..total {
        if cursor >= order.len() {
            order = rng.permutation(n);
            cursor = 0;
        }
        let end = (cursor + batch).min(n);
        let mb = shard.select(&order[cursor..end])?;
        cursor = end;

        let current = dispatched.add_delta(&delta)?;
        let (_, mut grad) = ce_loss_and_grad(&current, &mb)?;
        if cfg.weight_decay > 0.0 {
            for (g, x) in grad.iter_mut().zip(current.theta()) {
                *g += cfg.weight_decay * x;
            }
        }
        for (d, g) in delta.iter_mut().zip(&grad) {
            *d -= cfg.eta_l * g;
        }
    }
    Ok(delta)
}

/// Uniform mean of buffered deltas, summed in `(client_id, dispatch_round)`
/// order so the result does not depend on arrival order.
pub fn mean_delta(buffered: &[ClientUpdate]) -> Result<Vec<f64>> {
    let first = buffered.first().ok_or_else(|| Error::config("empty update buffer"))?;
    let dim = first.delta.len();
    let mut order: Vec<&ClientUpdate> = buffered.iter().collect();
    order.sort_by_key(|u| (u.client_id, u.dispatch_round));
    let mut sum = vec![0.0; dim];
    for u in order {
        if u.delta.len() != dim {
            return Err(Error::dims("mean_delta", dim, u.delta.len()));
        }
        for (s, d) in sum.iter_mut().zip(&u.delta) {
            *s += d;
        }
    }
    let m = buffered.len() as f64;
    for s in &mut sum {
        *s /= m;
    }
    Ok(sum)
}

/// `x + η · mean(Δ)`.
pub fn fedbuff_update(global: &ModelParams, buffered: &[ClientUpdate], eta: f64) -> Result<ModelParams> {
    let mean = mean_delta(buffered)?;
    let step: Vec<f64> = mean.iter().map(|d| eta * d).collect();
    global.add_delta(&step)
}

/// FedBuff aggregation followed by one distillation round on the pool.
pub fn fedecho_update(
    global: &ModelParams,
    buffered: &[ClientUpdate],
    eta: f64,
    cache: &LogitsCache,
    pool: &DenseMatrix,
    cfg: &DistillConfig,
    rng: &mut RngStream,
) -> Result<(ModelParams, UpdateStats)> {
    let aggregated = fedbuff_update(global, buffered, eta)?;
    let outcome = distillation_round(&aggregated, pool, cache, cfg, rng)?;
    let stats = if outcome.skipped {
        UpdateStats {
            distill_skipped: true,
            ..UpdateStats::default()
        }
    } else {
        UpdateStats {
            alpha_mean: Some(outcome.alpha_mean),
            entropy_mean: Some(outcome.entropy_mean),
            distill_skipped: false,
        }
    };
    Ok((outcome.student, stats))
}

/// Rebuilds the client's model from its checkpoint and caches its logits on
/// the pool, replacing anything stored for that client before.
pub fn cache_client_logits(
    dispatched: &ModelParams,
    update: &ClientUpdate,
    cache: &mut LogitsCache,
    pool: &DenseMatrix,
) -> Result<()> {
    let client_model = dispatched.add_delta(&update.delta)?;
    let logits = forward_logits(&client_model, pool)?;
    cache.store(update.client_id, logits)
}

/// Adam on the pseudo-gradient `−mean(Δ)`.
pub fn adaptive_server_update(
    global: &ModelParams,
    buffered: &[ClientUpdate],
    eta: f64,
    state: &mut Adam,
) -> Result<ModelParams> {
    let pseudo_grad: Vec<f64> = mean_delta(buffered)?.iter().map(|d| -d).collect();
    let mut theta = global.theta().to_vec();
    state.step(&mut theta, &pseudo_grad, eta);
    ModelParams::new(global.arch(), theta)
}

pub struct FedBuff {
    pub eta: f64,
}

impl ServerAlgorithm for FedBuff {
    fn name(&self) -> &'static str {
        "fedbuff"
    }

    fn global_update(&mut self, global: &ModelParams, buffered: &[ClientUpdate], _round: u64)
        -> Result<(ModelParams, UpdateStats)> {
        Ok((fedbuff_update(global, buffered, self.eta)?, UpdateStats::default()))
    }
}

pub struct FedEcho {
    pub eta: f64,
    pub distill: DistillConfig,
    pub cache: LogitsCache,
    pub pool: DenseMatrix,
    pub seed: u64,
}

impl FedEcho {
    pub fn new(eta: f64, distill: DistillConfig, num_clients: usize, pool: DenseMatrix, classes: usize, seed: u64) -> Self {
        Self {
            eta,
            distill,
            cache: LogitsCache::new(num_clients, pool.rows(), classes),
            pool,
            seed,
        }
    }
}

impl ServerAlgorithm for FedEcho {
    fn name(&self) -> &'static str {
        "fedecho"
    }

    fn on_arrival(&mut self, update: &ClientUpdate, dispatched: &ModelParams) -> Result<()> {
        cache_client_logits(dispatched, update, &mut self.cache, &self.pool)
    }

    fn global_update(&mut self, global: &ModelParams, buffered: &[ClientUpdate], round: u64)
        -> Result<(ModelParams, UpdateStats)> {
        let mut rng = RngStream::named(self.seed, "distill-batches", round);
        fedecho_update(global, buffered, self.eta, &self.cache, &self.pool, &self.distill, &mut rng)
    }
}

pub struct AdaptiveServer {
    pub eta: f64,
    pub state: Adam,
}

impl ServerAlgorithm for AdaptiveServer {
    fn name(&self) -> &'static str {
        "adaptive_server"
    }

    fn global_update(&mut self, global: &ModelParams, buffered: &[ClientUpdate], _round: u64)
        -> Result<(ModelParams, UpdateStats)> {
        Ok((adaptive_server_update(global, buffered, self.eta, &mut self.state)?, UpdateStats::default()))
    }
}

/// Builds the server side for `cfg`. `pool` is only used by FedEcho.
pub fn build_server(
    cfg: &AlgoConfig,
    dim: usize,
    num_clients: usize,
    pool: &DenseMatrix,
    classes: usize,
    seed: u64,
) -> Box<dyn ServerAlgorithm> {
    match cfg.algorithm {
        ServerRule::FedEcho(d) => Box::new(FedEcho::new(cfg.eta, d, num_clients, pool.clone(), classes, seed)),
        ServerRule::FedBuff => Box::new(FedBuff { eta: cfg.eta }),
        ServerRule::AdaptiveServer { beta1, beta2, eps } => Box::new(AdaptiveServer {
            eta: cfg.eta,
            state: Adam::new(beta1, beta2, eps, dim),
        }),
    }
}

/// Local SGD over fixed per-client shards.
pub struct LocalTrainer {
    pub shards: Vec<Batch>,
    pub cfg: AlgoConfig,
    pub seed: u64,
}

impl ClientTrainer for LocalTrainer {
    fn train(&mut self, client: usize, dispatched: &ModelParams, dispatch_round: u64, dispatch_seq: u64)
        -> Result<LocalOutcome> {
        let shard = self
            .shards
            .get(client)
            .ok_or_else(|| Error::dims("LocalTrainer::train", self.shards.len(), client))?;
        let mut rng = RngStream::named(self.seed, "local-batches", client as u64).child("dispatch", dispatch_seq);
        let delta = local_sgd(dispatched, shard, &self.cfg, &mut rng)?;
        let final_params = dispatched.add_delta(&delta)?;
        Ok(LocalOutcome {
            update: ClientUpdate {
                client_id: client,
                delta,
                dispatch_round,
            },
            final_params,
        })
    }
}
