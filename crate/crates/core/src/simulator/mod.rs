//! Discrete-event engine for buffered asynchronous federated training.
//!
//! Exactly `M_c` clients train at any step boundary. Each step pops every
//! task finishing at the earliest pending instant (client id ascending),
//! trains the client against the checkpoint it was dispatched with, hands
//! the update to the server algorithm, fires a global update whenever the
//! buffer reaches `M`, and finally dispatches one replacement per finished
//! client with the newest global model.

mod delay;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

pub use delay::{assign_categories, sample_runtime, Category, DelayPreset, DelayProfile, TABLE_UNIT_SECONDS};

use crate::algorithms::ClientUpdate;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::RngStream;

/// Whether runtimes are redrawn on every dispatch or fixed per client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeMode {
    #[default]
    Resample,
    FixedPerClient,
}

/// What a client hands back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub update: ClientUpdate,
    /// The client's own final parameters.
    pub final_params: ModelParams,
}

/// Local training, invoked when a task completes.
pub trait ClientTrainer {
    /// `dispatch_seq` counts this client's dispatches from zero.
    fn train(&mut self, client: usize, dispatched: &ModelParams, dispatch_round: u64, dispatch_seq: u64)
        -> Result<LocalOutcome>;
}

/// Diagnostics a server algorithm reports for one global update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub alpha_mean: Option<f64>,
    pub entropy_mean: Option<f64>,
    pub distill_skipped: bool,
}

/// Server-side aggregation rule.
pub trait ServerAlgorithm {
    fn name(&self) -> &'static str;

    /// Sees every arriving update with the checkpoint it was trained from.
    fn on_arrival(&mut self, _update: &ClientUpdate, _dispatched: &ModelParams) -> Result<()> {
        Ok(())
    }

    /// Produces `x_{t+1}` from `x_t` and a full buffer.
    fn global_update(&mut self, global: &ModelParams, buffered: &[ClientUpdate], round: u64)
        -> Result<(ModelParams, UpdateStats)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingTask {
    pub client_id: usize,
    pub dispatch_round: u64,
    pub dispatch_time: f64,
    pub finish_time: f64,
}

impl Eq for PendingTask {}

impl Ord for PendingTask {
    // BinaryHeap is a max-heap: reverse so the earliest (then lowest id) pops first
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .finish_time
            .total_cmp(&self.finish_time)
            .then(other.client_id.cmp(&self.client_id))
    }
}

impl PartialOrd for PendingTask {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// One processed arrival.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRecord {
    pub event: u64,
    pub clock: f64,
    pub client: usize,
    pub dispatch_round: u64,
    pub tau: u64,
    /// Buffer fill after this arrival, before any reset.
    pub buffer_fill: usize,
    /// Global round when the update arrived.
    pub round: u64,
    pub global_update: bool,
    pub active: usize,
    pub checkpoints: usize,
}

/// One completed global update.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// Round index after the update (1-based).
    pub round: u64,
    pub clock: f64,
    pub max_tau: u64,
    pub stats: UpdateStats,
    pub checkpoints: usize,
    /// Global model after the update.
    pub model: ModelParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayStats {
    pub tau_max: u64,
    /// Mean over completed rounds of each round's largest delay.
    pub tau_avg: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationSetup {
    pub num_clients: usize,
    pub concurrency: usize,
    pub buffer_size: usize,
    pub categories: Vec<Category>,
    pub profile: DelayProfile,
    pub runtime_mode: RuntimeMode,
    pub seed: u64,
}

impl SimulationSetup {
    pub fn validate(&self) -> Result<()> {
        let (n, mc, m) = (self.num_clients, self.concurrency, self.buffer_size);
        if !(1 <= m && m <= mc && mc <= n) {
            return Err(Error::config(format!(
                "need 1 <= buffer ({m}) <= concurrency ({mc}) <= clients ({n})"
            )));
        }
        if self.categories.len() != n {
            return Err(Error::dims("SimulationSetup", n, self.categories.len()));
        }
        self.profile.validate()
    }
}

/// Mutable server-side bookkeeping.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub clock: f64,
    pub round: u64,
    pub global: ModelParams,
    pub buffer: Vec<ClientUpdate>,
    queue: BinaryHeap<PendingTask>,
    checkpoints: BTreeMap<u64, ModelParams>,
    active: BTreeSet<usize>,
    taus: Vec<u64>,
    round_max_tau: Vec<u64>,
    window_max_tau: u64,
    max_checkpoints: usize,
}

impl ServerState {
    fn new(initial: ModelParams) -> Self {
        let mut checkpoints = BTreeMap::new();
        checkpoints.insert(0, initial.clone());
        Self {
            clock: 0.0,
            round: 0,
            global: initial,
            buffer: Vec::new(),
            queue: BinaryHeap::new(),
            checkpoints,
            active: BTreeSet::new(),
            taus: Vec::new(),
            round_max_tau: Vec::new(),
            window_max_tau: 0,
            max_checkpoints: 1,
        }
    }

    pub fn fill(&self) -> usize {
        self.buffer.len()
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn active_clients(&self) -> impl Iterator<Item = usize> + '_ {
        self.active.iter().copied()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn checkpoint_count(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn max_checkpoints_seen(&self) -> usize {
        self.max_checkpoints
    }

    pub fn checkpoint(&self, version: u64) -> Option<&ModelParams> {
        self.checkpoints.get(&version)
    }

    pub fn taus(&self) -> &[u64] {
        &self.taus
    }

    pub fn round_max_taus(&self) -> &[u64] {
        &self.round_max_tau
    }

    fn collect_checkpoints(&mut self) {
        let mut live: BTreeSet<u64> = self.queue.iter().map(|t| t.dispatch_round).collect();
        live.insert(self.round);
        self.checkpoints.retain(|v, _| live.contains(v));
    }
}

/// `τ_max` over every processed update and `τ_avg` over completed rounds.
pub fn delay_stats(server: &ServerState) -> Result<DelayStats> {
    if server.round_max_tau.is_empty() {
        return Err(Error::config("delay statistics need at least one completed round"));
    }
    let tau_max = server.taus.iter().copied().max().unwrap_or(0);
    let tau_avg = server.round_max_tau.iter().sum::<u64>() as f64 / server.round_max_tau.len() as f64;
    Ok(DelayStats { tau_max, tau_avg })
}

/// Result of one engine step.
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    pub events: Vec<EventRecord>,
    pub rounds: Vec<RoundRecord>,
}

pub struct Simulation {
    setup: SimulationSetup,
    state: ServerState,
    algorithm: Box<dyn ServerAlgorithm>,
    trainer: Box<dyn ClientTrainer>,
    dispatch_rng: RngStream,
    dispatch_counts: Vec<u64>,
    fixed_runtimes: Option<Vec<f64>>,
    events: u64,
    reconstruction_mismatches: u64,
    round_limit: Option<u64>,
}

impl Simulation {
    /// Builds the engine and performs the initial dispatch of `M_c`
    /// distinct clients drawn uniformly at random, all on version 0.
    pub fn new(
        setup: SimulationSetup,
        initial: ModelParams,
        algorithm: Box<dyn ServerAlgorithm>,
        trainer: Box<dyn ClientTrainer>,
    ) -> Result<Self> {
        setup.validate()?;
        let fixed_runtimes = match setup.runtime_mode {
            RuntimeMode::Resample => None,
            RuntimeMode::FixedPerClient => Some(
                (0..setup.num_clients)
                    .map(|c| {
                        let mut rng = RngStream::named(setup.seed, "runtime-fixed", c as u64);
                        sample_runtime(setup.categories[c], &setup.profile, &mut rng)
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let mut sim = Self {
            dispatch_rng: RngStream::named(setup.seed, "dispatch", 0),
            dispatch_counts: vec![0; setup.num_clients],
            state: ServerState::new(initial),
            setup,
            algorithm,
            trainer,
            fixed_runtimes,
            events: 0,
            reconstruction_mismatches: 0,
            round_limit: None,
        };
        let mut idle: Vec<usize> = (0..sim.setup.num_clients).collect();
        for _ in 0..sim.setup.concurrency {
            let pick = sim.dispatch_rng.below(idle.len());
            let client = idle.remove(pick);
            sim.dispatch(client)?;
        }
        Ok(sim)
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn setup(&self) -> &SimulationSetup {
        &self.setup
    }

    pub fn algorithm_name(&self) -> &'static str {
        self.algorithm.name()
    }

    pub fn events_processed(&self) -> u64 {
        self.events
    }

    /// Arrivals whose `checkpoint + delta` differed from the client's own
    /// final parameters.
    pub fn reconstruction_mismatches(&self) -> u64 {
        self.reconstruction_mismatches
    }

    fn runtime(&mut self, client: usize) -> Result<f64> {
        if let Some(fixed) = &self.fixed_runtimes {
            return Ok(fixed[client]);
        }
        let seq = self.dispatch_counts[client];
        let mut rng = RngStream::named(self.setup.seed, "runtimes", client as u64).child("dispatch", seq);
        sample_runtime(self.setup.categories[client], &self.setup.profile, &mut rng)
    }

    fn dispatch(&mut self, client: usize) -> Result<()> {
        let runtime = self.runtime(client)?;
        let state = &mut self.state;
        state.active.insert(client);
        state.queue.push(PendingTask {
            client_id: client,
            dispatch_round: state.round,
            dispatch_time: state.clock,
            finish_time: state.clock + runtime,
        });
        Ok(())
    }

    fn arrive(&mut self, task: PendingTask, report: &mut StepReport) -> Result<()> {
        let seq = self.dispatch_counts[task.client_id];
        self.dispatch_counts[task.client_id] += 1;
        let state = &mut self.state;
        state.clock = task.finish_time;
        state.active.remove(&task.client_id);
        let dispatched = state
            .checkpoints
            .get(&task.dispatch_round)
            .ok_or(Error::MissingCheckpoint(task.dispatch_round))?
            .clone();

        let outcome = self
            .trainer
            .train(task.client_id, &dispatched, task.dispatch_round, seq)?;
        if dispatched.add_delta(&outcome.update.delta)? != outcome.final_params {
            self.reconstruction_mismatches += 1;
        }
        self.algorithm.on_arrival(&outcome.update, &dispatched)?;

        let state = &mut self.state;
        let tau = state.round - task.dispatch_round;
        state.taus.push(tau);
        state.window_max_tau = state.window_max_tau.max(tau);
        state.buffer.push(outcome.update);
        let fill = state.buffer.len();
        let arrival_round = state.round;

        let full = fill == self.setup.buffer_size;
        if full {
            let buffered = std::mem::take(&mut self.state.buffer);
            let (next, stats) = self
                .algorithm
                .global_update(&self.state.global, &buffered, self.state.round)?;
            let state = &mut self.state;
            state.round += 1;
            if !next.is_finite() {
                return Err(Error::NonFinite { round: state.round });
            }
            state.global = next.clone();
            state.checkpoints.insert(state.round, next);
            state.round_max_tau.push(state.window_max_tau);
            state.window_max_tau = 0;
            state.collect_checkpoints();
            report.rounds.push(RoundRecord {
                round: state.round,
                clock: state.clock,
                max_tau: *state.round_max_tau.last().expect("just pushed"),
                stats,
                checkpoints: state.checkpoints.len(),
                model: state.global.clone(),
            });
        }
        let state = &mut self.state;
        state.max_checkpoints = state.max_checkpoints.max(state.checkpoints.len());
        report.events.push(EventRecord {
            event: self.events,
            clock: state.clock,
            client: task.client_id,
            dispatch_round: task.dispatch_round,
            tau,
            buffer_fill: fill,
            round: arrival_round,
            global_update: full,
            active: state.active.len(),
            checkpoints: state.checkpoints.len(),
        });
        self.events += 1;
        Ok(())
    }

    /// Stops processing further arrivals once `rounds` updates have happened.
    pub fn set_round_limit(&mut self, rounds: Option<u64>) {
        self.round_limit = rounds;
    }

    fn limit_reached(&self) -> bool {
        self.round_limit.is_some_and(|r| self.state.round >= r)
    }

    /// Processes every task finishing at the earliest pending instant, then
    /// refills the active set. Returns [`Error::QueueEmpty`] when nothing is
    /// pending. Tasks left over after the round limit stay queued.
    pub fn step(&mut self) -> Result<StepReport> {
        let first = self.state.queue.pop().ok_or(Error::QueueEmpty)?;
        let instant = first.finish_time;
        let mut report = StepReport::default();
        let mut finished = 1;
        self.arrive(first, &mut report)?;
        while !self.limit_reached() && self.state.queue.peek().is_some_and(|t| t.finish_time == instant) {
            let task = self.state.queue.pop().expect("peeked");
            finished += 1;
            self.arrive(task, &mut report)?;
        }
        for _ in 0..finished {
            let idle: Vec<usize> = (0..self.setup.num_clients)
                .filter(|c| !self.state.active.contains(c))
                .collect();
            let client = idle[self.dispatch_rng.below(idle.len())];
            self.dispatch(client)?;
        }
        for e in &mut report.events {
            e.active = self.state.active.len();
        }
        self.state.max_checkpoints = self.state.max_checkpoints.max(self.state.checkpoints.len());
        Ok(report)
    }

    /// Steps until exactly `rounds` global updates have completed.
    pub fn run_rounds(&mut self, rounds: u64, mut on_step: impl FnMut(&Self, &StepReport) -> Result<()>) -> Result<()> {
        self.set_round_limit(Some(rounds));
        while self.state.round < rounds {
            let report = self.step()?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    pub fn delay_stats(&self) -> Result<DelayStats> {
        delay_stats(&self.state)
    }
}
