//! Federated round engine.
//!
//! Each round the server samples clients, sends them the global model pruned
//! by the global mask, lets each run masked local SGD, and aggregates:
//!
//! * `fedavg`: plain FedAvg, no masks.
//! * `fedpai_u_client`: every client derives a personal GraSP mask from its
//!   own data at initialization. The server averages the masked updates over
//!   the number of participants, then keeps the global top-κ by magnitude,
//!   which becomes the mask for the next download.
//! * `fedpai_u_server`: one GraSP mask computed by the server from a proxy
//!   batch and shared by everyone.
//! * `fedpai_s`: dense training while the server recomputes a channel mask
//!   after every aggregation; once the Early-Bird test freezes it, the model
//!   is regrouped into a smaller dense network.
//! * `iterative_magnitude`: iterative global magnitude pruning with
//!   rewinding to the initial weights after each pruning step, at a fixed
//!   learning rate.
//!
//! Aggregation is a fold in ascending client-id order, so results do not
//! depend on how local training is scheduled.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_fpds, make_synthetic, partition_dirichlet, partition_iid, split_dataset, Dataset,
    PartitionKind, PartitionPlan, SplitDataset, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::mask::{check_kappa, kept_count, top_k_bits, Mask};
use crate::metrics::{evaluate, flops_forward, message_bytes, Codec, RoundReport};
use crate::nn::{init_weights, loss_and_grad, sgd_step, ModelSpec, ModelState};
use crate::pruning::{
    apply_mask, grasp_score, iterative_prune_schedule, magnitude_mask, top_kappa_mask,
};
use crate::seed;
use crate::structured::{
    channel_importance, channel_mask_from_scores, ebt_check, regroup, ChannelMask, MaskHistory,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fedavg,
    FedpaiUClient,
    FedpaiUServer,
    FedpaiS,
    IterativeMagnitude,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Fedavg,
        Strategy::FedpaiUClient,
        Strategy::FedpaiUServer,
        Strategy::FedpaiS,
        Strategy::IterativeMagnitude,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fedavg => "fedavg",
            Strategy::FedpaiUClient => "fedpai_u_client",
            Strategy::FedpaiUServer => "fedpai_u_server",
            Strategy::FedpaiS => "fedpai_s",
            Strategy::IterativeMagnitude => "iterative_magnitude",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EbtParams {
    /// Masks held in the FIFO, the newest included.
    pub fifo_len: usize,
    pub epsilon: f64,
}

impl Default for EbtParams {
    fn default() -> Self {
        Self {
            fifo_len: 5,
            epsilon: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterativeParams {
    /// Number of pruning steps to reach the target κ.
    pub total_prune_rounds: usize,
    /// Communication rounds between pruning steps.
    pub prune_interval: usize,
    /// Reset surviving weights to their initial values after each pruning step.
    pub rewind: bool,
    pub lr: f64,
}

impl Default for IterativeParams {
    fn default() -> Self {
        Self {
            total_prune_rounds: 5,
            prune_interval: 20,
            rewind: true,
            lr: 0.1,
        }
    }
}

/// Divisor used when averaging masked updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divisor {
    /// `|S_t|`, the number of participating clients.
    #[default]
    Participants,
    /// Number of participants whose mask keeps the coordinate.
    Support,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub kappa: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Round at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_round: Option<usize>,
    pub lr_decay_factor: f64,
    pub clients_per_round: f64,
    /// Samples in a GraSP scoring batch.
    pub grasp_batch: usize,
    pub ebt: EbtParams,
    pub iterative: IterativeParams,
    pub divisor: Divisor,
    pub codec: Codec,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Fedavg,
            kappa: 1.0,
            local_epochs: 10,
            batch_size: 32,
            lr: 0.1,
            lr_decay_round: Some(100),
            lr_decay_factor: 0.1,
            clients_per_round: 0.1,
            grasp_batch: 128,
            ebt: EbtParams::default(),
            iterative: IterativeParams::default(),
            divisor: Divisor::Participants,
            codec: Codec::Auto,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        check_kappa(self.kappa).map_err(|_| {
            Error::config(
                "kappa",
                format!("kappa must be in (0,1], got {}", self.kappa),
            )
        })?;
        if !(self.clients_per_round > 0.0 && self.clients_per_round <= 1.0) {
            return Err(Error::config(
                "clients_per_round",
                format!("must be in (0,1], got {}", self.clients_per_round),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1, got 0"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(
                "lr",
                format!("must be >= 0, got {}", self.lr),
            ));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(Error::config(
                "lr_decay_factor",
                format!("must be > 0, got {}", self.lr_decay_factor),
            ));
        }
        if self.grasp_batch == 0 {
            return Err(Error::config("grasp_batch", "must be >= 1, got 0"));
        }
        if self.ebt.fifo_len < 2 {
            return Err(Error::config(
                "ebt.fifo_len",
                format!("must be >= 2, got {}", self.ebt.fifo_len),
            ));
        }
        if !(self.ebt.epsilon > 0.0 && self.ebt.epsilon <= 1.0) {
            return Err(Error::config(
                "ebt.epsilon",
                format!("must be in (0,1], got {}", self.ebt.epsilon),
            ));
        }
        if self.iterative.prune_interval == 0 {
            return Err(Error::config(
                "iterative.prune_interval",
                "must be >= 1, got 0",
            ));
        }
        if !(self.iterative.lr.is_finite() && self.iterative.lr >= 0.0) {
            return Err(Error::config(
                "iterative.lr",
                format!("must be >= 0, got {}", self.iterative.lr),
            ));
        }
        Ok(())
    }

    /// Learning rate in effect during `round`.
    pub fn lr_at(&self, round: usize) -> f64 {
        if self.strategy == Strategy::IterativeMagnitude {
            return self.iterative.lr;
        }
        match self.lr_decay_round {
            Some(r) if round >= r => self.lr * self.lr_decay_factor,
            _ => self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// `FPDS` file, split 80/20 per class with the given seed.
    File {
        path: PathBuf,
        split_seed: u64,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<SplitDataset> {
        match self {
            DatasetSource::Synthetic(s) => make_synthetic(s),
            DatasetSource::File { path, split_seed } => {
                split_dataset(&load_fpds(path)?, *split_seed)
            }
        }
    }
}

/// One fully specified simulation (a single grid cell minus its seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub model: ModelSpec,
    pub num_clients: usize,
    pub partition: PartitionKind,
    pub rounds: usize,
    pub strategy: StrategyConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.strategy.validate()?;
        if self.num_clients == 0 {
            return Err(Error::config("num_clients", "must be >= 1, got 0"));
        }
        if let PartitionKind::Dirichlet { alpha } = self.partition {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::config("alpha", format!("must be > 0, got {alpha}")));
            }
        }
        Ok(())
    }
}

/// The server's current global mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GlobalMask {
    Unstructured(Mask),
    /// Frozen channel mask; the global model has already been regrouped.
    Channel(ChannelMask),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub global_state: ModelState,
    pub global_mask: Option<GlobalMask>,
    pub round: usize,
    pub strategy: Strategy,
}

impl ServerState {
    fn unstructured_mask(&self) -> Option<&Mask> {
        match &self.global_mask {
            Some(GlobalMask::Unstructured(m)) => Some(m),
            _ => None,
        }
    }

    /// `W_g ⊙ m_g`, the model every client receives.
    pub fn distributed_model(&self) -> Result<ModelState> {
        match self.unstructured_mask() {
            Some(m) => apply_mask(&self.global_state, m),
            None => Ok(self.global_state.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: ClientShard,
    /// Set once by client-side PaI and never changed afterwards.
    pub personal_mask: Option<Mask>,
    pub local_state: Option<ModelState>,
}

/// `⌈fraction·N⌉` distinct client ids, uniform without replacement, sorted.
pub fn sample_clients(
    num_clients: usize,
    fraction: f64,
    round: usize,
    seed_value: u64,
) -> Vec<usize> {
    let k = kept_count(fraction.clamp(f64::MIN_POSITIVE, 1.0), num_clients).max(1);
    let mut rng = seed::rng(seed_value, &[seed::TAG_SAMPLE, round as u64]);
    let mut ids = index::sample(&mut rng, num_clients, k.min(num_clients)).into_vec();
    ids.sort_unstable();
    ids
}

/// Result of local training on one client.
#[derive(Clone, Debug)]
pub struct LocalUpdate {
    pub state: ModelState,
    /// Mean minibatch loss over the final local epoch.
    pub last_epoch_loss: f64,
}

/// Masked minibatch SGD over a client's shard.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    spec: &ModelSpec,
    data: &Dataset,
    shard: &[usize],
    received: &ModelState,
    mask: Option<&Mask>,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<LocalUpdate> {
    let mut state = match mask {
        Some(m) => apply_mask(received, m)?,
        None => received.clone(),
    };
    if shard.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = seed::rng(shuffle_seed, &[]);
    let mut order = shard.to_vec();
    let mut last_epoch_loss = f64::NAN;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch_size.max(1)) {
            let (x, y) = data.batch(chunk)?;
            let (loss, grad) = loss_and_grad(spec, &state, &x, &y)?;
            state = sgd_step(spec, &state, &grad, lr, mask)?;
            sum += loss;
            steps += 1;
        }
        last_epoch_loss = sum / steps as f64;
    }
    Ok(LocalUpdate {
        state,
        last_epoch_loss,
    })
}

fn check_updates(updates: &[(ModelState, Mask)]) -> Result<()> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::InvalidArgument("no client updates to aggregate".into()))?;
    for (s, m) in updates {
        if s.layout != first.layout {
            return Err(Error::LayoutMismatch(
                "client updates have different layouts".into(),
            ));
        }
        s.check_mask(m)?;
    }
    Ok(())
}

/// `Σ W_i ⊙ m_i` divided by the chosen divisor.
pub fn aggregate_masked(updates: &[(ModelState, Mask)], divisor: Divisor) -> Result<ModelState> {
    check_updates(updates)?;
    let n = updates[0].0.len();
    let mut sum = vec![0.0; n];
    let mut support = vec![0usize; n];
    for (state, mask) in updates {
        let keep = state.expand_mask(mask)?;
        for i in 0..n {
            if keep[i] {
                sum[i] += state.params[i];
                support[i] += 1;
            }
        }
    }
    let participants = updates.len() as f64;
    for (v, s) in sum.iter_mut().zip(support) {
        *v /= match divisor {
            Divisor::Participants => participants,
            Divisor::Support => s.max(1) as f64,
        };
    }
    ModelState::new(sum, updates[0].0.layout.clone())
}

/// FedAvg over masked local models, dividing by the number of participants.
pub fn aggregate_fedavg(updates: &[(ModelState, Mask)]) -> Result<ModelState> {
    aggregate_masked(updates, Divisor::Participants)
}

/// FedAvg followed by global top-κ by magnitude; returns the new global mask.
pub fn aggregate_sparsity_aware(
    updates: &[(ModelState, Mask)],
    kappa: f64,
) -> Result<(ModelState, Mask)> {
    aggregate_sparsity_aware_with(updates, kappa, Divisor::Participants)
}

pub fn aggregate_sparsity_aware_with(
    updates: &[(ModelState, Mask)],
    kappa: f64,
    divisor: Divisor,
) -> Result<(ModelState, Mask)> {
    check_kappa(kappa)?;
    let mean = aggregate_masked(updates, divisor)?;
    let mags: Vec<f64> = mean.prunable_values().iter().map(|v| v.abs()).collect();
    let mask = Mask::from_bits(top_k_bits(&mags, kept_count(kappa, mags.len())));
    let state = apply_mask(&mean, &mask)?;
    Ok((state, mask))
}

/// A running simulation: server, clients, and the data they train on.
pub struct Simulation {
    cfg: RunConfig,
    seed: u64,
    train: Dataset,
    test: Dataset,
    plan: PartitionPlan,
    spec: ModelSpec,
    original_prunable: usize,
    init_state: ModelState,
    server: ServerState,
    clients: Vec<ClientState>,
    ebt_history: MaskHistory,
    prune_steps: usize,
}

impl Simulation {
    pub fn new(cfg: &RunConfig, seed_value: u64) -> Result<Self> {
        let data = cfg.dataset.load()?;
        Self::with_data(cfg, &data, seed_value)
    }

    /// Builds a simulation over an already loaded dataset.
    pub fn with_data(cfg: &RunConfig, data: &SplitDataset, seed_value: u64) -> Result<Self> {
        cfg.validate()?;
        let shape = &cfg.model.input_shape;
        let train = data.train.reshaped(shape)?;
        let test = data.test.reshaped(shape)?;
        if train.num_classes != cfg.model.num_classes {
            return Err(Error::config(
                "model",
                format!(
                    "model has {} classes but dataset has {}",
                    cfg.model.num_classes, train.num_classes
                ),
            ));
        }
        let plan = match cfg.partition {
            PartitionKind::Iid => partition_iid(&train, cfg.num_clients, seed_value)?,
            PartitionKind::Dirichlet { alpha } => {
                partition_dirichlet(&train, cfg.num_clients, alpha, seed_value)?
            }
        };
        let spec = cfg.model.clone();
        let init_state = init_weights(&spec, seed::derive(seed_value, &[seed::TAG_INIT]))?;
        let sc = &cfg.strategy;

        let mut clients: Vec<ClientState> = plan
            .clients
            .iter()
            .enumerate()
            .map(|(i, idx)| ClientState {
                client_id: i,
                shard: ClientShard {
                    indices: idx.clone(),
                },
                personal_mask: None,
                local_state: None,
            })
            .collect();

        let mut global_mask = None;
        match sc.strategy {
            Strategy::FedpaiUClient => {
                let masks: Vec<Result<Mask>> = clients
                    .par_iter()
                    .map(|c| {
                        let mut idx = c.shard.indices.clone();
                        let mut rng =
                            seed::rng(seed_value, &[seed::TAG_SCORING, c.client_id as u64]);
                        idx.shuffle(&mut rng);
                        idx.truncate(sc.grasp_batch);
                        let (x, y) = train.batch(&idx)?;
                        top_kappa_mask(&grasp_score(&spec, &init_state, &x, &y)?, sc.kappa)
                    })
                    .collect();
                for (c, m) in clients.iter_mut().zip(masks) {
                    c.personal_mask = Some(m?);
                }
            }
            Strategy::FedpaiUServer => {
                // Simulator convenience: the server has no data of its own, so it
                // scores on a proxy batch drawn from the held-out distribution.
                let mut idx: Vec<usize> = (0..test.len()).collect();
                idx.shuffle(&mut seed::rng(seed_value, &[seed::TAG_PROXY]));
                idx.truncate(sc.grasp_batch);
                let (x, y) = test.batch(&idx)?;
                let m = top_kappa_mask(&grasp_score(&spec, &init_state, &x, &y)?, sc.kappa)?;
                global_mask = Some(GlobalMask::Unstructured(m));
            }
            _ => {}
        }

        let global_state = match &global_mask {
            Some(GlobalMask::Unstructured(m)) => apply_mask(&init_state, m)?,
            _ => init_state.clone(),
        };
        let original_prunable = spec.num_prunable();
        Ok(Self {
            seed: seed_value,
            train,
            test,
            plan,
            original_prunable,
            server: ServerState {
                global_state,
                global_mask,
                round: 0,
                strategy: sc.strategy,
            },
            clients,
            ebt_history: MaskHistory::new(sc.ebt.fifo_len),
            prune_steps: 0,
            spec,
            init_state,
            cfg: cfg.clone(),
        })
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn ebt_history(&self) -> &MaskHistory {
        &self.ebt_history
    }

    /// Mask a client trains under this round.
    fn training_mask(&self, client: &ClientState) -> Option<Mask> {
        match self.server.strategy {
            Strategy::FedpaiUClient => client.personal_mask.clone(),
            Strategy::FedpaiUServer | Strategy::IterativeMagnitude => {
                self.server.unstructured_mask().cloned()
            }
            Strategy::Fedavg | Strategy::FedpaiS => None,
        }
    }

    /// Runs one communication round and returns its report.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let started = Instant::now();
        let sc = self.cfg.strategy.clone();
        let t = self.server.round;
        let lr = sc.lr_at(t);
        let sampled = sample_clients(self.clients.len(), sc.clients_per_round, t, self.seed);

        // Every client receives W_g ⊙ m_g.
        let received = self.server.distributed_model()?;
        let down_each = message_bytes(&received, self.server.unstructured_mask(), sc.codec)?;

        let jobs: Vec<(usize, Option<Mask>)> = sampled
            .iter()
            .map(|&id| (id, self.training_mask(&self.clients[id])))
            .collect();
        let results: Vec<Result<LocalUpdate>> = jobs
            .par_iter()
            .map(|(id, mask)| {
                local_train(
                    &self.spec,
                    &self.train,
                    &self.clients[*id].shard.indices,
                    &received,
                    mask.as_ref(),
                    sc.local_epochs,
                    lr,
                    sc.batch_size,
                    seed::derive(self.seed, &[seed::TAG_SHUFFLE, t as u64, *id as u64]),
                )
            })
            .collect();

        let n_prunable = received.num_prunable();
        let mut updates = Vec::with_capacity(jobs.len());
        let mut bytes_up = 0u64;
        let mut loss_sum = 0.0;
        for ((id, mask), res) in jobs.into_iter().zip(results) {
            let upd = res?;
            let mask = mask.unwrap_or_else(|| Mask::ones(n_prunable));
            bytes_up += message_bytes(&upd.state, Some(&mask), sc.codec)? as u64;
            loss_sum += upd.last_epoch_loss;
            self.clients[id].local_state = Some(upd.state.clone());
            updates.push((upd.state, mask));
        }
        let train_loss = loss_sum / updates.len() as f64;

        match sc.strategy {
            Strategy::FedpaiUClient => {
                let (state, mask) = aggregate_sparsity_aware_with(&updates, sc.kappa, sc.divisor)?;
                self.server.global_state = state;
                self.server.global_mask = Some(GlobalMask::Unstructured(mask));
            }
            _ => {
                self.server.global_state = aggregate_masked(&updates, sc.divisor)?;
            }
        }

        match sc.strategy {
            Strategy::FedpaiS => self.ebt_step(t)?,
            Strategy::IterativeMagnitude => self.iterative_step(t)?,
            _ => {}
        }

        let model = self.server.distributed_model()?;
        let (test_accuracy, test_loss) = evaluate(&self.spec, &model, &self.test)?;
        let model_nnz = match self.server.unstructured_mask() {
            Some(m) => m.count_ones(),
            None => model.num_prunable(),
        };
        let channel_mask = match &self.server.global_mask {
            Some(GlobalMask::Channel(m)) => Some(m.to_bitmaps()),
            _ => None,
        };
        self.server.round += 1;
        Ok(RoundReport {
            round: t,
            test_accuracy,
            test_loss,
            train_loss,
            bytes_up,
            bytes_down: down_each as u64 * sampled.len() as u64,
            model_nnz,
            sparsity: 1.0 - model_nnz as f64 / self.original_prunable as f64,
            flops_per_forward: flops_forward(&self.spec)?,
            wallclock_ms: started.elapsed().as_millis() as u64,
            lr,
            clients: sampled,
            channel_mask,
        })
    }

    /// Early-Bird search on the freshly aggregated global model.
    fn ebt_step(&mut self, round: usize) -> Result<()> {
        if matches!(self.server.global_mask, Some(GlobalMask::Channel(_))) {
            return Ok(());
        }
        let sc = &self.cfg.strategy;
        let scores = channel_importance(&self.spec, &self.server.global_state)?;
        let mask = channel_mask_from_scores(&scores, sc.kappa)?;
        for w in &mask.warnings {
            log::warn!("{w}");
        }
        self.ebt_history.push(round, mask);
        if !self.ebt_history.is_full() {
            return Ok(());
        }
        if let Some(fixed) = ebt_check(&self.ebt_history, sc.ebt.epsilon) {
            let (small, state) = regroup(&self.spec, &self.server.global_state, &fixed)?;
            log::info!(
                "round {round}: channel mask frozen, {} -> {} parameters",
                self.spec.num_params(),
                small.num_params()
            );
            self.spec = small;
            self.server.global_state = state;
            self.server.global_mask = Some(GlobalMask::Channel(fixed));
            for c in &mut self.clients {
                c.local_state = None;
            }
        }
        Ok(())
    }

    fn iterative_step(&mut self, round: usize) -> Result<()> {
        let it = &self.cfg.strategy.iterative;
        if !(round + 1).is_multiple_of(it.prune_interval)
            || self.prune_steps >= it.total_prune_rounds
        {
            return Ok(());
        }
        self.prune_steps += 1;
        let kappa = iterative_prune_schedule(
            self.prune_steps,
            self.cfg.strategy.kappa,
            it.total_prune_rounds,
        )?;
        let mask = magnitude_mask(&self.server.global_state, kappa)?;
        let changed = self.server.unstructured_mask() != Some(&mask)
            && !(self.server.global_mask.is_none() && mask.is_all_ones());
        if !changed {
            return Ok(());
        }
        let base = if it.rewind {
            &self.init_state
        } else {
            &self.server.global_state
        };
        self.server.global_state = apply_mask(base, &mask)?;
        self.server.global_mask = Some(GlobalMask::Unstructured(mask));
        Ok(())
    }

    /// Runs all configured rounds, handing each report to `sink` as it is produced.
    pub fn run(
        &mut self,
        mut sink: impl FnMut(&RoundReport) -> Result<()>,
    ) -> Result<Vec<RoundReport>> {
        let mut out = Vec::with_capacity(self.cfg.rounds);
        while self.server.round < self.cfg.rounds {
            let r = self.run_round()?;
            sink(&r)?;
            out.push(r);
        }
        Ok(out)
    }
}

/// One report stream per seed.
pub fn run_experiment(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<Vec<RoundReport>>> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    seeds
        .iter()
        .map(|&s| Simulation::with_data(cfg, &data, s)?.run(|_| Ok(())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    fn flat(values: &[f64]) -> ModelState {
        let spec = ModelSpec {
            layers: vec![Layer::Dense {
                in_dim: 1,
                out_dim: values.len(),
                bias: false,
            }],
            input_shape: vec![1],
            num_classes: values.len().max(2),
        };
        ModelState::new(values.to_vec(), spec.layout()).unwrap()
    }

    fn bits(b: &[u8]) -> Mask {
        Mask::from_bits(b.iter().map(|&v| v == 1).collect())
    }

    #[test]
    fn sampling_examples() {
        let s = sample_clients(100, 0.1, 3, 42);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sample_clients(100, 0.1, 3, 42));
        assert_ne!(s, sample_clients(100, 0.1, 4, 42));
        assert_eq!(sample_clients(7, 1.0, 0, 1), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn fedavg_example() {
        let ups = vec![
            (flat(&[2.0, 0.0]), bits(&[1, 0])),
            (flat(&[0.0, 4.0]), bits(&[0, 1])),
        ];
        assert_eq!(aggregate_fedavg(&ups).unwrap().params, vec![1.0, 2.0]);
        let one = vec![(flat(&[3.0, 5.0]), bits(&[0, 1]))];
        assert_eq!(aggregate_fedavg(&one).unwrap().params, vec![0.0, 5.0]);
        assert!(aggregate_fedavg(&[]).is_err());
    }

    #[test]
    fn support_divisor_variant() {
        let ups = vec![
            (flat(&[2.0, 0.0]), bits(&[1, 0])),
            (flat(&[0.0, 4.0]), bits(&[0, 1])),
        ];
        let s = aggregate_masked(&ups, Divisor::Support).unwrap();
        assert_eq!(s.params, vec![2.0, 4.0]);
    }

    #[test]
    fn sparsity_aware_example() {
        let ups = vec![
            (flat(&[2.0, 0.0]), bits(&[1, 0])),
            (flat(&[0.0, 4.0]), bits(&[0, 1])),
        ];
        let (s, m) = aggregate_sparsity_aware(&ups, 0.5).unwrap();
        assert_eq!(s.params, vec![0.0, 2.0]);
        assert_eq!(m.bits(), &[false, true]);
        let (s1, m1) = aggregate_sparsity_aware(&ups, 1.0).unwrap();
        assert_eq!(s1, aggregate_fedavg(&ups).unwrap());
        assert!(m1.is_all_ones());
    }

    #[test]
    fn lr_schedule() {
        let mut sc = StrategyConfig {
            lr_decay_round: Some(5),
            ..Default::default()
        };
        assert_eq!(sc.lr_at(4), 0.1);
        assert!((sc.lr_at(5) - 0.01).abs() < 1e-15);
        sc.strategy = Strategy::IterativeMagnitude;
        assert_eq!(sc.lr_at(500), 0.1);
    }

    #[test]
    fn kappa_validation_message() {
        let sc = StrategyConfig {
            kappa: 0.0,
            ..Default::default()
        };
        let e = sc.validate().unwrap_err();
        assert!(e.to_string().contains("kappa must be in (0,1]"), "{e}");
    }
}
