//! Synchronous round loop: client and server state machines.
//!
//! Every round, each client decodes its download, trains locally from the
//! global model, and uploads its compressed pseudo-gradient and parameters.
//! The server decodes all uploads (a round needs exactly one per client),
//! aggregates, updates the risk matrix, and encodes one download per client.
//! Messages always go through [`crate::wire`], so the byte counts in
//! [`RoundMetrics`] are lengths of buffers that were actually produced.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collab::{self, CollabConfig, RiskMatrix};
use crate::data::{self, Dataset, PartitionSpec, SyntheticSpec};
use crate::hsvd::{self, Compression, EnergyConfig, UpdateKind};
use crate::model::{evaluate, loss_and_grad, Batch, LayerSpec, OptimizerState, ParameterSet, TinyConvConfig};
use crate::wire::{self, DownloadMessage, UploadMessage, UploadPayload, ValueBytes};
use crate::{Error, Result, Scalar};

/// Which parts of the protocol are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Risk-weighted correction plus hierarchical compression.
    Ceperfed,
    /// Plain FedAvg: dense uploads, no correction, no risk updates.
    Fedavg,
    /// As `Ceperfed`, but every non-head layer at one fixed rank, no residual.
    FixedRank(usize),
    /// As `Ceperfed`, but the risk matrix stays at uniform `1/n`.
    NoAlpha,
    /// As `Ceperfed`, but uploads are dense.
    NoHsvd,
}

impl Mode {
    pub fn compression(&self, energy: &EnergyConfig) -> Compression {
        match *self {
            Mode::Ceperfed | Mode::NoAlpha => Compression::Hierarchical(energy.clone()),
            Mode::FixedRank(rank) => Compression::FixedRank {
                rank,
                group_channels: energy.group_channels,
            },
            Mode::Fedavg | Mode::NoHsvd => Compression::Lossless,
        }
    }

    /// Whether clients add the historical risk gradient to batch gradients.
    pub fn corrects_gradients(&self) -> bool {
        !matches!(self, Mode::Fedavg)
    }

    pub fn updates_risk(&self) -> bool {
        !matches!(self, Mode::Fedavg | Mode::NoAlpha)
    }

    pub fn label(&self) -> String {
        match self {
            Mode::Ceperfed => "ceperfed".into(),
            Mode::Fedavg => "fedavg".into(),
            Mode::FixedRank(r) => format!("fixed_rank_{r}"),
            Mode::NoAlpha => "no_alpha".into(),
            Mode::NoHsvd => "no_hsvd".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n_clients: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rounds: usize,
    /// Stop when global accuracy has not improved for this many rounds;
    /// `None` always runs the full budget.
    pub patience: Option<usize>,
    pub mode: Mode,
    pub energy: EnergyConfig,
    pub collab: CollabConfig,
    pub model: TinyConvConfig,
    pub dataset: SyntheticSpec,
    /// Dirichlet concentration of the label partition.
    pub dirichlet: f64,
    pub train_fraction: f64,
    /// Seeds model init, partition, splits and batch order.
    pub seed: u64,
    /// Cap on concurrently trained clients; `None` uses all cores.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_clients: 5,
            local_epochs: 1,
            batch_size: 128,
            learning_rate: 1e-4,
            rounds: 100,
            patience: Some(10),
            mode: Mode::Ceperfed,
            energy: EnergyConfig::default(),
            collab: CollabConfig::default(),
            model: TinyConvConfig::default(),
            dataset: SyntheticSpec::default(),
            dirichlet: 0.5,
            train_fraction: 0.8,
            seed: 0,
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<Arc<Vec<LayerSpec>>> {
        if self.n_clients == 0 || self.n_clients > u16::MAX as usize {
            return Err(Error::config(format!("n_clients must be in 1..=65535, got {}", self.n_clients)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.rounds > u32::MAX as usize {
            return Err(Error::config("too many rounds"));
        }
        if let Mode::FixedRank(0) = self.mode {
            return Err(Error::config("fixed rank must be positive"));
        }
        self.collab.validate()?;
        self.energy.validate()?;
        self.dataset.validate()?;
        let m = &self.model;
        if m.in_channels != self.dataset.channels
            || m.image_size != self.dataset.height
            || m.image_size != self.dataset.width
            || m.n_classes != self.dataset.n_classes
        {
            return Err(Error::config(format!(
                "model expects {}x{s}x{s} inputs over {} classes, dataset produces {}x{}x{} over {}",
                m.in_channels,
                m.n_classes,
                self.dataset.channels,
                self.dataset.height,
                self.dataset.width,
                self.dataset.n_classes,
                s = m.image_size
            )));
        }
        let specs = m.layer_specs()?;
        self.mode.compression(&self.energy).check_layers(&specs)?;
        Ok(specs)
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            n_clients: self.n_clients,
            concentration: self.dirichlet,
            train_fraction: self.train_fraction,
            seed: self.seed,
        }
    }
}

/// Seed of client `client`'s private RNG stream (batch order).
pub fn client_rng_seed(seed: u64, client: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (client as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Per-client `(train, test)` shards: Dirichlet partition, per-client
/// feature shift, stratified split.
pub fn build_client_data<T: Scalar>(config: &ExperimentConfig) -> Result<Vec<(Dataset<T>, Dataset<T>)>> {
    let data: Dataset<T> = data::generate(&config.dataset)?;
    let shards = data::dirichlet_partition(&data.labels, &config.partition_spec())?;
    shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            let (train_idx, test_idx) = data::split_train_test(
                shard,
                &data.labels,
                config.train_fraction,
                config.seed ^ (i as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03),
            )?;
            let mut train = data.subset(&train_idx);
            let mut test = data.subset(&test_idx);
            data::apply_feature_shift(&mut train, i, config.dataset.shift_strength, config.dataset.seed);
            data::apply_feature_shift(&mut test, i, config.dataset.shift_strength, config.dataset.seed);
            Ok((train, test))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ClientState<T> {
    pub id: usize,
    pub model: ParameterSet<T>,
    pub optimizer: OptimizerState<T>,
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    /// Last received historical average gradient (absent before round 0).
    pub average_gradient: Option<ParameterSet<T>>,
    /// Last received historical risk gradient (absent before round 0).
    pub risk_gradient: Option<ParameterSet<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(id: usize, model: ParameterSet<T>, learning_rate: T, train: Dataset<T>, test: Dataset<T>, seed: u64) -> Self {
        Self {
            id,
            optimizer: OptimizerState::new(&model, learning_rate),
            model,
            train,
            test,
            average_gradient: None,
            risk_gradient: None,
            rng: ChaCha8Rng::seed_from_u64(client_rng_seed(seed, id)),
        }
    }
}

/// Round-invariant knobs a client needs.
#[derive(Debug, Clone)]
pub struct ClientSettings {
    pub round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub compression: Compression,
    pub correct_gradients: bool,
}

/// Client-side numbers a round produces besides the upload.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    /// Mean training loss of the final local epoch.
    pub train_loss: f64,
    /// Accuracy of the locally trained model on the client's test shard.
    pub test_accuracy: f64,
}

/// One client's round: start from `global`, train with risk-corrected
/// batch gradients, then compress the pseudo-gradient and the parameters.
pub fn client_round<T: Scalar>(
    mut state: ClientState<T>,
    global: &ParameterSet<T>,
    average_gradient: Option<&ParameterSet<T>>,
    risk_gradient: Option<&ParameterSet<T>>,
    settings: &ClientSettings,
) -> Result<(UploadPayload<T>, ClientState<T>, ClientReport)> {
    let abort = |reason: String| Error::RoundAborted {
        round: settings.round,
        reason: format!("client {}: {reason}", state.id),
    };
    global.check_compatible(&state.model)?;
    state.model = global.clone();
    state.average_gradient = average_gradient.cloned();
    state.risk_gradient = risk_gradient.cloned();
    let correction = risk_gradient.filter(|_| settings.correct_gradients);

    let n = state.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_epoch_loss = None;
    for _ in 0..settings.local_epochs {
        order.shuffle(&mut state.rng);
        let mut total = T::zero();
        for chunk in order.chunks(settings.batch_size.max(1)) {
            let sub = state.train.subset(chunk);
            let batch = Batch::new(sub.inputs, sub.labels)?;
            let (loss, grad) = loss_and_grad(&state.model, &batch).map_err(|e| abort(e.to_string()))?;
            if !loss.is_finite() {
                return Err(abort(format!("non-finite loss {loss}")));
            }
            total += loss * T::of_usize(chunk.len());
            let grad = match correction {
                Some(r) => collab::correct_gradient(&grad, r)?,
                None => grad,
            };
            state.optimizer.apply(&mut state.model, &grad)?;
        }
        last_epoch_loss = Some(total / T::of_usize(n.max(1)));
    }
    if !state.model.all_finite() {
        return Err(abort("parameters diverged".into()));
    }
    let loss_ce = match last_epoch_loss {
        Some(l) => l,
        None => evaluate(&state.model, &state.train.inputs, &state.train.labels, 256)?.0,
    };
    let round_gradient = global.sub(&state.model)?;
    let alignment = collab::alignment_score(loss_ce, &round_gradient, &state.model)?;
    let gradient = hsvd::compress(&round_gradient, UpdateKind::Gradient, &settings.compression)?;
    let parameters = hsvd::compress(&state.model, UpdateKind::Parameters, &settings.compression)?;
    let (_, test_accuracy) = evaluate(&state.model, &state.test.inputs, &state.test.labels, 256)?;
    let payload = UploadPayload {
        gradient,
        parameters,
        alignment,
        n_samples: n as u64,
    };
    let report = ClientReport {
        train_loss: loss_ce.as_f64(),
        test_accuracy,
    };
    Ok((payload, state, report))
}

#[derive(Debug, Clone)]
pub struct ServerState<T> {
    pub global: ParameterSet<T>,
    pub risk: RiskMatrix<T>,
    /// `g^{t-1}`; zero before the first round.
    pub previous_average: ParameterSet<T>,
    pub sample_counts: Vec<u64>,
    pub total_samples: u64,
    pub round: usize,
}

impl<T: Scalar> ServerState<T> {
    pub fn new(global: ParameterSet<T>, sample_counts: Vec<u64>) -> Self {
        let n = sample_counts.len();
        Self {
            previous_average: global.zeros_like(),
            global,
            risk: RiskMatrix::uniform(n),
            total_samples: sample_counts.iter().sum(),
            sample_counts,
            round: 0,
        }
    }

    pub fn n_clients(&self) -> usize {
        self.sample_counts.len()
    }
}

#[derive(Debug, Clone)]
pub struct ServerSettings {
    pub delta_scale: f64,
    pub lambda_step: f64,
    pub update_risk: bool,
    pub send_risk_gradient: bool,
}

/// Aggregates one complete set of uploads and returns one download per client.
pub fn server_round<T: Scalar>(
    state: &mut ServerState<T>,
    uploads: &[UploadMessage<T>],
    settings: &ServerSettings,
) -> Result<Vec<DownloadMessage<T>>> {
    let n = state.n_clients();
    if uploads.len() != n {
        return Err(Error::Protocol(format!(
            "round {} needs {n} uploads, got {}",
            state.round,
            uploads.len()
        )));
    }
    let mut ordered: Vec<Option<&UploadMessage<T>>> = vec![None; n];
    for up in uploads {
        if up.round as usize != state.round {
            return Err(Error::Protocol(format!(
                "upload from client {} is for round {}, server is at round {}",
                up.client, up.round, state.round
            )));
        }
        match ordered.get_mut(up.client as usize) {
            Some(slot @ None) => *slot = Some(up),
            Some(Some(_)) => return Err(Error::Protocol(format!("duplicate upload from client {}", up.client))),
            None => return Err(Error::Protocol(format!("unknown client {}", up.client))),
        }
    }
    let ordered: Vec<&UploadMessage<T>> = ordered.into_iter().map(|u| u.expect("all slots filled")).collect();

    let specs = state.global.specs().clone();
    let mut grads = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    for up in &ordered {
        if up.payload.gradient.kind != UpdateKind::Gradient || up.payload.parameters.kind != UpdateKind::Parameters {
            return Err(Error::Protocol(format!("client {} swapped update kinds", up.client)));
        }
        grads.push(hsvd::decompress(&up.payload.gradient, &specs)?);
        params.push(hsvd::decompress(&up.payload.parameters, &specs)?);
    }
    state.sample_counts = ordered.iter().map(|u| u.payload.n_samples).collect();
    state.total_samples = state.sample_counts.iter().sum();
    if state.total_samples == 0 {
        return Err(Error::Protocol("clients reported zero training samples".into()));
    }

    let total = T::of(state.total_samples as f64);
    let weights: Vec<T> = state.sample_counts.iter().map(|&c| T::of(c as f64) / total).collect();
    let refs: Vec<&ParameterSet<T>> = params.iter().collect();
    let global = ParameterSet::weighted_sum(&refs, &weights)?;
    let average = collab::historical_average_gradient(&grads, T::of(settings.delta_scale))?;

    if settings.update_risk {
        let scores: Vec<T> = ordered.iter().map(|u| u.payload.alignment).collect();
        let lambda = T::of(settings.lambda_step);
        for (i, theta) in params.iter().enumerate() {
            let consistency = theta.dot(&state.previous_average)?;
            state.risk.update_row(i, &scores, consistency, lambda)?;
        }
    }

    let downloads = (0..n)
        .map(|i| {
            let risk_gradient = if settings.send_risk_gradient {
                collab::historical_risk_gradient(&state.risk.row(i), &grads)?
            } else {
                global.zeros_like()
            };
            Ok(DownloadMessage {
                round: state.round as u32,
                client: i as u16,
                global: global.clone(),
                average_gradient: average.clone(),
                risk_gradient,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    state.global = global;
    state.previous_average = average;
    state.round += 1;
    Ok(downloads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub upload_bytes: usize,
    pub download_bytes: usize,
    /// Mean of the gradient and parameter ratios, from encoded value bytes.
    pub transmission_ratio: f64,
    /// Mean retained rank for part 1, 2 and 3 (absent when sent dense).
    pub mean_rank: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub clients: Vec<ClientMetrics>,
    pub global_loss: f64,
    /// Global model on the union of all client test shards.
    pub global_accuracy: f64,
    pub upload_bytes: usize,
    pub download_bytes: usize,
    pub transmission_ratio: f64,
    pub mean_rank: [Option<f64>; 3],
}

/// Everything one call to [`Simulation::step`] produced.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub metrics: RoundMetrics,
    /// Encoded uploads, indexed by client.
    pub uploads: Vec<Vec<u8>>,
    /// Encoded downloads for the next round, indexed by client.
    pub downloads: Vec<Vec<u8>>,
}

/// A running experiment.
pub struct Simulation<T> {
    config: ExperimentConfig,
    specs: Arc<Vec<LayerSpec>>,
    compression: Compression,
    clients: Vec<ClientState<T>>,
    server: ServerState<T>,
    global_test: Dataset<T>,
    pending_downloads: Vec<Vec<u8>>,
    initial_download_bytes: usize,
    pool: rayon::ThreadPool,
}

fn mean_ranks(per_update: &[[Option<f64>; 3]]) -> [Option<f64>; 3] {
    let mut out = [None; 3];
    for (p, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = per_update.iter().filter_map(|r| r[p]).collect();
        if !vals.is_empty() {
            *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    out
}

impl<T: Scalar> Simulation<T> {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let specs = config.validate()?;
        let shards = build_client_data::<T>(&config)?;
        let init = crate::model::init_he::<T>(specs.clone(), config.seed);
        let lr = T::of(config.learning_rate);
        let test_refs: Vec<&Dataset<T>> = shards.iter().map(|(_, te)| te).collect();
        let global_test = Dataset::concat(&test_refs)?;
        let clients: Vec<ClientState<T>> = shards
            .into_iter()
            .enumerate()
            .map(|(i, (train, test))| ClientState::new(i, init.clone(), lr, train, test, config.seed))
            .collect();
        let counts = clients.iter().map(|c| c.train.len() as u64).collect();
        let server = ServerState::new(init.clone(), counts);
        let zeros = init.zeros_like();
        let pending_downloads = (0..clients.len())
            .map(|i| {
                wire::encode_download(&DownloadMessage {
                    round: 0,
                    client: i as u16,
                    global: init.clone(),
                    average_gradient: zeros.clone(),
                    risk_gradient: zeros.clone(),
                })
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let initial_download_bytes = pending_downloads.iter().map(Vec::len).sum();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads.unwrap_or(0))
            .build()
            .map_err(|e| Error::config(e.to_string()))?;
        Ok(Self {
            compression: config.mode.compression(&config.energy),
            config,
            specs,
            clients,
            server,
            global_test,
            pending_downloads,
            initial_download_bytes,
            pool,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn specs(&self) -> &Arc<Vec<LayerSpec>> {
        &self.specs
    }

    pub fn clients(&self) -> &[ClientState<T>] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState<T> {
        &self.server
    }

    pub fn global_test(&self) -> &Dataset<T> {
        &self.global_test
    }

    /// Bytes of the broadcast that seeds round 0 (not part of any round's metrics).
    pub fn initial_download_bytes(&self) -> usize {
        self.initial_download_bytes
    }

    pub fn round(&self) -> usize {
        self.server.round
    }

    /// Runs one synchronous round.
    pub fn step(&mut self) -> Result<RoundReport> {
        let round = self.server.round;
        let settings = ClientSettings {
            round,
            local_epochs: self.config.local_epochs,
            batch_size: self.config.batch_size,
            compression: self.compression.clone(),
            correct_gradients: self.config.mode.corrects_gradients(),
        };
        let clients = std::mem::take(&mut self.clients);
        let downloads = std::mem::take(&mut self.pending_downloads);
        let specs = self.specs.clone();

        let results: Vec<Result<_>> = self.pool.install(|| {
            clients
                .into_par_iter()
                .zip(downloads.into_par_iter())
                .map(|(client, bytes)| {
                    let msg: DownloadMessage<T> = wire::decode_download(&bytes, &specs)?;
                    if msg.client as usize != client.id {
                        return Err(Error::Protocol(format!(
                            "client {} received a download for client {}",
                            client.id, msg.client
                        )));
                    }
                    let (payload, client, report) = client_round(
                        client,
                        &msg.global,
                        Some(&msg.average_gradient),
                        Some(&msg.risk_gradient),
                        &settings,
                    )?;
                    let ratio_g = hsvd::mean_ranks(&payload.gradient, &specs);
                    let ratio_p = hsvd::mean_ranks(&payload.parameters, &specs);
                    let upload = UploadMessage {
                        round: round as u32,
                        client: client.id as u16,
                        payload,
                    };
                    let (bytes, values) = wire::encode_upload_metered(&upload)?;
                    Ok((client, report, bytes, values, [ratio_g, ratio_p]))
                })
                .collect()
        });

        let mut uploads = Vec::with_capacity(results.len());
        let mut client_metrics = Vec::with_capacity(results.len());
        let total_scalars: usize = self.specs.iter().map(LayerSpec::numel).sum();
        let mut rank_samples = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            let (client, report, bytes, values, ranks): (_, ClientReport, Vec<u8>, ValueBytes, _) = r?;
            let ratio = (values.gradient + values.parameters) as f64 / (8.0 * total_scalars as f64);
            rank_samples.extend(ranks);
            client_metrics.push(ClientMetrics {
                client: i,
                train_loss: report.train_loss,
                test_accuracy: report.test_accuracy,
                upload_bytes: bytes.len(),
                download_bytes: 0,
                transmission_ratio: ratio,
                mean_rank: mean_ranks(&ranks),
            });
            self.clients.push(client);
            uploads.push(bytes);
        }

        let decoded = uploads
            .iter()
            .map(|b| wire::decode_upload::<T>(b))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let server_settings = ServerSettings {
            delta_scale: self.config.collab.delta_scale,
            lambda_step: self.config.collab.lambda_step,
            update_risk: self.config.mode.updates_risk(),
            send_risk_gradient: self.config.mode.corrects_gradients(),
        };
        let downloads = server_round(&mut self.server, &decoded, &server_settings)?;
        let encoded = downloads
            .iter()
            .map(wire::encode_download)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        for (m, d) in client_metrics.iter_mut().zip(&encoded) {
            m.download_bytes = d.len();
        }
        self.pending_downloads = encoded.clone();

        let (global_loss, global_accuracy) =
            evaluate(&self.server.global, &self.global_test.inputs, &self.global_test.labels, 256)?;
        let n = client_metrics.len() as f64;
        let metrics = RoundMetrics {
            round,
            global_loss: global_loss.as_f64(),
            global_accuracy,
            upload_bytes: client_metrics.iter().map(|c| c.upload_bytes).sum(),
            download_bytes: client_metrics.iter().map(|c| c.download_bytes).sum(),
            transmission_ratio: client_metrics.iter().map(|c| c.transmission_ratio).sum::<f64>() / n,
            mean_rank: mean_ranks(&rank_samples),
            clients: client_metrics,
        };
        Ok(RoundReport {
            metrics,
            uploads,
            downloads: encoded,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome<T> {
    pub rounds: Vec<RoundMetrics>,
    pub final_global: ParameterSet<T>,
    pub risk: RiskMatrix<T>,
    pub stopped_early: bool,
    pub initial_download_bytes: usize,
}

/// Runs rounds until the budget is spent or early stopping triggers.
pub fn run_experiment<T: Scalar>(config: &ExperimentConfig) -> Result<ExperimentOutcome<T>> {
    let mut sim = Simulation::<T>::new(config.clone())?;
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    for _ in 0..config.rounds {
        let report = sim.step()?;
        let acc = report.metrics.global_accuracy;
        rounds.push(report.metrics);
        if acc > best {
            best = acc;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if config.patience.is_some_and(|p| since_best >= p) {
            stopped_early = rounds.len() < config.rounds;
            break;
        }
    }
    Ok(ExperimentOutcome {
        rounds,
        final_global: sim.server.global.clone(),
        risk: sim.server.risk.clone(),
        stopped_early,
        initial_download_bytes: sim.initial_download_bytes,
    })
}
