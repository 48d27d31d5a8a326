//! Server/client round protocol: selection, client update, local training,
//! upload and weighted aggregation.

mod strategy;
pub mod wire;

use std::sync::mpsc;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use strategy::{apply_update, Scaler, UpdateOutcome, UpdateStrategy};
use wire::{duplex, Endpoint, Message, MessageKind};

use crate::data::Dataset;
use crate::eval::{self, EvalError};
use crate::nn::{Network, NnError, OptimizerState};
use crate::params::{autoscale_lambda, weighted_average, NamedParams, ParamsError, ENCODER};
use crate::rng::{self, Stream};
use crate::ssl::{local_train, ClientNets, LossRow, MethodConfig, NetSpecs, SslError, TrainParams};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error("invalid update strategy: {0}")]
    InvalidStrategy(String),
    #[error("cannot select {count} of {pool} clients")]
    SelectionOutOfRange { count: usize, pool: usize },
    #[error("FedEMA on a weight-sharing method needs `allow_off_label`")]
    OffLabel,
    #[error("round {round} has no participants")]
    NoParticipants { round: usize },
    #[error("all {0} rounds have already run")]
    Finished(usize),
    #[error("client {client}: {source}")]
    Client { client: usize, source: SslError },
    #[error("wire protocol: {0}")]
    Wire(String),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, FedError>;

/// Everything the protocol needs to run.
#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub method: MethodConfig,
    pub strategy: UpdateStrategy,
    pub specs: NetSpecs,
    pub train: TrainParams,
    pub base_lr: f64,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub seed: u64,
    /// Worker threads for client training. Results do not depend on it.
    pub workers: usize,
    /// Route dispatch and upload through encoded frames.
    pub wire: bool,
    /// Permit FedEMA on weight-sharing methods.
    pub allow_off_label: bool,
}

impl FedConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        self.method.validate()?;
        self.strategy.validate()?;
        if num_clients == 0 {
            return Err(FedError::InvalidConfig("no clients".into()));
        }
        if self.clients_per_round == 0 || self.clients_per_round > num_clients {
            return Err(FedError::SelectionOutOfRange { count: self.clients_per_round, pool: num_clients });
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(FedError::InvalidConfig(format!("learning rate {}", self.base_lr)));
        }
        if self.workers == 0 {
            return Err(FedError::InvalidConfig("workers must be positive".into()));
        }
        if matches!(self.strategy, UpdateStrategy::FedEma { .. }) && self.method.weight_sharing && !self.allow_off_label {
            return Err(FedError::OffLabel);
        }
        Ok(())
    }
}

/// Per-client record kept by the server.
#[derive(Debug)]
pub struct ClientState {
    pub id: usize,
    pub n_k: usize,
    pub data: Array2<f64>,
    pub nets: ClientNets,
    pub lambda_k: Option<f64>,
    pub last_selected_round: Option<usize>,
    link: Option<Endpoint>,
}

impl ClientState {
    pub fn new(id: usize, data: Array2<f64>, nets: ClientNets, lambda_k: Option<f64>) -> Self {
        Self { id, n_k: data.nrows(), data, nets, lambda_k, last_selected_round: None, link: None }
    }
}

#[derive(Debug)]
pub struct ServerState {
    pub global: NamedParams,
    pub round: usize,
    pub strategy: UpdateStrategy,
    pub clients: Vec<ClientState>,
}

/// Uniform sample of `count` ids without replacement, returned sorted.
pub fn select_clients<R: Rng + ?Sized>(ids: &[usize], count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if count == 0 || count > ids.len() {
        return Err(FedError::SelectionOutOfRange { count, pool: ids.len() });
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, ids.len(), count)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// One uploaded online network.
#[derive(Debug, Clone)]
pub struct Upload {
    pub client: usize,
    pub n_k: usize,
    pub params: NamedParams,
}

/// Sample-count weighted average. Uploads are reduced in client-id order so
/// the result does not depend on arrival order. Returns the aggregate and
/// the normalized weights in id order.
pub fn aggregate_uploads(uploads: &[Upload]) -> Result<(NamedParams, Vec<(usize, f64)>)> {
    let mut sorted: Vec<&Upload> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.client);
    let entries: Vec<(&NamedParams, f64)> = sorted.iter().map(|u| (&u.params, u.n_k as f64)).collect();
    let global = weighted_average(&entries)?;
    let total: f64 = entries.iter().map(|(_, w)| w).sum();
    let weights = sorted.iter().map(|u| (u.client, u.n_k as f64 / total)).collect();
    Ok((global, weights))
}

/// Sets `lambda_k = tau / ||new_global - upload||` for participants that have
/// none yet. A degenerate divergence falls back to `lambda_k = 0`.
pub fn post_aggregate_autoscale(
    clients: &mut [ClientState],
    new_global: &NamedParams,
    uploads: &[Upload],
    tau: f64,
) -> Result<()> {
    for up in uploads {
        let client = clients
            .iter_mut()
            .find(|c| c.id == up.client)
            .ok_or_else(|| FedError::InvalidConfig(format!("unknown client {}", up.client)))?;
        if client.lambda_k.is_some() {
            continue;
        }
        let lambda = match autoscale_lambda(new_global, &up.params, tau) {
            Ok(l) => l,
            Err(ParamsError::DegenerateDivergence(d)) => {
                log::warn!("client {}: divergence {d:e} too small to autoscale, using lambda = 0", up.client);
                0.0
            }
            Err(e) => return Err(e.into()),
        };
        client.lambda_k = Some(lambda);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundRecord {
    pub client: usize,
    pub n_k: usize,
    pub loss_mean: f64,
    pub divergence: f64,
    pub mu: f64,
    pub reset: bool,
    /// `lambda_k` after this round's autoscaling.
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Sorted by client id.
    pub clients: Vec<ClientRoundRecord>,
    pub weights: Vec<(usize, f64)>,
    pub knn_acc: Option<f64>,
    pub collapse_stat: Option<f64>,
    #[serde(skip)]
    pub loss_trace: Vec<(usize, LossRow)>,
}

impl RoundRecord {
    pub fn participants(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.client).collect()
    }
}

struct ClientResult {
    client: usize,
    outcome: UpdateOutcome,
    trace: Vec<LossRow>,
}

/// Server plus its client registry, ready to run rounds.
pub struct Federation {
    pub cfg: FedConfig,
    pub server: ServerState,
    server_links: Vec<Endpoint>,
    pool: rayon::ThreadPool,
}

impl Federation {
    /// Initializes the global model from the seeded init stream and every
    /// client from it.
    pub fn new(cfg: FedConfig, client_data: Vec<Array2<f64>>) -> Result<Self> {
        cfg.validate(client_data.len())?;
        let global = cfg
            .specs
            .init_global(cfg.method.has_predictor, &mut rng::stream(cfg.seed, Stream::Init, 0))?;
        let mut clients = Vec::with_capacity(client_data.len());
        let mut server_links = Vec::new();
        for (id, data) in client_data.into_iter().enumerate() {
            if data.ncols() != cfg.specs.encoder.input_dim() {
                return Err(FedError::InvalidConfig(format!(
                    "client {id} data has {} features, encoder expects {}",
                    data.ncols(),
                    cfg.specs.encoder.input_dim()
                )));
            }
            if data.nrows() < cfg.train.batch_size {
                return Err(SslError::BatchLargerThanData { batch: cfg.train.batch_size, samples: data.nrows() }.into());
            }
            let nets = ClientNets::from_global(
                &global,
                &cfg.specs,
                &cfg.method,
                &mut rng::stream(cfg.seed, Stream::Queue, id as u64),
            )?;
            let mut state = ClientState::new(id, data, nets, cfg.strategy.initial_lambda());
            if cfg.wire {
                let (server_end, client_end) = duplex();
                state.link = Some(client_end);
                server_links.push(server_end);
            }
            clients.push(state);
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| FedError::InvalidConfig(e.to_string()))?;
        let server = ServerState { global, round: 0, strategy: cfg.strategy, clients };
        Ok(Self { cfg, server, server_links, pool })
    }

    pub fn global_encoder(&self) -> Result<Network> {
        Ok(Network::from_params(self.cfg.specs.encoder.clone(), self.server.global.group(ENCODER)?.to_vec())?)
    }

    pub fn client_ids(&self) -> Vec<usize> {
        self.server.clients.iter().map(|c| c.id).collect()
    }

    /// Runs one round and advances the round counter.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round = self.server.round;
        if round >= self.cfg.rounds {
            return Err(FedError::Finished(self.cfg.rounds));
        }
        let ids = self.client_ids();
        let selected = select_clients(
            &ids,
            self.cfg.clients_per_round,
            &mut rng::stream(self.cfg.seed, Stream::Selection, round as u64),
        )?;
        if selected.is_empty() {
            return Err(FedError::NoParticipants { round });
        }

        if self.cfg.wire {
            for &id in &selected {
                self.server_links[id].send(&Message {
                    kind: MessageKind::Dispatch,
                    round: round as u64,
                    client: id as u64,
                    params: self.server.global.clone(),
                })?;
            }
        }

        let cfg = &self.cfg;
        let global = &self.server.global;
        let (tx, rx) = mpsc::channel();
        self.pool.install(|| {
            self.server
                .clients
                .par_iter_mut()
                .filter(|c| selected.binary_search(&c.id).is_ok())
                .for_each_with(tx, |tx, c| {
                    let res = train_client(c, global, cfg, round);
                    tx.send((c.id, res)).expect("collector alive");
                });
        });
        let mut results: Vec<(usize, Result<ClientResult>)> = rx.into_iter().collect();
        results.sort_by_key(|(id, _)| *id);
        let results: Vec<ClientResult> = results.into_iter().map(|(_, r)| r).collect::<Result<_>>()?;

        let mut uploads = Vec::with_capacity(results.len());
        for r in &results {
            let client = &self.server.clients[r.client];
            let params = if self.cfg.wire {
                self.server_links[r.client].expect(MessageKind::Upload, round as u64, r.client as u64)?
            } else {
                client.nets.online_params()
            };
            uploads.push(Upload { client: r.client, n_k: client.n_k, params });
        }
        let (new_global, weights) = aggregate_uploads(&uploads)?;
        new_global.check_same_shape(&self.server.global)?;

        if let UpdateStrategy::FedEma { scaler: Scaler::Autoscale { tau } } = self.server.strategy {
            post_aggregate_autoscale(&mut self.server.clients, &new_global, &uploads, tau)?;
        }
        for &id in &selected {
            self.server.clients[id].last_selected_round = Some(round);
        }
        self.server.global = new_global;
        self.server.round += 1;

        let mut loss_trace = Vec::new();
        let clients = results
            .into_iter()
            .map(|r| {
                let c = &self.server.clients[r.client];
                let loss_mean = r.trace.iter().map(|l| l.loss).sum::<f64>() / r.trace.len().max(1) as f64;
                loss_trace.extend(r.trace.iter().map(|l| (r.client, *l)));
                ClientRoundRecord {
                    client: r.client,
                    n_k: c.n_k,
                    loss_mean,
                    divergence: r.outcome.divergence,
                    mu: r.outcome.mu,
                    reset: r.outcome.reset,
                    lambda: c.lambda_k,
                }
            })
            .collect();
        Ok(RoundRecord { round, clients, weights, knn_acc: None, collapse_stat: None, loss_trace })
    }
}

fn train_client(c: &mut ClientState, global: &NamedParams, cfg: &FedConfig, round: usize) -> Result<ClientResult> {
    let wrap = |client: usize| move |source: SslError| FedError::Client { client, source };
    let incoming = match &c.link {
        Some(link) => link.expect(MessageKind::Dispatch, round as u64, c.id as u64)?,
        None => global.clone(),
    };
    let outcome = apply_update(c, &incoming, &cfg.strategy, round, cfg.allow_off_label)?;
    let steps = cfg.train.steps_per_round(c.n_k);
    let mut opt = OptimizerState::at(cfg.base_lr, cfg.rounds as u64 * steps, round as u64 * steps)?;
    let mut rng = rng::stream(cfg.seed, Stream::Client, ((c.id as u64) << 32) | round as u64);
    let trace = local_train(&mut c.nets, &cfg.method, &c.data.view(), &cfg.train, &mut opt, &mut rng)
        .map_err(wrap(c.id))?;
    if let Some(link) = &c.link {
        link.send(&Message {
            kind: MessageKind::Upload,
            round: round as u64,
            client: c.id as u64,
            params: c.nets.online_params(),
        })?;
    }
    Ok(ClientResult { client: c.id, outcome, trace })
}

/// Periodic monitoring of the global encoder.
pub struct Monitor<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub knn_k: usize,
    pub every: usize,
}

impl Monitor<'_> {
    pub fn due(&self, round: usize, rounds: usize) -> bool {
        (self.every > 0 && (round + 1) % self.every == 0) || round + 1 == rounds
    }

    pub fn observe(&self, encoder: &Network, record: &mut RoundRecord) -> Result<()> {
        record.knn_acc = Some(eval::knn_eval(encoder, self.train, self.test, self.knn_k)?);
        record.collapse_stat = Some(eval::collapse_stat(encoder, &self.test.samples.view())?);
        Ok(())
    }
}

pub struct ExperimentOutput {
    pub global: NamedParams,
    pub records: Vec<RoundRecord>,
    /// Final online networks of every client, by id.
    pub client_params: Vec<NamedParams>,
}

/// Runs `cfg.rounds` rounds (`r = 0 .. R-1`) and returns the final global model.
pub fn run_experiment(cfg: FedConfig, client_data: Vec<Array2<f64>>, monitor: Option<&Monitor>) -> Result<ExperimentOutput> {
    let rounds = cfg.rounds;
    let mut fed = Federation::new(cfg, client_data)?;
    let mut records = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let mut rec = fed.run_round()?;
        if let Some(m) = monitor.filter(|m| m.due(rec.round, rounds)) {
            m.observe(&fed.global_encoder()?, &mut rec)?;
        }
        records.push(rec);
    }
    let client_params = fed.server.clients.iter().map(|c| c.nets.online_params()).collect();
    Ok(ExperimentOutput { global: fed.server.global, records, client_params })
}
