//! Client–edge–cloud federated training.
//!
//! Each round the cloud samples `⌈C·K⌉` edges. A selected edge downloads the
//! cloud model, asks each of its clients for the images they are uncertain
//! about, trains on its accumulated buffer for `E` epochs and reports its
//! parameters together with the buffer's mean uncertainty `alpha_E` and
//! size `n_k`. The cloud combines the reports with uncertainty-weighted
//! averaging (weights `e^alpha_k · n_k`, normalized) or plain FedAvg.
//!
//! Every random draw comes from a stream derived from `(seed, round, edge,
//! client)`, and results are reduced in edge-id order, so a trajectory is a
//! pure function of its configuration and seed regardless of scheduling.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{MetricsSink, RoundMetrics};
use crate::nn::{evaluate, init_params, loss_and_grads, ModelParams, NetworkSpec};
use crate::rng::{tag, RngStream};
use crate::uncertainty::{client_upload, ClientConfig, ClientUpload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Uwaa,
    Fedavg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UwaaWeighting {
    /// `e^alpha_k · n_k / n`, rescaled to sum to one.
    #[default]
    Normalized,
    /// `e^alpha_k · n_k / n` as is; the weights sum to more than one
    /// whenever any `alpha_k > 0`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferMode {
    /// Uploads accumulate at the edge across rounds.
    #[default]
    Persistent,
    /// The edge trains only on what was uploaded in the current round.
    PerRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    /// Number of edge servers, `K`.
    pub edges: usize,
    /// Number of clients, `N`.
    pub clients: usize,
    /// Fraction of edges selected per round, `C`.
    pub participation: f64,
    /// Local epochs per round, `E`.
    pub local_epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub client: ClientConfig,
    /// Maximum rounds, `T`.
    pub rounds: usize,
    pub aggregator: Aggregator,
    pub uwaa_weighting: UwaaWeighting,
    pub buffer_mode: BufferMode,
    /// Stop as soon as the cloud model reaches this accuracy.
    pub stop_at: Option<f64>,
    /// Rounds (epoch groups for the baselines) trained on texture feature
    /// maps before switching to raw images.
    pub pretrain_rounds: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            edges: 10,
            clients: 50,
            participation: 0.3,
            local_epochs: 5,
            learning_rate: 0.01,
            batch_size: 32,
            client: ClientConfig::default(),
            rounds: 200,
            aggregator: Aggregator::Uwaa,
            uwaa_weighting: UwaaWeighting::Normalized,
            buffer_mode: BufferMode::Persistent,
            stop_at: None,
            pretrain_rounds: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.edges == 0 || self.clients == 0 {
            return Err(Error::invalid("K (edges) and N (clients) must be >= 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::invalid(format!(
                "participation C = {} outside (0, 1]",
                self.participation
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("E (local epochs) must be >= 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid("learning rate must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        self.client.validate()
    }

    /// `⌈C·K⌉`, robust to `C·K` landing a rounding error above an integer.
    pub fn edges_per_round(&self) -> usize {
        let raw = self.participation * self.edges as f64;
        ((raw - 1e-9).ceil() as usize).clamp(1, self.edges)
    }
}

/// Training data, evaluation data and the client split shared by every
/// training method.
#[derive(Debug, Clone)]
pub struct FederatedSetup {
    pub spec: NetworkSpec,
    pub train: LabeledDataset,
    /// Sample indices into `train`, one list per client.
    pub clients: Vec<Vec<usize>>,
    pub eval: LabeledDataset,
    /// Texture-map version of `train` (same indexing), used while
    /// pretraining.
    pub features: Option<LabeledDataset>,
}

impl FederatedSetup {
    fn training_data(&self, round: usize, cfg: &FederationConfig) -> Result<&LabeledDataset> {
        if round < cfg.pretrain_rounds {
            self.features
                .as_ref()
                .ok_or_else(|| Error::invalid("pretraining requested without feature maps"))
        } else {
            Ok(&self.train)
        }
    }

    fn image_bytes(&self) -> u64 {
        let (h, w, c) = self.train.image_shape();
        (h * w * c * 4) as u64
    }
}

/// Round-robin client-to-edge assignment: client `n` belongs to edge `n % K`.
pub fn assign_clients(clients: usize, edges: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); edges];
    for n in 0..clients {
        out[n % edges].push(n);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeState {
    pub edge_id: usize,
    pub client_ids: Vec<usize>,
    /// Uploaded sample ids with their most recent uncertainty.
    pub buffer: BTreeMap<usize, f64>,
    pub local_params: Option<ModelParams>,
    pub alpha_e: f64,
}

impl EdgeState {
    pub fn new(edge_id: usize, client_ids: Vec<usize>) -> Self {
        Self {
            edge_id,
            client_ids,
            buffer: BTreeMap::new(),
            local_params: None,
            alpha_e: 0.0,
        }
    }

    pub fn buffer_mean_alpha(&self) -> f64 {
        if self.buffer.is_empty() {
            0.0
        } else {
            self.buffer.values().sum::<f64>() / self.buffer.len() as f64
        }
    }
}

/// What an edge reports to the cloud after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeResult {
    pub edge_id: usize,
    pub params: ModelParams,
    pub alpha_e: f64,
    pub n_k: usize,
}

#[derive(Debug, Clone)]
pub struct EdgeOutcome {
    pub edge_id: usize,
    /// `None` when the edge's buffer was empty and it sat the round out.
    pub result: Option<EdgeResult>,
    pub uploads: Vec<ClientUpload>,
}

/// Stream for the SGD shuffles and dropout masks of `worker` in `round`.
/// Shared by federated edges and both baselines, so a single edge holding
/// all data trains exactly like centralized SGD.
fn training_stream(root: &RngStream, round: usize, worker: usize) -> RngStream {
    root.derive(&[tag::EDGE, round as u64, worker as u64])
        .derive(&[tag::TRAIN])
}

fn client_stream(root: &RngStream, round: usize, edge: usize, client: usize) -> RngStream {
    root.derive(&[tag::EDGE, round as u64, edge as u64])
        .derive(&[tag::CLIENT, client as u64])
}

/// `epochs` passes of shuffled mini-batch SGD over `samples`.
#[allow(clippy::too_many_arguments)]
pub fn train_sgd(
    spec: &NetworkSpec,
    mut params: ModelParams,
    dataset: &LabeledDataset,
    samples: &[usize],
    epochs: usize,
    eta: f32,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<ModelParams> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to train on"));
    }
    let mut order = samples.to_vec();
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let batch = dataset.batch(chunk)?;
            labels.clear();
            labels.extend(chunk.iter().map(|&i| dataset.labels()[i]));
            let (_, grads) = loss_and_grads(spec, &params, &batch, &labels, rng)?;
            params.sgd_step_in_place(&grads, eta);
        }
    }
    Ok(params)
}

/// One edge round: download the cloud model, collect client uploads, train.
pub fn edge_update(
    state: &mut EdgeState,
    omega_c: &ModelParams,
    cfg: &FederationConfig,
    setup: &FederatedSetup,
    round: usize,
    root: &RngStream,
) -> Result<EdgeOutcome> {
    omega_c.check_matches(&setup.spec)?;
    state.local_params = Some(omega_c.clone());
    if cfg.buffer_mode == BufferMode::PerRound {
        state.buffer.clear();
    }
    let mut uploads = Vec::with_capacity(state.client_ids.len());
    for &client in &state.client_ids {
        let local = setup
            .clients
            .get(client)
            .ok_or_else(|| Error::invalid(format!("edge {} lists unknown client {client}", state.edge_id)))?;
        let mut rng = client_stream(root, round, state.edge_id, client);
        let up = client_upload(client, &setup.spec, omega_c, &setup.train, local, &cfg.client, &mut rng)?;
        state.buffer.extend(up.dict.entries.iter().map(|(&k, &v)| (k, v)));
        uploads.push(up);
    }
    if state.buffer.is_empty() {
        return Ok(EdgeOutcome {
            edge_id: state.edge_id,
            result: None,
            uploads,
        });
    }
    let samples: Vec<usize> = state.buffer.keys().copied().collect();
    let mut rng = training_stream(root, round, state.edge_id);
    let params = train_sgd(
        &setup.spec,
        omega_c.clone(),
        setup.training_data(round, cfg)?,
        &samples,
        cfg.local_epochs,
        cfg.learning_rate,
        cfg.batch_size,
        &mut rng,
    )?;
    state.alpha_e = state.buffer_mean_alpha();
    state.local_params = Some(params.clone());
    Ok(EdgeOutcome {
        edge_id: state.edge_id,
        result: Some(EdgeResult {
            edge_id: state.edge_id,
            params,
            alpha_e: state.alpha_e,
            n_k: samples.len(),
        }),
        uploads,
    })
}

/// Aggregation weights `e^alpha_k · n_k / n`, normalized to sum to one
/// unless `weighting` is [`UwaaWeighting::Literal`].
pub fn uwaa_weights(results: &[EdgeResult], weighting: UwaaWeighting) -> Result<Vec<f64>> {
    if results.is_empty() {
        return Err(Error::invalid("no edge results to aggregate"));
    }
    let n: f64 = results.iter().map(|r| r.n_k as f64).sum();
    if n <= 0.0 {
        return Err(Error::invalid("edge results carry no samples"));
    }
    Ok(match weighting {
        // The common 1/n cancels under normalization; dropping it keeps the
        // all-zero-alpha case bit-identical to FedAvg's n_k / n.
        UwaaWeighting::Normalized => {
            let raw: Vec<f64> = results.iter().map(|r| r.alpha_e.exp() * r.n_k as f64).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / total).collect()
        }
        UwaaWeighting::Literal => results.iter().map(|r| r.alpha_e.exp() * (r.n_k as f64 / n)).collect(),
    })
}

pub fn uwaa_aggregate(results: &[EdgeResult], weighting: UwaaWeighting) -> Result<ModelParams> {
    let weights = uwaa_weights(results, weighting)?;
    let items: Vec<(&ModelParams, f64)> = results.iter().map(|r| &r.params).zip(weights).collect();
    ModelParams::weighted_sum(&items)
}

/// `Σ (n_k / n) · params_k`.
pub fn fedavg_aggregate(results: &[(&ModelParams, usize)]) -> Result<ModelParams> {
    if results.is_empty() {
        return Err(Error::invalid("no edge results to aggregate"));
    }
    let n: usize = results.iter().map(|(_, n_k)| n_k).sum();
    if n == 0 {
        return Err(Error::invalid("edge results carry no samples"));
    }
    let items: Vec<(&ModelParams, f64)> = results.iter().map(|&(p, n_k)| (p, n_k as f64 / n as f64)).collect();
    ModelParams::weighted_sum(&items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub edge_id: usize,
    pub n_k: usize,
    pub alpha_e: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    /// Empty when every selected edge skipped.
    pub contributions: Vec<Contribution>,
}

#[derive(Debug, Clone)]
pub struct CloudState {
    /// Rounds completed.
    pub round: usize,
    pub omega_c: ModelParams,
    pub history: Vec<AggregationRecord>,
}

fn check_setup(cfg: &FederationConfig, setup: &FederatedSetup) -> Result<()> {
    cfg.validate()?;
    if setup.clients.len() != cfg.clients {
        return Err(Error::invalid(format!(
            "config has N = {} clients but the partition has {}",
            cfg.clients,
            setup.clients.len()
        )));
    }
    if cfg.edges > cfg.clients {
        return Err(Error::invalid(format!(
            "K = {} edges cannot all be served by N = {} clients",
            cfg.edges, cfg.clients
        )));
    }
    if setup.train.image_shape() != setup.spec.input_shape() {
        return Err(Error::invalid("dataset images do not match the network input"));
    }
    if setup.eval.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    if cfg.pretrain_rounds > 0 && setup.features.is_none() {
        return Err(Error::invalid("pretraining requested without feature maps"));
    }
    Ok(())
}

/// Called after every round with the round's metrics and the new cloud
/// model.
pub type RoundHook<'a> = dyn FnMut(&RoundMetrics, &ModelParams) -> Result<()> + 'a;

/// The cloud round loop.
pub fn cloud_execute(
    cfg: &FederationConfig,
    setup: &FederatedSetup,
    seed: u64,
    sink: &mut MetricsSink,
    on_round: &mut RoundHook<'_>,
) -> Result<CloudState> {
    check_setup(cfg, setup)?;
    let root = RngStream::new(seed, 0);
    let mut omega_c = init_params(&setup.spec, &mut root.derive(&[tag::INIT]));
    let mut edges: Vec<EdgeState> = assign_clients(cfg.clients, cfg.edges)
        .into_iter()
        .enumerate()
        .map(|(k, clients)| EdgeState::new(k, clients))
        .collect();
    let per_round = cfg.edges_per_round();
    let params_bytes = omega_c.serialized_len() as u64;
    let mut history = Vec::new();
    let mut completed = 0;

    for t in 0..cfg.rounds {
        let mut select_rng = root.derive(&[tag::SELECT, t as u64]);
        let mut selected = index::sample(&mut select_rng, cfg.edges, per_round).into_vec();
        selected.sort_unstable();

        let round_start = &omega_c;
        let outcomes: Vec<EdgeOutcome> = edges
            .par_iter_mut()
            .filter(|e| selected.binary_search(&e.edge_id).is_ok())
            .map(|e| edge_update(e, round_start, cfg, setup, t, &root))
            .collect::<Result<_>>()?;

        let results: Vec<EdgeResult> = outcomes.iter().filter_map(|o| o.result.clone()).collect();
        let mut contributions = Vec::new();
        if !results.is_empty() {
            let weights = match cfg.aggregator {
                Aggregator::Uwaa => uwaa_weights(&results, cfg.uwaa_weighting)?,
                Aggregator::Fedavg => {
                    let n: usize = results.iter().map(|r| r.n_k).sum();
                    results.iter().map(|r| r.n_k as f64 / n as f64).collect()
                }
            };
            let items: Vec<(&ModelParams, f64)> =
                results.iter().map(|r| &r.params).zip(weights.iter().copied()).collect();
            omega_c = ModelParams::weighted_sum(&items)?;
            contributions = results
                .iter()
                .zip(&weights)
                .map(|(r, &weight)| Contribution {
                    edge_id: r.edge_id,
                    n_k: r.n_k,
                    alpha_e: r.alpha_e,
                    weight,
                })
                .collect();
        }

        let accuracy = evaluate(&setup.spec, &omega_c, &setup.eval)?;
        let mut uploads_images = 0u64;
        let mut candidate_images = 0u64;
        let mut alpha_sum = 0.0;
        let mut scored = 0usize;
        for up in outcomes.iter().flat_map(|o| &o.uploads) {
            uploads_images += up.dict.len() as u64;
            candidate_images += up.records.len() as u64;
            alpha_sum += up.records.iter().map(|r| r.alpha).sum::<f64>();
            scored += up.records.len();
        }
        let metrics = RoundMetrics {
            round: t,
            accuracy,
            uploads_images,
            uploads_bytes: uploads_images * setup.image_bytes(),
            // every selected edge downloads; edges that trained also upload
            params_bytes_exchanged: params_bytes * (selected.len() + results.len()) as u64,
            selected_edges: selected.clone(),
            mean_alpha: if scored == 0 { 0.0 } else { alpha_sum / scored as f64 },
            candidate_images,
        };
        for o in outcomes {
            for up in o.uploads {
                sink.record_uncertainty(t, up.client_id, up.records);
            }
        }
        on_round(&metrics, &omega_c)?;
        sink.record_round(metrics)?;
        history.push(AggregationRecord {
            round: t,
            selected,
            contributions,
        });
        completed = t + 1;
        if cfg.stop_at.is_some_and(|target| accuracy >= target) {
            break;
        }
    }

    Ok(CloudState {
        round: completed,
        omega_c,
        history,
    })
}

/// Centralized mini-batch SGD on the union of all client data. Each
/// "round" is `E` epochs, so trajectories line up with federated rounds.
pub fn run_centralized_sgd(
    cfg: &FederationConfig,
    setup: &FederatedSetup,
    seed: u64,
    sink: &mut MetricsSink,
) -> Result<ModelParams> {
    let mut samples: Vec<usize> = setup.clients.iter().flatten().copied().collect();
    samples.sort_unstable();
    samples.dedup();
    if samples.is_empty() {
        return Err(Error::invalid("centralized training on an empty dataset"));
    }
    check_setup(cfg, setup)?;
    let root = RngStream::new(seed, 0);
    let mut params = init_params(&setup.spec, &mut root.derive(&[tag::INIT]));
    for t in 0..cfg.rounds {
        let mut rng = training_stream(&root, t, 0);
        params = train_sgd(
            &setup.spec,
            params,
            setup.training_data(t, cfg)?,
            &samples,
            cfg.local_epochs,
            cfg.learning_rate,
            cfg.batch_size,
            &mut rng,
        )?;
        let accuracy = evaluate(&setup.spec, &params, &setup.eval)?;
        // all data is collected once, up front
        let uploaded = if t == 0 { samples.len() as u64 } else { 0 };
        sink.record_round(RoundMetrics {
            round: t,
            accuracy,
            uploads_images: uploaded,
            uploads_bytes: uploaded * setup.image_bytes(),
            params_bytes_exchanged: 0,
            selected_edges: Vec::new(),
            mean_alpha: 0.0,
            candidate_images: uploaded,
        })?;
        if cfg.stop_at.is_some_and(|target| accuracy >= target) {
            break;
        }
    }
    Ok(params)
}

/// Per-edge accuracy trajectories of independent SGD on each edge's own
/// clients' data; nothing is ever aggregated.
pub fn run_standalone_sgd(cfg: &FederationConfig, setup: &FederatedSetup, seed: u64) -> Result<Vec<Vec<RoundMetrics>>> {
    check_setup(cfg, setup)?;
    let root = RngStream::new(seed, 0);
    let init = init_params(&setup.spec, &mut root.derive(&[tag::INIT]));
    let assignment = assign_clients(cfg.clients, cfg.edges);
    assignment
        .par_iter()
        .enumerate()
        .map(|(k, clients)| {
            let mut samples: Vec<usize> = clients.iter().flat_map(|&c| setup.clients[c].iter().copied()).collect();
            samples.sort_unstable();
            samples.dedup();
            let mut params = init.clone();
            let mut rounds = Vec::with_capacity(cfg.rounds);
            for t in 0..cfg.rounds {
                let mut rng = training_stream(&root, t, k);
                params = train_sgd(
                    &setup.spec,
                    params,
                    setup.training_data(t, cfg)?,
                    &samples,
                    cfg.local_epochs,
                    cfg.learning_rate,
                    cfg.batch_size,
                    &mut rng,
                )?;
                rounds.push(RoundMetrics {
                    round: t,
                    accuracy: evaluate(&setup.spec, &params, &setup.eval)?,
                    uploads_images: 0,
                    uploads_bytes: 0,
                    params_bytes_exchanged: 0,
                    selected_edges: vec![k],
                    mean_alpha: 0.0,
                    candidate_images: 0,
                });
            }
            Ok(rounds)
        })
        .collect()
}

/// Collapses per-edge standalone trajectories into one with the mean
/// accuracy per round.
pub fn mean_trajectory(per_edge: &[Vec<RoundMetrics>]) -> Vec<RoundMetrics> {
    let rounds = per_edge.iter().map(Vec::len).min().unwrap_or(0);
    (0..rounds)
        .map(|t| RoundMetrics {
            round: t,
            accuracy: per_edge.iter().map(|e| e[t].accuracy).sum::<f64>() / per_edge.len() as f64,
            uploads_images: 0,
            uploads_bytes: 0,
            params_bytes_exchanged: 0,
            selected_edges: (0..per_edge.len()).collect(),
            mean_alpha: 0.0,
            candidate_images: 0,
        })
        .collect()
}
