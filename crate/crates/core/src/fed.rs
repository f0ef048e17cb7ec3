//! Federation simulation.
//!
//! Runs prototype-based fine-tuning and the baselines on one shared
//! [`Environment`], with early stopping over communication rounds and a
//! byte-level log of every transmission.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    accuracy, build_head, few_shot_select, local_adapt, mean_ce_loss, predict, train_epoch,
    train_global_adapter, Adapter, AdapterKind, ClassificationHead, HeadMode, Regularizers,
    TrainConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{AccuracyMatrix, ErrorBoundReport};
use crate::prototype::{
    apply_dp_noise, divergence_stats, mean_sampling, sample_prototypes, ClientPrototypes,
    DivergenceReport, PrototypeDataset, SamplingMethod,
};
use crate::rng::{self, purpose};
use crate::tensor::{softmax_cross_entropy, squared_distance, Optimizer};
use crate::world::{DomainDataset, Federation, Part, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Mpft,
    Local,
    Fedavg,
    Fedprox,
    ProtoAvg,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Mpft,
        Method::Local,
        Method::Fedavg,
        Method::Fedprox,
        Method::ProtoAvg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mpft => "mpft",
            Method::Local => "local",
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
            Method::ProtoAvg => "proto_avg",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "fl.method",
                    format!("unknown method `{s}`; expected one of mpft, local, fedavg, fedprox, proto_avg"),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FLConfig {
    pub method: Method,
    pub sampling: SamplingMethod,
    /// Sampling rate `r`; required by cluster and random sampling.
    pub rate: Option<f64>,
    pub max_global_rounds: usize,
    pub warmup_rounds: usize,
    pub patience: usize,
    pub local_epochs: usize,
    pub fedprox_mu: f64,
    /// Gaussian perturbation `q·N(0, s²)` on uploaded prototypes; off when
    /// either is zero.
    pub dp_q: f64,
    pub dp_s: f64,
    /// Few-shot local adaptation of the global adapter after an MPFT run.
    pub adapt: bool,
    /// Constants of the divergence error bounds.
    pub bound_alpha: f64,
    pub bound_beta: f64,
    /// Run seed: adapter initialisation, sampling, batching and noise.
    pub seed: u64,
}

impl Default for FLConfig {
    fn default() -> Self {
        Self {
            method: Method::Mpft,
            sampling: SamplingMethod::Mean,
            rate: None,
            max_global_rounds: 200,
            warmup_rounds: 10,
            patience: 10,
            local_epochs: 1,
            fedprox_mu: 5.0,
            dp_q: 0.0,
            dp_s: 0.0,
            adapt: false,
            bound_alpha: 1.0,
            bound_beta: 1.0,
            seed: 0,
        }
    }
}

impl FLConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.sampling, self.rate) {
            (SamplingMethod::Mean, _) => {}
            (_, None) => {
                return Err(Error::config(
                    "fl.rate",
                    "cluster and random sampling require a sampling rate",
                ))
            }
            (_, Some(r)) if !(r > 0.0 && r <= 1.0) => {
                return Err(Error::config("fl.rate", format!("sampling rate {r} outside (0, 1]")))
            }
            _ => {}
        }
        if self.max_global_rounds == 0 {
            return Err(Error::config("fl.max_global_rounds", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("fl.local_epochs", "must be at least 1"));
        }
        if !(self.fedprox_mu >= 0.0) {
            return Err(Error::config("fl.fedprox_mu", "must be non-negative"));
        }
        if !(self.dp_q >= 0.0) {
            return Err(Error::config("fl.dp_q", "must be non-negative"));
        }
        if !(self.dp_s >= 0.0) {
            return Err(Error::config("fl.dp_s", "must be non-negative"));
        }
        Ok(())
    }

    fn train_for_run(&self, train: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..train.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AdapterChoice {
    Linear,
    #[default]
    Bottleneck,
}

/// Adapter and head architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub adapter: AdapterChoice,
    /// Linear adapter bias.
    pub bias: bool,
    /// Bottleneck width; defaults to `d_emb / 4`.
    pub hidden: Option<usize>,
    pub residual: f64,
    pub head: HeadMode,
    pub temperature: f64,
    pub head_variants: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            adapter: AdapterChoice::Bottleneck,
            bias: true,
            hidden: None,
            residual: 0.2,
            head: HeadMode::Cosine,
            temperature: 100.0,
            head_variants: 4,
        }
    }
}

impl ModelConfig {
    pub fn adapter_kind(&self, d_emb: usize) -> AdapterKind {
        match self.adapter {
            AdapterChoice::Linear => AdapterKind::Linear { bias: self.bias },
            AdapterChoice::Bottleneck => AdapterKind::Bottleneck {
                hidden: self.hidden.unwrap_or((d_emb / 4).max(1)),
                residual: self.residual,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == Some(0) {
            return Err(Error::config("model.hidden", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.residual) {
            return Err(Error::config("model.residual", "must lie in [0, 1]"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("model.temperature", "must be positive"));
        }
        if self.head_variants == 0 {
            return Err(Error::config("model.head_variants", "must be positive"));
        }
        Ok(())
    }
}

/// One client's embedded data, split into its three parts.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub client_id: usize,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Everything a run needs that does not depend on the method: embedded
/// client data, the frozen head and the adapter architecture.
#[derive(Debug, Clone)]
pub struct Environment {
    pub classes: usize,
    pub d_emb: usize,
    pub clients: Vec<ClientData>,
    pub head: ClassificationHead,
    pub adapter_kind: AdapterKind,
}

impl Environment {
    /// Embeds the federation and builds the head from `head_seed`.
    pub fn new(federation: &Federation, model: &ModelConfig, head_seed: u64) -> Result<Self> {
        let embedded = federation.embedded()?;
        Self::from_datasets(&embedded, federation.classes, model, head_seed)
    }

    /// Datasets must already live in embedding space.
    pub fn from_datasets(
        datasets: &[DomainDataset],
        classes: usize,
        model: &ModelConfig,
        head_seed: u64,
    ) -> Result<Self> {
        model.validate()?;
        let d_emb = datasets
            .iter()
            .find_map(|d| d.samples.first())
            .map(|s| s.x.len())
            .ok_or_else(|| Error::domain("federation holds no samples"))?;
        let head = build_head(classes, d_emb, head_seed, model.head_variants, model.head, model.temperature)?;
        Ok(Self::with_head(datasets, head, model.adapter_kind(d_emb)))
    }

    pub fn with_head(datasets: &[DomainDataset], head: ClassificationHead, adapter_kind: AdapterKind) -> Self {
        let clients = datasets
            .iter()
            .map(|d| ClientData {
                client_id: d.client_id,
                train: d.part(Part::Train),
                validation: d.part(Part::Validation),
                test: d.part(Part::Test),
            })
            .collect();
        Self {
            classes: head.classes(),
            d_emb: head.dim(),
            clients,
            head,
            adapter_kind,
        }
    }

    pub fn size(&self) -> usize {
        self.clients.len()
    }

    fn initial_adapter(&self, seed: u64) -> Result<Adapter> {
        Adapter::init(
            self.adapter_kind,
            self.d_emb,
            &mut rng::stream(seed, &[purpose::ADAPTER_INIT]),
        )
    }

    fn train_weights(&self, members: &[usize]) -> Result<Vec<f64>> {
        let total: usize = members.iter().map(|&i| self.clients[i].train.len()).sum();
        if total == 0 {
            return Err(Error::domain("no training samples among participating clients"));
        }
        Ok(members
            .iter()
            .map(|&i| self.clients[i].train.len() as f64 / total as f64)
            .collect())
    }
}

/// Worker count: `MPFT_THREADS` when set, otherwise the machine's
/// parallelism.
pub fn thread_count() -> usize {
    std::env::var("MPFT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn with_pool<T: Send>(job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::domain(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(job))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Upload,
    Download,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransmissionEvent {
    pub event: EventKind,
    pub sender: String,
    pub receiver: String,
    pub bytes: u64,
    pub round: usize,
}

impl TransmissionEvent {
    fn upload(client: usize, bytes: u64, round: usize) -> Self {
        Self {
            event: EventKind::Upload,
            sender: format!("client-{client}"),
            receiver: "server".into(),
            bytes,
            round,
        }
    }

    fn download(client: usize, bytes: u64, round: usize) -> Self {
        Self {
            event: EventKind::Download,
            sender: "server".into(),
            receiver: format!("client-{client}"),
            bytes,
            round,
        }
    }
}

/// Transmission log as JSON lines.
pub fn events_to_jsonl(events: &[TransmissionEvent]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

/// `R × N × 2Σ`: every round each client uploads and downloads one model.
pub fn model_exchange_bytes(rounds: u64, clients: u64, model_bytes: u64) -> u64 {
    rounds * clients * 2 * model_bytes
}

/// `Σ_i Π_i + N × Σ`: one prototype upload per client, one model broadcast.
pub fn one_shot_bytes(prototype_bytes: &[u64], model_bytes: u64) -> u64 {
    prototype_bytes.iter().sum::<u64>() + prototype_bytes.len() as u64 * model_bytes
}

/// `R × (Σ_i Π_i + N × Π_global)`. Equals `R × N × 2Π` when every upload
/// has the global payload's size.
pub fn prototype_exchange_bytes(rounds: u64, upload_bytes: &[u64], download_bytes: u64) -> u64 {
    rounds * (upload_bytes.iter().sum::<u64>() + upload_bytes.len() as u64 * download_bytes)
}

/// Closed-form communication cost of a method, evaluated on actual
/// payload sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "formula", rename_all = "snake_case")]
pub enum CostFormula {
    None,
    ModelExchange { rounds: u64, clients: u64, model_bytes: u64 },
    OneShot { prototype_bytes: Vec<u64>, model_bytes: u64 },
    PrototypeExchange { rounds: u64, upload_bytes: Vec<u64>, download_bytes: u64 },
}

impl CostFormula {
    pub fn evaluate(&self) -> u64 {
        match self {
            CostFormula::None => 0,
            CostFormula::ModelExchange { rounds, clients, model_bytes } => {
                model_exchange_bytes(*rounds, *clients, *model_bytes)
            }
            CostFormula::OneShot { prototype_bytes, model_bytes } => one_shot_bytes(prototype_bytes, *model_bytes),
            CostFormula::PrototypeExchange {
                rounds,
                upload_bytes,
                download_bytes,
            } => prototype_exchange_bytes(*rounds, upload_bytes, *download_bytes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub total_bytes: u64,
    pub events: usize,
    pub formula: CostFormula,
}

/// Sums the logged bytes and checks them against the closed form.
pub fn account_costs(events: &[TransmissionEvent], formula: CostFormula) -> Result<CostSummary> {
    let sum = |kind| {
        events
            .iter()
            .filter(|e| e.event == kind)
            .map(|e| e.bytes)
            .sum::<u64>()
    };
    let uplink = sum(EventKind::Upload);
    let downlink = sum(EventKind::Download);
    let expected = formula.evaluate();
    if uplink + downlink != expected {
        return Err(Error::domain(format!(
            "logged {} bytes but the closed form gives {expected}",
            uplink + downlink
        )));
    }
    Ok(CostSummary {
        uplink_bytes: uplink,
        downlink_bytes: downlink,
        total_bytes: uplink + downlink,
        events: events.len(),
        formula,
    })
}

/// Best-validation tracking with warmup and patience. Rounds are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    warmup: usize,
    patience: usize,
    best: f64,
    best_round: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(warmup: usize, patience: usize) -> Self {
        Self {
            warmup,
            patience,
            best: f64::INFINITY,
            best_round: 0,
            stale: 0,
        }
    }

    /// Records round `round`'s loss. Returns `(improved, stop_now)`.
    pub fn observe(&mut self, round: usize, loss: f64) -> (bool, bool) {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_round = round;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, round > self.warmup && self.stale >= self.patience)
    }

    pub fn best_round(&self) -> usize {
        self.best_round
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// Replays a validation history. Returns whether the last round triggers a
/// stop and the best round so far (1-based, 0 for an empty history).
pub fn early_stopping(val_loss_history: &[f64], warmup: usize, patience: usize) -> (bool, usize) {
    let mut es = EarlyStopping::new(warmup, patience);
    let mut stop = false;
    for (t, &l) in val_loss_history.iter().enumerate() {
        stop = es.observe(t + 1, l).1;
    }
    (stop, es.best_round())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WallTime {
    pub total_secs: f64,
    pub sampling_secs: f64,
    pub server_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndOod {
    pub ind: f64,
    pub ood: Option<f64>,
}

impl IndOod {
    fn of(m: &AccuracyMatrix) -> Self {
        Self {
            ind: m.ind(),
            ood: m.ood().ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub kd_weight: f64,
    pub few_shot: usize,
    pub global: IndOod,
    pub adapted: IndOod,
    /// Out-of-domain accuracy lost by adapting.
    pub forgetting: Option<f64>,
    /// In-domain accuracy gained by adapting.
    pub ind_gain: f64,
    /// `‖A^L_i − A^G‖_F` per client.
    pub drift: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub method: Method,
    pub sampling: Option<SamplingMethod>,
    pub rate: Option<f64>,
    pub clients: usize,
    pub seed: u64,
    /// Communication rounds.
    pub rounds_used: usize,
    pub best_round: usize,
    pub stop_round: usize,
    /// Per-round validation losses, client-size weighted.
    pub val_losses: Vec<f64>,
    pub accuracy: AccuracyMatrix,
    pub ind_acc: f64,
    pub ood_acc: Option<f64>,
    pub per_domain_acc: Vec<f64>,
    pub comm_bytes: u64,
    pub costs: CostSummary,
    pub prototype_count: Option<usize>,
    pub server_loss_history: Vec<f64>,
    pub server_grad_norm_sq_history: Vec<f64>,
    /// Per participating client, the training loss of each round.
    pub client_loss_histories: Vec<Vec<f64>>,
    pub divergence: Option<DivergenceReport>,
    pub adaptation: Option<AdaptationReport>,
    pub error_bounds: Option<ErrorBoundReport>,
    pub wall_time: WallTime,
    #[serde(skip)]
    pub events: Vec<TransmissionEvent>,
    /// Final adapters: one global adapter, or one per client.
    #[serde(skip)]
    pub adapters: Vec<Adapter>,
}

impl RunReport {
    /// Report JSON with the `wall_time` field removed, for determinism
    /// comparisons.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("wall_time");
        }
        Ok(serde_json::to_string_pretty(&value)?)
    }
}

/// Dispatches on `fl.method`.
pub fn run(env: &Environment, fl: &FLConfig, train: &TrainConfig) -> Result<RunReport> {
    match fl.method {
        Method::Mpft => run_mpft(env, fl, train),
        Method::Local => run_local(env, fl, train),
        Method::Fedavg => run_fedavg(env, fl, train),
        Method::Fedprox => run_fedprox(env, fl, train),
        Method::ProtoAvg => run_proto_avg(env, fl, train),
    }
}

fn evaluate_with(env: &Environment, predict_row: impl Fn(usize, &[f64]) -> Result<usize> + Sync) -> Result<AccuracyMatrix> {
    let n = env.size();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            env.clients
                .iter()
                .map(|c| {
                    if c.test.is_empty() {
                        return Ok(0.0);
                    }
                    let mut hits = 0usize;
                    for s in &c.test {
                        if predict_row(i, &s.x)? == s.y {
                            hits += 1;
                        }
                    }
                    Ok(hits as f64 / c.test.len() as f64)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let counts = env.clients.iter().map(|c| c.test.len().max(1)).collect();
    AccuracyMatrix::new(rows, counts)
}

/// Row `i` uses `models[i]`, or the single model when one is given.
pub fn evaluate(env: &Environment, models: &[Adapter]) -> Result<AccuracyMatrix> {
    if models.len() != 1 && models.len() != env.size() {
        return Err(Error::domain("need one global model or one model per client"));
    }
    evaluate_with(env, |i, x| {
        let m = if models.len() == 1 { &models[0] } else { &models[i] };
        predict(m, &env.head, x)
    })
}

struct Rounds {
    best: Adapter,
    val_losses: Vec<f64>,
    best_round: usize,
    stop_round: usize,
    client_losses: Vec<Vec<f64>>,
    events: Vec<TransmissionEvent>,
}

/// Model-exchange rounds over `members`: local training from the current
/// global adapter, size-weighted averaging, early stopping on validation.
fn model_rounds(
    env: &Environment,
    members: &[usize],
    fl: &FLConfig,
    train: &TrainConfig,
    mu: f64,
    log_events: bool,
) -> Result<Rounds> {
    train.validate()?;
    let weights = env.train_weights(members)?;
    let mut global = env.initial_adapter(fl.seed)?;
    let bytes = global.checkpoint_bytes();
    let mut optimizers: Vec<Optimizer> = members.iter().map(|_| train.optimizer()).collect();
    let mut stopper = EarlyStopping::new(fl.warmup_rounds, fl.patience);
    let mut best = global.clone();
    let mut val_losses = Vec::new();
    let mut client_losses = vec![Vec::new(); members.len()];
    let mut events = Vec::new();
    let mut stop_round = 0;
    for round in 1..=fl.max_global_rounds {
        let anchor = global.clone();
        let results: Vec<(Adapter, f64)> = optimizers
            .par_iter_mut()
            .zip(members.par_iter())
            .map(|(opt, &i)| {
                let client = &env.clients[i];
                let mut local = anchor.clone();
                let mut rng = rng::stream(fl.seed, &[purpose::LOCAL, client.client_id as u64, round as u64]);
                let reg = Regularizers {
                    distill: None,
                    proximal: (mu > 0.0).then_some((&anchor, mu)),
                };
                let mut loss = 0.0;
                for _ in 0..fl.local_epochs {
                    loss = match train_epoch(&mut local, &env.head, &client.train, reg, opt, train.batch_size, &mut rng) {
                        Err(Error::NonFiniteGradient) => return Err(Error::Diverged { epoch: round }),
                        other => other?.loss.total,
                    };
                }
                Ok((local, loss))
            })
            .collect::<Result<_>>()?;
        for (k, (_, loss)) in results.iter().enumerate() {
            client_losses[k].push(*loss);
        }
        let locals: Vec<&Adapter> = results.iter().map(|(a, _)| a).collect();
        global = Adapter::weighted_average(&locals, &weights)?;
        if log_events {
            for &i in members {
                events.push(TransmissionEvent::upload(env.clients[i].client_id, bytes, round));
            }
            for &i in members {
                events.push(TransmissionEvent::download(env.clients[i].client_id, bytes, round));
            }
        }
        let val = validation_loss(env, members, &weights, |x| crate::adapter::forward(&global, &env.head, x))?;
        if !val.is_finite() {
            return Err(Error::Diverged { epoch: round });
        }
        val_losses.push(val);
        stop_round = round;
        let (improved, stop) = stopper.observe(round, val);
        if improved {
            best = global.clone();
        }
        if stop {
            break;
        }
    }
    Ok(Rounds {
        best,
        val_losses,
        best_round: stopper.best_round(),
        stop_round,
        client_losses,
        events,
    })
}

/// Size-weighted mean validation cross-entropy over clients that hold
/// validation data; falls back to training data when none do.
fn validation_loss(
    env: &Environment,
    members: &[usize],
    weights: &[f64],
    logits: impl Fn(&[f64]) -> Result<Vec<f64>> + Sync,
) -> Result<f64> {
    let any_val = members.iter().any(|&i| !env.clients[i].validation.is_empty());
    let parts: Vec<(f64, f64)> = members
        .par_iter()
        .zip(weights.par_iter())
        .map(|(&i, &w)| {
            let c = &env.clients[i];
            let data = if any_val { &c.validation } else { &c.train };
            if data.is_empty() {
                return Ok((0.0, 0.0));
            }
            let mut total = 0.0;
            for s in data {
                total += softmax_cross_entropy(&logits(&s.x)?, s.y)?.0;
            }
            Ok((w, w * total / data.len() as f64))
        })
        .collect::<Result<_>>()?;
    let wsum: f64 = parts.iter().map(|p| p.0).sum();
    Ok(parts.iter().map(|p| p.1).sum::<f64>() / wsum)
}

fn finish(
    env: &Environment,
    fl: &FLConfig,
    method: Method,
    accuracy: AccuracyMatrix,
    costs: CostSummary,
    started: Instant,
) -> RunReport {
    let ind_acc = accuracy.ind();
    let ood_acc = accuracy.ood().ok();
    RunReport {
        method,
        sampling: None,
        rate: None,
        clients: env.size(),
        seed: fl.seed,
        rounds_used: 0,
        best_round: 0,
        stop_round: 0,
        val_losses: Vec::new(),
        per_domain_acc: accuracy.per_domain(),
        accuracy,
        ind_acc,
        ood_acc,
        comm_bytes: costs.total_bytes,
        costs,
        prototype_count: None,
        server_loss_history: Vec::new(),
        server_grad_norm_sq_history: Vec::new(),
        client_loss_histories: Vec::new(),
        divergence: None,
        adaptation: None,
        error_bounds: None,
        wall_time: WallTime {
            total_secs: started.elapsed().as_secs_f64(),
            ..WallTime::default()
        },
        events: Vec::new(),
        adapters: Vec::new(),
    }
}

fn model_exchange_run(env: &Environment, fl: &FLConfig, train: &TrainConfig, method: Method, mu: f64) -> Result<RunReport> {
    fl.validate()?;
    let started = Instant::now();
    let train = fl.train_for_run(train);
    let members: Vec<usize> = (0..env.size()).collect();
    let rounds = with_pool(|| model_rounds(env, &members, fl, &train, mu, true))??;
    let accuracy = with_pool(|| evaluate(env, std::slice::from_ref(&rounds.best)))??;
    let costs = account_costs(
        &rounds.events,
        CostFormula::ModelExchange {
            rounds: rounds.stop_round as u64,
            clients: env.size() as u64,
            model_bytes: rounds.best.checkpoint_bytes(),
        },
    )?;
    let mut report = finish(env, fl, method, accuracy, costs, started);
    report.rounds_used = rounds.stop_round;
    report.best_round = rounds.best_round;
    report.stop_round = rounds.stop_round;
    report.val_losses = rounds.val_losses;
    report.client_loss_histories = rounds.client_losses;
    report.events = rounds.events;
    report.adapters = vec![rounds.best];
    report.wall_time.total_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// FedAvg with dataset-size weights.
pub fn run_fedavg(env: &Environment, fl: &FLConfig, train: &TrainConfig) -> Result<RunReport> {
    model_exchange_run(env, fl, train, Method::Fedavg, 0.0)
}

/// FedAvg with the proximal term `(μ/2)·‖A − A^G‖²` on every client.
pub fn run_fedprox(env: &Environment, fl: &FLConfig, train: &TrainConfig) -> Result<RunReport> {
    model_exchange_run(env, fl, train, Method::Fedprox, fl.fedprox_mu)
}

/// Each client trains its own adapter on its own data with the same round
/// loop and early stopping, and never communicates.
pub fn run_local(env: &Environment, fl: &FLConfig, train: &TrainConfig) -> Result<RunReport> {
    fl.validate()?;
    let started = Instant::now();
    let train = fl.train_for_run(train);
    let per_client: Vec<Rounds> = with_pool(|| {
        (0..env.size())
            .into_par_iter()
            .map(|i| model_rounds(env, &[i], fl, &train, 0.0, false))
            .collect::<Result<Vec<_>>>()
    })??;
    let adapters: Vec<Adapter> = per_client.iter().map(|r| r.best.clone()).collect();
    let accuracy = with_pool(|| evaluate(env, &adapters))??;
    let costs = account_costs(&[], CostFormula::None)?;
    let mut report = finish(env, fl, Method::Local, accuracy, costs, started);
    report.client_loss_histories = per_client.iter().map(|r| r.client_losses[0].clone()).collect();
    report.stop_round = per_client.iter().map(|r| r.stop_round).max().unwrap_or(0);
    report.adapters = adapters;
    report.wall_time.total_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Prototype sampling for every client, with optional DP noise.
pub fn client_prototypes(env: &Environment, fl: &FLConfig) -> Result<Vec<ClientPrototypes>> {
    fl.validate()?;
    let rate = fl.rate.unwrap_or(1.0);
    env.clients
        .par_iter()
        .map(|c| {
            let mut set = sample_prototypes(fl.sampling, rate, c.client_id, &c.train, env.classes, fl.seed)?;
            if fl.dp_q > 0.0 && fl.dp_s > 0.0 {
                let mut rng = rng::stream(fl.seed, &[purpose::DP, c.client_id as u64]);
                set.prototypes = apply_dp_noise(&set.prototypes, fl.dp_q, fl.dp_s, &mut rng)?;
            }
            Ok(set)
        })
        .collect()
}

/// One round: clients upload prototypes, the server trains the global
/// adapter on all of them and broadcasts it.
pub fn run_mpft(env: &Environment, fl: &FLConfig, train: &TrainConfig) -> Result<RunReport> {
    fl.validate()?;
    let started = Instant::now();
    let train = fl.train_for_run(train);
    train.validate()?;
    let n = env.size();
    let sets = with_pool(|| client_prototypes(env, fl))??;
    let sampling_secs = started.elapsed().as_secs_f64();

    let mut events = Vec::with_capacity(2 * n);
    let mut upload_bytes = Vec::with_capacity(n);
    for set in &sets {
        let bytes = set.payload(env.d_emb, env.classes, n).len() as u64;
        upload_bytes.push(bytes);
        events.push(TransmissionEvent::upload(set.client_id, bytes, 1));
    }
    let dataset = PrototypeDataset::from_clients(&sets, env.d_emb, env.classes);
    let expected: usize = sets.iter().map(|s| s.prototypes.len()).sum();
    if dataset.len() != expected {
        return Err(Error::domain("prototype dataset lost or merged prototypes"));
    }

    let server_start = Instant::now();
    let initial = env.initial_adapter(fl.seed)?;
    let outcome = train_global_adapter(&dataset, &env.head, initial, &train)?;
    let server_secs = server_start.elapsed().as_secs_f64();
    let global = outcome.adapter;
    let model_bytes = global.checkpoint_bytes();
    for set in &sets {
        events.push(TransmissionEvent::download(set.client_id, model_bytes, 1));
    }
    let costs = account_costs(
        &events,
        CostFormula::OneShot {
            prototype_bytes: upload_bytes,
            model_bytes,
        },
    )?;

    let members: Vec<usize> = (0..n).collect();
    let weights = env.train_weights(&members)?;
    let val = with_pool(|| validation_loss(env, &members, &weights, |x| crate::adapter::forward(&global, &env.head, x)))??;
    let global_acc = with_pool(|| evaluate(env, std::slice::from_ref(&global)))??;

    let (accuracy, adaptation, adapters) = if fl.adapt {
        let adapted: Vec<Adapter> = with_pool(|| {
            env.clients
                .par_iter()
                .map(|c| {
                    let shots = few_shot_select(
                        &c.train,
                        env.classes,
                        train.few_shot,
                        &mut rng::stream(fl.seed, &[purpose::FEW_SHOT, c.client_id as u64]),
                    );
                    let mut rng = rng::stream(fl.seed, &[purpose::ADAPT, c.client_id as u64]);
                    Ok(local_adapt(&global, &env.head, &shots, train.kd_weight, &train, &mut rng)?.adapter)
                })
                .collect::<Result<Vec<_>>>()
        })??;
        let adapted_acc = with_pool(|| evaluate(env, &adapted))??;
        let g = IndOod::of(&global_acc);
        let a = IndOod::of(&adapted_acc);
        let report = AdaptationReport {
            kd_weight: train.kd_weight,
            few_shot: train.few_shot,
            forgetting: g.ood.zip(a.ood).map(|(g, a)| g - a),
            ind_gain: a.ind - g.ind,
            global: g,
            adapted: a,
            drift: adapted.iter().map(|l| l.distance(&global)).collect(),
        };
        (adapted_acc, Some(report), adapted)
    } else {
        (global_acc, None, vec![global])
    };

    let mut report = finish(env, fl, Method::Mpft, accuracy, costs, started);
    report.sampling = Some(fl.sampling);
    report.rate = fl.rate;
    report.rounds_used = 1;
    report.best_round = 1;
    report.stop_round = 1;
    report.val_losses = vec![val];
    report.prototype_count = Some(dataset.len());
    report.server_loss_history = outcome.loss_history;
    report.server_grad_norm_sq_history = outcome.grad_norm_sq_history;
    report.divergence = Some(divergence_stats(&dataset));
    report.adaptation = adaptation;
    report.events = events;
    report.adapters = adapters;
    report.wall_time = WallTime {
        total_secs: started.elapsed().as_secs_f64(),
        sampling_secs,
        server_secs,
    };
    Ok(report)
}

/// Per-class average of client mean prototypes, weighting clients equally.
/// Classes nobody holds stay `None`.
pub fn average_prototypes(sets: &[ClientPrototypes], classes: usize, d_emb: usize) -> Vec<Option<Vec<f64>>> {
    (0..classes)
        .map(|k| {
            let members: Vec<&[f64]> = sets
                .iter()
                .flat_map(|s| s.prototypes.iter().filter(|p| p.class_id == k))
                .map(|p| p.vec.as_slice())
                .collect();
            if members.is_empty() {
                return None;
            }
            let mut acc = vec![0.0; d_emb];
            for m in &members {
                acc.iter_mut().zip(m.iter()).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= members.len() as f64);
            Some(acc)
        })
        .collect()
}

/// Nearest-prototype logits `−‖e − g_k‖²`; classes without a prototype get
/// `−∞`-like logits.
pub fn prototype_logits(global: &[Option<Vec<f64>>], e: &[f64]) -> Vec<f64> {
    global
        .iter()
        .map(|g| g.as_ref().map_or(-1e30, |g| -squared_distance(e, g)))
        .collect()
}

/// Clients exchange class-mean prototypes every round and classify by the
/// nearest averaged prototype.
pub fn run_proto_avg(env: &Environment, fl: &FLConfig, train: &TrainConfig) -> Result<RunReport> {
    fl.validate()?;
    let _ = train;
    let started = Instant::now();
    let n = env.size();
    let members: Vec<usize> = (0..n).collect();
    let weights = env.train_weights(&members)?;
    let mut stopper = EarlyStopping::new(fl.warmup_rounds, fl.patience);
    let mut events = Vec::new();
    let mut val_losses = Vec::new();
    let mut best = None;
    let mut upload_bytes = Vec::new();
    let mut download_bytes = 0;
    let mut stop_round = 0;
    for round in 1..=fl.max_global_rounds {
        let sets: Vec<ClientPrototypes> = env
            .clients
            .iter()
            .map(|c| mean_sampling(c.client_id, &c.train, env.classes))
            .collect();
        upload_bytes = sets
            .iter()
            .map(|s| s.payload(env.d_emb, env.classes, n).len() as u64)
            .collect();
        for (s, &b) in sets.iter().zip(&upload_bytes) {
            events.push(TransmissionEvent::upload(s.client_id, b, round));
        }
        let global = average_prototypes(&sets, env.classes, env.d_emb);
        download_bytes = crate::embeddings::payload_bytes(env.d_emb, global.iter().flatten().count());
        for s in &sets {
            events.push(TransmissionEvent::download(s.client_id, download_bytes, round));
        }
        let val = with_pool(|| validation_loss(env, &members, &weights, |x| Ok(prototype_logits(&global, x))))??;
        val_losses.push(val);
        stop_round = round;
        let (improved, stop) = stopper.observe(round, val);
        if improved {
            best = Some(global);
        }
        if stop {
            break;
        }
    }
    let global = best.ok_or_else(|| Error::domain("no rounds were run"))?;
    let accuracy = with_pool(|| {
        evaluate_with(env, |_, x| {
            let z = prototype_logits(&global, x);
            Ok(argmax(&z))
        })
    })??;
    let costs = account_costs(
        &events,
        CostFormula::PrototypeExchange {
            rounds: stop_round as u64,
            upload_bytes,
            download_bytes,
        },
    )?;
    let mut report = finish(env, fl, Method::ProtoAvg, accuracy, costs, started);
    report.sampling = Some(SamplingMethod::Mean);
    report.rounds_used = stop_round;
    report.best_round = stopper.best_round();
    report.stop_round = stop_round;
    report.val_losses = val_losses;
    report.events = events;
    report.wall_time.total_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = k;
        }
    }
    best
}

/// Centralised reference: one adapter trained on the pooled training data
/// of every client with the server's variance-stopped loop.
pub fn run_centralized(env: &Environment, fl: &FLConfig, train: &TrainConfig) -> Result<(Adapter, AccuracyMatrix)> {
    let train = fl.train_for_run(train);
    let pooled: Vec<Sample> = env.clients.iter().flat_map(|c| c.train.iter().cloned()).collect();
    let initial = env.initial_adapter(fl.seed)?;
    let outcome = crate::adapter::train_until_flat(&pooled, &env.head, initial, &train)?;
    let acc = with_pool(|| evaluate(env, std::slice::from_ref(&outcome.adapter)))??;
    Ok((outcome.adapter, acc))
}

/// Mean test accuracy of one adapter over every client's test data.
pub fn pooled_test_accuracy(env: &Environment, adapter: &Adapter) -> Result<f64> {
    let pooled: Vec<Sample> = env.clients.iter().flat_map(|c| c.test.iter().cloned()).collect();
    accuracy(adapter, &env.head, &pooled)
}

/// Mean validation loss of one adapter on one client.
pub fn client_validation_loss(env: &Environment, client: usize, adapter: &Adapter) -> Result<f64> {
    mean_ce_loss(adapter, &env.head, &env.clients[client].validation)
}
