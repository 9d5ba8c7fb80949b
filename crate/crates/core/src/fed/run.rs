use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, GlobalModel, Update};
use super::train::{accuracy, local_train_step, Feature, LocalOutcome, LocalState, ModelObjective};
use super::wire::{RoundMessage, SimNetwork, WireLink, WireRecord, WireTensor};
use super::{audit_status, ExperimentConfig, MessageCounts, TrainingReport};
use crate::data::{Dataset, Example};
use crate::error::{contract_err, Error, Result};
use crate::model::{argmax, Graph, Model, ParamSet};
use crate::otp::PadLedger;
use crate::partition::{
    audit_taint, build_plan, Census, Channel, Endpoint, EventKind, MessageKind, PartitionPlan,
    Trace, TrustDomain,
};
use crate::tensor::{Precision, Rng, Tensor};

const CHANNEL_PADS: u64 = 100;
const DROPOUT: u64 = 300;
const ORDER: u64 = 400;
const SERVER_ORDER: u64 = 500;
const SERVER_DROPOUT: u64 = 501;
const SERVER_PADS: u64 = 502;
const EVAL_PADS: u64 = 503;
const UPLINK: u64 = 1000;
const DOWNLINK: u64 = 2000;

const SERVER_PARTY: u16 = 0x0FFF;
const EVAL_PARTY: u16 = 0x0FFE;

fn uplink(cfg: &ExperimentConfig, k: usize) -> WireLink {
    WireLink::new(
        format!("up{k}"),
        0x1000 + k as u16,
        Rng::new(cfg.seed, UPLINK + k as u64),
        cfg.mask.dist,
    )
}

fn downlink(cfg: &ExperimentConfig, k: usize) -> WireLink {
    WireLink::new(
        format!("down{k}"),
        0x2000 + k as u16,
        Rng::new(cfg.seed, DOWNLINK + k as u64),
        cfg.mask.dist,
    )
}

fn seal(link: Option<&mut WireLink>, values: &[Tensor]) -> Result<Vec<WireTensor>> {
    match link {
        Some(l) => l.seal(values),
        None => Ok(values.iter().cloned().map(WireTensor::plain).collect()),
    }
}

fn open(link: Option<&mut WireLink>, payload: &[WireTensor]) -> Result<Vec<Tensor>> {
    match link {
        Some(l) => l.open(payload),
        None => payload
            .iter()
            .map(|t| match t.pad_id {
                None => Ok(t.value.clone()),
                Some(_) => Err(Error::Protocol("masked tensor on a plaintext link".into())),
            })
            .collect(),
    }
}

fn to_values(p: &ParamSet) -> Vec<Tensor> {
    p.values().cloned().collect()
}

/// Rebuilds a parameter set from values in `template`'s key order.
fn from_values(template: &ParamSet, values: Vec<Tensor>) -> Result<ParamSet> {
    if values.len() != template.len() {
        return Err(Error::Protocol(format!(
            "{} tensors for {} parameters",
            values.len(),
            template.len()
        )));
    }
    template
        .iter()
        .zip(values)
        .map(|((name, t), v)| {
            if t.shape() != v.shape() {
                return Err(Error::Protocol(format!(
                    "{name} arrived as {:?}",
                    v.shape()
                )));
            }
            Ok((name.clone(), v))
        })
        .collect()
}

fn expect(msg: &RoundMessage, kind: MessageKind, round: u32) -> Result<()> {
    if msg.kind != kind || msg.round != round {
        return Err(Error::Protocol(format!(
            "expected {kind:?} for round {round}, got {:?} for round {}",
            msg.kind, msg.round
        )));
    }
    Ok(())
}

/// Per-run byproducts kept for inspection and tests; not serialized into
/// the report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    /// `W'` after each round.
    pub globals: Vec<ParamSet>,
    /// Per round, the `W_k` the server recovered, in client order.
    pub uploads: Vec<Vec<Update>>,
    /// Upload messages exactly as they crossed the network.
    pub sent: Vec<RoundMessage>,
    /// Method2: split features each client computed, in plaintext.
    pub client_features: Vec<Vec<Feature>>,
    /// Method2: the same features after unmasking inside the server.
    pub server_features: Vec<Vec<Feature>>,
    pub wire_log: Vec<WireRecord>,
    pub final_params: ParamSet,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: TrainingReport,
    pub artifacts: Artifacts,
}

/// A federated client: its shard, a model replica, and its side of the
/// trust boundary and of both wire links.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    pub data: Vec<Example>,
    pub model: Model,
    pub channel: Channel,
    pub local: LocalState,
    pub dropout: Rng,
    uplink: WireLink,
    downlink: WireLink,
}

impl ClientState {
    pub fn new(
        cfg: &ExperimentConfig,
        model: &Model,
        plan: &Arc<PartitionPlan>,
        data: Vec<Example>,
        k: usize,
    ) -> Self {
        let s = cfg.seed;
        Self {
            id: k as u32,
            data,
            model: model.clone(),
            channel: Channel::new(
                plan.clone(),
                k as u16 + 1,
                Rng::new(s, CHANNEL_PADS + k as u64),
                cfg.mask,
            ),
            local: LocalState::new(cfg.train.lr, Rng::new(s, ORDER + k as u64)),
            dropout: Rng::new(s, DROPOUT + k as u64),
            uplink: uplink(cfg, k),
            downlink: downlink(cfg, k),
        }
    }

    /// Local epochs from `params` under the client's plan.
    pub fn train(&mut self, params: ParamSet, cfg: &ExperimentConfig) -> Result<LocalOutcome> {
        let mut obj: ModelObjective<'_, _, Example> = ModelObjective::new(
            &mut self.model,
            &mut self.channel,
            cfg.precision,
            self.dropout.clone(),
        );
        let out = local_train_step(&mut obj, &mut self.local, params, &self.data, &cfg.train)?;
        self.dropout = obj.dropout;
        Ok(out)
    }

    fn round(
        &mut self,
        msg: &RoundMessage,
        template: &ParamSet,
        cfg: &ExperimentConfig,
        masked: bool,
    ) -> Result<(RoundMessage, LocalOutcome)> {
        let values = open(masked.then_some(&mut self.downlink), &msg.payload)?;
        let outcome = self.train(from_values(template, values)?, cfg)?;
        let payload = seal(
            masked.then_some(&mut self.uplink),
            &to_values(&outcome.params),
        )?;
        let reply = RoundMessage {
            sender: Endpoint::Client(self.id),
            round: msg.round,
            kind: MessageKind::AdapterUpdate,
            n_k: self.data.len() as u64,
            payload,
        };
        Ok((reply, outcome))
    }
}

/// Trace and pad ledgers of a run, kept apart for cost and audit.
struct Books {
    train: Trace,
    eval: Trace,
    ledger: PadLedger,
}

impl Books {
    fn new() -> Self {
        Self {
            train: Trace::new(),
            eval: Trace::new(),
            ledger: PadLedger::new(0),
        }
    }

    fn channel(&mut self, ch: Channel, eval: bool) -> Result<()> {
        let (trace, ledger) = ch.into_parts();
        if eval {
            self.eval.absorb(&trace);
        } else {
            self.train.absorb(&trace);
        }
        self.ledger.absorb(ledger)
    }

    fn finish(
        self,
        cfg: &ExperimentConfig,
        method: Method,
    ) -> (crate::partition::AuditReport, crate::partition::CostReport) {
        let mut cost = cfg.cost.price(&Census::from_trace(&self.train));
        cost.method = Some(method);
        let mut all = self.train;
        all.absorb(&self.eval);
        (audit_taint(&all, self.ledger.summary()), cost)
    }
}

use crate::partition::Method;

fn weighted_loss(ns: &[u64], losses: &[f64]) -> f64 {
    let n: u64 = ns.iter().sum();
    ns.iter()
        .zip(losses)
        .map(|(&k, &l)| k as f64 / n as f64 * l)
        .sum()
}

/// The Method1 loop: broadcast, local training under the plan, upload,
/// aggregate. Also runs FL-LLM and SWMT, which differ only in plan and in
/// whether the wire is masked.
fn run_federated(cfg: &ExperimentConfig, data: &Dataset, method: Method) -> Result<RunOutput> {
    if method == Method::Method2 {
        return contract_err("method2 is not a federated-averaging scheme");
    }
    let cfg = &ExperimentConfig {
        method,
        ..cfg.clone()
    };
    cfg.validate()?;
    cfg.check_dataset(data)?;
    let kk = cfg.clients;
    let plan = Arc::new(build_plan(&cfg.model, method, None)?);
    let mut model = Model::init(&cfg.model, &cfg.tuning, cfg.seed)?;
    let base_fp = model.base.fingerprint();
    let template = model.trainable();
    let masked = method.is_secure();
    let agg_domain = if masked {
        TrustDomain::Trusted
    } else {
        TrustDomain::Untrusted
    };

    let mut clients: Vec<ClientState> = (0..kk)
        .map(|k| ClientState::new(cfg, &model, &plan, data.shard(k), k))
        .collect();
    let mut server_up: Vec<WireLink> = (0..kk).map(|k| uplink(cfg, k)).collect();
    let mut server_down: Vec<WireLink> = (0..kk).map(|k| downlink(cfg, k)).collect();
    let mut net = SimNetwork::new();
    let mut server_trace = Trace::new();
    let mut art = Artifacts::default();
    let mut round_losses = Vec::new();
    let mut step_losses = vec![Vec::new(); kk];
    let mut global = GlobalModel {
        params: template.clone(),
        round: 0,
    };

    for t in 0..cfg.rounds as u32 {
        let values = to_values(&global.params);
        for (k, link) in server_down.iter_mut().enumerate() {
            let payload = seal(masked.then_some(link), &values)?;
            let msg = RoundMessage {
                sender: Endpoint::Server,
                round: t,
                kind: MessageKind::GlobalBroadcast,
                n_k: 0,
                payload,
            };
            net.send(Endpoint::Client(k as u32), &msg)?;
        }
        let inbox = clients
            .iter()
            .map(|c| net.recv(Endpoint::Server, Endpoint::Client(c.id)))
            .collect::<Result<Vec<_>>>()?;
        for m in &inbox {
            expect(m, MessageKind::GlobalBroadcast, t)?;
        }
        let results: Vec<Result<(RoundMessage, LocalOutcome)>> = clients
            .par_iter_mut()
            .zip(inbox.par_iter())
            .map(|(c, m)| c.round(m, &template, cfg, masked))
            .collect();
        let mut ns = Vec::with_capacity(kk);
        let mut means = Vec::with_capacity(kk);
        for (k, r) in results.into_iter().enumerate() {
            let (msg, outcome) = r?;
            net.send(Endpoint::Server, &msg)?;
            ns.push(msg.n_k);
            means.push(outcome.mean_loss());
            step_losses[k].extend(outcome.step_losses);
        }
        round_losses.push(weighted_loss(&ns, &means));

        let mut updates = Vec::with_capacity(kk);
        for (k, link) in server_up.iter_mut().enumerate() {
            let m = net.recv(Endpoint::Client(k as u32), Endpoint::Server)?;
            expect(&m, MessageKind::AdapterUpdate, t)?;
            let values = open(masked.then_some(link), &m.payload)?;
            updates.push(Update {
                client: k as u32,
                n_k: m.n_k,
                params: from_values(&template, values)?,
            });
            art.sent.push(m);
        }
        global = aggregate(&updates, kk, t)?;
        let n_values: u64 = template.values().map(|v| v.len() as u64).sum();
        server_trace.record(
            EventKind::Aggregate { domain: agg_domain },
            n_values * kk as u64,
            2 * n_values * kk as u64,
        );
        art.uploads.push(updates);
        art.globals.push(global.params.clone());
    }
    if net.pending() != 0 {
        return Err(Error::Protocol("undelivered messages at end of run".into()));
    }

    model.load_trainable(&global.params)?;
    let mut eval_ch = Channel::new(
        plan.clone(),
        EVAL_PARTY,
        Rng::new(cfg.seed, EVAL_PADS),
        cfg.mask,
    );
    let final_accuracy = accuracy(&model, &mut eval_ch, cfg.precision, &data.test)?;

    let mut books = Books::new();
    let base_unchanged = clients
        .iter()
        .all(|c| c.model.base.fingerprint() == base_fp)
        && model.base.fingerprint() == base_fp;
    for c in clients {
        books.channel(c.channel, false)?;
        books.ledger.absorb(c.uplink.into_ledger())?;
    }
    for l in server_down {
        books.ledger.absorb(l.into_ledger())?;
    }
    books.channel(eval_ch, true)?;
    books.train.absorb(&server_trace);
    let (net_trace, log) = net.into_parts();
    books.train.absorb(&net_trace);
    let (audit, cost) = books.finish(cfg, method);

    art.final_params = global.params.clone();
    art.wire_log = log;
    let report = TrainingReport {
        config: cfg.clone(),
        tuning: cfg.tuning.mode,
        trainable_params: model.count_trainable(),
        round_losses,
        step_losses,
        final_accuracy,
        messages: MessageCounts::from_log(&art.wire_log),
        audit_status: audit_status(method, &audit),
        audit,
        cost,
        base_fingerprint: base_fp,
        base_unchanged,
        final_params_fingerprint: fingerprint(&global.params),
    };
    Ok(RunOutput {
        report,
        artifacts: art,
    })
}

fn fingerprint(p: &ParamSet) -> u64 {
    p.iter().fold(0xcbf2_9ce4_8422_2325, |h: u64, (name, t)| {
        let h = name
            .bytes()
            .fold(h, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
        (h ^ t.fingerprint()).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn run_method1(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunOutput> {
    run_federated(cfg, data, Method::Method1)
}

/// FL-LLM or SWMT; the same loop as Method1 under a different plan.
pub fn run_baseline(cfg: &ExperimentConfig, data: &Dataset, method: Method) -> Result<RunOutput> {
    if !matches!(method, Method::FlLlm | Method::Swmt) {
        return contract_err(format!("{method} is not a baseline"));
    }
    run_federated(cfg, data, method)
}

/// Client 0's training on the whole training set with no network, under
/// `cfg.method`'s plan; returns the parameters after each round's epochs.
pub fn run_centralized(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<ParamSet>> {
    cfg.validate()?;
    if cfg.method == Method::Method2 {
        return contract_err("centralized reference covers the federated schemes");
    }
    let plan = Arc::new(build_plan(&cfg.model, cfg.method, None)?);
    let model = Model::init(&cfg.model, &cfg.tuning, cfg.seed)?;
    let mut params = model.clone().trainable();
    let mut c = ClientState::new(cfg, &model, &plan, data.train.clone(), 0);
    let mut out = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        params = c.train(params, cfg)?.params;
        out.push(params.clone());
    }
    Ok(out)
}

/// A Method2 data owner: runs the frozen lower layers on its own data.
#[derive(Debug, Clone)]
pub struct SplitClient {
    pub id: u32,
    pub data: Vec<Example>,
    model: Model,
    channel: Channel,
    uplink: WireLink,
    downlink: WireLink,
    uploaded: bool,
}

impl SplitClient {
    pub fn new(
        cfg: &ExperimentConfig,
        model: &Model,
        plan: &Arc<PartitionPlan>,
        data: Vec<Example>,
        k: usize,
    ) -> Self {
        Self {
            id: k as u32,
            data,
            model: model.clone(),
            channel: Channel::new(
                plan.clone(),
                k as u16 + 1,
                Rng::new(cfg.seed, CHANNEL_PADS + k as u64),
                cfg.mask,
            ),
            uplink: uplink(cfg, k),
            downlink: downlink(cfg, k),
            uploaded: false,
        }
    }

    /// `E_f` of one sequence: embedding and the blocks below the split.
    pub fn features_of(&mut self, tokens: &[usize], precision: Precision) -> Result<Tensor> {
        let mut g = Graph::new(precision, &mut self.channel, None);
        let x = self.model.embed(&mut g, tokens)?;
        let h = self
            .model
            .forward_layers(&mut g, x, 0..self.model.tuning.split_layer)?;
        Ok(g.value(h).clone())
    }

    pub fn features(&mut self, precision: Precision) -> Result<Vec<Feature>> {
        let data = std::mem::take(&mut self.data);
        let out = data
            .iter()
            .enumerate()
            .map(|(id, e)| {
                Ok(Feature {
                    id,
                    value: self.features_of(&e.tokens, precision)?,
                    label: e.label,
                })
            })
            .collect();
        self.data = data;
        out
    }

    /// The single masked batch of every feature and label.
    pub fn upload(&mut self, features: &[Feature]) -> Result<RoundMessage> {
        if self.uploaded {
            return Err(Error::Protocol(format!(
                "client {} already uploaded",
                self.id
            )));
        }
        let mut values: Vec<Tensor> = features.iter().map(|f| f.value.clone()).collect();
        values.push(Tensor::vector(
            features.iter().map(|f| f.label as f64).collect(),
        ));
        let payload = self.uplink.seal(&values)?;
        self.uploaded = true;
        Ok(RoundMessage {
            sender: Endpoint::Client(self.id),
            round: 0,
            kind: MessageKind::EmbeddingBatch,
            n_k: features.len() as u64,
            payload,
        })
    }

    pub fn query(
        &mut self,
        tokens: &[usize],
        seq: u32,
        precision: Precision,
    ) -> Result<RoundMessage> {
        let ef = self.features_of(tokens, precision)?;
        Ok(RoundMessage {
            sender: Endpoint::Client(self.id),
            round: seq,
            kind: MessageKind::Query,
            n_k: 0,
            payload: self.uplink.seal(&[ef])?,
        })
    }

    pub fn read_logits(&mut self, msg: &RoundMessage) -> Result<Tensor> {
        if msg.kind != MessageKind::Logits || msg.sender != Endpoint::Server {
            return Err(Error::Protocol("expected logits from the server".into()));
        }
        let mut v = self.downlink.open(&msg.payload)?;
        if v.len() != 1 {
            return Err(Error::Protocol("logits reply carries one tensor".into()));
        }
        Ok(v.remove(0))
    }
}

/// The Method2 server: upper layers with SPF linears and MLP LoRA, trained
/// inside its trusted domain on features that arrive once per client.
#[derive(Debug, Clone)]
pub struct SplitServer {
    model: Model,
    channel: Channel,
    up: Vec<WireLink>,
    down: Vec<WireLink>,
    features: BTreeMap<u32, Vec<Feature>>,
    local: LocalState,
    dropout: Rng,
}

impl SplitServer {
    pub fn new(cfg: &ExperimentConfig, model: &Model, plan: &Arc<PartitionPlan>) -> Self {
        Self {
            model: model.clone(),
            channel: Channel::new(
                plan.clone(),
                SERVER_PARTY,
                Rng::new(cfg.seed, SERVER_PADS),
                cfg.mask,
            ),
            up: (0..cfg.clients).map(|k| uplink(cfg, k)).collect(),
            down: (0..cfg.clients).map(|k| downlink(cfg, k)).collect(),
            features: BTreeMap::new(),
            local: LocalState::new(cfg.train.lr, Rng::new(cfg.seed, SERVER_ORDER)),
            dropout: Rng::new(cfg.seed, SERVER_DROPOUT),
        }
    }

    fn link(&mut self, sender: Endpoint) -> Result<usize> {
        match sender {
            Endpoint::Client(k) if (k as usize) < self.up.len() => Ok(k as usize),
            other => Err(Error::Protocol(format!("unknown sender {other:?}"))),
        }
    }

    /// Unmasks one client's feature batch. A second batch from the same
    /// client is a protocol error.
    pub fn accept_upload(&mut self, msg: &RoundMessage) -> Result<()> {
        if msg.kind != MessageKind::EmbeddingBatch {
            return Err(Error::Protocol(format!(
                "expected an embedding batch, got {:?}",
                msg.kind
            )));
        }
        let k = self.link(msg.sender)?;
        if self.features.contains_key(&(k as u32)) {
            return Err(Error::Protocol(format!(
                "client {k} uploaded features twice"
            )));
        }
        let mut values = self.up[k].open(&msg.payload)?;
        let labels = values
            .pop()
            .ok_or_else(|| Error::Protocol("empty embedding batch".into()))?;
        if values.len() as u64 != msg.n_k || labels.len() != values.len() || values.is_empty() {
            return Err(Error::Protocol(format!(
                "batch declares {} examples, carries {} features and {} labels",
                msg.n_k,
                values.len(),
                labels.len()
            )));
        }
        let n_classes = self.model.config.n_classes;
        let feats = values
            .into_iter()
            .zip(labels.data())
            .enumerate()
            .map(|(id, (value, &l))| {
                let label = l.round();
                if (l - label).abs() > 1e-6 || label < 0.0 || label as usize >= n_classes {
                    return Err(Error::Protocol(format!("label {l} is not a class")));
                }
                Ok(Feature {
                    id,
                    value,
                    label: label as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.features.insert(k as u32, feats);
        Ok(())
    }

    pub fn features(&self) -> &BTreeMap<u32, Vec<Feature>> {
        &self.features
    }

    /// One pass per call of `local_epochs` epochs over every client's
    /// features, in client order.
    pub fn train_round(&mut self, cfg: &ExperimentConfig) -> Result<LocalOutcome> {
        if self.features.len() != self.up.len() {
            return Err(Error::Protocol(format!(
                "{} of {} clients uploaded features",
                self.features.len(),
                self.up.len()
            )));
        }
        let all: Vec<Feature> = self.features.values().flatten().cloned().collect();
        let params = self.model.trainable();
        let mut obj: ModelObjective<'_, _, Feature> = ModelObjective::new(
            &mut self.model,
            &mut self.channel,
            cfg.precision,
            self.dropout.clone(),
        );
        let out = local_train_step(&mut obj, &mut self.local, params, &all, &cfg.train)?;
        self.dropout = obj.dropout;
        self.model.load_trainable(&out.params)?;
        Ok(out)
    }

    /// Serves one masked query with masked logits.
    pub fn answer(&mut self, query: &RoundMessage, precision: Precision) -> Result<RoundMessage> {
        if query.kind != MessageKind::Query {
            return Err(Error::Protocol(format!(
                "expected a query, got {:?}",
                query.kind
            )));
        }
        let k = self.link(query.sender)?;
        let mut v = self.up[k].open(&query.payload)?;
        if v.len() != 1 {
            return Err(Error::Protocol("a query carries one tensor".into()));
        }
        let f = Feature {
            id: 0,
            value: v.remove(0),
            label: 0,
        };
        let mut g = Graph::new(precision, &mut self.channel, None);
        let logits = super::train::model_logits(&self.model, &mut g, &f)?;
        let out = g.value(logits).clone();
        Ok(RoundMessage {
            sender: Endpoint::Server,
            round: query.round,
            kind: MessageKind::Logits,
            n_k: 0,
            payload: self.down[k].seal(&[out])?,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

/// Split fine-tuning: one masked feature upload per client, then server
/// training, then serving the test set through masked queries.
pub fn run_method2(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunOutput> {
    let cfg = &ExperimentConfig {
        method: Method::Method2,
        ..cfg.clone()
    };
    cfg.validate()?;
    cfg.check_dataset(data)?;
    let tuning = cfg.run_tuning();
    let plan = Arc::new(build_plan(
        &cfg.model,
        Method::Method2,
        Some(tuning.split_layer),
    )?);
    let model = Model::init(&cfg.model, &tuning, cfg.seed)?;
    let base_fp = model.base.fingerprint();
    let kk = cfg.clients;
    let mut clients: Vec<SplitClient> = (0..kk)
        .map(|k| SplitClient::new(cfg, &model, &plan, data.shard(k), k))
        .collect();
    let mut server = SplitServer::new(cfg, &model, &plan);
    let mut net = SimNetwork::new();
    let mut art = Artifacts::default();

    // Phase 1: offline features, one masked upload each.
    let uploads: Vec<Result<(Vec<Feature>, RoundMessage)>> = clients
        .par_iter_mut()
        .map(|c| {
            let f = c.features(cfg.precision)?;
            let m = c.upload(&f)?;
            Ok((f, m))
        })
        .collect();
    for r in uploads {
        let (f, m) = r?;
        net.send(Endpoint::Server, &m)?;
        art.client_features.push(f);
    }
    for k in 0..kk {
        let m = net.recv(Endpoint::Client(k as u32), Endpoint::Server)?;
        server.accept_upload(&m)?;
        art.sent.push(m);
    }
    art.server_features = server.features().values().cloned().collect();

    // Phase 2: training stays inside the server.
    let mut round_losses = Vec::with_capacity(cfg.rounds);
    let mut steps = Vec::new();
    for _ in 0..cfg.rounds {
        let out = server.train_round(cfg)?;
        round_losses.push(out.mean_loss());
        steps.extend(out.step_losses);
    }

    let (train_net, train_log) = net.into_parts();
    let mut trained = train_net.clone();
    trained.absorb(server.channel.trace());
    for c in &clients {
        trained.absorb(c.channel.trace());
    }
    let train_census = Census::from_trace(&trained);

    // Serving: test queries round-robin over the clients.
    let mut eval_net = SimNetwork::new();
    let mut hits = 0usize;
    for (i, e) in data.test.iter().enumerate() {
        let c = &mut clients[i % kk];
        let q = c.query(&e.tokens, i as u32, cfg.precision)?;
        eval_net.send(Endpoint::Server, &q)?;
        let q = eval_net.recv(Endpoint::Client(c.id), Endpoint::Server)?;
        let reply = server.answer(&q, cfg.precision)?;
        eval_net.send(Endpoint::Client(c.id), &reply)?;
        let reply = eval_net.recv(Endpoint::Server, Endpoint::Client(c.id))?;
        hits += usize::from(argmax(c.read_logits(&reply)?.data()) == e.label);
    }
    let final_accuracy = hits as f64 / data.test.len() as f64;

    let base_unchanged = clients
        .iter()
        .all(|c| c.model.base.fingerprint() == base_fp)
        && server.model.base.fingerprint() == base_fp;
    // Channel traces span training and serving; the census above does not.
    let (eval_trace, eval_log) = eval_net.into_parts();
    let mut all = train_net;
    all.absorb(&eval_trace);
    let mut ledger = PadLedger::new(0);
    for c in clients {
        let (trace, pads) = c.channel.into_parts();
        all.absorb(&trace);
        ledger.absorb(pads)?;
        ledger.absorb(c.uplink.into_ledger())?;
    }
    let final_params = server.model.trainable();
    let trainable_params = server.model.count_trainable();
    let (trace, pads) = server.channel.into_parts();
    all.absorb(&trace);
    ledger.absorb(pads)?;
    for l in server.down {
        ledger.absorb(l.into_ledger())?;
    }
    let audit = audit_taint(&all, ledger.summary());
    let mut cost = cfg.cost.price(&train_census);
    cost.method = Some(Method::Method2);

    art.wire_log = train_log;
    art.wire_log.extend(eval_log);
    art.final_params = final_params.clone();
    let report = TrainingReport {
        config: cfg.clone(),
        tuning: tuning.mode,
        trainable_params,
        round_losses,
        step_losses: vec![steps],
        final_accuracy,
        messages: MessageCounts::from_log(&art.wire_log),
        audit_status: audit_status(Method::Method2, &audit),
        audit,
        cost,
        base_fingerprint: base_fp,
        base_unchanged,
        final_params_fingerprint: fingerprint(&final_params),
    };
    Ok(RunOutput {
        report,
        artifacts: art,
    })
}

/// Runs `cfg.method`.
pub fn run(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunOutput> {
    match cfg.method {
        Method::Method1 => run_method1(cfg, data),
        Method::Method2 => run_method2(cfg, data),
        m => run_baseline(cfg, data, m),
    }
}
