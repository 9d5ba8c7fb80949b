//! Multi-client training over the simulated network: federated adapter
//! averaging (Method1, FL-LLM, SWMT) and split fine-tuning (Method2).

mod aggregate;
mod compare;
mod run;
mod train;
mod wire;

use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate, weights, GlobalModel, Update};
pub use compare::{compare, format_table, to_csv, CompareRow};
pub use run::{
    run, run_baseline, run_centralized, run_method1, run_method2, Artifacts, ClientState,
    RunOutput, SplitClient, SplitServer,
};
pub use train::{
    accuracy, local_train_step, model_logits, Feature, LocalOutcome, LocalState, ModelInput,
    ModelObjective, Objective, TrainConfig,
};
pub use wire::{
    decode_frame, encode_frame, RoundMessage, SimNetwork, WireLink, WireRecord, WireTensor,
};

use crate::data::{Dataset, SyntheticTask};
use crate::error::{contract_err, Result};
use crate::model::{TransformerConfig, TuningConfig, TuningMode};
use crate::partition::{AuditReport, CostModel, CostReport, MaskConfig, Method};
use crate::tensor::Precision;

/// Everything a run depends on besides the dataset, which it determines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    /// Number of clients K; overrides `data.shards`.
    pub clients: usize,
    /// Federated rounds, or server epochs for Method2.
    pub rounds: usize,
    pub precision: Precision,
    pub train: TrainConfig,
    pub model: TransformerConfig,
    pub tuning: TuningConfig,
    pub mask: MaskConfig,
    pub cost: CostModel,
    pub data: SyntheticTask,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Method1,
            seed: 0,
            clients: 3,
            rounds: 10,
            precision: Precision::Exact,
            train: TrainConfig::default(),
            model: TransformerConfig::default(),
            tuning: TuningConfig::default(),
            mask: MaskConfig::default(),
            cost: CostModel::default(),
            data: SyntheticTask::default(),
        }
    }
}

/// Largest K; keeps wire-pad ledger prefixes disjoint from party prefixes.
pub const MAX_CLIENTS: usize = 0x0FF0;

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| crate::Error::Format(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| crate::Error::Format(e.to_string()))
    }

    /// The data task with one shard per client.
    pub fn task(&self) -> SyntheticTask {
        SyntheticTask {
            shards: self.clients,
            ..self.data.clone()
        }
    }

    /// The tuning actually run: Method2 always fine-tunes in split mode.
    pub fn run_tuning(&self) -> TuningConfig {
        let mut t = self.tuning.clone();
        if self.method == Method::Method2 {
            t.mode = TuningMode::SplitSpf;
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.clients > MAX_CLIENTS {
            return contract_err(format!("{} clients (1..={MAX_CLIENTS})", self.clients));
        }
        if self.rounds == 0 {
            return contract_err("rounds must be at least 1");
        }
        self.model.validate()?;
        let tuning = self.run_tuning();
        tuning.validate(&self.model)?;
        if self.method != Method::Method2
            && !matches!(tuning.mode, TuningMode::Lora | TuningMode::PtuningV2)
        {
            return contract_err(format!(
                "{} trains lora or ptuning-v2 adapters, not {:?}",
                self.method, tuning.mode
            ));
        }
        self.train.validate()?;
        self.cost.validate()?;
        let task = self.task();
        task.validate()?;
        if task.n_classes != self.model.n_classes
            || task.vocab > self.model.vocab
            || task.seq_len > self.model.max_seq
        {
            return contract_err(format!(
                "data ({} classes, vocab {}, seq {}) does not fit the model ({} classes, vocab {}, max seq {})",
                task.n_classes,
                task.vocab,
                task.seq_len,
                self.model.n_classes,
                self.model.vocab,
                self.model.max_seq
            ));
        }
        Ok(())
    }

    /// Checks that `data` is the dataset this config runs on.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.task != self.task() {
            return contract_err("dataset was generated for a different task or client count");
        }
        if data.seed != self.seed {
            return contract_err(format!(
                "dataset seed {} but run seed {}",
                data.seed, self.seed
            ));
        }
        if data.shards.iter().any(Vec::is_empty) {
            return contract_err("every client needs at least one example");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCounts {
    pub adapter_update: u64,
    pub embedding_batch: u64,
    pub global_broadcast: u64,
    pub query: u64,
    pub logits: u64,
    /// Parameters or gradients sent from the server to a client.
    pub server_to_client_params: u64,
    pub masked: u64,
    pub plaintext: u64,
    pub bytes: u64,
}

impl MessageCounts {
    pub fn from_log(log: &[WireRecord]) -> Self {
        use crate::partition::{Endpoint, MessageKind};
        let mut c = MessageCounts::default();
        for r in log {
            match r.kind {
                MessageKind::AdapterUpdate => c.adapter_update += 1,
                MessageKind::EmbeddingBatch => c.embedding_batch += 1,
                MessageKind::GlobalBroadcast => c.global_broadcast += 1,
                MessageKind::Query => c.query += 1,
                MessageKind::Logits => c.logits += 1,
            }
            let carries_params = matches!(
                r.kind,
                MessageKind::AdapterUpdate | MessageKind::GlobalBroadcast
            );
            if r.from == Endpoint::Server && carries_params {
                c.server_to_client_params += 1;
            }
            if r.masked {
                c.masked += 1;
            } else {
                c.plaintext += 1;
            }
            c.bytes += r.bytes;
        }
        c
    }
}

/// Outcome of one run, as written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config: ExperimentConfig,
    pub tuning: TuningMode,
    pub trainable_params: usize,
    /// Sample-weighted mean training loss per round (per server epoch for
    /// Method2).
    pub round_losses: Vec<f64>,
    /// Per trainer (each client, or the Method2 server), the loss of every
    /// optimizer step.
    pub step_losses: Vec<Vec<f64>>,
    pub final_accuracy: f64,
    pub messages: MessageCounts,
    /// `pass`, `fail`, or `n/a-plaintext` for schemes that claim no
    /// confidentiality.
    pub audit_status: String,
    pub audit: AuditReport,
    /// Priced training work, excluding evaluation.
    pub cost: CostReport,
    pub base_fingerprint: u64,
    /// Every replica's frozen weights still hash to `base_fingerprint`.
    pub base_unchanged: bool,
    pub final_params_fingerprint: u64,
}

pub fn audit_status(method: Method, audit: &AuditReport) -> String {
    match (method.is_secure(), audit.passed) {
        (false, _) => "n/a-plaintext",
        (true, true) => "pass",
        (true, false) => "fail",
    }
    .to_string()
}
