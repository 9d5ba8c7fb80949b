use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    Channel, EventKind, MaskConfig, Method, PartitionPlan, TensorState, Trace, TrustDomain,
};
use super::{Endpoint, MessageKind};
use crate::error::{contract_err, Result};
use crate::model::{Graph, Model, TransformerConfig, TuningConfig};
use crate::tensor::{OpClass, Precision, Rng};

/// Bytes per simulated value on the boundary.
const VALUE_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassWeights {
    pub linear: f64,
    pub elementwise: f64,
    pub memory: f64,
}

impl ClassWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            linear: w,
            elementwise: w,
            memory: w,
        }
    }
}

/// Prices for simulated work, in arbitrary time units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Per flop executed in the trusted domain.
    pub trusted: ClassWeights,
    /// Per flop executed in the untrusted domain.
    pub untrusted: ClassWeights,
    /// Per boundary crossing.
    pub crossing: f64,
    /// Per masked byte produced or removed.
    pub masked_byte: f64,
    /// Per flop of payload-dependent pad algebra (trusted).
    pub mask_flop: f64,
    /// Per flop of pad-only algebra, which can run before the data exists.
    pub offline_flop: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            trusted: ClassWeights::uniform(10.0),
            untrusted: ClassWeights::uniform(1.0),
            crossing: 5000.0,
            masked_byte: 6.25,
            mask_flop: 10.0,
            offline_flop: 0.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.trusted.linear,
            self.trusted.elementwise,
            self.trusted.memory,
            self.untrusted.linear,
            self.untrusted.elementwise,
            self.untrusted.memory,
            self.crossing,
            self.masked_byte,
            self.mask_flop,
            self.offline_flop,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return contract_err("cost weights must be finite and non-negative");
        }
        Ok(())
    }

    pub fn price(&self, census: &Census) -> CostReport {
        let c = census;
        let trusted = self.trusted.linear * c.trusted_linear as f64
            + self.trusted.elementwise * c.trusted_elementwise as f64
            + self.trusted.memory * c.trusted_memory as f64;
        let untrusted = self.untrusted.linear * c.untrusted_linear as f64
            + self.untrusted.elementwise * c.untrusted_elementwise as f64
            + self.untrusted.memory * c.untrusted_memory as f64;
        let crossing = self.crossing * c.crossings as f64;
        let masking =
            self.masked_byte * c.masked_bytes as f64 + self.mask_flop * c.mask_flops as f64;
        let offline = self.offline_flop * c.offline_flops as f64;
        CostReport {
            method: None,
            census: *c,
            trusted,
            untrusted,
            crossing,
            masking,
            offline,
            total: trusted + untrusted + crossing + masking + offline,
        }
    }
}

/// Work counts extracted from a trace.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub trusted_linear: u64,
    pub trusted_elementwise: u64,
    pub trusted_memory: u64,
    pub untrusted_linear: u64,
    pub untrusted_elementwise: u64,
    pub untrusted_memory: u64,
    pub crossings: u64,
    pub masked_bytes: u64,
    pub mask_flops: u64,
    pub offline_flops: u64,
}

impl Census {
    pub fn from_trace(trace: &Trace) -> Self {
        let mut c = Census::default();
        for (k, t) in trace.tallies() {
            match *k {
                EventKind::Op { domain, class, .. } => {
                    let slot = match (domain, class) {
                        (TrustDomain::Trusted, OpClass::Linear) => &mut c.trusted_linear,
                        (TrustDomain::Trusted, OpClass::Elementwise) => &mut c.trusted_elementwise,
                        (TrustDomain::Trusted, OpClass::Memory) => &mut c.trusted_memory,
                        (TrustDomain::Untrusted, OpClass::Linear) => &mut c.untrusted_linear,
                        (TrustDomain::Untrusted, OpClass::Elementwise) => {
                            &mut c.untrusted_elementwise
                        }
                        (TrustDomain::Untrusted, OpClass::Memory) => &mut c.untrusted_memory,
                    };
                    *slot += t.flops;
                }
                EventKind::Crossing { .. } => c.crossings += t.count,
                EventKind::Masking { .. } => {
                    c.masked_bytes += VALUE_BYTES * t.elements;
                    c.mask_flops += t.flops;
                }
                EventKind::Offline { .. } => c.offline_flops += t.flops,
                EventKind::Aggregate { domain } => match domain {
                    TrustDomain::Trusted => c.trusted_elementwise += t.flops,
                    TrustDomain::Untrusted => c.untrusted_elementwise += t.flops,
                },
                EventKind::Wire {
                    state: TensorState::Masked,
                    ..
                } => c.masked_bytes += VALUE_BYTES * t.elements,
                _ => {}
            }
        }
        c
    }

    pub fn scaled(&self, k: u64) -> Self {
        Census {
            trusted_linear: self.trusted_linear * k,
            trusted_elementwise: self.trusted_elementwise * k,
            trusted_memory: self.trusted_memory * k,
            untrusted_linear: self.untrusted_linear * k,
            untrusted_elementwise: self.untrusted_elementwise * k,
            untrusted_memory: self.untrusted_memory * k,
            crossings: self.crossings * k,
            masked_bytes: self.masked_bytes * k,
            mask_flops: self.mask_flops * k,
            offline_flops: self.offline_flops * k,
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.trusted_linear
            + self.trusted_elementwise
            + self.trusted_memory
            + self.untrusted_linear
            + self.untrusted_elementwise
            + self.untrusted_memory
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Option<Method>,
    pub census: Census,
    pub trusted: f64,
    pub untrusted: f64,
    pub crossing: f64,
    pub masking: f64,
    pub offline: f64,
    pub total: f64,
}

/// A fixed computation to price under different plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    pub model: TransformerConfig,
    pub tuning: TuningConfig,
    pub seq_len: usize,
    /// Number of examples processed.
    pub examples: u64,
    /// Forward and backward, rather than forward only.
    pub train: bool,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            model: TransformerConfig::default(),
            tuning: TuningConfig::default(),
            seq_len: 8,
            examples: 1,
            train: true,
        }
    }
}

/// Prices `workload` under `plan` by running one probe example through a
/// channel and scaling its census.
pub fn simulate_cost(
    plan: &PartitionPlan,
    workload: &Workload,
    cost: &CostModel,
) -> Result<CostReport> {
    cost.validate()?;
    if plan.n_layers != workload.model.n_layers {
        return contract_err("plan and workload disagree on depth");
    }
    let model = Model::init(&workload.model, &workload.tuning, 0)?;
    let mut rng = Rng::new(0, 7);
    let tokens: Vec<usize> = (0..workload.seq_len)
        .map(|_| rng.below(workload.model.vocab))
        .collect();
    let mut channel = Channel::new(
        Arc::new(plan.clone()),
        0,
        Rng::new(0, 8),
        MaskConfig::default(),
    );
    {
        let mut g = Graph::new(Precision::Exact, &mut channel, None);
        let logits = model.forward(&mut g, &tokens)?;
        if workload.train {
            let loss = model.loss(&mut g, logits, 0)?;
            g.backward(loss)?;
        }
    }
    if plan.method == Method::Method2 {
        channel.trace_mut().record(
            EventKind::Wire {
                kind: MessageKind::EmbeddingBatch,
                from: Endpoint::Client(0),
                to: Endpoint::Server,
                state: TensorState::Masked,
            },
            (workload.seq_len * workload.model.d_model) as u64,
            0,
        );
    }
    let census = Census::from_trace(channel.trace()).scaled(workload.examples);
    let mut report = cost.price(&census);
    report.method = Some(plan.method);
    Ok(report)
}
