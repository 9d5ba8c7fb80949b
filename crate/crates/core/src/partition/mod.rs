//! Assignment of model op sites to trust domains, masked routing across the
//! boundary, taint auditing and simulated cost.

mod channel;
mod cost;
mod trace;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use channel::{Channel, Fault, FaultKind, MaskConfig};
pub use cost::{simulate_cost, Census, ClassWeights, CostModel, CostReport, Workload};
pub use trace::{
    audit_taint, AuditReport, Endpoint, EventKind, MessageKind, Tally, TensorState, Trace,
    Violation,
};

use crate::error::{contract_err, Error, Result};
use crate::model::{Graph, Model, Site, SiteKind, TransformerConfig};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrustDomain {
    Trusted,
    Untrusted,
}

/// Training scheme; fixes how op sites are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Nonlinear ops and adapters trusted, frozen products outsourced masked.
    Method1,
    /// Lower layers on the clients, upper layers in the server's trusted
    /// domain.
    Method2,
    /// Plaintext federated baseline: everything untrusted, no masking.
    #[serde(alias = "plaintext")]
    FlLlm,
    /// Whole model shielded in the trusted domain.
    Swmt,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::FlLlm,
        Method::Method2,
        Method::Method1,
        Method::Swmt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Method1 => "method1",
            Method::Method2 => "method2",
            Method::FlLlm => "fl-llm",
            Method::Swmt => "swmt",
        }
    }

    /// Whether the scheme claims confidentiality, i.e. is subject to audit.
    pub fn is_secure(self) -> bool {
        self != Method::FlLlm
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
        match s.to_ascii_lowercase().as_str() {
            "method1" => Ok(Method::Method1),
            "method2" => Ok(Method::Method2),
            "fl-llm" | "flllm" | "plaintext" => Ok(Method::FlLlm),
            "swmt" => Ok(Method::Swmt),
            other => contract_err(format!("unknown method {other:?}")),
        }
    }
}

/// Domain of every op site of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub method: Method,
    pub split_layer: Option<usize>,
    pub n_layers: usize,
    #[serde(with = "assignment_serde")]
    pub assignment: BTreeMap<Site, TrustDomain>,
}

mod assignment_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        m: &BTreeMap<Site, TrustDomain>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let v: Vec<(&Site, &TrustDomain)> = m.iter().collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<Site, TrustDomain>, D::Error> {
        let v: Vec<(Site, TrustDomain)> = Vec::deserialize(d)?;
        Ok(v.into_iter().collect())
    }
}

/// Sites of the outsourceable frozen products under `Method1`.
fn outsourced(kind: SiteKind) -> bool {
    matches!(kind, SiteKind::Product(_) | SiteKind::Scores)
}

pub fn build_plan(
    config: &TransformerConfig,
    method: Method,
    split_layer: Option<usize>,
) -> Result<PartitionPlan> {
    config.validate()?;
    let split = match (method, split_layer) {
        (Method::Method2, None) => return contract_err("method2 needs a split layer"),
        (Method::Method2, Some(s)) if s >= config.n_layers => {
            return contract_err(format!("split layer {s} of {} layers", config.n_layers))
        }
        (Method::Method2, Some(s)) => Some(s),
        _ => None,
    };
    let place = |site: Site| -> TrustDomain {
        use TrustDomain::*;
        match method {
            Method::Swmt => Trusted,
            Method::FlLlm => Untrusted,
            Method::Method1 => {
                if outsourced(site.kind) {
                    Untrusted
                } else {
                    Trusted
                }
            }
            Method::Method2 => {
                let s = split.expect("checked above");
                match (site.layer, site.kind) {
                    (Some(l), _) if l < s => Untrusted,
                    (None, SiteKind::Embed) => Untrusted,
                    _ => Trusted,
                }
            }
        }
    };
    let mut assignment = BTreeMap::new();
    for kind in SiteKind::global() {
        let s = Site::global(kind);
        assignment.insert(s, place(s));
    }
    for layer in 0..config.n_layers {
        for kind in SiteKind::per_layer() {
            let s = Site::layer(layer, kind);
            assignment.insert(s, place(s));
        }
    }
    Ok(PartitionPlan {
        method,
        split_layer: split,
        n_layers: config.n_layers,
        assignment,
    })
}

impl PartitionPlan {
    /// Domain of a site; unlabelled work belongs to the trusted side.
    pub fn domain(&self, site: Option<Site>) -> TrustDomain {
        site.and_then(|s| self.assignment.get(&s).copied())
            .unwrap_or(TrustDomain::Trusted)
    }

    pub fn masking(&self) -> bool {
        self.method != Method::FlLlm
    }

    /// Untrusted work performed by the data owner on its own data, which is
    /// not exposure.
    pub fn owner_local(&self, site: Option<Site>) -> bool {
        self.method == Method::Method2 && self.domain(site) == TrustDomain::Untrusted
    }

    pub fn sites_in(&self, domain: TrustDomain) -> impl Iterator<Item = Site> + '_ {
        self.assignment
            .iter()
            .filter(move |(_, d)| **d == domain)
            .map(|(s, _)| *s)
    }
}

/// A tensor with its location and protection state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTensor {
    pub inner: Tensor,
    pub domain: TrustDomain,
    pub state: TensorState,
    /// Trace position at which the tensor was produced.
    pub lineage: u64,
}

impl DomainTensor {
    pub fn trusted(inner: Tensor) -> Self {
        Self {
            inner,
            domain: TrustDomain::Trusted,
            state: TensorState::Plaintext,
            lineage: 0,
        }
    }
}

/// Runs the encoder blocks and classifier on an embedded input under the
/// channel's plan; returns trusted plaintext logits.
///
/// Fails with `SecurityBreach` if the run put plaintext private data in the
/// untrusted domain.
pub fn secure_forward(
    channel: &mut Channel,
    model: &Model,
    x: &DomainTensor,
    precision: Precision,
) -> Result<DomainTensor> {
    if x.domain != TrustDomain::Trusted || x.state != TensorState::Plaintext {
        return contract_err("secure forward starts from trusted plaintext");
    }
    let before = channel.trace().violation_count();
    let mut g = Graph::new(precision, &mut *channel, None);
    let input = g.input(Site::global(SiteKind::Embed), x.inner.clone())?;
    let h = model.forward_layers(&mut g, input, 0..model.config.n_layers)?;
    let logits = model.classify(&mut g, h)?;
    let out = g.value(logits).clone();
    drop(g);
    let trace = channel.trace();
    if trace.violation_count() > before {
        let v = trace
            .violations()
            .into_iter()
            .next()
            .expect("count above zero");
        return Err(Error::SecurityBreach {
            site: v.site.map_or_else(|| "-".to_string(), |s| s.to_string()),
            detail: v.reason,
        });
    }
    Ok(DomainTensor {
        inner: out,
        domain: TrustDomain::Trusted,
        state: TensorState::Plaintext,
        lineage: trace.len(),
    })
}
