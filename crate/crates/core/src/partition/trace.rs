use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::TrustDomain;
use crate::model::Site;
use crate::otp::LedgerSummary;
use crate::tensor::{OpClass, Pass};

/// Protection state of a tensor as observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorState {
    /// Frozen public weights; never sensitive.
    Public,
    Plaintext,
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Endpoint {
    Client(u32),
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    AdapterUpdate,
    EmbeddingBatch,
    GlobalBroadcast,
    Query,
    Logits,
}

/// What happened, without the magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "event")]
pub enum EventKind {
    /// A model op executed in `domain`; `state` is `Public` only if every
    /// value involved is public.
    Op {
        site: Option<Site>,
        pass: Pass,
        domain: TrustDomain,
        class: OpClass,
        state: TensorState,
        owner_local: bool,
    },
    /// Tensors moved between domains inside one party.
    Crossing {
        site: Option<Site>,
        pass: Pass,
        from: TrustDomain,
        to: TrustDomain,
        state: TensorState,
    },
    /// A private operand consumed in the untrusted domain where it already
    /// resided.
    Sighting {
        site: Option<Site>,
        pass: Pass,
        state: TensorState,
        owner_local: bool,
    },
    /// Trusted-side pad algebra that depends on the payload.
    Masking { site: Option<Site>, pass: Pass },
    /// Pad algebra that depends only on pads and public weights.
    Offline { site: Option<Site>, pass: Pass },
    /// A message on the simulated network, which is untrusted.
    Wire {
        kind: MessageKind,
        from: Endpoint,
        to: Endpoint,
        state: TensorState,
    },
    /// Federated averaging.
    Aggregate { domain: TrustDomain },
}

impl EventKind {
    pub fn site(&self) -> Option<Site> {
        match *self {
            EventKind::Op { site, .. }
            | EventKind::Crossing { site, .. }
            | EventKind::Sighting { site, .. }
            | EventKind::Masking { site, .. }
            | EventKind::Offline { site, .. } => site,
            EventKind::Wire { .. } | EventKind::Aggregate { .. } => None,
        }
    }

    /// Why this event exposes plaintext private data to the untrusted side,
    /// if it does.
    pub fn exposure(&self) -> Option<&'static str> {
        use TensorState::Plaintext;
        use TrustDomain::Untrusted;
        match *self {
            EventKind::Op {
                domain: Untrusted,
                state: Plaintext,
                owner_local: false,
                ..
            } => Some("private value computed in the untrusted domain"),
            EventKind::Crossing {
                to: Untrusted,
                state: Plaintext,
                ..
            } => Some("plaintext crossed into the untrusted domain"),
            EventKind::Sighting {
                state: Plaintext,
                owner_local: false,
                ..
            } => Some("private operand used in the untrusted domain"),
            EventKind::Wire {
                state: Plaintext, ..
            } => Some("plaintext payload on the network"),
            EventKind::Aggregate { domain: Untrusted } => {
                Some("aggregation outside the trusted domain")
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub count: u64,
    pub elements: u64,
    pub flops: u64,
}

impl Tally {
    fn add(&mut self, other: Tally) {
        self.count += other.count;
        self.elements += other.elements;
        self.flops += other.flops;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
    pub elements: u64,
    pub flops: u64,
}

/// Append-only run log, kept as per-kind tallies plus an optional bounded
/// ordered prefix of raw events.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Trace {
    #[serde(with = "tally_serde")]
    tallies: BTreeMap<EventKind, Tally>,
    events: u64,
    log_limit: usize,
    log: Vec<LoggedEvent>,
}

mod tally_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        m: &BTreeMap<EventKind, Tally>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        m.iter().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<EventKind, Tally>, D::Error> {
        Ok(Vec::<(EventKind, Tally)>::deserialize(d)?
            .into_iter()
            .collect())
    }
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also keeps the first `limit` raw events in order.
    pub fn with_log(limit: usize) -> Self {
        Self {
            log_limit: limit,
            ..Self::default()
        }
    }

    pub fn record(&mut self, kind: EventKind, elements: u64, flops: u64) {
        if self.log.len() < self.log_limit {
            self.log.push(LoggedEvent {
                seq: self.events,
                kind,
                elements,
                flops,
            });
        }
        self.events += 1;
        self.tallies.entry(kind).or_default().add(Tally {
            count: 1,
            elements,
            flops,
        });
    }

    /// Number of events recorded.
    pub fn len(&self) -> u64 {
        self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events == 0
    }

    pub fn tallies(&self) -> impl Iterator<Item = (&EventKind, &Tally)> {
        self.tallies.iter()
    }

    pub fn log(&self) -> &[LoggedEvent] {
        &self.log
    }

    /// Sum of the tallies of every kind matching `pred`.
    pub fn total(&self, pred: impl Fn(&EventKind) -> bool) -> Tally {
        let mut t = Tally::default();
        for (k, v) in &self.tallies {
            if pred(k) {
                t.add(*v);
            }
        }
        t
    }

    pub fn crossings(&self) -> u64 {
        self.total(|k| matches!(k, EventKind::Crossing { .. }))
            .count
    }

    pub fn violation_count(&self) -> u64 {
        self.total(|k| k.exposure().is_some()).count
    }

    pub fn violations(&self) -> Vec<Violation> {
        self.tallies
            .iter()
            .filter_map(|(k, t)| {
                k.exposure().map(|reason| Violation {
                    site: k.site(),
                    kind: *k,
                    count: t.count,
                    elements: t.elements,
                    reason: reason.to_string(),
                })
            })
            .collect()
    }

    pub fn absorb(&mut self, other: &Trace) {
        for (k, v) in &other.tallies {
            self.tallies.entry(*k).or_default().add(*v);
        }
        let room = self.log_limit.saturating_sub(self.log.len());
        self.log
            .extend(other.log.iter().take(room).cloned().map(|mut e| {
                e.seq += self.events;
                e
            }));
        self.events += other.events;
    }

    /// One JSON object per line: the tallies, then the raw log prefix.
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for (k, t) in &self.tallies {
            let line = serde_json::json!({ "tally": k, "count": t.count, "elements": t.elements, "flops": t.flops });
            writeln!(w, "{line}")?;
        }
        for e in &self.log {
            writeln!(
                w,
                "{}",
                serde_json::to_string(e).map_err(std::io::Error::other)?
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub site: Option<Site>,
    pub kind: EventKind,
    pub count: u64,
    pub elements: u64,
    pub reason: String,
}

/// Result of scanning a trace for plaintext exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub passed: bool,
    /// Events that exposed plaintext private data to the untrusted side.
    pub plaintext_sightings: u64,
    /// Masked tensors that reached the untrusted side.
    pub masked_sightings: u64,
    pub public_sightings: u64,
    /// Untrusted work done by the data owner on its own data.
    pub owner_local_ops: u64,
    pub crossings: u64,
    /// Sites with at least one op executed in the untrusted domain.
    pub untrusted_sites: Vec<String>,
    pub pads: LedgerSummary,
    pub violations: Vec<Violation>,
}

/// Passes iff nothing plaintext and private was observed in the untrusted
/// domain and no pad was used twice.
pub fn audit_taint(trace: &Trace, pads: LedgerSummary) -> AuditReport {
    let mut masked = 0;
    let mut public = 0;
    let mut owner_local = 0;
    let mut sites = BTreeSet::new();
    for (k, t) in trace.tallies() {
        match *k {
            EventKind::Op {
                site,
                domain: TrustDomain::Untrusted,
                state,
                owner_local: local,
                ..
            } => {
                sites.insert(site.map_or_else(|| "-".to_string(), |s| s.to_string()));
                if local {
                    owner_local += t.count;
                }
                match state {
                    TensorState::Masked => masked += t.count,
                    TensorState::Public => public += t.count,
                    TensorState::Plaintext => {}
                }
            }
            EventKind::Crossing {
                to: TrustDomain::Untrusted,
                state: TensorState::Masked,
                ..
            }
            | EventKind::Wire {
                state: TensorState::Masked,
                ..
            } => masked += t.count,
            _ => {}
        }
    }
    let violations = trace.violations();
    let plaintext: u64 = violations.iter().map(|v| v.count).sum();
    AuditReport {
        passed: plaintext == 0 && pads.reused == 0,
        plaintext_sightings: plaintext,
        masked_sightings: masked,
        public_sightings: public,
        owner_local_ops: owner_local,
        crossings: trace.crossings(),
        untrusted_sites: sites.into_iter().collect(),
        pads,
        violations,
    }
}
