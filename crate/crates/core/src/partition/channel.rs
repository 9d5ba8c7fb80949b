use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{EventKind, PartitionPlan, TensorState, Trace, TrustDomain};
use crate::error::Result;
use crate::model::Site;
use crate::otp::{CrossTerms, MaskDistribution, MaskPad, PadLedger};
use crate::tensor::{Bilinear, OpClass, Operand, Pass, Precision, Rng, Router, Tag, Tensor};

/// How boundary pads are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub dist: MaskDistribution,
    /// Scale the distribution by the largest magnitude of the tensor being
    /// masked.
    pub relative: bool,
    /// Round masked payloads and unmasked results at the boundary too.
    pub boundary_quantize: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            dist: MaskDistribution::Uniform { scale: 1.0 },
            relative: true,
            boundary_quantize: true,
        }
    }
}

impl MaskConfig {
    fn dist_for(&self, t: &Tensor) -> MaskDistribution {
        if !self.relative {
            return self.dist;
        }
        let m = t.max_abs();
        let m = if m > 0.0 && m.is_finite() { m } else { 1.0 };
        match self.dist {
            MaskDistribution::Uniform { scale } => MaskDistribution::Uniform { scale: scale * m },
            MaskDistribution::Normal { std } => MaskDistribution::Normal { std: std * m },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    /// Send the first private operand unmasked.
    SkipMask,
    /// Mask with the pad of the previous outsourced product.
    ReusePad,
}

/// Deliberate protocol deviation at the `occurrence`-th (from 1) outsourced
/// product at `site` in `pass`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub kind: FaultKind,
    pub site: Site,
    pub pass: Pass,
    pub occurrence: usize,
}

/// One party's view of the trust boundary: routes products by plan, masks
/// what crosses, and logs everything.
#[derive(Debug, Clone)]
pub struct Channel {
    plan: Arc<PartitionPlan>,
    party: u32,
    ledger: PadLedger,
    pads: Rng,
    mask: MaskConfig,
    trace: Trace,
    fault: Option<Fault>,
    seen: BTreeMap<(Site, Pass), usize>,
    last_pad: Option<MaskPad>,
}

fn state_of(public: bool) -> TensorState {
    if public {
        TensorState::Public
    } else {
        TensorState::Plaintext
    }
}

impl Channel {
    /// `party` labels pads and prefixes their ids; `pads` is the party's pad
    /// randomness.
    pub fn new(plan: Arc<PartitionPlan>, party: u16, pads: Rng, mask: MaskConfig) -> Self {
        Self {
            plan,
            party: u32::from(party),
            ledger: PadLedger::new(party),
            pads,
            mask,
            trace: Trace::new(),
            fault: None,
            seen: BTreeMap::new(),
            last_pad: None,
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn with_trace(mut self, trace: Trace) -> Self {
        self.trace = trace;
        self
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut Trace {
        &mut self.trace
    }

    pub fn ledger(&self) -> &PadLedger {
        &self.ledger
    }

    pub fn into_parts(self) -> (Trace, PadLedger) {
        (self.trace, self.ledger)
    }

    fn issue(&mut self, site: Option<Site>, pass: Pass, t: &Tensor) -> Result<MaskPad> {
        let name = format!(
            "p{}/{}/{}",
            self.party,
            site.map_or_else(|| "-".into(), |s| s.to_string()),
            match pass {
                Pass::Forward => "f",
                Pass::Backward => "b",
            }
        );
        let dist = self.mask.dist_for(t);
        self.ledger.issue(&name, t.shape(), &mut self.pads, dist)
    }

    fn local(
        &mut self,
        site: Option<Site>,
        pass: Pass,
        domain: TrustDomain,
        map: Bilinear,
        lhs: Operand<'_>,
        rhs: Operand<'_>,
        precision: Precision,
    ) -> Result<Tensor> {
        let owner_local = self.plan.owner_local(site);
        let flops = map.flops(lhs.value.shape(), rhs.value.shape());
        if domain == TrustDomain::Untrusted {
            for o in [lhs, rhs].iter().filter(|o| !o.public) {
                self.trace.record(
                    EventKind::Sighting {
                        site,
                        pass,
                        state: TensorState::Plaintext,
                        owner_local,
                    },
                    o.value.len() as u64,
                    0,
                );
            }
        }
        self.trace.record(
            EventKind::Op {
                site,
                pass,
                domain,
                class: OpClass::Linear,
                state: state_of(lhs.public && rhs.public),
                owner_local,
            },
            0,
            flops,
        );
        Ok(precision.quantized(map.apply(lhs.value, rhs.value)?))
    }

    /// Outsources a product with at least one private operand.
    fn outsource(
        &mut self,
        site: Site,
        pass: Pass,
        map: Bilinear,
        lhs: Operand<'_>,
        rhs: Operand<'_>,
        precision: Precision,
    ) -> Result<Tensor> {
        let s = Some(site);
        let nth = {
            let n = self.seen.entry((site, pass)).or_default();
            *n += 1;
            *n
        };
        let fault = self
            .fault
            .filter(|f| f.site == site && f.pass == pass && f.occurrence == nth)
            .map(|f| f.kind);
        let bq = self.mask.boundary_quantize;
        let boundary = move |t: Tensor| {
            if bq {
                precision.quantized(t)
            } else {
                t
            }
        };

        // Trusted side: pad every private operand.
        let mut sent = Vec::with_capacity(2);
        let mut pads: Vec<Option<Tensor>> = Vec::with_capacity(2);
        let mut state = TensorState::Masked;
        let mut skipped = false;
        let mut elements = 0u64;
        for o in [lhs, rhs] {
            elements += o.value.len() as u64;
            if o.public {
                sent.push(o.value.clone());
                pads.push(None);
                continue;
            }
            if fault == Some(super::FaultKind::SkipMask) && !skipped {
                skipped = true;
                state = TensorState::Plaintext;
                sent.push(o.value.clone());
                pads.push(None);
                continue;
            }
            let mut pad = match (fault, self.last_pad.clone()) {
                (Some(super::FaultKind::ReusePad), Some(old)) => old,
                _ => self.issue(s, pass, o.value)?,
            };
            let masked = self.ledger.mask(o.value, &mut pad)?;
            self.last_pad = Some(pad.clone());
            sent.push(boundary(masked.payload));
            pads.push(Some(pad.values));
        }
        self.trace.record(
            EventKind::Masking { site: s, pass },
            pads.iter().flatten().map(|p| p.len() as u64).sum(),
            0,
        );
        self.trace.record(
            EventKind::Crossing {
                site: s,
                pass,
                from: TrustDomain::Trusted,
                to: TrustDomain::Untrusted,
                state,
            },
            elements,
            0,
        );

        // Untrusted side computes on what it received. Any exposure of the
        // operands is already on record at the crossing.
        let flops = map.flops(lhs.value.shape(), rhs.value.shape());
        self.trace.record(
            EventKind::Op {
                site: s,
                pass,
                domain: TrustDomain::Untrusted,
                class: OpClass::Linear,
                state: TensorState::Masked,
                owner_local: false,
            },
            0,
            flops,
        );
        let product = precision.quantized(map.apply(&sent[0], &sent[1])?);
        self.trace.record(
            EventKind::Crossing {
                site: s,
                pass,
                from: TrustDomain::Untrusted,
                to: TrustDomain::Trusted,
                state: TensorState::Masked,
            },
            product.len() as u64,
            0,
        );

        // Trusted side removes the pad contributions.
        let out = match (&pads[0], &pads[1]) {
            (None, None) => product,
            (Some(r), None) => {
                let hr = map.apply(r, &sent[1])?;
                self.trace
                    .record(EventKind::Offline { site: s, pass }, 0, flops);
                product.sub(&hr)?
            }
            (None, Some(r)) => {
                let hr = map.apply(&sent[0], r)?;
                self.trace
                    .record(EventKind::Offline { site: s, pass }, 0, flops);
                product.sub(&hr)?
            }
            (Some(ra), Some(rb)) => {
                let cross = CrossTerms::compute(map, &sent[0], &sent[1], ra, rb)?;
                self.trace
                    .record(EventKind::Masking { site: s, pass }, 0, 2 * flops);
                self.trace
                    .record(EventKind::Offline { site: s, pass }, 0, flops);
                cross.unmask(&product)?
            }
        };
        self.trace
            .record(EventKind::Masking { site: s, pass }, out.len() as u64, 0);
        Ok(boundary(out))
    }
}

impl Router for Channel {
    fn bilinear(
        &mut self,
        tag: Option<Tag>,
        pass: Pass,
        map: Bilinear,
        lhs: Operand<'_>,
        rhs: Operand<'_>,
        precision: Precision,
    ) -> Result<Tensor> {
        let site = tag.and_then(Site::from_tag);
        let domain = self.plan.domain(site);
        let private = !lhs.public || !rhs.public;
        match (domain, site) {
            (TrustDomain::Untrusted, Some(site))
                if private && self.plan.masking() && !self.plan.owner_local(Some(site)) =>
            {
                self.outsource(site, pass, map, lhs, rhs, precision)
            }
            _ => self.local(site, pass, domain, map, lhs, rhs, precision),
        }
    }

    fn account(&mut self, tag: Option<Tag>, pass: Pass, class: OpClass, flops: u64, public: bool) {
        let site = tag.and_then(Site::from_tag);
        let domain = self.plan.domain(site);
        self.trace.record(
            EventKind::Op {
                site,
                pass,
                domain,
                class,
                state: state_of(public),
                owner_local: self.plan.owner_local(site),
            },
            0,
            flops,
        );
    }
}
