//! One-time additive pads for tensors crossing the trust boundary.
//!
//! The trusted side adds a fresh random pad `r` to a tensor `E` before it
//! leaves, so the untrusted side only sees `E + r`. Because every outsourced
//! op is linear in each argument, the trusted side recovers the plaintext
//! result by subtracting the op applied to the pad, or, for a product of two
//! masked operands, the three cross terms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::{Bilinear, Rng, Tensor};

/// Distribution of pad entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MaskDistribution {
    /// Uniform on `[-scale, scale)`.
    Uniform {
        scale: f64,
    },
    Normal {
        std: f64,
    },
}

impl Default for MaskDistribution {
    fn default() -> Self {
        MaskDistribution::Uniform { scale: 1.0 }
    }
}

/// A single-use additive mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPad {
    pub id: u64,
    pub values: Tensor,
    pub consumed: bool,
    /// The boundary or wire this pad protects.
    pub channel: String,
}

/// `E + r`, tagged with the pad it was masked by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedTensor {
    pub payload: Tensor,
    pub pad_id: u64,
}

/// Draws pad values. The caller assigns identity; see [`PadLedger::issue`].
pub fn gen_mask(shape: &[usize], rng: &mut Rng, dist: MaskDistribution) -> Result<Tensor> {
    if shape.iter().product::<usize>() == 0 {
        return dim_err(format!("pad for empty shape {shape:?}"));
    }
    Ok(match dist {
        MaskDistribution::Uniform { scale } => rng.uniform_tensor(shape, scale),
        MaskDistribution::Normal { std } => rng.normal_tensor(shape, std),
    })
}

/// `E_en = E + r`; consumes the pad.
pub fn mask(e: &Tensor, pad: &mut MaskPad) -> Result<MaskedTensor> {
    if pad.consumed {
        return Err(Error::MaskReuse { pad_id: pad.id });
    }
    let payload = e.add(&pad.values)?;
    pad.consumed = true;
    Ok(MaskedTensor {
        payload,
        pad_id: pad.id,
    })
}

/// `h(E) = h(E_en) - h(r)` for a linear `h` evaluated on both inputs.
///
/// `h_of_mask` must be the linear part only; any bias belongs to `h(E)` and
/// is added once by the caller.
pub fn unmask_affine(h_of_payload: &Tensor, h_of_mask: &Tensor) -> Result<Tensor> {
    h_of_payload.sub(h_of_mask)
}

/// Recovers `Q·K` from the untrusted product `Q_en·K_en` of two masked
/// operands:
///
/// `Q·K = Q_en·K_en − Q_en·r_k − r_q·K_en + r_q·r_k`
pub fn unmask_matmul(
    qen_ken: &Tensor,
    q_en: &MaskedTensor,
    k_en: &MaskedTensor,
    r_q: &MaskPad,
    r_k: &MaskPad,
) -> Result<Tensor> {
    unmask_bilinear(Bilinear::MatMul, qen_ken, q_en, k_en, r_q, r_k)
}

/// The same four-term identity for any map bilinear in its two arguments.
pub fn unmask_bilinear(
    map: Bilinear,
    product_of_payloads: &Tensor,
    a_en: &MaskedTensor,
    b_en: &MaskedTensor,
    r_a: &MaskPad,
    r_b: &MaskPad,
) -> Result<Tensor> {
    if a_en.pad_id != r_a.id || b_en.pad_id != r_b.id {
        return contract_err("masked operand does not belong to the supplied pad");
    }
    a_en.payload.same_shape(&r_a.values)?;
    b_en.payload.same_shape(&r_b.values)?;
    let cross = CrossTerms::compute(map, &a_en.payload, &b_en.payload, &r_a.values, &r_b.values)?;
    cross.unmask(product_of_payloads)
}

/// Trusted-side correction terms of the four-term identity.
#[derive(Debug, Clone)]
pub struct CrossTerms {
    /// `f(A_en, r_b)`
    pub payload_pad: Tensor,
    /// `f(r_a, B_en)`
    pub pad_payload: Tensor,
    /// `f(r_a, r_b)`, payload-independent and therefore precomputable.
    pub pad_pad: Tensor,
}

impl CrossTerms {
    pub fn compute(
        map: Bilinear,
        a_en: &Tensor,
        b_en: &Tensor,
        r_a: &Tensor,
        r_b: &Tensor,
    ) -> Result<Self> {
        Ok(Self {
            payload_pad: map.apply(a_en, r_b)?,
            pad_payload: map.apply(r_a, b_en)?,
            pad_pad: map.apply(r_a, r_b)?,
        })
    }

    pub fn unmask(&self, product_of_payloads: &Tensor) -> Result<Tensor> {
        let mut out = product_of_payloads.sub(&self.payload_pad)?;
        out = out.sub(&self.pad_payload)?;
        out.add(&self.pad_pad)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadRecord {
    pub id: u64,
    pub channel: String,
    pub shape: Vec<usize>,
    pub uses: u32,
}

/// Registry of every pad issued by one party. Single writer.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PadLedger {
    prefix: u64,
    next: u64,
    records: BTreeMap<u64, PadRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub issued: u64,
    pub used_once: u64,
    pub unused: u64,
    pub reused: u64,
}

impl PadLedger {
    /// `prefix` occupies the top 16 bits of every id this ledger issues, so
    /// ledgers of different parties never collide.
    pub fn new(prefix: u16) -> Self {
        Self {
            prefix: u64::from(prefix) << 48,
            next: 0,
            records: BTreeMap::new(),
        }
    }

    pub fn issue(
        &mut self,
        channel: &str,
        shape: &[usize],
        rng: &mut Rng,
        dist: MaskDistribution,
    ) -> Result<MaskPad> {
        let values = gen_mask(shape, rng, dist)?;
        let id = self.prefix | self.next;
        self.next += 1;
        self.records.insert(
            id,
            PadRecord {
                id,
                channel: channel.to_string(),
                shape: shape.to_vec(),
                uses: 0,
            },
        );
        Ok(MaskPad {
            id,
            values,
            consumed: false,
            channel: channel.to_string(),
        })
    }

    /// Masks through the ledger so that reuse is caught even across pad
    /// clones.
    pub fn mask(&mut self, e: &Tensor, pad: &mut MaskPad) -> Result<MaskedTensor> {
        let record = self
            .records
            .get_mut(&pad.id)
            .ok_or_else(|| Error::Contract(format!("pad {} was not issued here", pad.id)))?;
        if record.uses > 0 || pad.consumed {
            record.uses += 1;
            return Err(Error::MaskReuse { pad_id: pad.id });
        }
        let out = mask(e, pad)?;
        record.uses = 1;
        Ok(out)
    }

    pub fn summary(&self) -> LedgerSummary {
        let mut s = LedgerSummary {
            issued: self.records.len() as u64,
            used_once: 0,
            unused: 0,
            reused: 0,
        };
        for r in self.records.values() {
            match r.uses {
                0 => s.unused += 1,
                1 => s.used_once += 1,
                _ => s.reused += 1,
            }
        }
        s
    }

    pub fn records(&self) -> impl Iterator<Item = &PadRecord> {
        self.records.values()
    }

    /// Folds another party's ledger in. Ids are prefix-disjoint.
    pub fn absorb(&mut self, other: PadLedger) -> Result<()> {
        for (id, rec) in other.records {
            if self.records.insert(id, rec).is_some() {
                return contract_err(format!("pad id {id} issued twice"));
            }
        }
        Ok(())
    }
}
