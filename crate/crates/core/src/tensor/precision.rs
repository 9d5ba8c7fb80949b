use serde::{Deserialize, Serialize};

use super::Tensor;

/// Arithmetic mode of a run.
///
/// Values are always stored as `f64`. `SimHalf` rounds each op output to an
/// 11-bit significand (10 stored bits plus the implicit one, as in IEEE
/// binary16) with round-to-nearest-even. The exponent is not clamped, so
/// overflow and subnormal behaviour of real half floats are not modelled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    Exact,
    #[serde(alias = "simhalf")]
    SimHalf,
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(Precision::Exact),
            "simhalf" | "sim-half" => Ok(Precision::SimHalf),
            other => Err(crate::Error::Contract(format!(
                "unknown precision {other:?}"
            ))),
        }
    }
}

const DROPPED_BITS: u32 = 52 - 10;

impl Precision {
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            Precision::Exact => x,
            Precision::SimHalf => round_significand(x),
        }
    }

    pub fn quantize_tensor(self, t: &mut Tensor) {
        if self == Precision::SimHalf {
            for v in t.data_mut() {
                *v = round_significand(*v);
            }
        }
    }

    pub fn quantized(self, mut t: Tensor) -> Tensor {
        self.quantize_tensor(&mut t);
        t
    }
}

fn round_significand(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let bits = x.to_bits();
    let mask = (1u64 << DROPPED_BITS) - 1;
    let half = 1u64 << (DROPPED_BITS - 1);
    let rem = bits & mask;
    let mut kept = bits & !mask;
    let lsb = (kept >> DROPPED_BITS) & 1;
    if rem > half || (rem == half && lsb == 1) {
        // carry may ripple into the exponent, which is the correct rounding
        kept += 1u64 << DROPPED_BITS;
    }
    f64::from_bits(kept)
}
