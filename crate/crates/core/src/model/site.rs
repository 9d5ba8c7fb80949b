use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::Tag;

/// The four linear layers of an encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearKind {
    /// Fused query/key/value projection.
    Qkv,
    /// Attention output projection.
    Dense,
    Fc1,
    Fc2,
}

impl LinearKind {
    pub const ALL: [LinearKind; 4] = [
        LinearKind::Qkv,
        LinearKind::Dense,
        LinearKind::Fc1,
        LinearKind::Fc2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LinearKind::Qkv => "qkv",
            LinearKind::Dense => "dense",
            LinearKind::Fc1 => "fc1",
            LinearKind::Fc2 => "fc2",
        }
    }

    fn code(self) -> u32 {
        self as u32
    }

    fn from_code(c: u32) -> Option<Self> {
        LinearKind::ALL.get(c as usize).copied()
    }
}

/// What an op site does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "op", content = "linear")]
pub enum SiteKind {
    Embed,
    Ln1,
    /// Frozen base product `x·Wᵀ`, the outsourceable part of a linear.
    Product(LinearKind),
    /// Bias add and recombination of a linear's output.
    Bias(LinearKind),
    Lora(LinearKind),
    /// Head-sparsified linear (trainable and frozen row groups).
    Spf(LinearKind),
    SplitHeads,
    Prefix,
    /// `Q·Kᵀ` per head.
    Scores,
    Softmax,
    /// Attention-weighted sum of values.
    AttnMix,
    Residual,
    Ln2,
    Gelu,
    LnFinal,
    Pool,
    Head,
    Loss,
}

impl SiteKind {
    fn code(self) -> u32 {
        match self {
            SiteKind::Embed => 0,
            SiteKind::Ln1 => 1,
            SiteKind::Product(k) => 0x10 | k.code(),
            SiteKind::Bias(k) => 0x20 | k.code(),
            SiteKind::Lora(k) => 0x30 | k.code(),
            SiteKind::Spf(k) => 0x40 | k.code(),
            SiteKind::SplitHeads => 2,
            SiteKind::Prefix => 3,
            SiteKind::Scores => 4,
            SiteKind::Softmax => 5,
            SiteKind::AttnMix => 6,
            SiteKind::Residual => 7,
            SiteKind::Ln2 => 8,
            SiteKind::Gelu => 9,
            SiteKind::LnFinal => 10,
            SiteKind::Pool => 11,
            SiteKind::Head => 12,
            SiteKind::Loss => 13,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        let linear = || LinearKind::from_code(c & 0xf);
        Some(match c {
            0 => SiteKind::Embed,
            1 => SiteKind::Ln1,
            2 => SiteKind::SplitHeads,
            3 => SiteKind::Prefix,
            4 => SiteKind::Scores,
            5 => SiteKind::Softmax,
            6 => SiteKind::AttnMix,
            7 => SiteKind::Residual,
            8 => SiteKind::Ln2,
            9 => SiteKind::Gelu,
            10 => SiteKind::LnFinal,
            11 => SiteKind::Pool,
            12 => SiteKind::Head,
            13 => SiteKind::Loss,
            0x10..=0x13 => SiteKind::Product(linear()?),
            0x20..=0x23 => SiteKind::Bias(linear()?),
            0x30..=0x33 => SiteKind::Lora(linear()?),
            0x40..=0x43 => SiteKind::Spf(linear()?),
            _ => return None,
        })
    }

    /// Kinds that occur once per encoder block.
    pub fn per_layer() -> Vec<SiteKind> {
        let mut v = vec![
            SiteKind::Ln1,
            SiteKind::SplitHeads,
            SiteKind::Prefix,
            SiteKind::Scores,
            SiteKind::Softmax,
            SiteKind::AttnMix,
            SiteKind::Residual,
            SiteKind::Ln2,
            SiteKind::Gelu,
        ];
        for k in LinearKind::ALL {
            v.extend([
                SiteKind::Product(k),
                SiteKind::Bias(k),
                SiteKind::Lora(k),
                SiteKind::Spf(k),
            ]);
        }
        v
    }

    /// Kinds outside the encoder blocks.
    pub fn global() -> [SiteKind; 5] {
        [
            SiteKind::Embed,
            SiteKind::LnFinal,
            SiteKind::Pool,
            SiteKind::Head,
            SiteKind::Loss,
        ]
    }
}

/// A place in the model graph where ops execute; the unit a partition plan
/// assigns to a trust domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub layer: Option<usize>,
    pub kind: SiteKind,
}

const NO_LAYER: u32 = 0xffff;

impl Site {
    pub fn layer(layer: usize, kind: SiteKind) -> Self {
        Self {
            layer: Some(layer),
            kind,
        }
    }

    pub fn global(kind: SiteKind) -> Self {
        Self { layer: None, kind }
    }

    pub fn tag(self) -> Tag {
        let layer = self.layer.map_or(NO_LAYER, |l| l as u32);
        (layer << 8) | self.kind.code()
    }

    pub fn from_tag(tag: Tag) -> Option<Self> {
        let kind = SiteKind::from_code(tag & 0xff)?;
        let layer = match tag >> 8 {
            NO_LAYER => None,
            l => Some(l as usize),
        };
        Some(Self { layer, kind })
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.layer {
            write!(f, "layer{l}.")?;
        }
        match self.kind {
            SiteKind::Product(k) => write!(f, "{}.product", k.name()),
            SiteKind::Bias(k) => write!(f, "{}.bias", k.name()),
            SiteKind::Lora(k) => write!(f, "{}.lora", k.name()),
            SiteKind::Spf(k) => write!(f, "{}.spf", k.name()),
            other => write!(f, "{}", format!("{other:?}").to_lowercase()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for kind in SiteKind::per_layer() {
            for layer in [0, 3, 27] {
                let s = Site::layer(layer, kind);
                assert_eq!(Site::from_tag(s.tag()), Some(s));
            }
        }
        for kind in SiteKind::global() {
            let s = Site::global(kind);
            assert_eq!(Site::from_tag(s.tag()), Some(s));
        }
    }

    #[test]
    fn display_is_readable() {
        let s = Site::layer(2, SiteKind::Product(LinearKind::Qkv));
        assert_eq!(s.to_string(), "layer2.qkv.product");
        assert_eq!(Site::global(SiteKind::LnFinal).to_string(), "lnfinal");
    }
}
