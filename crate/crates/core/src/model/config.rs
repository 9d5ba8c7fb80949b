use serde::{Deserialize, Serialize};

use super::LinearKind;
use crate::error::{contract_err, dim_err, Result};

/// Shape of the toy encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub n_classes: usize,
    pub max_seq: usize,
    pub ln_eps: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            d_model: 32,
            n_heads: 4,
            d_head: 8,
            d_ff: 64,
            vocab: 32,
            n_classes: 4,
            max_seq: 16,
            ln_eps: 1e-5,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("n_classes", self.n_classes),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return dim_err(format!("{name} must be at least 1"));
        }
        if self.d_model != self.n_heads * self.d_head {
            return dim_err(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if !(self.ln_eps > 0.0) {
            return contract_err("ln_eps must be positive");
        }
        Ok(())
    }

    /// `(d_out, d_in)` of a block linear.
    pub fn linear_dims(&self, kind: LinearKind) -> (usize, usize) {
        let d = self.d_model;
        match kind {
            LinearKind::Qkv => (3 * d, d),
            LinearKind::Dense => (d, d),
            LinearKind::Fc1 => (self.d_ff, d),
            LinearKind::Fc2 => (d, self.d_ff),
        }
    }

    /// Head groups a linear's output rows are tiled into for SPF.
    pub fn head_groups(&self, kind: LinearKind) -> Option<usize> {
        match kind {
            LinearKind::Qkv => Some(3 * self.n_heads),
            LinearKind::Dense => Some(self.n_heads),
            LinearKind::Fc1 | LinearKind::Fc2 => None,
        }
    }
}

/// Which adapters are live in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningMode {
    /// Base model only; only the classifier head may train.
    Frozen,
    #[default]
    Lora,
    #[serde(alias = "ptuningv2")]
    PtuningV2,
    /// Head-sparsified QKV and dense linears plus LoRA on the MLP, in the
    /// layers at or above the split.
    SplitSpf,
}

impl std::str::FromStr for TuningMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frozen" => Ok(TuningMode::Frozen),
            "lora" => Ok(TuningMode::Lora),
            "ptuningv2" | "ptuning-v2" => Ok(TuningMode::PtuningV2),
            "split-spf" | "splitspf" => Ok(TuningMode::SplitSpf),
            other => contract_err(format!("unknown tuning mode {other:?}")),
        }
    }
}

impl TuningMode {
    pub fn lora_live(self) -> bool {
        matches!(self, TuningMode::Lora | TuningMode::SplitSpf)
    }

    pub fn prefix_live(self) -> bool {
        self == TuningMode::PtuningV2
    }

    pub fn spf_live(self) -> bool {
        self == TuningMode::SplitSpf
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    /// Zero disables LoRA.
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Linears that get adapters in `Lora` mode.
    pub targets: Vec<LinearKind>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.1,
            targets: vec![LinearKind::Qkv, LinearKind::Dense],
        }
    }
}

/// Named QKV/dense SPF ratio pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioPreset {
    /// 25% QKV, 50% dense.
    Quarter,
    /// 12.5% QKV, 25% dense.
    Eighth,
    /// 50% QKV, 62.5% dense.
    Half,
    Full,
}

impl RatioPreset {
    pub fn ratios(self) -> (f64, f64) {
        match self {
            RatioPreset::Quarter => (0.25, 0.5),
            RatioPreset::Eighth => (0.125, 0.25),
            RatioPreset::Half => (0.5, 0.625),
            RatioPreset::Full => (1.0, 1.0),
        }
    }
}

/// Fine-tuning setup: which adapters exist and how they are shaped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub mode: TuningMode,
    pub lora: LoraConfig,
    pub prefix_len: usize,
    /// First layer run on the server in split mode.
    pub split_layer: usize,
    /// Zero leaves the QKV linears frozen in split mode.
    pub qkv_ratio: f64,
    /// Zero leaves the dense linears frozen in split mode.
    pub dense_ratio: f64,
    pub train_head: bool,
}

impl Default for TuningConfig {
    fn default() -> Self {
        let (qkv_ratio, dense_ratio) = RatioPreset::Quarter.ratios();
        Self {
            mode: TuningMode::Lora,
            lora: LoraConfig::default(),
            prefix_len: 4,
            split_layer: 4,
            qkv_ratio,
            dense_ratio,
            train_head: true,
        }
    }
}

impl TuningConfig {
    pub fn with_preset(mut self, preset: RatioPreset) -> Self {
        (self.qkv_ratio, self.dense_ratio) = preset.ratios();
        self
    }

    pub fn validate(&self, model: &TransformerConfig) -> Result<()> {
        for (name, r) in [
            ("qkv_ratio", self.qkv_ratio),
            ("dense_ratio", self.dense_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return contract_err(format!("{name} {r} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.lora.dropout) {
            return contract_err(format!("lora dropout {} outside [0, 1)", self.lora.dropout));
        }
        if self.mode == TuningMode::SplitSpf && self.split_layer >= model.n_layers {
            return contract_err(format!(
                "split layer {} leaves no server layers of {}",
                self.split_layer, model.n_layers
            ));
        }
        Ok(())
    }
}
