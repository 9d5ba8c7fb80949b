//! Toy pre-LN transformer encoder with LoRA, prefix and head-sparsified
//! fine-tuning.

mod checkpoint;
mod config;
mod graph;
mod lora;
mod site;
mod spf;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, manifest_for, manifest_path,
    save_checkpoint, CheckpointManifest, ManifestEntry, ParamSet, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{LoraConfig, RatioPreset, TransformerConfig, TuningConfig, TuningMode};
pub use graph::Graph;
pub use lora::{lora_forward, LoraAdapter};
pub use site::{LinearKind, Site, SiteKind};
pub use spf::{spf_forward, spf_select_heads, spf_train_count, SpfLinear, SpfPartition};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::{Bilinear, Precision, Rng, Router, Tensor, Var};

const BASE_STREAM: u64 = 0;
const ADAPTER_STREAM: u64 = 1;

/// Frozen weights of one encoder block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    /// `[d_out × d_in]` per linear, indexed by `LinearKind as usize`.
    pub w: [Tensor; 4],
    pub b: [Tensor; 4],
}

impl LayerWeights {
    pub fn linear(&self, kind: LinearKind) -> (&Tensor, &Tensor) {
        (&self.w[kind as usize], &self.b[kind as usize])
    }
}

/// The frozen, public base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseWeights {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl BaseWeights {
    pub fn init(config: &TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed, BASE_STREAM);
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| {
                let mut w = Vec::new();
                let mut b = Vec::new();
                for kind in LinearKind::ALL {
                    let (o, i) = config.linear_dims(kind);
                    // Output projections start smaller to keep the residual
                    // stream scale stable across depth.
                    let gain = match kind {
                        LinearKind::Dense | LinearKind::Fc2 => 0.5,
                        _ => 1.0,
                    };
                    w.push(rng.normal_tensor(&[o, i], gain / (i as f64).sqrt()));
                    b.push(rng.normal_tensor(&[o], 0.1));
                }
                LayerWeights {
                    ln1_g: Tensor::full(&[d], 1.0),
                    ln1_b: Tensor::zeros(&[d]),
                    ln2_g: Tensor::full(&[d], 1.0),
                    ln2_b: Tensor::zeros(&[d]),
                    w: w.try_into().expect("four linears"),
                    b: b.try_into().expect("four linears"),
                }
            })
            .collect();
        Ok(Self {
            tok_emb: rng.normal_tensor(&[config.vocab, d], 1.0),
            pos_emb: rng.normal_tensor(&[config.max_seq, d], 0.1),
            layers,
            lnf_g: Tensor::full(&[d], 1.0),
            lnf_b: Tensor::zeros(&[d]),
            head_w: rng.normal_tensor(&[config.n_classes, d], 1.0 / (d as f64).sqrt()),
            head_b: Tensor::zeros(&[config.n_classes]),
        })
    }

    /// Combined bit fingerprint of every frozen tensor.
    pub fn fingerprint(&self) -> u64 {
        let mut all = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            all.extend([&l.ln1_g, &l.ln1_b, &l.ln2_g, &l.ln2_b]);
            all.extend(l.w.iter().chain(&l.b));
        }
        all.extend([&self.lnf_g, &self.lnf_b, &self.head_w, &self.head_b]);
        all.iter().fold(0xcbf2_9ce4_8422_2325, |h: u64, t| {
            (h ^ t.fingerprint()).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

/// Per-layer key and value prefixes, `[prefix_len × d_model]` each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixEmbedding {
    pub k: Tensor,
    pub v: Tensor,
}

impl PrefixEmbedding {
    pub fn prefix_len(&self) -> usize {
        self.k.rows()
    }
}

/// Trainable state layered on the base model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Adapters {
    pub lora: BTreeMap<(usize, LinearKind), LoraAdapter>,
    pub prefix: BTreeMap<usize, PrefixEmbedding>,
    pub spf: BTreeMap<(usize, LinearKind), SpfLinear>,
    /// Trainable classifier head `(w, b)`; `None` keeps the base head frozen.
    pub head: Option<(Tensor, Tensor)>,
}

impl Adapters {
    /// Adapters for `tuning` on top of `base`.
    pub fn init(
        config: &TransformerConfig,
        tuning: &TuningConfig,
        base: &BaseWeights,
        seed: u64,
    ) -> Result<Self> {
        tuning.validate(config)?;
        let mut rng = Rng::new(seed, ADAPTER_STREAM);
        let mut out = Adapters::default();
        let lora_cfg = &tuning.lora;
        let mut add_lora = |out: &mut Adapters, layer: usize, kind: LinearKind| -> Result<()> {
            let (d_out, d_in) = config.linear_dims(kind);
            let a = LoraAdapter::init(
                d_in,
                d_out,
                lora_cfg.rank,
                lora_cfg.alpha,
                lora_cfg.dropout,
                &mut rng,
            )?;
            out.lora.insert((layer, kind), a);
            Ok(())
        };
        match tuning.mode {
            TuningMode::Frozen => {}
            TuningMode::Lora => {
                if lora_cfg.rank > 0 {
                    for layer in 0..config.n_layers {
                        for &kind in &lora_cfg.targets {
                            add_lora(&mut out, layer, kind)?;
                        }
                    }
                }
            }
            TuningMode::PtuningV2 => {
                let shape = [tuning.prefix_len, config.d_model];
                let mut prng = Rng::new(seed, ADAPTER_STREAM + 1);
                if tuning.prefix_len > 0 {
                    for layer in 0..config.n_layers {
                        let k = prng.normal_tensor(&shape, 1.0);
                        let v = prng.normal_tensor(&shape, 1.0);
                        out.prefix.insert(layer, PrefixEmbedding { k, v });
                    }
                }
            }
            TuningMode::SplitSpf => {
                for layer in tuning.split_layer..config.n_layers {
                    let lw = &base.layers[layer];
                    for (kind, ratio) in [
                        (LinearKind::Qkv, tuning.qkv_ratio),
                        (LinearKind::Dense, tuning.dense_ratio),
                    ] {
                        if ratio > 0.0 {
                            let groups = config.head_groups(kind).expect("attention linear");
                            let (w, b) = lw.linear(kind);
                            out.spf
                                .insert((layer, kind), SpfLinear::from_base(w, b, groups, ratio)?);
                        }
                    }
                    if lora_cfg.rank > 0 {
                        add_lora(&mut out, layer, LinearKind::Fc1)?;
                        add_lora(&mut out, layer, LinearKind::Fc2)?;
                    }
                }
            }
        }
        if tuning.train_head {
            out.head = Some((base.head_w.clone(), base.head_b.clone()));
        }
        Ok(out)
    }
}

fn lora_name(layer: usize, kind: LinearKind, part: &str) -> String {
    format!("layer{layer}.{}.lora_{part}", kind.name())
}

fn spf_name(layer: usize, kind: LinearKind, part: &str) -> String {
    format!("layer{layer}.{}.spf_{part}", kind.name())
}

fn prefix_name(layer: usize, part: &str) -> String {
    format!("layer{layer}.prefix_{part}")
}

/// Base model plus adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: TransformerConfig,
    pub tuning: TuningConfig,
    pub base: BaseWeights,
    pub adapters: Adapters,
}

impl Model {
    pub fn init(config: &TransformerConfig, tuning: &TuningConfig, seed: u64) -> Result<Self> {
        let base = BaseWeights::init(config, seed)?;
        Self::with_base(config, tuning, base, seed)
    }

    pub fn with_base(
        config: &TransformerConfig,
        tuning: &TuningConfig,
        base: BaseWeights,
        seed: u64,
    ) -> Result<Self> {
        let adapters = Adapters::init(config, tuning, &base, seed)?;
        Ok(Self {
            config: config.clone(),
            tuning: tuning.clone(),
            base,
            adapters,
        })
    }

    pub fn mode(&self) -> TuningMode {
        self.tuning.mode
    }

    /// Mutable views of every parameter that trains under the model's mode.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mode = self.tuning.mode;
        let a = &mut self.adapters;
        let mut out = Vec::new();
        if mode.lora_live() {
            for (&(l, k), lo) in a.lora.iter_mut() {
                out.push((lora_name(l, k, "a"), &mut lo.a));
                out.push((lora_name(l, k, "b"), &mut lo.b));
            }
        }
        if mode.prefix_live() {
            for (&l, p) in a.prefix.iter_mut() {
                out.push((prefix_name(l, "k"), &mut p.k));
                out.push((prefix_name(l, "v"), &mut p.v));
            }
        }
        if mode.spf_live() {
            for (&(l, k), s) in a.spf.iter_mut() {
                if !s.partition.train_heads.is_empty() {
                    out.push((spf_name(l, k, "w"), &mut s.w_train));
                    out.push((spf_name(l, k, "b"), &mut s.b_train));
                }
            }
        }
        if let Some((w, b)) = &mut a.head {
            out.push(("head.w".into(), w));
            out.push(("head.b".into(), b));
        }
        out
    }

    pub fn trainable(&mut self) -> ParamSet {
        self.trainable_mut()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Overwrites trainable parameters; every name must exist with a
    /// matching shape.
    pub fn load_trainable(&mut self, params: &ParamSet) -> Result<()> {
        let mut slots: BTreeMap<String, &mut Tensor> = self.trainable_mut().into_iter().collect();
        for (name, value) in params {
            let Some(slot) = slots.get_mut(name) else {
                return contract_err(format!("no trainable parameter {name}"));
            };
            if slot.shape() != value.shape() {
                return dim_err(format!(
                    "{name}: {:?} into {:?}",
                    value.shape(),
                    slot.shape()
                ));
            }
            **slot = value.clone();
        }
        Ok(())
    }

    /// Token plus position embedding, entering as private data.
    pub fn embed<R: Router>(&self, g: &mut Graph<R>, tokens: &[usize]) -> Result<Var> {
        let c = &self.config;
        if tokens.is_empty() || tokens.len() > c.max_seq {
            return dim_err(format!(
                "sequence of {} tokens (max {})",
                tokens.len(),
                c.max_seq
            ));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= c.vocab) {
            return dim_err(format!("token {t} outside vocab {}", c.vocab));
        }
        let pos: Vec<usize> = (0..tokens.len()).collect();
        let x = self
            .base
            .tok_emb
            .select_rows(tokens)?
            .add(&self.base.pos_emb.select_rows(&pos)?)?;
        g.input(Site::global(SiteKind::Embed), x)
    }

    fn linear<R: Router>(
        &self,
        g: &mut Graph<R>,
        x: Var,
        layer: usize,
        kind: LinearKind,
        mode: TuningMode,
    ) -> Result<Var> {
        let at = |k| Site::layer(layer, k);
        let spf = self
            .adapters
            .spf
            .get(&(layer, kind))
            .filter(|_| mode.spf_live());
        let mut y = match spf {
            Some(spf) => self.spf_linear(g, x, layer, kind, spf)?,
            None => {
                let (w, b) = self.base.layers[layer].linear(kind);
                let site = at(SiteKind::Product(kind));
                let wc = g.constant(site, w)?;
                let wt = g.at(site, |t| t.transpose(wc))?;
                let y = g.bilinear(site, Bilinear::MatMul, x, wt)?;
                let site = at(SiteKind::Bias(kind));
                let bc = g.constant(site, b)?;
                g.at(site, |t| t.add_bias(y, bc))?
            }
        };
        let lora = self
            .adapters
            .lora
            .get(&(layer, kind))
            .filter(|_| mode.lora_live());
        if let Some(lo) = lora {
            let site = at(SiteKind::Lora(kind));
            let a = g.param(site, lora_name(layer, kind, "a"), &lo.a)?;
            let b = g.param(site, lora_name(layer, kind, "b"), &lo.b)?;
            let shape = g.value(x).shape().to_vec();
            let xin = match g.dropout_mask(&shape, lo.dropout_p) {
                Some(m) => g.at(site, |t| t.mul_const(x, m))?,
                None => x,
            };
            let at_ = g.at(site, |t| t.transpose(a))?;
            let xa = g.bilinear(site, Bilinear::MatMul, xin, at_)?;
            let bt = g.at(site, |t| t.transpose(b))?;
            let xab = g.bilinear(site, Bilinear::MatMul, xa, bt)?;
            let s = lo.scaling();
            y = g.at(site, |t| {
                let d = t.scale(xab, s)?;
                t.add(y, d)
            })?;
        }
        Ok(y)
    }

    fn spf_linear<R: Router>(
        &self,
        g: &mut Graph<R>,
        x: Var,
        layer: usize,
        kind: LinearKind,
        spf: &SpfLinear,
    ) -> Result<Var> {
        let site = Site::layer(layer, SiteKind::Spf(kind));
        let (w_all, b_all) = self.base.layers[layer].linear(kind);
        spf.partition.check_against(w_all, b_all)?;
        let p = &spf.partition;
        let width = p.d_out();
        let mut out: Option<Var> = None;
        for train in [true, false] {
            let (rows, w, b) = if train {
                (p.train_rows(), &spf.w_train, &spf.b_train)
            } else {
                (p.freeze_rows(), &spf.w_freeze, &spf.b_freeze)
            };
            if rows.is_empty() {
                continue;
            }
            let (wv, bv) = if train {
                (
                    g.param(site, spf_name(layer, kind, "w"), w)?,
                    g.param(site, spf_name(layer, kind, "b"), b)?,
                )
            } else {
                (g.constant(site, w)?, g.constant(site, b)?)
            };
            let wt = g.at(site, |t| t.transpose(wv))?;
            let y = g.bilinear(site, Bilinear::MatMul, x, wt)?;
            out = Some(g.at(site, |t| {
                let y = t.add_bias(y, bv)?;
                let y = t.scatter_cols(y, &rows, width)?;
                match out {
                    Some(o) => t.add(o, y),
                    None => Ok(y),
                }
            })?);
        }
        out.ok_or_else(|| Error::Contract("spf partition with no rows".into()))
    }

    /// One pre-LN encoder block on `x[seq × d_model]`.
    pub fn forward_block<R: Router>(
        &self,
        g: &mut Graph<R>,
        x: Var,
        layer: usize,
        mode: TuningMode,
    ) -> Result<Var> {
        let c = &self.config;
        if layer >= c.n_layers {
            return dim_err(format!("layer {layer} of {}", c.n_layers));
        }
        if g.value(x).shape().len() != 2 || g.value(x).cols() != c.d_model {
            return dim_err(format!(
                "block input {:?}, expected seq x {}",
                g.value(x).shape(),
                c.d_model
            ));
        }
        let lw = &self.base.layers[layer];
        let at = |k| Site::layer(layer, k);
        let (d, heads, eps) = (c.d_model, c.n_heads, c.ln_eps);

        let h = self.layernorm(g, at(SiteKind::Ln1), x, &lw.ln1_g, &lw.ln1_b, eps)?;
        let qkv = self.linear(g, h, layer, LinearKind::Qkv, mode)?;
        let cols = |s: usize| (s * d..(s + 1) * d).collect::<Vec<_>>();
        let (q, mut k, mut v) = g.at(at(SiteKind::SplitHeads), |t| {
            Ok((
                t.select_cols(qkv, &cols(0))?,
                t.select_cols(qkv, &cols(1))?,
                t.select_cols(qkv, &cols(2))?,
            ))
        })?;
        let prefix = self
            .adapters
            .prefix
            .get(&layer)
            .filter(|p| mode.prefix_live() && p.prefix_len() > 0);
        if let Some(p) = prefix {
            let site = at(SiteKind::Prefix);
            let pk = g.param(site, prefix_name(layer, "k"), &p.k)?;
            let pv = g.param(site, prefix_name(layer, "v"), &p.v)?;
            (k, v) = g.at(site, |t| {
                Ok((t.concat_rows(&[pk, k])?, t.concat_rows(&[pv, v])?))
            })?;
        }
        let s = g.bilinear(at(SiteKind::Scores), Bilinear::HeadScores { heads }, q, k)?;
        let inv = 1.0 / (c.d_head as f64).sqrt();
        let p = g.at(at(SiteKind::Softmax), |t| {
            let s = t.scale(s, inv)?;
            t.softmax(s)
        })?;
        let ctx = g.bilinear(at(SiteKind::AttnMix), Bilinear::HeadMix { heads }, p, v)?;
        let attn = self.linear(g, ctx, layer, LinearKind::Dense, mode)?;
        let x = g.at(at(SiteKind::Residual), |t| t.add(x, attn))?;

        let h = self.layernorm(g, at(SiteKind::Ln2), x, &lw.ln2_g, &lw.ln2_b, eps)?;
        let f = self.linear(g, h, layer, LinearKind::Fc1, mode)?;
        let f = g.at(at(SiteKind::Gelu), |t| t.gelu(f))?;
        let f = self.linear(g, f, layer, LinearKind::Fc2, mode)?;
        g.at(at(SiteKind::Residual), |t| t.add(x, f))
    }

    fn layernorm<R: Router>(
        &self,
        g: &mut Graph<R>,
        site: Site,
        x: Var,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let gv = g.constant(site, gamma)?;
        let bv = g.constant(site, beta)?;
        g.at(site, |t| t.layernorm(x, gv, bv, eps))
    }

    /// Final norm, mean pooling and classifier head; returns `[1 × n_classes]`
    /// logits.
    pub fn classify<R: Router>(&self, g: &mut Graph<R>, x: Var) -> Result<Var> {
        let eps = self.config.ln_eps;
        let h = self.layernorm(
            g,
            Site::global(SiteKind::LnFinal),
            x,
            &self.base.lnf_g,
            &self.base.lnf_b,
            eps,
        )?;
        let pooled = g.at(Site::global(SiteKind::Pool), |t| t.mean_rows(h))?;
        let site = Site::global(SiteKind::Head);
        let (w, b) = match &self.adapters.head {
            Some((w, b)) => (
                g.param(site, "head.w".into(), w)?,
                g.param(site, "head.b".into(), b)?,
            ),
            None => (
                g.constant(site, &self.base.head_w)?,
                g.constant(site, &self.base.head_b)?,
            ),
        };
        let wt = g.at(site, |t| t.transpose(w))?;
        let logits = g.bilinear(site, Bilinear::MatMul, pooled, wt)?;
        g.at(site, |t| t.add_bias(logits, b))
    }

    /// Blocks `layers` applied in order.
    pub fn forward_layers<R: Router>(
        &self,
        g: &mut Graph<R>,
        mut x: Var,
        layers: std::ops::Range<usize>,
    ) -> Result<Var> {
        for l in layers {
            x = self.forward_block(g, x, l, self.tuning.mode)?;
        }
        Ok(x)
    }

    pub fn forward<R: Router>(&self, g: &mut Graph<R>, tokens: &[usize]) -> Result<Var> {
        let x = self.embed(g, tokens)?;
        let x = self.forward_layers(g, x, 0..self.config.n_layers)?;
        self.classify(g, x)
    }

    pub fn loss<R: Router>(&self, g: &mut Graph<R>, logits: Var, label: usize) -> Result<Var> {
        g.at(Site::global(SiteKind::Loss), |t| {
            t.cross_entropy(logits, label)
        })
    }

    /// Logits of a plaintext, in-place evaluation.
    pub fn logits(&self, tokens: &[usize], precision: Precision) -> Result<Tensor> {
        let mut g = Graph::local(precision);
        let out = self.forward(&mut g, tokens)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, tokens: &[usize], precision: Precision) -> Result<usize> {
        Ok(argmax(self.logits(tokens, precision)?.data()))
    }

    pub fn count_trainable(&mut self) -> usize {
        self.trainable_mut().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Index of the largest value, first on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Number of parameters that receive gradients under `tuning`.
pub fn count_trainable_params(config: &TransformerConfig, tuning: &TuningConfig) -> Result<usize> {
    Ok(Model::init(config, tuning, 0)?.count_trainable())
}
