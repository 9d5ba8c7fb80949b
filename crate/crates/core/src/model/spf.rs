//! Head-sparsified fine-tuning of a linear layer.
//!
//! Output rows are tiled into equal head groups. The groups with the largest
//! L1 weight norm are split off as trainable; the rest stay frozen. The layer
//! output is the sum of the two branches scattered back into row order,
//! which equals the dense output exactly at partition time.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

/// Record of which head groups of one linear are trainable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpfPartition {
    pub n_groups: usize,
    /// Output rows per group.
    pub head_group_size: usize,
    pub d_in: usize,
    pub ratio: f64,
    /// Sorted ascending.
    pub train_heads: Vec<usize>,
    /// Sorted ascending.
    pub freeze_heads: Vec<usize>,
    /// Per-group L1 norm at selection time.
    pub scores: Vec<f64>,
}

/// Number of trainable groups for `ratio` of `n_groups`: rounded up, at
/// least one.
pub fn spf_train_count(n_groups: usize, ratio: f64) -> usize {
    let raw = (ratio * n_groups as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n_groups)
}

impl SpfPartition {
    pub fn d_out(&self) -> usize {
        self.n_groups * self.head_group_size
    }

    fn rows_of(&self, groups: &[usize]) -> Vec<usize> {
        let g = self.head_group_size;
        groups.iter().flat_map(|&h| h * g..(h + 1) * g).collect()
    }

    pub fn train_rows(&self) -> Vec<usize> {
        self.rows_of(&self.train_heads)
    }

    pub fn freeze_rows(&self) -> Vec<usize> {
        self.rows_of(&self.freeze_heads)
    }

    pub(crate) fn check_against(&self, w_all: &Tensor, bias: &Tensor) -> Result<()> {
        if w_all.shape() != [self.d_out(), self.d_in] || bias.shape() != [self.d_out()] {
            return contract_err(format!(
                "partition built for {}x{} applied to weight {:?}, bias {:?}",
                self.d_out(),
                self.d_in,
                w_all.shape(),
                bias.shape()
            ));
        }
        Ok(())
    }
}

/// Picks the top groups by per-group L1 norm, lower index first on ties.
pub fn spf_select_heads(
    w_all: &Tensor,
    bias: &Tensor,
    n_groups: usize,
    ratio: f64,
) -> Result<SpfPartition> {
    if w_all.shape().len() != 2 {
        return dim_err(format!("weight of shape {:?}", w_all.shape()));
    }
    let (d_out, d_in) = (w_all.rows(), w_all.cols());
    if n_groups == 0 || d_out % n_groups != 0 {
        return dim_err(format!("{d_out} rows do not split into {n_groups} groups"));
    }
    if bias.shape() != [d_out] {
        return dim_err(format!("bias {:?} for {d_out} rows", bias.shape()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return contract_err(format!("spf ratio {ratio} outside (0, 1]"));
    }
    let g = d_out / n_groups;
    let scores: Vec<f64> = (0..n_groups)
        .map(|h| {
            w_all.data()[h * g * d_in..(h + 1) * g * d_in]
                .iter()
                .map(|v| v.abs())
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..n_groups).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let k = spf_train_count(n_groups, ratio);
    let mut train_heads = order[..k].to_vec();
    let mut freeze_heads = order[k..].to_vec();
    train_heads.sort_unstable();
    freeze_heads.sort_unstable();
    Ok(SpfPartition {
        n_groups,
        head_group_size: g,
        d_in,
        ratio,
        train_heads,
        freeze_heads,
        scores,
    })
}

/// Scatter-sum of the trainable and frozen branches.
pub fn spf_forward(
    x: &Tensor,
    w_all: &Tensor,
    bias: &Tensor,
    part: &SpfPartition,
) -> Result<Tensor> {
    part.check_against(w_all, bias)?;
    let lin = SpfLinear::split(w_all, bias, part.clone())?;
    lin.forward(x)
}

/// A linear stored as its trainable and frozen row blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpfLinear {
    pub partition: SpfPartition,
    pub w_train: Tensor,
    pub b_train: Tensor,
    pub w_freeze: Tensor,
    pub b_freeze: Tensor,
}

impl SpfLinear {
    pub fn from_base(w_all: &Tensor, bias: &Tensor, n_groups: usize, ratio: f64) -> Result<Self> {
        let part = spf_select_heads(w_all, bias, n_groups, ratio)?;
        Self::split(w_all, bias, part)
    }

    pub fn split(w_all: &Tensor, bias: &Tensor, partition: SpfPartition) -> Result<Self> {
        partition.check_against(w_all, bias)?;
        let (tr, fr) = (partition.train_rows(), partition.freeze_rows());
        Ok(Self {
            w_train: w_all.select_rows(&tr)?,
            b_train: Tensor::vector(tr.iter().map(|&r| bias.data()[r]).collect()),
            w_freeze: w_all.select_rows(&fr)?,
            b_freeze: Tensor::vector(fr.iter().map(|&r| bias.data()[r]).collect()),
            partition,
        })
    }

    /// Reassembles the dense weight and bias.
    pub fn merged(&self) -> (Tensor, Tensor) {
        let p = &self.partition;
        let d_in = p.d_in;
        let mut w = vec![0.0; p.d_out() * d_in];
        let mut b = vec![0.0; p.d_out()];
        for (rows, wt, bt) in [
            (p.train_rows(), &self.w_train, &self.b_train),
            (p.freeze_rows(), &self.w_freeze, &self.b_freeze),
        ] {
            for (i, &r) in rows.iter().enumerate() {
                w[r * d_in..(r + 1) * d_in].copy_from_slice(wt.row(i));
                b[r] = bt.data()[i];
            }
        }
        (
            Tensor::new(vec![p.d_out(), d_in], w).expect("rows cover the output"),
            Tensor::vector(b),
        )
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let p = &self.partition;
        let m = x.rows();
        let mut out = Tensor::zeros(&[m, p.d_out()]);
        for (rows, w, b) in [
            (p.train_rows(), &self.w_train, &self.b_train),
            (p.freeze_rows(), &self.w_freeze, &self.b_freeze),
        ] {
            if rows.is_empty() {
                continue;
            }
            let y = x.matmul(&w.transpose()?)?;
            let o = out.data_mut();
            for i in 0..m {
                for (j, &r) in rows.iter().enumerate() {
                    o[i * p.d_out() + r] += y.at(i, j) + b.data()[j];
                }
            }
        }
        Ok(out)
    }
}
