use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Rng, Tensor};

/// Low-rank update `(alpha/rank)·b·a` added to a frozen linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `[rank × d_in]`
    pub a: Tensor,
    /// `[d_out × rank]`, zero at init.
    pub b: Tensor,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl LoraAdapter {
    pub fn init(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        dropout_p: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return dim_err(format!("lora rank {rank} for a {d_out}x{d_in} linear"));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            a: rng.uniform_tensor(&[rank, d_in], bound),
            b: Tensor::zeros(&[d_out, rank]),
            alpha,
            dropout_p,
        })
    }

    /// Builds an adapter from explicit factors.
    pub fn from_factors(a: Tensor, b: Tensor, alpha: f64, dropout_p: f64) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.cols() {
            return dim_err(format!(
                "lora factors {:?} and {:?} disagree on rank",
                a.shape(),
                b.shape()
            ));
        }
        if a.rows() == 0 || a.rows() > a.cols().min(b.rows()) {
            return dim_err(format!("lora rank {} exceeds its linear", a.rows()));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return contract_err(format!("dropout {dropout_p} outside [0, 1)"));
        }
        Ok(Self {
            a,
            b,
            alpha,
            dropout_p,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// The dense update `(alpha/rank)·b·a`, `[d_out × d_in]`.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?.scale(self.scaling()))
    }
}

/// Inference-mode `x·wᵀ + (alpha/rank)·(x·aᵀ)·bᵀ`.
pub fn lora_forward(x: &Tensor, w: &Tensor, lora: &LoraAdapter) -> Result<Tensor> {
    if w.shape() != [lora.d_out(), lora.d_in()] {
        return dim_err(format!(
            "lora {}x{} (rank {}) on weight {:?}",
            lora.d_out(),
            lora.d_in(),
            lora.rank(),
            w.shape()
        ));
    }
    let base = x.matmul(&w.transpose()?)?;
    let low = x
        .matmul(&lora.a.transpose()?)?
        .matmul(&lora.b.transpose()?)?
        .scale(lora.scaling());
    base.add(&low)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rel_err;

    #[test]
    fn zero_b_leaves_base_output() {
        let mut rng = Rng::new(1, 0);
        let x = rng.normal_tensor(&[3, 5], 1.0);
        let w = rng.normal_tensor(&[4, 5], 1.0);
        let lora = LoraAdapter::init(5, 4, 2, 16.0, 0.1, &mut rng).unwrap();
        assert_eq!(
            lora_forward(&x, &w, &lora).unwrap(),
            x.matmul(&w.transpose().unwrap()).unwrap()
        );
    }

    #[test]
    fn identity_update_reproduces_input() {
        // rank 2 on a 2x2 linear: a = I, b = I·rank/alpha.
        let a = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = Tensor::matrix(&[&[0.25, 0.0], &[0.0, 0.25]]);
        let lora = LoraAdapter::from_factors(a, b, 8.0, 0.0).unwrap();
        let x = Tensor::matrix(&[&[1.5, -2.0], &[0.25, 4.0]]);
        let out = lora_forward(&x, &Tensor::zeros(&[2, 2]), &lora).unwrap();
        assert!(rel_err(&out, &x) < 1e-15);
    }

    #[test]
    fn merged_weight_matches_two_path_forward() {
        let mut rng = Rng::new(2, 0);
        let x = rng.normal_tensor(&[3, 6], 1.0);
        let w = rng.normal_tensor(&[5, 6], 1.0);
        let mut lora = LoraAdapter::init(6, 5, 3, 16.0, 0.0, &mut rng).unwrap();
        lora.b = rng.normal_tensor(&[5, 3], 1.0);
        let merged = w.add(&lora.delta().unwrap()).unwrap();
        let want = x.matmul(&merged.transpose().unwrap()).unwrap();
        assert!(rel_err(&lora_forward(&x, &w, &lora).unwrap(), &want) < 1e-12);
    }

    #[test]
    fn rank_checks() {
        let mut rng = Rng::new(3, 0);
        assert!(LoraAdapter::init(4, 4, 5, 1.0, 0.0, &mut rng).is_err());
        assert!(LoraAdapter::init(4, 4, 0, 1.0, 0.0, &mut rng).is_err());
        let lora = LoraAdapter::init(4, 4, 2, 1.0, 0.0, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 4]);
        assert!(matches!(
            lora_forward(&x, &Tensor::zeros(&[3, 4]), &lora),
            Err(crate::Error::Dimension(_))
        ));
    }
}
