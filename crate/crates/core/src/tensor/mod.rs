//! Dense row-major tensors, the bilinear kernels shared by every execution
//! domain, and the simulated half-precision quantizer.

mod optim;
mod precision;
mod rng;
mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

pub use optim::{Adam, Optimizer, Sgd};
pub use precision::Precision;
pub use rng::Rng;
pub use tape::{LocalRouter, OpClass, Operand, Pass, Router, Tag, Tape, Var};

/// Dense real tensor, row-major.
///
/// Only scalars, vectors and matrices are used by the model; higher ranks are
/// stored but no kernel accepts them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count when viewed as a matrix (vectors are a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return dim_err(format!("transpose needs a matrix, got {:?}", self.shape));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        Bilinear::MatMul.apply(self, other)
    }

    /// Gathers whole rows by index.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx {
            if r >= self.rows() {
                return dim_err(format!("row {r} out of range {}", self.rows()));
            }
            data.extend_from_slice(self.row(r));
        }
        Ok(Tensor {
            shape: vec![idx.len(), c],
            data,
        })
    }

    /// Gathers entries of a vector by index.
    pub fn select_entries(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            match self.data.get(i) {
                Some(&v) => data.push(v),
                None => return dim_err(format!("index {i} out of range {}", self.len())),
            }
        }
        Ok(Tensor::vector(data))
    }

    /// Bit-level fingerprint, used to prove frozen weights did not move.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for d in &self.shape {
            h = (h ^ *d as u64).wrapping_mul(0x0100_0000_01b3);
        }
        for v in &self.data {
            h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

/// Largest absolute difference scaled by the reference's largest magnitude.
pub fn rel_err(actual: &Tensor, reference: &Tensor) -> f64 {
    assert_eq!(actual.shape(), reference.shape(), "rel_err shape mismatch");
    let diff = actual
        .data()
        .iter()
        .zip(reference.data())
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = reference.max_abs();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// The bilinear products that may be outsourced across the trust boundary.
///
/// Head-blocked variants treat the column dimension `d` as `heads` equal
/// blocks, and stack per-head `m×n` results vertically. The set is closed
/// under differentiation, so backward passes route through the same maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bilinear {
    /// `A[m×k] · B[k×n]`
    MatMul,
    /// block `h` of the output is `A_h · B_hᵀ`; `A[m×d]`, `B[n×d]` → `[(heads·m)×n]`
    HeadScores { heads: usize },
    /// column block `h` is `G_h · B_h`; `G[(heads·m)×n]`, `B[n×d]` → `[m×d]`
    HeadMix { heads: usize },
    /// column block `h` is `G_hᵀ · A_h`; `G[(heads·m)×n]`, `A[m×d]` → `[n×d]`
    HeadMixT { heads: usize },
}

impl Bilinear {
    pub fn output_shape(self, a: &[usize], b: &[usize]) -> Result<[usize; 2]> {
        let (Some(&[am, ak]), Some(&[bm, bk])) = (as_mat(a), as_mat(b)) else {
            return dim_err(format!("{self:?} needs matrices, got {a:?} and {b:?}"));
        };
        match self {
            Bilinear::MatMul => {
                if ak != bm {
                    return dim_err(format!("matmul inner dims differ: {a:?} · {b:?}"));
                }
                Ok([am, bk])
            }
            Bilinear::HeadScores { heads } => {
                if ak != bk || heads == 0 || ak % heads != 0 {
                    return dim_err(format!("head scores over {heads} heads: {a:?}, {b:?}"));
                }
                Ok([heads * am, bm])
            }
            Bilinear::HeadMix { heads } => {
                if heads == 0 || am % heads != 0 || ak != bm || bk % heads != 0 {
                    return dim_err(format!("head mix over {heads} heads: {a:?}, {b:?}"));
                }
                Ok([am / heads, bk])
            }
            Bilinear::HeadMixT { heads } => {
                if heads == 0 || am % heads != 0 || am / heads != bm || bk % heads != 0 {
                    return dim_err(format!("head mixT over {heads} heads: {a:?}, {b:?}"));
                }
                Ok([ak, bk])
            }
        }
    }

    /// Multiply-accumulate count of one evaluation.
    pub fn flops(self, a: &[usize], b: &[usize]) -> u64 {
        let (Some(&[am, ak]), Some(&[_bm, bk])) = (as_mat(a), as_mat(b)) else {
            return 0;
        };
        let n = match self {
            Bilinear::MatMul => am * ak * bk,
            Bilinear::HeadScores { .. } => am * ak * b[0],
            Bilinear::HeadMix { .. } | Bilinear::HeadMixT { .. } => am * ak * bk / heads_of(self),
        };
        n as u64
    }

    pub fn apply(self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let [om, on] = self.output_shape(a.shape(), b.shape())?;
        let mut out = vec![0.0; om * on];
        let (ad, bd) = (a.data(), b.data());
        match self {
            Bilinear::MatMul => {
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                for i in 0..m {
                    let row = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &bd[p * n..(p + 1) * n];
                        for (o, &bv) in row.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
            Bilinear::HeadScores { heads } => {
                let (m, d, n) = (a.rows(), a.cols(), b.rows());
                let dh = d / heads;
                for h in 0..heads {
                    for i in 0..m {
                        let arow = &ad[i * d + h * dh..i * d + (h + 1) * dh];
                        for j in 0..n {
                            let brow = &bd[j * d + h * dh..j * d + (h + 1) * dh];
                            out[(h * m + i) * n + j] =
                                arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                }
            }
            Bilinear::HeadMix { heads } => {
                let (n, d) = (b.rows(), b.cols());
                let m = a.rows() / heads;
                let dh = d / heads;
                for h in 0..heads {
                    for i in 0..m {
                        let grow = &ad[(h * m + i) * n..(h * m + i + 1) * n];
                        let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                        for (j, &g) in grow.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let brow = &bd[j * d + h * dh..j * d + (h + 1) * dh];
                            for (o, &bv) in orow.iter_mut().zip(brow) {
                                *o += g * bv;
                            }
                        }
                    }
                }
            }
            Bilinear::HeadMixT { heads } => {
                let (m, d) = (b.rows(), b.cols());
                let n = a.cols();
                let dh = d / heads;
                for h in 0..heads {
                    for i in 0..m {
                        let grow = &ad[(h * m + i) * n..(h * m + i + 1) * n];
                        let brow = &bd[i * d + h * dh..i * d + (h + 1) * dh];
                        for (j, &g) in grow.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let orow = &mut out[j * d + h * dh..j * d + (h + 1) * dh];
                            for (o, &bv) in orow.iter_mut().zip(brow) {
                                *o += g * bv;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![om, on], out)
    }
}

fn heads_of(map: Bilinear) -> usize {
    match map {
        Bilinear::MatMul => 1,
        Bilinear::HeadScores { heads }
        | Bilinear::HeadMix { heads }
        | Bilinear::HeadMixT { heads } => heads,
    }
}

fn as_mat(shape: &[usize]) -> Option<&[usize; 2]> {
    shape.try_into().ok()
}
