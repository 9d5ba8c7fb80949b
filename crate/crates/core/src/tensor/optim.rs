use std::collections::BTreeMap;

use super::Tensor;
use crate::error::Result;

/// First-order update rule applied to named parameters.
pub trait Optimizer: Send {
    fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, _name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        param.same_shape(grad)?;
        for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
            *p -= self.lr * g;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with bias correction; moments are kept per parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        param.same_shape(grad)?;
        let n = param.len();
        let st = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
        st.t += 1;
        let c1 = 1.0 - self.beta1.powi(st.t);
        let c2 = 1.0 - self.beta2.powi(st.t);
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}
