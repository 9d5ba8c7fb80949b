use std::marker::PhantomData;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{contract_err, Result};
use crate::model::{argmax, Graph, Model, ParamSet, Site, SiteKind};
use crate::tensor::{Adam, Optimizer, Precision, Rng, Router, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Adam step size.
    pub lr: f64,
    pub batch: usize,
    /// Passes over the local data per round.
    pub local_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch: 8,
            local_epochs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return contract_err(format!("learning rate {}", self.lr));
        }
        if self.batch == 0 || self.local_epochs == 0 {
            return contract_err("batch and local_epochs must be at least 1");
        }
        Ok(())
    }
}

/// A differentiable per-example loss over named parameters.
pub trait Objective {
    type Example;

    fn loss_grad(&mut self, params: &ParamSet, example: &Self::Example) -> Result<(f64, ParamSet)>;
}

/// Optimizer moments and data-order randomness that persist across rounds.
#[derive(Debug, Clone)]
pub struct LocalState {
    pub optimizer: Adam,
    pub order: Rng,
}

impl LocalState {
    pub fn new(lr: f64, order: Rng) -> Self {
        Self {
            optimizer: Adam::new(lr),
            order,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub params: ParamSet,
    /// Mean batch loss before each optimizer step.
    pub step_losses: Vec<f64>,
}

impl LocalOutcome {
    pub fn mean_loss(&self) -> f64 {
        self.step_losses.iter().sum::<f64>() / self.step_losses.len() as f64
    }
}

/// `local_epochs` shuffled minibatch passes of Adam over `data`, starting
/// from `params`. Only names in `params` are updated.
pub fn local_train_step<O: Objective>(
    objective: &mut O,
    state: &mut LocalState,
    mut params: ParamSet,
    data: &[O::Example],
    config: &TrainConfig,
) -> Result<LocalOutcome> {
    config.validate()?;
    if data.is_empty() {
        return contract_err("local training on an empty dataset");
    }
    let mut step_losses = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.local_epochs {
        state.order.shuffle(&mut order);
        for batch in order.chunks(config.batch) {
            let mut sum: Option<ParamSet> = None;
            let mut loss = 0.0;
            for &i in batch {
                let (l, g) = objective.loss_grad(&params, &data[i])?;
                loss += l;
                match &mut sum {
                    None => sum = Some(g),
                    Some(acc) => {
                        for (name, t) in g {
                            if let Some(a) = acc.get_mut(&name) {
                                a.add_assign(&t)?;
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads = sum.expect("batches are non-empty");
            for (name, p) in params.iter_mut() {
                let g = match grads.get(name) {
                    Some(g) => g.scale(scale),
                    None => Tensor::zeros(p.shape()),
                };
                state.optimizer.step(name, p, &g)?;
            }
            step_losses.push(loss * scale);
        }
    }
    Ok(LocalOutcome {
        params,
        step_losses,
    })
}

/// Where a model input enters and which blocks it still has to pass.
pub trait ModelInput {
    fn label(&self) -> usize;

    fn enter<R: Router>(&self, model: &Model, g: &mut Graph<R>) -> Result<(Var, Range<usize>)>;
}

impl ModelInput for Example {
    fn label(&self) -> usize {
        self.label
    }

    fn enter<R: Router>(&self, model: &Model, g: &mut Graph<R>) -> Result<(Var, Range<usize>)> {
        Ok((model.embed(g, &self.tokens)?, 0..model.config.n_layers))
    }
}

/// Split-boundary features of one example, `[seq × d_model]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    /// Index of the example in the training set.
    pub id: usize,
    pub value: Tensor,
    pub label: usize,
}

impl ModelInput for Feature {
    fn label(&self) -> usize {
        self.label
    }

    fn enter<R: Router>(&self, model: &Model, g: &mut Graph<R>) -> Result<(Var, Range<usize>)> {
        let split = model.tuning.split_layer;
        let x = g.input(Site::layer(split, SiteKind::Ln1), self.value.clone())?;
        Ok((x, split..model.config.n_layers))
    }
}

pub fn model_logits<R: Router, X: ModelInput>(
    model: &Model,
    g: &mut Graph<R>,
    x: &X,
) -> Result<Var> {
    let (h, layers) = x.enter(model, g)?;
    let h = model.forward_layers(g, h, layers)?;
    model.classify(g, h)
}

/// Cross-entropy of a model whose trainable parameters are swapped in per
/// call; products route through `router`.
pub struct ModelObjective<'a, R: Router, X> {
    pub model: &'a mut Model,
    pub router: R,
    pub precision: Precision,
    /// Source of per-example dropout generators.
    pub dropout: Rng,
    _input: PhantomData<X>,
}

impl<'a, R: Router, X> ModelObjective<'a, R, X> {
    pub fn new(model: &'a mut Model, router: R, precision: Precision, dropout: Rng) -> Self {
        Self {
            model,
            router,
            precision,
            dropout,
            _input: PhantomData,
        }
    }
}

impl<R: Router, X: ModelInput> Objective for ModelObjective<'_, R, X> {
    type Example = X;

    fn loss_grad(&mut self, params: &ParamSet, x: &X) -> Result<(f64, ParamSet)> {
        self.model.load_trainable(params)?;
        let mut g = Graph::new(self.precision, &mut self.router, Some(self.dropout.fork()));
        let logits = model_logits(self.model, &mut g, x)?;
        let loss = self.model.loss(&mut g, logits, x.label())?;
        let value = g.value(loss).data()[0];
        g.backward(loss)?;
        Ok((value, g.param_grads()?))
    }
}

/// Fraction of `data` whose argmax logit is the label, evaluated through
/// `router` in inference mode.
pub fn accuracy<R: Router, X: ModelInput>(
    model: &Model,
    router: &mut R,
    precision: Precision,
    data: &[X],
) -> Result<f64> {
    if data.is_empty() {
        return contract_err("accuracy of an empty set");
    }
    let mut hits = 0usize;
    for x in data {
        let mut g = Graph::new(precision, &mut *router, None);
        let logits = model_logits(model, &mut g, x)?;
        hits += usize::from(argmax(g.value(logits).data()) == x.label());
    }
    Ok(hits as f64 / data.len() as f64)
}
