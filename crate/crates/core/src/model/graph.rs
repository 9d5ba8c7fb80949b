use super::{ParamSet, Site};
use crate::error::Result;
use crate::tensor::{Bilinear, LocalRouter, Pass, Precision, Rng, Router, Tape, Tensor, Var};

/// A tape bound to a router, with op-site labelling and named parameters.
///
/// Every op is appended under the site passed to [`Graph::at`] or
/// [`Graph::bilinear`]; local ops are reported to the router as they are
/// recorded.
pub struct Graph<R: Router> {
    tape: Tape,
    router: R,
    dropout: Option<Rng>,
    params: Vec<(String, Var)>,
}

impl Graph<LocalRouter> {
    pub fn local(precision: Precision) -> Self {
        Self::new(precision, LocalRouter, None)
    }
}

impl<R: Router> Graph<R> {
    /// `dropout` is the randomness for training-mode dropout; `None` means
    /// inference mode.
    pub fn new(precision: Precision, router: R, dropout: Option<Rng>) -> Self {
        Self {
            tape: Tape::new(precision),
            router,
            dropout,
            params: Vec::new(),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn router(&mut self) -> &mut R {
        &mut self.router
    }

    pub fn into_router(self) -> R {
        self.router
    }

    pub fn training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Runs local ops under `site`.
    pub fn at<T>(&mut self, site: Site, f: impl FnOnce(&mut Tape) -> Result<T>) -> Result<T> {
        let tag = Some(site.tag());
        self.tape.set_tag(tag);
        let start = self.tape.len();
        let out = f(&mut self.tape)?;
        for i in start..self.tape.len() {
            let v = self.tape.var(i);
            if self.tape.is_bilinear(v) {
                continue;
            }
            let (class, flops) = self.tape.cost(v);
            self.router
                .account(tag, Pass::Forward, class, flops, self.tape.is_public(v));
        }
        Ok(out)
    }

    /// Routed product under `site`.
    pub fn bilinear(&mut self, site: Site, map: Bilinear, a: Var, b: Var) -> Result<Var> {
        self.tape.set_tag(Some(site.tag()));
        self.tape.bilinear(map, a, b, &mut self.router)
    }

    pub fn param(&mut self, site: Site, name: String, value: &Tensor) -> Result<Var> {
        let v = self.at(site, |t| Ok(t.param(value.clone())))?;
        self.params.push((name, v));
        Ok(v)
    }

    pub fn constant(&mut self, site: Site, value: &Tensor) -> Result<Var> {
        self.at(site, |t| Ok(t.constant(value.clone())))
    }

    /// Private data entering the graph.
    pub fn input(&mut self, site: Site, value: Tensor) -> Result<Var> {
        self.at(site, |t| Ok(t.input(value)))
    }

    /// Inverted-dropout mask, or `None` outside training or for `p == 0`.
    pub fn dropout_mask(&mut self, shape: &[usize], p: f64) -> Option<Tensor> {
        let rng = self.dropout.as_mut().filter(|_| p > 0.0)?;
        let mut m = Tensor::zeros(shape);
        let keep = 1.0 / (1.0 - p);
        for v in m.data_mut() {
            *v = if rng.bernoulli(p) { 0.0 } else { keep };
        }
        Some(m)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.set_tag(None);
        self.tape.backward(loss, &mut self.router)
    }

    /// Gradients of every registered parameter, summed over repeated
    /// registrations of the same name; zeros where no gradient arrived.
    pub fn param_grads(&self) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, v) in &self.params {
            let g = match self.tape.grad(*v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.tape.value(*v).shape()),
            };
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }
}
