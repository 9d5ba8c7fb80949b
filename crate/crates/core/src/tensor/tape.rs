//! Reverse-mode autodiff on a per-step tape.
//!
//! Every op appends a node; `backward` walks the nodes in reverse. Bilinear
//! products (matmuls and their head-blocked variants) are dispatched through
//! a [`Router`] in both passes, which is how a partition plan decides where a
//! product runs and whether its operands cross a trust boundary masked.

use serde::{Deserialize, Serialize};

use super::{Bilinear, Precision, Tensor};
use crate::error::{contract_err, dim_err, Result};

/// Opaque op-site label attached to nodes; interpreted by the router.
pub type Tag = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pass {
    Forward,
    Backward,
}

/// Cost class of an op, used for domain cost accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpClass {
    Linear,
    Elementwise,
    Memory,
}

/// One argument of a routed bilinear product.
#[derive(Debug, Clone, Copy)]
pub struct Operand<'a> {
    pub value: &'a Tensor,
    /// Public operands (frozen base weights) need no masking.
    pub public: bool,
}

/// Executes bilinear products on behalf of the tape and receives cost
/// notifications for everything else.
pub trait Router {
    fn bilinear(
        &mut self,
        tag: Option<Tag>,
        pass: Pass,
        map: Bilinear,
        lhs: Operand<'_>,
        rhs: Operand<'_>,
        precision: Precision,
    ) -> Result<Tensor>;

    /// Cost and visibility notice for a non-bilinear op. `public` is true
    /// only when every value the op touches is public.
    fn account(
        &mut self,
        _tag: Option<Tag>,
        _pass: Pass,
        _class: OpClass,
        _flops: u64,
        _public: bool,
    ) {
    }
}

impl<R: Router + ?Sized> Router for &mut R {
    fn bilinear(
        &mut self,
        tag: Option<Tag>,
        pass: Pass,
        map: Bilinear,
        lhs: Operand<'_>,
        rhs: Operand<'_>,
        precision: Precision,
    ) -> Result<Tensor> {
        (**self).bilinear(tag, pass, map, lhs, rhs, precision)
    }

    fn account(&mut self, tag: Option<Tag>, pass: Pass, class: OpClass, flops: u64, public: bool) {
        (**self).account(tag, pass, class, flops, public)
    }
}

/// Evaluates every product in place, with no domain semantics.
#[derive(Debug, Default, Clone, Copy)]
pub struct LocalRouter;

impl Router for LocalRouter {
    fn bilinear(
        &mut self,
        _tag: Option<Tag>,
        _pass: Pass,
        map: Bilinear,
        lhs: Operand<'_>,
        rhs: Operand<'_>,
        precision: Precision,
    ) -> Result<Tensor> {
        Ok(precision.quantized(map.apply(lhs.value, rhs.value)?))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Bilinear {
        map: Bilinear,
        a: Var,
        b: Var,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddBias(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    MeanRows(Var),
    SelectCols {
        x: Var,
        cols: Vec<usize>,
    },
    ScatterCols {
        x: Var,
        cols: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    public: bool,
    grad: Option<Tensor>,
    tag: Option<Tag>,
    class: OpClass,
    flops: u64,
}

/// Append-only computation record for one training or inference step.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    tag: Option<Tag>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            tag: None,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Label subsequent nodes with an op-site tag.
    pub fn set_tag(&mut self, tag: Option<Tag>) {
        self.tag = tag;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool, public: bool) -> Var {
        let value = self.precision.quantized(value);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            public,
            grad: None,
            tag: self.tag,
            class: OpClass::Memory,
            flops: 0,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable parameter.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true, false)
    }

    /// Frozen public weight.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, true)
    }

    /// Private data with no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_public(&self, v: Var) -> bool {
        self.nodes[v.0].public
    }

    pub fn tag_of(&self, v: Var) -> Option<Tag> {
        self.nodes[v.0].tag
    }

    /// Handle of the `i`-th recorded node.
    pub fn var(&self, i: usize) -> Var {
        assert!(i < self.nodes.len(), "node {i} of {}", self.nodes.len());
        Var(i)
    }

    /// True for nodes produced by a routed bilinear product.
    pub fn is_bilinear(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Bilinear { .. })
    }

    /// Cost class and multiply-accumulate estimate of the node's forward op.
    pub fn cost(&self, v: Var) -> (OpClass, u64) {
        let n = &self.nodes[v.0];
        (n.class, n.flops)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], class: OpClass, flops: u64) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let public = inputs.iter().all(|v| self.nodes[v.0].public);
        let value = self.precision.quantized(value);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            public,
            grad: None,
            tag: self.tag,
            class,
            flops,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn bilinear(
        &mut self,
        map: Bilinear,
        a: Var,
        b: Var,
        router: &mut dyn Router,
    ) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0], &self.nodes[b.0]);
        let want = map.output_shape(av.value.shape(), bv.value.shape())?;
        let flops = map.flops(av.value.shape(), bv.value.shape());
        let out = router.bilinear(
            self.tag,
            Pass::Forward,
            map,
            Operand {
                value: &av.value,
                public: av.public,
            },
            Operand {
                value: &bv.value,
                public: bv.public,
            },
            self.precision,
        )?;
        if out.shape() != want {
            return dim_err(format!(
                "router returned {:?}, expected {want:?}",
                out.shape()
            ));
        }
        Ok(self.push(
            out,
            Op::Bilinear { map, a, b },
            &[a, b],
            OpClass::Linear,
            flops,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bilinear(Bilinear::MatMul, a, b, &mut LocalRouter)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a], OpClass::Memory, 0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let n = out.len() as u64;
        Ok(self.push(out, Op::Add(a, b), &[a, b], OpClass::Elementwise, n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let n = out.len() as u64;
        Ok(self.push(out, Op::Sub(a, b), &[a, b], OpClass::Elementwise, n))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        let n = out.len() as u64;
        Ok(self.push(out, Op::Mul(a, b), &[a, b], OpClass::Elementwise, n))
    }

    /// Elementwise product with a constant, e.g. a dropout mask.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let out = self.value(a).zip_with(&c, |x, y| x * y)?;
        let n = out.len() as u64;
        Ok(self.push(out, Op::MulConst(a, c), &[a], OpClass::Elementwise, n))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        let n = out.len() as u64;
        Ok(self.push(out, Op::Scale(a, s), &[a], OpClass::Elementwise, n))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return dim_err(format!("bias of {} for {n} columns", bv.len()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let flops = out.len() as u64;
        Ok(self.push(
            out,
            Op::AddBias(x, bias),
            &[x, bias],
            OpClass::Elementwise,
            flops,
        ))
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.cols();
        if n == 0 || xv.is_empty() {
            return dim_err("layernorm over an empty row");
        }
        if gv.len() != n || bv.len() != n {
            return dim_err(format!(
                "layernorm affine of {}/{} for rows of {n}",
                gv.len(),
                bv.len()
            ));
        }
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in xhat.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(n) {
            for ((o, g), b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        let flops = 5 * out.len() as u64;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
            OpClass::Elementwise,
            flops,
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if n == 0 || xv.is_empty() {
            return dim_err("softmax over an empty dimension");
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let flops = 4 * out.len() as u64;
        Ok(self.push(out, Op::Softmax(x), &[x], OpClass::Elementwise, flops))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()));
        let flops = 8 * out.len() as u64;
        Ok(self.push(out, Op::Gelu(x), &[x], OpClass::Elementwise, flops))
    }

    /// `-log softmax(logits)[label]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != 1 || lv.is_empty() {
            return dim_err(format!(
                "cross entropy wants one row of logits, got {:?}",
                lv.shape()
            ));
        }
        if label >= lv.len() {
            return contract_err(format!("label {label} outside {} classes", lv.len()));
        }
        let mut probs = lv.data().to_vec();
        let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + probs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv.data()[label];
        softmax_in_place(&mut probs);
        let flops = 4 * probs.len() as u64;
        Ok(self.push(
            Tensor::scalar(loss.max(0.0)),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
            OpClass::Elementwise,
            flops,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum());
        let flops = xv.len() as u64;
        Ok(self.push(out, Op::Sum(x), &[x], OpClass::Elementwise, flops))
    }

    /// Mean over rows: `[m×n]` → `[1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if m == 0 {
            return dim_err("mean over zero rows");
        }
        let mut out = vec![0.0; n];
        for row in xv.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        let flops = xv.len() as u64;
        Ok(self.push(
            Tensor::new(vec![1, n], out)?,
            Op::MeanRows(x),
            &[x],
            OpClass::Elementwise,
            flops,
        ))
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if let Some(&c) = cols.iter().find(|&&c| c >= n) {
            return dim_err(format!("column {c} out of {n}"));
        }
        let mut out = Vec::with_capacity(m * cols.len());
        for row in xv.data().chunks(n) {
            out.extend(cols.iter().map(|&c| row[c]));
        }
        let t = Tensor::new(vec![m, cols.len()], out)?;
        Ok(self.push(
            t,
            Op::SelectCols {
                x,
                cols: cols.to_vec(),
            },
            &[x],
            OpClass::Memory,
            0,
        ))
    }

    /// Places the columns of `x` at `cols` in a zero matrix of `width` columns.
    pub fn scatter_cols(&mut self, x: Var, cols: &[usize], width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, k) = (xv.rows(), xv.cols());
        if cols.len() != k {
            return dim_err(format!("{k} columns scattered to {} slots", cols.len()));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= width) {
            return dim_err(format!("column {c} out of {width}"));
        }
        let mut out = vec![0.0; m * width];
        for (i, row) in xv.data().chunks(k.max(1)).enumerate().take(m) {
            for (&c, v) in cols.iter().zip(row) {
                out[i * width + c] = *v;
            }
        }
        let t = Tensor::new(vec![m, width], out)?;
        Ok(self.push(
            t,
            Op::ScatterCols {
                x,
                cols: cols.to_vec(),
            },
            &[x],
            OpClass::Memory,
            0,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return dim_err("concat of nothing");
        };
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != n {
                return dim_err(format!("concat rows of width {} and {n}", pv.cols()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let t = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts, OpClass::Memory, 0))
    }

    /// Embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table).select_rows(ids)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            OpClass::Memory,
            0,
        ))
    }

    /// Fills `grad` on every node that requires one and is reachable from
    /// `loss`.
    pub fn backward(&mut self, loss: Var, router: &mut dyn Router) -> Result<()> {
        if self.value(loss).len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.input_grads(i, &g, router)?;
            for (v, mut dg) in contributions {
                self.precision.quantize_tensor(&mut dg);
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dg)?,
                    slot => *slot = Some(dg),
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Gradient of each differentiable input of node `i`, given its output
    /// gradient `g`.
    fn input_grads(
        &self,
        i: usize,
        g: &Tensor,
        router: &mut dyn Router,
    ) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        if !matches!(node.op, Op::Leaf | Op::Bilinear { .. }) {
            router.account(node.tag, Pass::Backward, node.class, node.flops, false);
        }
        match &node.op {
            Op::Leaf => {}
            Op::Bilinear { map, a, b } => {
                let (a, b) = (*a, *b);
                let grad = Operand {
                    value: g,
                    public: false,
                };
                let av = &self.nodes[a.0];
                let bv = &self.nodes[b.0];
                let mut route = |m: Bilinear, l: Operand<'_>, r: Operand<'_>| {
                    router.bilinear(node.tag, Pass::Backward, m, l, r, self.precision)
                };
                match *map {
                    Bilinear::MatMul => {
                        if rg(a) {
                            let bt = bv.value.transpose()?;
                            let op = Operand {
                                value: &bt,
                                public: bv.public,
                            };
                            out.push((a, route(Bilinear::MatMul, grad, op)?));
                        }
                        if rg(b) {
                            let at = av.value.transpose()?;
                            let op = Operand {
                                value: &at,
                                public: av.public,
                            };
                            out.push((b, route(Bilinear::MatMul, op, grad)?));
                        }
                    }
                    Bilinear::HeadScores { heads } => {
                        if rg(a) {
                            let op = operand(bv);
                            out.push((a, route(Bilinear::HeadMix { heads }, grad, op)?));
                        }
                        if rg(b) {
                            let op = operand(av);
                            out.push((b, route(Bilinear::HeadMixT { heads }, grad, op)?));
                        }
                    }
                    Bilinear::HeadMix { heads } => {
                        if rg(a) {
                            let op = operand(bv);
                            out.push((a, route(Bilinear::HeadScores { heads }, grad, op)?));
                        }
                        if rg(b) {
                            let op = operand(av);
                            out.push((b, route(Bilinear::HeadMixT { heads }, op, grad)?));
                        }
                    }
                    Bilinear::HeadMixT { heads } => {
                        if rg(a) {
                            let op = operand(bv);
                            out.push((a, route(Bilinear::HeadScores { heads }, op, grad)?));
                        }
                        if rg(b) {
                            let op = operand(av);
                            out.push((b, route(Bilinear::HeadMix { heads }, op, grad)?));
                        }
                    }
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose()?)),
            Op::Add(a, b) => {
                if rg(*a) {
                    out.push((*a, g.clone()));
                }
                if rg(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    out.push((*a, g.clone()));
                }
                if rg(*b) {
                    out.push((*b, g.scale(-1.0)));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, g.zip_with(self.value(*b), |x, y| x * y)?));
                }
                if rg(*b) {
                    out.push((*b, g.zip_with(self.value(*a), |x, y| x * y)?));
                }
            }
            Op::MulConst(a, c) => out.push((*a, g.zip_with(c, |x, y| x * y)?)),
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::AddBias(x, bias) => {
                if rg(*x) {
                    out.push((*x, g.clone()));
                }
                if rg(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    out.push((*bias, Tensor::new(shape, db)?));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = g.cols();
                let gam = self.value(*gamma).data();
                if rg(*gamma) || rg(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (grow, hrow) in g.data().chunks(n).zip(xhat.data().chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    if rg(*gamma) {
                        let shape = self.value(*gamma).shape().to_vec();
                        out.push((*gamma, Tensor::new(shape, dg)?));
                    }
                    if rg(*beta) {
                        let shape = self.value(*beta).shape().to_vec();
                        out.push((*beta, Tensor::new(shape, db)?));
                    }
                }
                if rg(*x) {
                    let mut dx = g.clone();
                    for ((drow, hrow), r) in dx
                        .data_mut()
                        .chunks_mut(n)
                        .zip(xhat.data().chunks(n))
                        .zip(rstd)
                    {
                        let dh: Vec<f64> = drow.iter().zip(gam).map(|(d, gm)| d * gm).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            drow[j] = r * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (d, yv) in drow.iter_mut().zip(yrow) {
                        *d = yv * (*d - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::Gelu(x) => {
                let dx = self.value(*x).zip_with(g, |v, gv| {
                    let u = GELU_C * (v + GELU_K * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                })?;
                out.push((*x, dx));
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let s = g.data()[0];
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                d[*label] -= s;
                let shape = self.value(*logits).shape().to_vec();
                out.push((*logits, Tensor::new(shape, d)?));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                out.push((*x, Tensor::full(xv.shape(), g.data()[0])));
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let m = xv.rows() as f64;
                let mut dx = Tensor::zeros(xv.shape());
                let n = xv.cols();
                for row in dx.data_mut().chunks_mut(n) {
                    for (d, gv) in row.iter_mut().zip(g.data()) {
                        *d = gv / m;
                    }
                }
                out.push((*x, dx));
            }
            Op::SelectCols { x, cols } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                let k = cols.len();
                for (drow, grow) in dx.data_mut().chunks_mut(n).zip(g.data().chunks(k.max(1))) {
                    for (&c, v) in cols.iter().zip(grow) {
                        drow[c] += v;
                    }
                }
                out.push((*x, dx));
            }
            Op::ScatterCols { x, cols } => {
                let xv = self.value(*x);
                let width = g.cols();
                let k = cols.len();
                let mut dx = Vec::with_capacity(xv.len());
                for grow in g.data().chunks(width) {
                    dx.extend(cols.iter().map(|&c| grow[c]));
                }
                debug_assert_eq!(dx.len(), xv.rows() * k);
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.rows() * n;
                    if rg(p) {
                        let slice = g.data()[offset..offset + len].to_vec();
                        out.push((p, Tensor::new(pv.shape().to_vec(), slice)?));
                    }
                    offset += len;
                }
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let n = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (grow, &id) in g.data().chunks(n).zip(ids) {
                    for (d, v) in dt.data_mut()[id * n..(id + 1) * n].iter_mut().zip(grow) {
                        *d += v;
                    }
                }
                out.push((*table, dt));
            }
        }
        Ok(out)
    }
}

fn operand(node: &Node) -> Operand<'_> {
    Operand {
        value: &node.value,
        public: node.public,
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
