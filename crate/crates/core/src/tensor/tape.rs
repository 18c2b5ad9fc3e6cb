use crate::error::{Error, Result};

use super::kernels::{self, BatchNormSaved, ConvGeometry};
use super::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-defined differentiable operation.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// One gradient per input (`None` when the input is not differentiable).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

/// Statistics source for batch normalization.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved,
        train: bool,
    },
    GlobalAvgPool(Var),
    Resize(Var),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
    Sum(Var),
    Dot(Var, Var),
    MseMasked {
        pred: Var,
        target: Var,
        mask: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations; node order is a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Fixed ReLU gates replacing the sign test, consumed in recording order.
    relu_gates: Option<(Vec<bool>, usize)>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient (targets, masks, images).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Sign of every ReLU input, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: impl IntoIterator<Item = Var>) -> bool {
        vars.into_iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, g: ConvGeometry) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), g)?;
        let rg = self.any_grad([x, w].into_iter().chain(b));
        Ok(self.push(y, Op::Conv2d { x, w, b, g }, rg))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = kernels::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.any_grad([x, w].into_iter().chain(b));
        Ok(self.push(
            y,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Makes subsequent ReLUs pass exactly the entries whose gate is set, with gates taken
    /// from `pattern` (as returned by [`Tape::relu_pattern`]) in order. The recorded
    /// function is then the smooth piece selected by `pattern`, defined on both sides of
    /// every kink. Entries beyond the pattern fall back to the sign test.
    pub fn freeze_relu(&mut self, pattern: Vec<bool>) {
        self.relu_gates = Some((pattern, 0));
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = match &mut self.relu_gates {
            None => kernels::relu(self.value(x)),
            Some((gates, cursor)) => {
                let mut y = self.nodes[x.0].value.clone();
                for v in y.data_mut() {
                    let open = gates.get(*cursor).copied().unwrap_or(*v > 0.0);
                    if !open {
                        *v = 0.0;
                    }
                    *cursor += 1;
                }
                y
            }
        };
        let rg = self.requires_grad(x);
        self.push(y, Op::Relu(x), rg)
    }

    /// Returns the normalized output and, in training mode, the batch `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        const OP: &str = "batch_norm";
        let c = self.shape(x).c;
        for (dim, v) in [("gamma length", gamma), ("beta length", beta)] {
            let n = self.value(v).numel();
            if n != c {
                return Err(Error::mismatch(OP, dim, c, n));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let (y, saved, stats, train) = match mode {
            BatchNormMode::Train => {
                let (y, saved) = kernels::batch_norm_train(self.value(x), g, b, eps);
                let stats = (saved.mean.clone(), saved.var.clone());
                (y, saved, Some(stats), true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::mismatch(OP, "running stats length", c, mean.len()));
                }
                let (y, saved) = kernels::batch_norm_eval(self.value(x), g, b, mean, var, eps);
                (y, saved, None, false)
            }
        };
        let rg = self.any_grad([x, gamma, beta]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            saved,
            train,
        };
        Ok((self.push(y, op, rg), stats))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = kernels::global_avg_pool(self.value(x))?;
        let rg = self.requires_grad(x);
        Ok(self.push(y, Op::GlobalAvgPool(x), rg))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = kernels::resize_bilinear(self.value(x), out_h, out_w)?;
        let rg = self.requires_grad(x);
        Ok(self.push(y, Op::Resize(x), rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let y = kernels::concat_channels(&values)?;
        let rg = self.any_grad(xs.iter().copied());
        Ok(self.push(y, Op::Concat(xs.to_vec()), rg))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = kernels::narrow_channels(self.value(x), start, len)?;
        let rg = self.requires_grad(x);
        Ok(self.push(y, Op::Narrow { x, start }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::invalid(
                "add",
                format!("{} vs {}", ta.shape(), tb.shape()),
            ));
        }
        let mut y = ta.clone();
        y.add_assign(tb);
        let rg = self.any_grad([a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    /// `Σ coef_i · x_i` over equally shaped inputs, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::invalid("weighted_sum", "no terms"))?;
        let shape = self.shape(first);
        let mut y = Tensor::zeros(shape);
        for &(v, coef) in terms {
            let t = self.value(v);
            if t.shape() != shape {
                return Err(Error::invalid(
                    "weighted_sum",
                    format!("term shape {} differs from {shape}", t.shape()),
                ));
            }
            y.add_scaled(t, coef);
        }
        let rg = self.any_grad(terms.iter().map(|t| t.0));
        Ok(self.push(y, Op::WeightedSum(terms.to_vec()), rg))
    }

    pub fn scale(&mut self, x: Var, coef: f64) -> Result<Var> {
        self.weighted_sum(&[(x, coef)])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(y, Op::Sum(x), rg)
    }

    /// Scalar `Σ a · b`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::invalid(
                "dot",
                format!("{} vs {}", ta.shape(), tb.shape()),
            ));
        }
        let y = Tensor::scalar(ta.dot(tb));
        let rg = self.any_grad([a, b]);
        Ok(self.push(y, Op::Dot(a, b), rg))
    }

    pub fn mse_masked(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        let loss = kernels::mse_masked(self.value(pred), self.value(target), self.value(mask))?;
        let rg = self.any_grad([pred, target]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MseMasked { pred, target, mask },
            rg,
        ))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let y = op.forward(&values)?;
        let rg = self.any_grad(inputs.iter().copied());
        Ok(self.push(
            y,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar. Each recorded node is visited at most once, in reverse
    /// recording order; gradients of leaves are kept, intermediates are released.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(ls, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, g: geom } => {
                let need = [
                    self.requires_grad(x),
                    self.requires_grad(w),
                    b.is_some_and(|b| self.requires_grad(b)),
                ];
                let r = kernels::conv2d_backward(self.value(x), self.value(w), geom, g, need);
                self.scatter_conv(grads, x, w, b, r);
            }
            &Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let need = [
                    self.requires_grad(x),
                    self.requires_grad(w),
                    b.is_some_and(|b| self.requires_grad(b)),
                ];
                let r = kernels::conv_transpose2d_backward(
                    self.value(x),
                    self.value(w),
                    stride,
                    pad,
                    g,
                    need,
                );
                self.scatter_conv(grads, x, w, b, r);
            }
            &Op::Relu(x) => {
                self.accumulate(grads, x, kernels::relu_backward(self.value(x), g));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                train,
            } => {
                let gv = self.value(*gamma).data();
                let (dx, dgamma, dbeta) = kernels::batch_norm_backward(saved, gv, g, *train);
                let ps = self.shape(*gamma);
                self.accumulate(grads, *x, dx);
                self.accumulate(
                    grads,
                    *gamma,
                    Tensor::from_vec(ps, dgamma).expect("gamma shape"),
                );
                self.accumulate(
                    grads,
                    *beta,
                    Tensor::from_vec(ps, dbeta).expect("beta shape"),
                );
            }
            &Op::GlobalAvgPool(x) => {
                self.accumulate(
                    grads,
                    x,
                    kernels::global_avg_pool_backward(self.shape(x), g),
                );
            }
            &Op::Resize(x) => {
                self.accumulate(
                    grads,
                    x,
                    kernels::resize_bilinear_backward(self.shape(x), g),
                );
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let c = self.shape(x).c;
                    if self.requires_grad(x) {
                        let part = kernels::narrow_channels(g, offset, c).expect("concat slice");
                        self.accumulate(grads, x, part);
                    }
                    offset += c;
                }
            }
            &Op::Narrow { x, start } => {
                if self.requires_grad(x) {
                    let xs = self.shape(x);
                    let mut dx = Tensor::zeros(xs);
                    let p = xs.plane();
                    let len = g.shape().c * p;
                    for n in 0..xs.n {
                        dx.sample_mut(n)[start * p..start * p + len].copy_from_slice(g.sample(n));
                    }
                    self.accumulate(grads, x, dx);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::WeightedSum(terms) => {
                for &(v, coef) in terms {
                    self.accumulate(grads, v, g.map(|x| coef * x));
                }
            }
            &Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, x, Tensor::full(self.shape(x), gv));
            }
            &Op::Dot(a, b) => {
                let gv = g.item();
                self.accumulate(grads, a, self.value(b).map(|x| gv * x));
                self.accumulate(grads, b, self.value(a).map(|x| gv * x));
            }
            &Op::MseMasked { pred, target, mask } => {
                let (p, t, m) = (self.value(pred), self.value(target), self.value(mask));
                let d = kernels::mse_masked_backward(p, t, m, g.item());
                if self.requires_grad(target) {
                    self.accumulate(grads, target, d.map(|x| -x));
                }
                self.accumulate(grads, pred, d);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let dxs = op.backward(&values, &node.value, g);
                for (&v, dx) in inputs.iter().zip(dxs) {
                    if let Some(dx) = dx {
                        self.accumulate(grads, v, dx);
                    }
                }
            }
        }
    }

    fn scatter_conv(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        w: Var,
        b: Option<Var>,
        r: kernels::ConvGrads,
    ) {
        if let Some(dx) = r.dx {
            self.accumulate(grads, x, dx);
        }
        if let Some(dw) = r.dw {
            self.accumulate(grads, w, dw);
        }
        if let (Some(b), Some(db)) = (b, r.db) {
            let shape = self.shape(b);
            self.accumulate(grads, b, db.reshape(shape).expect("bias shape"));
        }
    }
}
