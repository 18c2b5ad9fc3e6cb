use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{
    BatchNormMode, BufferId, ConvGeometry, ParamId, ParamStore, Shape, Tape, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated once the pass is applied.
    Train,
    /// Running statistics; parameters are constants unless enabled with [`Forward::with_grads`].
    Eval,
}

#[derive(Debug, Clone)]
struct StatUpdate {
    mean: BufferId,
    var: BufferId,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    count: usize,
}

/// One forward pass over a shared [`ParamStore`]. Parameters are bound as tape
/// leaves on first use, so a pass only touches the layers it runs.
pub struct Forward<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    mode: Mode,
    grads: bool,
    bn_momentum: f64,
    bn_eps: f64,
    bound: HashMap<ParamId, Var>,
    order: Vec<ParamId>,
    stats: Vec<StatUpdate>,
}

/// Gradients and running-statistic updates produced by a pass, detached from the store.
#[derive(Debug, Clone)]
pub struct Update {
    grads: Vec<(ParamId, Tensor)>,
    stats: Vec<StatUpdate>,
    bn_momentum: f64,
}

impl Update {
    /// Accumulates gradients into the store and folds in batch statistics.
    /// Returns the ids that received a gradient, in first-use order.
    pub fn apply(self, store: &mut ParamStore) -> Vec<ParamId> {
        for s in &self.stats {
            store.update_running_stats(
                s.mean,
                s.var,
                &s.batch_mean,
                &s.batch_var,
                s.count,
                self.bn_momentum,
            );
        }
        self.grads
            .into_iter()
            .map(|(id, g)| {
                store.accumulate_grad(id, &g);
                id
            })
            .collect()
    }
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, bn_momentum: f64, bn_eps: f64) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            mode,
            grads: mode == Mode::Train,
            bn_momentum,
            bn_eps,
            bound: HashMap::new(),
            order: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Overrides whether parameters are recorded as differentiable
    /// (by default only in training mode).
    pub fn with_grads(mut self, on: bool) -> Self {
        self.grads = on;
        self
    }

    pub fn input(&mut self, x: Tensor) -> Var {
        self.tape.constant(x)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = self.store.param(id).value.clone();
        let v = self.tape.leaf(value, self.grads);
        self.bound.insert(id, v);
        self.order.push(id);
        v
    }

    /// Parameters used so far, in first-use order.
    pub fn bound_params(&self) -> &[ParamId] {
        &self.order
    }

    /// Reverse pass from `loss`. Bound parameters the loss does not reach get zero gradients.
    pub fn backward(self, loss: Var) -> Result<Update> {
        let mut grads = self.tape.backward(loss)?;
        let grads = self
            .order
            .iter()
            .map(|id| {
                let v = self.bound[id];
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)));
                (*id, g)
            })
            .collect();
        Ok(Update {
            grads,
            stats: self.stats,
            bn_momentum: self.bn_momentum,
        })
    }

    /// Running-statistic updates only (a training-mode pass without a loss).
    pub fn into_update(self) -> Update {
        Update {
            grads: Vec::new(),
            stats: self.stats,
            bn_momentum: self.bn_momentum,
        }
    }

    fn batch_norm(&mut self, bn: &BatchNorm, x: Var) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let store = self.store;
        match self.mode {
            Mode::Train => {
                let s = self.tape.shape(x);
                let (y, stats) =
                    self.tape
                        .batch_norm(x, gamma, beta, BatchNormMode::Train, self.bn_eps)?;
                let (batch_mean, batch_var) =
                    stats.expect("training mode returns batch statistics");
                self.stats.push(StatUpdate {
                    mean: bn.mean,
                    var: bn.var,
                    batch_mean,
                    batch_var,
                    count: s.n * s.h * s.w,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mode = BatchNormMode::Eval {
                    mean: store.buffer(bn.mean).value.data(),
                    var: store.buffer(bn.var).value.data(),
                };
                Ok(self.tape.batch_norm(x, gamma, beta, mode, self.bn_eps)?.0)
            }
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: Vec<String>,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Builder {
            store,
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    /// He-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    fn he_uniform(&mut self, leaf: &str, shape: Shape, fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let value = Tensor::uniform(shape, -bound, bound, self.rng);
        let name = self.name(leaf);
        self.store.add_param(name, value)
    }

    /// Uniform with standard deviation `std`.
    fn small_uniform(&mut self, leaf: &str, shape: Shape, std: f64) -> ParamId {
        let bound = std * 3f64.sqrt();
        let value = Tensor::uniform(shape, -bound, bound, self.rng);
        let name = self.name(leaf);
        self.store.add_param(name, value)
    }

    fn zeros(&mut self, leaf: &str, c: usize) -> ParamId {
        let name = self.name(leaf);
        self.store
            .add_param(name, Tensor::zeros(Shape::new(1, c, 1, 1)))
    }

    fn ones(&mut self, leaf: &str, c: usize) -> ParamId {
        let name = self.name(leaf);
        self.store
            .add_param(name, Tensor::full(Shape::new(1, c, 1, 1), 1.0))
    }

    fn buffer(&mut self, leaf: &str, c: usize, value: f64) -> BufferId {
        let name = self.name(leaf);
        self.store
            .add_buffer(name, Tensor::full(Shape::new(1, c, 1, 1), value))
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    geom: ConvGeometry,
}

impl Conv {
    pub fn new<R: Rng>(
        bld: &mut Builder<'_, R>,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeometry,
        bias: bool,
    ) -> Self {
        let w = bld.he_uniform("w", Shape::new(cout, cin, k, k), cin * k * k);
        let b = bias.then(|| bld.zeros("b", cout));
        Conv { w, b, geom }
    }

    /// 1×1 linear prediction head with bias. Weights start with standard deviation
    /// 1e-3 so the initial heatmaps are close to zero.
    pub fn head<R: Rng>(bld: &mut Builder<'_, R>, cin: usize, cout: usize) -> Self {
        let w = bld.small_uniform("w", Shape::new(cout, cin, 1, 1), 1e-3);
        let b = Some(bld.zeros("b", cout));
        Conv {
            w,
            b,
            geom: ConvGeometry::new(1, 0, 1),
        }
    }

    pub fn forward(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = fx.param(self.w);
        let b = self.b.map(|b| fx.param(b));
        fx.tape.conv2d(x, w, b, self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct Deconv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Deconv {
    pub fn new<R: Rng>(
        bld: &mut Builder<'_, R>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        // each output pixel sees about (k / stride)^2 taps per input channel
        let taps = (k * k / (stride * stride)).max(1);
        let w = bld.he_uniform("w", Shape::new(cin, cout, k, k), cin * taps);
        let b = bias.then(|| bld.zeros("b", cout));
        Deconv { w, b, stride, pad }
    }

    pub fn forward(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = fx.param(self.w);
        let b = self.b.map(|b| fx.param(b));
        fx.tape.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

impl BatchNorm {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, c: usize) -> Self {
        bld.scoped("bn", |bld| BatchNorm {
            gamma: bld.ones("gamma", c),
            beta: bld.zeros("beta", c),
            mean: bld.buffer("running_mean", c, 0.0),
            var: bld.buffer("running_var", c, 1.0),
        })
    }

    pub fn forward(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        fx.batch_norm(self, x)
    }
}

/// Bias-free convolution followed by batch norm and, optionally, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    conv: Conv,
    bn: BatchNorm,
    relu: bool,
}

impl ConvBn {
    pub fn new<R: Rng>(
        bld: &mut Builder<'_, R>,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeometry,
        relu: bool,
    ) -> Self {
        ConvBn {
            conv: Conv::new(bld, cin, cout, k, geom, false),
            bn: BatchNorm::new(bld, cout),
            relu,
        }
    }

    pub fn forward(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(fx, x)?;
        let y = self.bn.forward(fx, y)?;
        Ok(if self.relu { fx.tape.relu(y) } else { y })
    }
}

/// `[cout, 4×4, stride 2]` transposed convolution + BN + ReLU, doubling resolution.
#[derive(Debug, Clone)]
pub struct UpBlock {
    deconv: Deconv,
    bn: BatchNorm,
}

impl UpBlock {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, cin: usize, cout: usize) -> Self {
        UpBlock {
            deconv: Deconv::new(bld, cin, cout, 4, 2, 1, false),
            bn: BatchNorm::new(bld, cout),
        }
    }

    pub fn forward(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let y = self.deconv.forward(fx, x)?;
        let y = self.bn.forward(fx, y)?;
        Ok(fx.tape.relu(y))
    }
}
