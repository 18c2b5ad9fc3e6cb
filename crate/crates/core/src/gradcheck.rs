//! Central finite-difference checks of tape gradients.
//!
//! Each differentiable input is checked two ways: along a random direction `u`
//! (`⟨∇f, u⟩` against `(f(x + hu) − f(x − hu)) / 2h`) and coordinate-wise on a
//! sample of entries. Relative error is `|a − n| / max(|a|, |n|, floor)`.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::loss::{supervised_loss, Targets};
use crate::model::{Mode, ModelConfig, Network};
use crate::tensor::{BatchNormMode, ConvGeometry, CustomOp, ParamStore, Shape, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor so vanishing gradients are compared absolutely.
    pub floor: f64,
    /// Coordinates checked per input; `None` checks every entry.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries: Some(16),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub comparisons: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic[i]` (the gradient w.r.t. `values[i]`, `None` = skip) with central
/// differences of `eval`.
pub fn compare<R: Rng>(
    name: &str,
    values: &[Tensor],
    analytic: &[Option<Tensor>],
    mut eval: impl FnMut(&[Tensor]) -> Result<f64>,
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<CheckOutcome> {
    let h = cfg.step;
    let mut probe = values.to_vec();
    let mut worst: f64 = 0.0;
    let mut comparisons = 0;
    for (i, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let base = values[i].clone();

        let dir = Tensor::uniform(base.shape(), -1.0, 1.0, rng);
        let mut plus = base.clone();
        plus.add_scaled(&dir, h);
        let mut minus = base.clone();
        minus.add_scaled(&dir, -h);
        probe[i] = plus;
        let fp = eval(&probe)?;
        probe[i] = minus;
        let fm = eval(&probe)?;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(relative_error(grad.dot(&dir), numeric, cfg.floor));
        comparisons += 1;

        let n = base.numel();
        let entries: Vec<usize> = match cfg.max_entries {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in entries {
            let mut t = base.clone();
            t.data_mut()[j] += h;
            probe[i] = t;
            let fp = eval(&probe)?;
            let mut t = base.clone();
            t.data_mut()[j] -= h;
            probe[i] = t;
            let fm = eval(&probe)?;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[j], numeric, cfg.floor));
            comparisons += 1;
        }
        probe[i] = base;
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_error: worst,
        comparisons,
        passed: worst <= cfg.tolerance,
    })
}

/// Checks a scalar function built on a fresh tape from `inputs` (as leaves).
/// `differentiable[i]` marks which inputs are checked.
pub fn check_tape_fn<R: Rng>(
    name: &str,
    inputs: &[Tensor],
    differentiable: &[bool],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<CheckOutcome> {
    let run = |values: &[Tensor], record: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .zip(differentiable)
            .map(|(t, &d)| tape.leaf(t.clone(), d && record))
            .collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let (tape, vars, loss) = run(inputs, true)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Option<Tensor>> = vars
        .iter()
        .zip(differentiable)
        .map(|(&v, &d)| {
            d.then(|| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
            })
        })
        .collect();
    compare(
        name,
        inputs,
        &analytic,
        |values| {
            let (tape, _, loss) = run(values, false)?;
            Ok(tape.value(loss).item())
        },
        cfg,
        rng,
    )
}

/// Reduces `y` to the scalar `⟨v, y⟩` for a fixed random `v`, as used by the op checks.
pub fn project(tape: &mut Tape, y: Var, v: &Tensor) -> Result<Var> {
    let c = tape.constant(v.clone());
    tape.dot(y, c)
}

fn away_from_zero<R: Rng>(shape: Shape, rng: &mut R) -> Tensor {
    // keeps ReLU kinks out of the finite-difference stencil
    Tensor::uniform(shape, -1.0, 1.0, rng).map(|v| if v < 0.0 { v - 0.05 } else { v + 0.05 })
}

fn projected_check<R: Rng>(
    name: &str,
    inputs: Vec<Tensor>,
    differentiable: &[bool],
    out_shape: Shape,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<CheckOutcome> {
    let v = Tensor::uniform(out_shape, -1.0, 1.0, rng);
    check_tape_fn(
        name,
        &inputs,
        differentiable,
        |tape, vars| {
            let y = build(tape, vars)?;
            project(tape, y, &v)
        },
        cfg,
        rng,
    )
}

/// Finite-difference check of every differentiable tape operation on small random inputs.
pub fn op_suite<R: Rng>(cfg: &GradCheckConfig, rng: &mut R) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let x_shape = Shape::new(2, 3, 6, 5);
    for (k, stride, dilation) in [
        (1, 1, 1),
        (3, 1, 1),
        (3, 2, 1),
        (3, 1, 2),
        (4, 2, 1),
        (4, 1, 2),
    ] {
        let pad = dilation * (k - 1) / 2;
        let g = ConvGeometry::new(stride, pad, dilation);
        let w_shape = Shape::new(4, 3, k, k);
        let oh = g.conv_out(x_shape.h, k).expect("valid test geometry");
        let ow = g.conv_out(x_shape.w, k).expect("valid test geometry");
        let inputs = vec![
            Tensor::uniform(x_shape, -1.0, 1.0, rng),
            Tensor::uniform(w_shape, -1.0, 1.0, rng),
            Tensor::uniform(Shape::new(1, 4, 1, 1), -1.0, 1.0, rng),
        ];
        out.push(projected_check(
            &format!("conv2d k{k} s{stride} d{dilation}"),
            inputs,
            &[true, true, true],
            Shape::new(2, 4, oh, ow),
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), g),
            cfg,
            rng,
        )?);
    }
    for (k, stride, pad) in [(4, 2, 1), (3, 1, 1), (2, 2, 0)] {
        let (h, w) = (3, 4);
        let inputs = vec![
            Tensor::uniform(Shape::new(1, 2, h, w), -1.0, 1.0, rng),
            Tensor::uniform(Shape::new(2, 3, k, k), -1.0, 1.0, rng),
            Tensor::uniform(Shape::new(1, 3, 1, 1), -1.0, 1.0, rng),
        ];
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (w - 1) * stride + k - 2 * pad;
        out.push(projected_check(
            &format!("conv_transpose2d k{k} s{stride} p{pad}"),
            inputs,
            &[true, true, true],
            Shape::new(1, 3, oh, ow),
            |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad),
            cfg,
            rng,
        )?);
    }
    out.push(projected_check(
        "relu",
        vec![away_from_zero(x_shape, rng)],
        &[true],
        x_shape,
        |t, v| Ok(t.relu(v[0])),
        cfg,
        rng,
    )?);
    let bn_shape = Shape::new(2, 3, 4, 4);
    let mut bn_inputs = || {
        vec![
            Tensor::uniform(bn_shape, -2.0, 2.0, &mut *rng),
            Tensor::uniform(Shape::new(1, 3, 1, 1), 0.5, 1.5, &mut *rng),
            Tensor::uniform(Shape::new(1, 3, 1, 1), -0.5, 0.5, &mut *rng),
        ]
    };
    let train_inputs = bn_inputs();
    let eval_inputs = bn_inputs();
    out.push(projected_check(
        "batch_norm train",
        train_inputs,
        &[true, true, true],
        bn_shape,
        |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, 1e-5)?
                .0)
        },
        cfg,
        rng,
    )?);
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.2, 2.0]);
    out.push(projected_check(
        "batch_norm eval",
        eval_inputs,
        &[true, true, true],
        bn_shape,
        |t, v| {
            let mode = BatchNormMode::Eval {
                mean: &mean,
                var: &var,
            };
            Ok(t.batch_norm(v[0], v[1], v[2], mode, 1e-5)?.0)
        },
        cfg,
        rng,
    )?);
    out.push(projected_check(
        "global_avg_pool",
        vec![Tensor::uniform(x_shape, -1.0, 1.0, rng)],
        &[true],
        Shape::new(2, 3, 1, 1),
        |t, v| t.global_avg_pool(v[0]),
        cfg,
        rng,
    )?);
    for (oh, ow) in [(12, 10), (3, 2), (1, 1), (7, 9)] {
        out.push(projected_check(
            &format!("resize_bilinear {oh}x{ow}"),
            vec![Tensor::uniform(x_shape, -1.0, 1.0, rng)],
            &[true],
            Shape::new(2, 3, oh, ow),
            |t, v| t.resize_bilinear(v[0], oh, ow),
            cfg,
            rng,
        )?);
    }
    out.push(projected_check(
        "concat_channels",
        vec![
            Tensor::uniform(Shape::new(2, 2, 3, 3), -1.0, 1.0, rng),
            Tensor::uniform(Shape::new(2, 3, 3, 3), -1.0, 1.0, rng),
        ],
        &[true, true],
        Shape::new(2, 5, 3, 3),
        |t, v| t.concat_channels(&[v[0], v[1]]),
        cfg,
        rng,
    )?);
    out.push(projected_check(
        "narrow_channels",
        vec![Tensor::uniform(x_shape, -1.0, 1.0, rng)],
        &[true],
        Shape::new(2, 2, 6, 5),
        |t, v| t.narrow_channels(v[0], 1, 2),
        cfg,
        rng,
    )?);
    out.push(projected_check(
        "add",
        vec![
            Tensor::uniform(x_shape, -1.0, 1.0, rng),
            Tensor::uniform(x_shape, -1.0, 1.0, rng),
        ],
        &[true, true],
        x_shape,
        |t, v| t.add(v[0], v[1]),
        cfg,
        rng,
    )?);
    out.push(projected_check(
        "weighted_sum",
        vec![
            Tensor::uniform(x_shape, -1.0, 1.0, rng),
            Tensor::uniform(x_shape, -1.0, 1.0, rng),
        ],
        &[true, true],
        x_shape,
        |t, v| t.weighted_sum(&[(v[0], 0.7), (v[1], -1.3)]),
        cfg,
        rng,
    )?);
    let hm = Shape::new(2, 4, 5, 3);
    let mut mask = Tensor::zeros(Shape::new(2, 4, 1, 1));
    for (i, m) in mask.data_mut().iter_mut().enumerate() {
        *m = if i % 3 == 1 { 0.0 } else { 1.0 };
    }
    out.push(check_tape_fn(
        "mse_masked",
        &[
            Tensor::uniform(hm, 0.0, 1.0, rng),
            Tensor::uniform(hm, 0.0, 1.0, rng),
            mask,
        ],
        &[true, true, false],
        |t, v| t.mse_masked(v[0], v[1], v[2]),
        cfg,
        rng,
    )?);
    Ok(out)
}

/// Checks every parameter of a freshly initialized network (keypoint heads redrawn at He
/// scale) under the training loss, on one `input_h × input_w` image with random targets
/// and a partly masked keypoint set.
///
/// Finite differences are taken with every ReLU gate frozen at its state in the
/// unperturbed pass. Thousands of ReLU inputs sit at random distances from zero, and a
/// probe of `±h` regularly steps across one, measuring a slope change rather than the
/// derivative. The frozen network is the smooth piece on which backpropagation
/// differentiates, so its differences are the correct reference everywhere.
///
/// Normalization runs on (randomized) running statistics: with a single image the batch
/// statistics of the deepest maps cover a handful of values, and the resulting curvature
/// swamps central differences. Batch-statistics gradients are covered by [`op_suite`].
pub fn check_network<R: Rng>(
    model: &ModelConfig,
    input_h: usize,
    input_w: usize,
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<CheckOutcome> {
    let mut store = ParamStore::new();
    let net = Network::new(model, &mut store, rng)?;
    let buffers: Vec<_> = store
        .buffers()
        .map(|(id, b)| (id, b.name.clone()))
        .collect();
    // Keypoint heads start near zero, which scales every upstream gradient down by the
    // same factor; checking at He scale keeps the comparison well conditioned.
    let heads: Vec<_> = store
        .params()
        .filter(|(_, p)| p.name.ends_with("head.w"))
        .map(|(id, _)| id)
        .collect();
    for id in heads {
        let p = store.param_mut(id);
        let s = p.value.shape();
        let bound = (6.0 / (s.c * s.h * s.w) as f64).sqrt();
        p.value = Tensor::uniform(s, -bound, bound, rng);
    }
    for (id, name) in buffers {
        let (lo, hi) = if name.ends_with("running_var") {
            (0.5, 2.0)
        } else {
            (-0.2, 0.2)
        };
        let b = store.buffer_mut(id);
        b.value = Tensor::uniform(b.value.shape(), lo, hi, rng);
    }
    let image = Tensor::uniform(Shape::new(1, 3, input_h, input_w), 0.0, 1.0, rng);
    let mut mask = Tensor::full(Shape::new(1, model.num_keypoints, 1, 1), 1.0);
    mask.data_mut()[7] = 0.0;
    let targets = Targets {
        heatmaps: Tensor::uniform(
            Shape::new(1, model.num_keypoints, input_h / 4, input_w / 4),
            0.0,
            1.0,
            rng,
        ),
        mask,
    };
    type Recorded = (f64, Vec<bool>, Option<crate::model::Update>);
    let record = |store: &ParamStore, gates: Option<&[bool]>| -> Result<Recorded> {
        let mut fx = net
            .forward_pass(store, Mode::Eval)
            .with_grads(gates.is_none());
        if let Some(g) = gates {
            fx.tape.freeze_relu(g.to_vec());
        }
        let x = fx.input(image.clone());
        let out = net.forward(&mut fx, x)?;
        let (vars, _) = supervised_loss(&mut fx.tape, &out, &targets, model)?;
        let value = fx.tape.value(vars.total).item();
        let pattern = fx.tape.relu_pattern();
        let update = gates
            .is_none()
            .then(|| fx.backward(vars.total))
            .transpose()?;
        Ok((value, pattern, update))
    };
    let (_, pattern, update) = record(&store, None)?;
    let update = update.expect("gradients requested");
    let mut grad_store = store.clone();
    let ids = update.apply(&mut grad_store);
    let values: Vec<Tensor> = ids
        .iter()
        .map(|&id| store.param(id).value.clone())
        .collect();
    let analytic: Vec<Option<Tensor>> = ids
        .iter()
        .map(|&id| grad_store.param(id).grad.clone())
        .collect();
    let name = format!(
        "network {:?} ({} params)",
        model.head,
        store.num_elements(&ids)
    )
    .to_lowercase();
    let mut probe = store.clone();
    compare(
        &name,
        &values,
        &analytic,
        |vals| {
            for (&id, v) in ids.iter().zip(vals) {
                probe.param_mut(id).value = v.clone();
            }
            Ok(record(&probe, Some(&pattern))?.0)
        },
        cfg,
        rng,
    )
}

/// Elementwise square whose backward rule is deliberately off by 10%.
#[derive(Debug, Clone, Copy, Default)]
pub struct CorruptedSquare;

impl CustomOp for CorruptedSquare {
    fn name(&self) -> &str {
        "corrupted_square"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| v * v))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut g = inputs[0].map(|v| 2.2 * v);
        for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
            *a *= b;
        }
        vec![Some(g)]
    }
}

/// Runs the checker on [`CorruptedSquare`]; a healthy checker reports this as failed.
pub fn negative_control<R: Rng>(cfg: &GradCheckConfig, rng: &mut R) -> Result<CheckOutcome> {
    let shape = Shape::new(1, 2, 3, 3);
    projected_check(
        "negative control (corrupted backward)",
        vec![Tensor::uniform(shape, 0.5, 1.5, rng)],
        &[true],
        shape,
        |t, v| t.custom(Box::new(CorruptedSquare), &[v[0]]),
        cfg,
        rng,
    )
}
