//! One optimization step: training-mode forward, supervised loss, backward, Adam.

use crate::data::SampleRecord;
use crate::error::Result;
use crate::loss::{supervised_loss, LossBreakdown, Targets};
use crate::model::{Mode, Network};
use crate::tensor::{AdamConfig, ParamStore, Tensor};

/// Stacked crops and their heatmap targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Targets,
}

impl Batch {
    pub fn from_samples(samples: &[&SampleRecord], net: &Network) -> Result<Batch> {
        let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        let kps: Vec<_> = samples.iter().map(|s| s.keypoints.clone()).collect();
        Ok(Batch {
            images: Tensor::stack(&images)?,
            targets: Targets::from_keypoints(&kps, &net.cfg)?,
        })
    }
}

/// Loss of the current parameters, without updating anything.
pub fn evaluate_loss(
    net: &Network,
    store: &ParamStore,
    batch: &Batch,
    mode: Mode,
) -> Result<LossBreakdown> {
    let mut fx = net.forward_pass(store, mode).with_grads(false);
    let x = fx.input(batch.images.clone());
    let out = net.forward(&mut fx, x)?;
    Ok(supervised_loss(&mut fx.tape, &out, &batch.targets, &net.cfg)?.1)
}

/// Runs one step and returns the loss measured before the update.
pub fn train_step(
    net: &Network,
    store: &mut ParamStore,
    batch: &Batch,
    lr: f64,
    adam: &AdamConfig,
) -> Result<LossBreakdown> {
    let (update, breakdown) = {
        let mut fx = net.forward_pass(store, Mode::Train);
        let x = fx.input(batch.images.clone());
        let out = net.forward(&mut fx, x)?;
        let (vars, breakdown) = supervised_loss(&mut fx.tape, &out, &batch.targets, &net.cfg)?;
        (fx.backward(vars.total)?, breakdown)
    };
    let ids = update.apply(store);
    store.adam_step(&ids, lr, adam)?;
    Ok(breakdown)
}
