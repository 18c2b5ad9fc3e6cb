//! Residual backbone with the context, spatial and heavy-head paths, plus a plain
//! deconvolution head used as the ablation baseline.

mod layers;
mod network;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::codec::NUM_KEYPOINTS;
use crate::error::{Error, Result};

pub use layers::{Builder, Forward, Mode, Update};
pub use network::{
    Aspp, Backbone, CsaHead, ForwardOutputs, Network, SapPath, SbnHead, StageFeatures,
    StructureSupervision,
};

/// Which head sits on top of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Three deconvolutions on C5 and a 1×1 keypoint head.
    Sbn,
    /// Context path, optional spatial path and the heavy head.
    Csanet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head: HeadKind,
    /// Widths of C1..C5.
    pub stage_channels: [usize; 5],
    /// Residual blocks in C2..C5.
    pub blocks_per_stage: [usize; 4],
    pub feature_width: usize,
    pub aspp_rates: Vec<usize>,
    pub use_aspp: bool,
    pub use_sap: bool,
    pub sap_conv3: bool,
    pub sap_conv2gp: bool,
    /// Number of 3×3 layers before the final 1×1 head.
    pub hhp_depth: usize,
    pub num_keypoints: usize,
    /// Keypoint index ranges of the face, upper-limb and lower-limb groups.
    pub part_partition: [Range<usize>; 3],
    /// `(α, β, γ)` applied to the face, upper and lower auxiliary losses.
    pub loss_weights: (f64, f64, f64),
    /// Gaussian width in heatmap pixels.
    pub sigma: f64,
    /// Network input `(h, w)`.
    pub input_size: (usize, usize),
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            head: HeadKind::Csanet,
            stage_channels: [16, 32, 64, 128, 256],
            blocks_per_stage: [2, 2, 2, 2],
            feature_width: 256,
            aspp_rates: vec![1, 6, 12, 18],
            use_aspp: true,
            use_sap: true,
            sap_conv3: true,
            sap_conv2gp: true,
            hhp_depth: 3,
            num_keypoints: NUM_KEYPOINTS,
            part_partition: [0..5, 5..11, 11..17],
            loss_weights: (1.0, 1.0, 1.0),
            sigma: 2.0,
            input_size: (256, 192),
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Narrow network on 128×96 crops, small enough to train on one core.
    pub fn desk() -> Self {
        ModelConfig {
            stage_channels: [8, 16, 24, 32, 48],
            blocks_per_stage: [1, 1, 1, 1],
            feature_width: 16,
            input_size: (128, 96),
            ..ModelConfig::default()
        }
    }

    /// Widths `[4, 8, 8, 16, 16]` for finite-difference checks on 32×32 inputs.
    pub fn micro() -> Self {
        ModelConfig {
            stage_channels: [4, 8, 8, 16, 16],
            blocks_per_stage: [1, 1, 1, 1],
            feature_width: 4,
            aspp_rates: vec![1, 2],
            hhp_depth: 1,
            input_size: (128, 96),
            ..ModelConfig::default()
        }
    }

    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.input_size.0 / 4, self.input_size.1 / 4)
    }

    /// Every violated constraint, or `Ok` when there are none.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            errs.push(format!(
                "model.input_size {h}x{w} must be positive multiples of 32"
            ));
        }
        if 3 * h != 4 * w {
            errs.push(format!(
                "model.input_size {h}x{w} must have aspect h:w = 4:3"
            ));
        }
        if self.stage_channels.contains(&0) {
            errs.push("model.stage_channels must all be >= 1".into());
        }
        if self.blocks_per_stage.contains(&0) {
            errs.push("model.blocks_per_stage must all be >= 1".into());
        }
        if self.feature_width == 0 {
            errs.push("model.feature_width must be >= 1".into());
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            errs.push("model.aspp_rates must be non-empty and all >= 1".into());
        }
        if self.num_keypoints != NUM_KEYPOINTS {
            errs.push(format!("model.num_keypoints must be {NUM_KEYPOINTS}"));
        }
        let mut covered = vec![0usize; self.num_keypoints];
        for r in &self.part_partition {
            if r.is_empty() || r.end > self.num_keypoints {
                errs.push(format!(
                    "model.part_partition range {r:?} is empty or out of bounds"
                ));
                continue;
            }
            for k in r.clone() {
                covered[k] += 1;
            }
        }
        if covered.iter().any(|&c| c != 1) {
            errs.push("model.part_partition must be a disjoint cover of all keypoints".into());
        }
        let (a, b, g) = self.loss_weights;
        if [a, b, g].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            errs.push(format!(
                "model.loss_weights ({a}, {b}, {g}) must be finite and >= 0"
            ));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            errs.push(format!("model.sigma {} must be > 0", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            errs.push("model.bn_momentum must lie in [0, 1]".into());
        }
        if !(self.bn_eps > 0.0) {
            errs.push("model.bn_eps must be > 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
    }

    #[test]
    fn validation_lists_every_violation() {
        let cfg = ModelConfig {
            input_size: (100, 96),
            aspp_rates: vec![],
            part_partition: [0..5, 4..11, 11..17],
            loss_weights: (1.0, -1.0, 1.0),
            ..ModelConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 5, "{errs:?}"),
            other => panic!("{other:?}"),
        }
    }
}
