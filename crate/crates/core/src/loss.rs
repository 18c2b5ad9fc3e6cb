//! Part-wise auxiliary losses, body loss and their weighted total.
//!
//! Every term is `mse_masked`: half the batch mean of the per-channel pixel-mean squared
//! error summed over labeled channels.

use std::ops::Range;

use crate::codec::{crop_to_heatmap, encode_heatmaps, KeypointSet, NUM_KEYPOINTS};
use crate::error::{Error, Result};
use crate::model::{ForwardOutputs, ModelConfig};
use crate::tensor::{Shape, Tape, Tensor, Var};

/// Heatmap targets `N×17×H×W` and visibility mask `N×17×1×1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub heatmaps: Tensor,
    pub mask: Tensor,
}

impl Targets {
    /// Encodes crop-frame keypoints at the config's heatmap resolution.
    pub fn from_keypoints(kps: &[KeypointSet], cfg: &ModelConfig) -> Result<Targets> {
        let (ih, iw) = cfg.input_size;
        let (h, w) = cfg.heatmap_size();
        let mut maps = Vec::with_capacity(kps.len());
        let mut mask = Tensor::zeros(Shape::new(kps.len(), NUM_KEYPOINTS, 1, 1));
        for (n, k) in kps.iter().enumerate() {
            let hm = crop_to_heatmap(k, ih, iw)?;
            let (stack, m) = encode_heatmaps(&hm, h, w, cfg.sigma)?;
            for (c, &on) in m.iter().enumerate() {
                mask.set(n, c, 0, 0, if on { 1.0 } else { 0.0 });
            }
            maps.push(stack.maps);
        }
        Ok(Targets {
            heatmaps: Tensor::stack(&maps)?,
            mask,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_face: f64,
    pub l_upper: f64,
    pub l_lower: f64,
    pub l_body: f64,
    pub l_total: f64,
    pub weights: (f64, f64, f64),
}

/// Tape handles of every term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub parts: Option<[Var; 3]>,
    pub body: Var,
    pub total: Var,
}

fn check_weights(w: (f64, f64, f64)) -> Result<()> {
    if [w.0, w.1, w.2].iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid(
            "total_loss",
            format!("loss weights {w:?} must be >= 0"),
        ));
    }
    Ok(())
}

/// `α·face + β·upper + γ·lower + body`, accumulated in that order.
pub fn total_loss(parts: [f64; 3], body: f64, weights: (f64, f64, f64)) -> Result<LossBreakdown> {
    check_weights(weights)?;
    let (a, b, g) = weights;
    let mut total = 0.0;
    total += a * parts[0];
    total += b * parts[1];
    total += g * parts[2];
    total += body;
    Ok(LossBreakdown {
        l_face: parts[0],
        l_upper: parts[1],
        l_lower: parts[2],
        l_body: body,
        l_total: total,
        weights,
    })
}

/// Recorded counterpart of [`total_loss`].
pub fn total_loss_var(
    tape: &mut Tape,
    parts: [Var; 3],
    body: Var,
    weights: (f64, f64, f64),
) -> Result<Var> {
    check_weights(weights)?;
    let (a, b, g) = weights;
    tape.weighted_sum(&[(parts[0], a), (parts[1], b), (parts[2], g), (body, 1.0)])
}

/// Face, upper and lower losses of the auxiliary heads against their target slices.
pub fn part_losses(
    tape: &mut Tape,
    aux: [Var; 3],
    target: Var,
    mask: Var,
    partition: &[Range<usize>; 3],
) -> Result<[Var; 3]> {
    let tc = tape.shape(target).c;
    if tc != NUM_KEYPOINTS {
        return Err(Error::mismatch(
            "part_losses",
            "target channels",
            NUM_KEYPOINTS,
            tc,
        ));
    }
    let mut out = [target; 3];
    for (i, r) in partition.iter().enumerate() {
        let ac = tape.shape(aux[i]).c;
        if ac != r.len() {
            return Err(Error::mismatch(
                "part_losses",
                "auxiliary channels",
                r.len(),
                ac,
            ));
        }
        let t = tape.narrow_channels(target, r.start, r.len())?;
        let m = tape.narrow_channels(mask, r.start, r.len())?;
        out[i] = tape.mse_masked(aux[i], t, m)?;
    }
    Ok(out)
}

pub fn body_loss(tape: &mut Tape, body: Var, target: Var, mask: Var) -> Result<Var> {
    tape.mse_masked(body, target, mask)
}

/// Records the full objective for a forward pass. Heads without auxiliary outputs
/// contribute zero part losses.
pub fn supervised_loss(
    tape: &mut Tape,
    out: &ForwardOutputs,
    targets: &Targets,
    cfg: &ModelConfig,
) -> Result<(LossVars, LossBreakdown)> {
    let target = tape.constant(targets.heatmaps.clone());
    let mask = tape.constant(targets.mask.clone());
    let body = body_loss(tape, out.body, target, mask)?;
    match out.aux {
        Some(aux) => {
            let parts = part_losses(tape, aux, target, mask, &cfg.part_partition)?;
            let total = total_loss_var(tape, parts, body, cfg.loss_weights)?;
            let values = parts.map(|p| tape.value(p).item());
            let breakdown = total_loss(values, tape.value(body).item(), cfg.loss_weights)?;
            debug_assert_eq!(breakdown.l_total, tape.value(total).item());
            Ok((
                LossVars {
                    parts: Some(parts),
                    body,
                    total,
                },
                breakdown,
            ))
        }
        None => {
            let breakdown = total_loss([0.0; 3], tape.value(body).item(), cfg.loss_weights)?;
            Ok((
                LossVars {
                    parts: None,
                    body,
                    total: body,
                },
                breakdown,
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::codec::{Frame, Point, Visibility};

    fn partition() -> [Range<usize>; 3] {
        [0..5, 5..11, 11..17]
    }

    /// ½ · (1/N) Σ_i Σ_k m_ik · (1/HW) Σ_r (p − t)², written out directly.
    fn loop_oracle(pred: &Tensor, target: &Tensor, mask: &Tensor, offset: usize) -> f64 {
        let s = pred.shape();
        let mut total = 0.0;
        for n in 0..s.n {
            for k in 0..s.c {
                if mask.at(n, offset + k, 0, 0) == 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                for y in 0..s.h {
                    for x in 0..s.w {
                        let d = pred.at(n, k, y, x) - target.at(n, offset + k, y, x);
                        acc += d * d;
                    }
                }
                total += acc / (s.h * s.w) as f64;
            }
        }
        0.5 * total / s.n as f64
    }

    fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Tensor, Tensor, [Tensor; 3], Tensor) {
        let (h, w) = (6, 5);
        let target = Tensor::uniform(Shape::new(n, 17, h, w), 0.0, 1.0, rng);
        let body = Tensor::uniform(Shape::new(n, 17, h, w), -0.5, 1.0, rng);
        let aux = [5, 6, 6].map(|c| Tensor::uniform(Shape::new(n, c, h, w), -0.5, 1.0, rng));
        let mut mask = Tensor::zeros(Shape::new(n, 17, 1, 1));
        for v in mask.data_mut() {
            *v = if rng.gen_bool(0.8) { 1.0 } else { 0.0 };
        }
        (target, body, aux, mask)
    }

    fn record(target: &Tensor, body: &Tensor, aux: &[Tensor; 3], mask: &Tensor) -> ([f64; 3], f64) {
        let mut tape = Tape::new();
        let t = tape.constant(target.clone());
        let m = tape.constant(mask.clone());
        let b = tape.constant(body.clone());
        let a = aux.clone().map(|x| tape.constant(x));
        let parts = part_losses(&mut tape, a, t, m, &partition()).unwrap();
        let bl = body_loss(&mut tape, b, t, m).unwrap();
        (parts.map(|p| tape.value(p).item()), tape.value(bl).item())
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 2] {
            let (target, body, aux, mask) = random_case(&mut rng, n);
            let (parts, bl) = record(&target, &body, &aux, &mask);
            for (i, off) in [0, 5, 11].into_iter().enumerate() {
                assert!((parts[i] - loop_oracle(&aux[i], &target, &mask, off)).abs() < 1e-12);
            }
            assert!((bl - loop_oracle(&body, &target, &mask, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_predictions_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (target, _, _, mask) = random_case(&mut rng, 2);
        let aux = [0..5, 5..11, 11..17]
            .map(|r| crate::tensor::kernels::narrow_channels(&target, r.start, r.len()).unwrap());
        let (parts, bl) = record(&target, &target, &aux, &mask);
        assert_eq!(parts, [0.0; 3]);
        assert_eq!(bl, 0.0);
    }

    #[test]
    fn face_only_labels_zero_limb_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (target, body, aux, _) = random_case(&mut rng, 1);
        let mut mask = Tensor::zeros(Shape::new(1, 17, 1, 1));
        for k in 0..5 {
            mask.set(0, k, 0, 0, 1.0);
        }
        let (parts, _) = record(&target, &body, &aux, &mask);
        assert!(parts[0] > 0.0);
        assert_eq!(parts[1], 0.0);
        assert_eq!(parts[2], 0.0);
    }

    #[test]
    fn doubling_residual_quadruples_body_loss() {
        let target = Tensor::zeros(Shape::new(1, 17, 4, 4));
        let mask = Tensor::full(Shape::new(1, 17, 1, 1), 1.0);
        let aux = [5, 6, 6].map(|c| Tensor::zeros(Shape::new(1, c, 4, 4)));
        let (_, one) = record(&target, &Tensor::full(target.shape(), 0.25), &aux, &mask);
        let (_, two) = record(&target, &Tensor::full(target.shape(), 0.5), &aux, &mask);
        assert_eq!(two, 4.0 * one);
    }

    #[test]
    fn total_is_weighted_sum() {
        let b = total_loss([1.0, 2.0, 3.0], 4.0, (1.0, 1.0, 1.0)).unwrap();
        assert_eq!(b.l_total, 10.0);
        let b = total_loss([1.0, 2.0, 3.0], 4.0, (0.0, 0.0, 0.0)).unwrap();
        assert_eq!(b.l_total, 4.0);
        assert!(total_loss([1.0; 3], 1.0, (1.0, -0.1, 1.0)).is_err());
    }

    #[test]
    fn aux_gradient_scales_with_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (target, body, aux, mask) = random_case(&mut rng, 1);
        let grad_for = |alpha: f64| {
            let mut tape = Tape::new();
            let t = tape.constant(target.clone());
            let m = tape.constant(mask.clone());
            let b = tape.leaf(body.clone(), true);
            let face = tape.leaf(aux[0].clone(), true);
            let a = [
                face,
                tape.constant(aux[1].clone()),
                tape.constant(aux[2].clone()),
            ];
            let parts = part_losses(&mut tape, a, t, m, &partition()).unwrap();
            let bl = body_loss(&mut tape, b, t, m).unwrap();
            let total = total_loss_var(&mut tape, parts, bl, (alpha, 1.0, 1.0)).unwrap();
            tape.backward(total).unwrap().get(face).unwrap().clone()
        };
        let g1 = grad_for(1.0);
        let g3 = grad_for(3.0);
        for (a, b) in g1.data().iter().zip(g3.data()) {
            assert!((3.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn targets_mask_unlabeled_and_outside() {
        let cfg = ModelConfig::desk();
        let mut kps = KeypointSet::new(Frame::Crop);
        kps.coords[0] = Point::new(40.0, 20.0);
        kps.visibility[0] = Visibility::Labeled;
        kps.coords[1] = Point::new(500.0, 20.0);
        kps.visibility[1] = Visibility::Labeled;
        kps.coords[2] = Point::new(40.0, 20.0);
        let t = Targets::from_keypoints(&[kps], &cfg).unwrap();
        assert_eq!(t.heatmaps.shape(), Shape::new(1, 17, 32, 24));
        assert_eq!(t.mask.at(0, 0, 0, 0), 1.0);
        assert_eq!(t.mask.at(0, 1, 0, 0), 0.0);
        assert_eq!(t.mask.at(0, 2, 0, 0), 0.0);
        assert_eq!(t.heatmaps.at(0, 0, 5, 10), 1.0);
    }
}
