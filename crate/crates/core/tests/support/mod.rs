//! Direct reference implementations shared by the test targets.
#![allow(dead_code)]

use csanet::codec::{Frame, KeypointSet, Point, Visibility};
use csanet::eval::{KappaTable, ScoredInstance, OKS_THRESHOLDS};
use csanet::tensor::{ConvGeometry, Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: ConvGeometry) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let span = g.dilation * (ws.h - 1) + 1;
    let oh = (xs.h + 2 * g.pad - span) / g.stride + 1;
    let ow = (xs.w + 2 * g.pad - span) / g.stride + 1;
    let mut y = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy =
                                    (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                                let ix =
                                    (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b.data()[co];
                    }
                    y.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    y
}

/// Gathers, per output, the taps in ascending `(ky, kx)`; each tap sums over input channels first.
pub fn naive_conv_transpose(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h - 1) * stride + ws.h - 2 * pad;
    let ow = (xs.w - 1) * stride + ws.w - 2 * pad;
    let mut y = Tensor::zeros(Shape::new(xs.n, ws.c, oh, ow));
    for n in 0..xs.n {
        for co in 0..ws.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..ws.h {
                        for kx in 0..ws.w {
                            let ny = oy as isize + pad as isize - ky as isize;
                            let nx = ox as isize + pad as isize - kx as isize;
                            if ny < 0
                                || nx < 0
                                || ny % stride as isize != 0
                                || nx % stride as isize != 0
                            {
                                continue;
                            }
                            let (iy, ix) = (ny as usize / stride, nx as usize / stride);
                            if iy >= xs.h || ix >= xs.w {
                                continue;
                            }
                            let mut t = 0.0;
                            for ci in 0..xs.c {
                                t += w.at(ci, co, ky, kx) * x.at(n, ci, iy, ix);
                            }
                            acc += t;
                        }
                    }
                    if let Some(b) = b {
                        acc += b.data()[co];
                    }
                    y.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    y
}

/// Per-keypoint similarity written out from squared coordinate differences.
pub fn oks_oracle(
    pred: &KeypointSet,
    gt: &KeypointSet,
    area: f64,
    kappa: &KappaTable,
) -> Option<f64> {
    let labeled: Vec<usize> = (0..17)
        .filter(|&k| gt.visibility[k] == Visibility::Labeled)
        .collect();
    if labeled.is_empty() {
        return None;
    }
    let total: f64 = labeled
        .iter()
        .map(|&k| {
            let dx = pred.coords[k].x - gt.coords[k].x;
            let dy = pred.coords[k].y - gt.coords[k].y;
            let var = kappa.0[k] * kappa.0[k];
            (-(dx * dx + dy * dy) / (2.0 * area * var)).exp()
        })
        .sum();
    Some(total / labeled.len() as f64)
}

/// For each threshold and recall level, the best precision among all top-`k` cut-offs
/// that reach that recall, with instances in descending score order.
pub fn ap_oracle(inst: &[ScoredInstance]) -> (f64, f64) {
    let mut order: Vec<usize> = (0..inst.len()).filter(|&i| inst[i].oks.is_some()).collect();
    order.sort_by(|&a, &b| {
        inst[b]
            .score
            .partial_cmp(&inst[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let n = order.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mut ap_sum = 0.0;
    let mut ar_sum = 0.0;
    for &t in &OKS_THRESHOLDS {
        let cut = |k: usize| {
            let tp = order[..k]
                .iter()
                .filter(|&&i| inst[i].oks.unwrap() >= t)
                .count();
            (tp as f64 / k as f64, tp as f64 / n as f64)
        };
        let mut total = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            let best = (1..=n)
                .map(cut)
                .filter(|&(_, rec)| rec >= level)
                .map(|(p, _)| p)
                .fold(0.0, f64::max);
            total += best;
        }
        ap_sum += total / 101.0;
        ar_sum += cut(n).1;
    }
    (ap_sum / 10.0, ar_sum / 10.0)
}

pub fn random_set(rng: &mut ChaCha8Rng, frame: Frame) -> KeypointSet {
    let mut k = KeypointSet::new(frame);
    for i in 0..17 {
        k.coords[i] = Point::new(rng.gen_range(0.0..96.0), rng.gen_range(0.0..128.0));
        if rng.gen_bool(0.8) {
            k.visibility[i] = Visibility::Labeled;
        }
    }
    k
}
