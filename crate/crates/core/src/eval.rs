//! Object keypoint similarity and OKS-thresholded average precision / recall.
//!
//! One person per crop and one prediction per person, so matching is the identity.
//! Precision is interpolated at 101 recall points as in the COCO evaluator.

use serde::{Deserialize, Serialize};

use crate::codec::{
    decode_keypoints, flip_merge, heatmap_to_crop, shift_horizontal, FlipPairs, KeypointSet,
    FLIP_ALIGN_SHIFT, NUM_KEYPOINTS,
};
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::tensor::{ParamStore, Tensor};

/// COCO per-keypoint sigmas; the falloff constant is twice each.
const COCO_SIGMAS: [f64; NUM_KEYPOINTS] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// Per-keypoint falloff constants `κ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct KappaTable(pub [f64; NUM_KEYPOINTS]);

impl KappaTable {
    pub fn coco() -> Self {
        KappaTable(COCO_SIGMAS.map(|s| 2.0 * s))
    }

    pub fn new(values: [f64; NUM_KEYPOINTS]) -> Result<Self> {
        if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(
                "kappa",
                "constants must be positive and finite",
            ));
        }
        Ok(KappaTable(values))
    }
}

impl Default for KappaTable {
    fn default() -> Self {
        KappaTable::coco()
    }
}

/// `Σ_i exp(-d_i² / (2 area κ_i²)) / n` over keypoints labeled in `gt`;
/// `None` when `gt` has no labeled keypoint.
pub fn oks(
    pred: &KeypointSet,
    gt: &KeypointSet,
    area: f64,
    kappa: &KappaTable,
) -> Result<Option<f64>> {
    if !(area > 0.0) {
        return Err(Error::invalid(
            "oks",
            format!("area {area} must be positive"),
        ));
    }
    if pred.frame != gt.frame {
        return Err(Error::WrongFrame {
            expected: gt.frame.name(),
            actual: pred.frame.name(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0;
    for k in 0..NUM_KEYPOINTS {
        if gt.labeled(k) {
            let d = pred.coords[k].dist(gt.coords[k]);
            let e = d * d / (2.0 * area * kappa.0[k] * kappa.0[k]);
            sum += (-e).exp();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// One scored person.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    /// Model confidence used for ranking.
    pub score: f64,
    /// `None` excludes the instance entirely.
    pub oks: Option<f64>,
    /// Ground-truth box area in source-image pixels, for the size bands.
    pub area: f64,
}

pub const OKS_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const RECALL_POINTS: usize = 101;
pub const MEDIUM_AREA: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);
pub const LARGE_AREA: (f64, f64) = (96.0 * 96.0, f64::INFINITY);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    /// Zero when no instance falls in the band; see `instances_medium`.
    #[serde(rename = "APm")]
    pub ap_medium: f64,
    #[serde(rename = "APl")]
    pub ap_large: f64,
    #[serde(rename = "AR")]
    pub ar: f64,
    /// Interpolated precision at each recall point, one row per OKS threshold.
    pub precision: Vec<Vec<f64>>,
    /// Final recall per OKS threshold.
    pub recall: Vec<f64>,
    pub instances: usize,
    pub instances_medium: usize,
    pub instances_large: usize,
    /// No scorable ground truth.
    pub empty: bool,
}

impl EvalReport {
    /// `AP=… AP50=… AP75=… APm=… APl=… AR=… n=…` on one line.
    pub fn summary(&self) -> String {
        format!(
            "AP={:.4} AP50={:.4} AP75={:.4} APm={:.4} APl={:.4} AR={:.4} n={}",
            self.ap, self.ap50, self.ap75, self.ap_medium, self.ap_large, self.ar, self.instances
        )
    }
}

/// Precision interpolated at `RECALL_POINTS` recall levels plus final recall, for ranked
/// true-positive flags against `num_gt` ground truths.
fn interpolated_precision(tp: &[bool], num_gt: usize) -> (Vec<f64>, f64) {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let q = (0..RECALL_POINTS)
        .map(|r| {
            let level = r as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&v| v < level);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect();
    (q, recall.last().copied().unwrap_or(0.0))
}

struct BandResult {
    precision: Vec<Vec<f64>>,
    recall: Vec<f64>,
    count: usize,
}

impl BandResult {
    fn ap_at(&self, t: usize) -> f64 {
        mean(&self.precision[t])
    }

    fn ap(&self) -> f64 {
        mean(
            &(0..OKS_THRESHOLDS.len())
                .map(|t| self.ap_at(t))
                .collect::<Vec<_>>(),
        )
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn evaluate_band(instances: &[ScoredInstance], (lo, hi): (f64, f64)) -> BandResult {
    let mut ranked: Vec<(f64, f64)> = instances
        .iter()
        .filter(|i| i.area >= lo && i.area <= hi)
        .filter_map(|i| i.oks.map(|o| (i.score, o)))
        .collect();
    // stable: equal scores keep input order
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let count = ranked.len();
    let mut precision = Vec::with_capacity(OKS_THRESHOLDS.len());
    let mut recall = Vec::with_capacity(OKS_THRESHOLDS.len());
    for &t in &OKS_THRESHOLDS {
        if count == 0 {
            precision.push(vec![0.0; RECALL_POINTS]);
            recall.push(0.0);
            continue;
        }
        let tp: Vec<bool> = ranked.iter().map(|&(_, o)| o >= t).collect();
        let (q, r) = interpolated_precision(&tp, count);
        precision.push(q);
        recall.push(r);
    }
    BandResult {
        precision,
        recall,
        count,
    }
}

/// AP over OKS thresholds 0.50:0.05:0.95, AP at 0.5 and 0.75, the medium and large
/// area bands, and AR as the mean final recall over the same thresholds.
pub fn average_precision(instances: &[ScoredInstance]) -> EvalReport {
    let all = evaluate_band(instances, (0.0, f64::INFINITY));
    let medium = evaluate_band(instances, MEDIUM_AREA);
    let large = evaluate_band(instances, LARGE_AREA);
    EvalReport {
        ap: all.ap(),
        ap50: all.ap_at(0),
        ap75: all.ap_at(5),
        ap_medium: medium.ap(),
        ap_large: large.ap(),
        ar: mean(&all.recall),
        instances: all.count,
        instances_medium: medium.count,
        instances_large: large.count,
        empty: all.count == 0,
        precision: all.precision,
        recall: all.recall,
    }
}

/// Decoded keypoints of one crop and the instance confidence (mean keypoint score).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub keypoints: KeypointSet,
    pub scores: [f64; NUM_KEYPOINTS],
    pub score: f64,
}

/// Decodes sample `n` of `maps` into crop coordinates.
pub fn predict_from_heatmaps(
    maps: &Tensor,
    n: usize,
    input_h: usize,
    input_w: usize,
) -> Result<Prediction> {
    let (hm, scores) = decode_keypoints(maps, n)?;
    let keypoints = heatmap_to_crop(&hm, input_h, input_w)?;
    let score = scores.iter().sum::<f64>() / NUM_KEYPOINTS as f64;
    Ok(Prediction {
        keypoints,
        scores,
        score,
    })
}

/// Scores predictions against cropped samples with OKS in crop pixels.
pub fn score_predictions(
    preds: &[Prediction],
    samples: &[SampleRecord],
    kappa: &KappaTable,
) -> Result<EvalReport> {
    if preds.len() != samples.len() {
        return Err(Error::invalid(
            "score_predictions",
            format!("{} predictions for {} samples", preds.len(), samples.len()),
        ));
    }
    let instances = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            Ok(ScoredInstance {
                score: p.score,
                oks: oks(&p.keypoints, &s.keypoints, s.current_area(), kappa)?,
                area: s.bbox.area(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(average_precision(&instances))
}

/// Horizontal mirror of every image in a batch.
pub fn mirror_images(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                for xx in 0..s.w {
                    dst[y * s.w + xx] = src[y * s.w + s.w - 1 - xx];
                }
            }
        }
    }
    out
}

/// Body heatmaps for a batch; with `flip_test`, averaged with the aligned mirror prediction.
pub fn infer_heatmaps(
    net: &Network,
    store: &ParamStore,
    images: &Tensor,
    flip_test: bool,
) -> Result<Tensor> {
    let maps = net.predict(store, images)?;
    if !flip_test {
        return Ok(maps);
    }
    let flipped = net.predict(store, &mirror_images(images))?;
    merge_flipped(&maps, &flipped, &FlipPairs::coco())
}

/// Averages `maps` with heatmaps predicted on the mirrored input. The mirrored maps are
/// shifted by [`FLIP_ALIGN_SHIFT`] first (in their own frame, hence leftward) so that
/// after mirroring back they line up with `maps`.
pub fn merge_flipped(maps: &Tensor, flipped: &Tensor, pairs: &FlipPairs) -> Result<Tensor> {
    let aligned = shift_horizontal(flipped, -FLIP_ALIGN_SHIFT);
    flip_merge(maps, &aligned, pairs)
}

/// Runs the network over cropped samples in batches and scores the decoded keypoints.
pub fn evaluate_model(
    net: &Network,
    store: &ParamStore,
    samples: &[SampleRecord],
    cfg: &ModelConfig,
    flip_test: bool,
    batch: usize,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let (h, w) = cfg.input_size;
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<Tensor> = chunk.iter().map(|s| s.image.clone()).collect();
        let maps = infer_heatmaps(net, store, &Tensor::stack(&images)?, flip_test)?;
        for n in 0..chunk.len() {
            preds.push(predict_from_heatmaps(&maps, n, h, w)?);
        }
    }
    let report = score_predictions(&preds, samples, &KappaTable::coco())?;
    Ok((report, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Frame, Point, Visibility};

    fn set(points: &[(f64, f64)]) -> KeypointSet {
        let mut k = KeypointSet::new(Frame::Crop);
        for (i, &(x, y)) in points.iter().enumerate() {
            k.coords[i] = Point::new(x, y);
            k.visibility[i] = Visibility::Labeled;
        }
        k
    }

    #[test]
    fn exact_prediction_scores_one() {
        let g = set(&[(1.0, 2.0); 17]);
        assert_eq!(oks(&g, &g, 100.0, &KappaTable::coco()).unwrap(), Some(1.0));
    }

    #[test]
    fn one_kappa_scale_distance_gives_inverse_e() {
        let kappa = KappaTable::coco();
        let area: f64 = 900.0;
        let gt = set(&[(10.0, 10.0); 17]);
        let mut pred = gt.clone();
        for k in 0..17 {
            pred.coords[k].x += kappa.0[k] * (2.0 * area).sqrt();
        }
        let v = oks(&pred, &gt, area, &kappa).unwrap().unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        assert!((v - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn far_prediction_scores_zero_and_unlabeled_gt_is_excluded() {
        let mut gt = KeypointSet::new(Frame::Crop);
        gt.visibility[4] = Visibility::Labeled;
        let mut pred = gt.clone();
        pred.coords[4] = Point::new(1e300, 0.0);
        assert_eq!(
            oks(&pred, &gt, 50.0, &KappaTable::coco()).unwrap(),
            Some(0.0)
        );
        let empty = KeypointSet::new(Frame::Crop);
        assert_eq!(oks(&pred, &empty, 50.0, &KappaTable::coco()).unwrap(), None);
        assert!(oks(&pred, &gt, 0.0, &KappaTable::coco()).is_err());
    }

    #[test]
    fn frames_must_agree() {
        let a = set(&[(0.0, 0.0)]);
        let mut b = a.clone();
        b.frame = Frame::Heatmap;
        assert!(oks(&a, &b, 1.0, &KappaTable::coco()).is_err());
    }

    #[test]
    fn perfect_and_empty_reports() {
        let inst: Vec<ScoredInstance> = (0..5)
            .map(|i| ScoredInstance {
                score: i as f64,
                oks: Some(1.0),
                area: if i < 2 { 2000.0 } else { 20000.0 },
            })
            .collect();
        let r = average_precision(&inst);
        for v in [r.ap, r.ap50, r.ap75, r.ap_medium, r.ap_large, r.ar] {
            assert_eq!(v, 1.0);
        }
        assert_eq!((r.instances_medium, r.instances_large), (2, 3));
        let r = average_precision(&[]);
        assert!(r.empty);
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn three_instance_toy_set() {
        // ranked by score: oks 0.9, 0.6, 0.4
        let inst = [(0.9, 0.9), (0.5, 0.6), (0.1, 0.4)].map(|(score, o)| ScoredInstance {
            score,
            oks: Some(o),
            area: 5000.0,
        });
        let r = average_precision(&inst);
        // t <= 0.6: TP = {1, 2}: precision 1 up to recall 2/3, then nothing
        // t in (0.6, 0.9]: TP = {1}: precision 1 up to recall 1/3
        // t = 0.95: none
        let up_to = |rec: f64| {
            (0..101)
                .filter(|&i| (i as f64) / 100.0 <= rec + 1e-12)
                .count() as f64
                / 101.0
        };
        let expect = [
            up_to(2.0 / 3.0),
            up_to(2.0 / 3.0),
            up_to(2.0 / 3.0),
            up_to(1.0 / 3.0),
            up_to(1.0 / 3.0),
            up_to(1.0 / 3.0),
            up_to(1.0 / 3.0),
            up_to(1.0 / 3.0),
            up_to(1.0 / 3.0),
            0.0,
        ];
        for (t, e) in expect.iter().enumerate() {
            assert!((mean(&r.precision[t]) - e).abs() < 1e-12, "t{t}");
        }
        assert!((r.ap - expect.iter().sum::<f64>() / 10.0).abs() < 1e-12);
        assert!((r.ar - (3.0 * 2.0 / 3.0 + 6.0 / 3.0) / 10.0).abs() < 1e-12);
    }

    #[test]
    fn mirror_twice_is_identity() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let x = Tensor::uniform(crate::tensor::Shape::new(2, 3, 4, 5), 0.0, 1.0, &mut rng);
        assert_eq!(mirror_images(&mirror_images(&x)), x);
        assert_eq!(mirror_images(&x).at(1, 2, 3, 0), x.at(1, 2, 3, 4));
    }
}
