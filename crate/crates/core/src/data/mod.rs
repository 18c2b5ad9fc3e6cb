//! Synthetic stick-figure people, the 4:3 crop and the affine augmentation pipeline.
//!
//! Pixel centers sit at integer coordinates. Every geometric step builds one [`Affine`]
//! mapping source pixels to output pixels; images are resampled through its inverse and
//! keypoints are pushed through it directly.

mod dataset;
mod geometry;
mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{FlipPairs, Frame, KeypointSet, Visibility};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use dataset::{
    load_image, make_dataset, sample_seed, save_ppm, Dataset, DatasetSpec, ManifestEntry, Split,
};
pub use geometry::{warp_affine, Affine, BoundingBox};
pub use render::{
    render_person, sample_person, Difficulty, JointAngles, PersonInstance, PoseRanges, CANVAS,
};

/// Parameters of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation_deg: 0.0,
        scale: 1.0,
        flip: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_p: f64,
    /// Rotation drawn from `±rotation_deg`.
    pub rotation_deg: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_p: 0.5,
            rotation_deg: 40.0,
            scale_range: (0.7, 1.3),
        }
    }
}

impl AugmentConfig {
    /// Draws scale, then rotation, then the flip coin.
    pub fn draw(&self, rng: &mut impl Rng) -> AugmentParams {
        let (lo, hi) = self.scale_range;
        let scale = if lo < hi { rng.gen_range(lo..hi) } else { lo };
        let r = self.rotation_deg;
        let rotation_deg = if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 };
        let flip = rng.gen::<f64>() < self.flip_p;
        AugmentParams {
            rotation_deg,
            scale,
            flip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub difficulty: Difficulty,
    /// Source-image pixels to the current image's pixels.
    pub transform: Affine,
    pub augment: Option<AugmentParams>,
}

/// One image with its keypoints. `bbox` always stays in source-image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// `1×3×H×W` in `[0, 1]`.
    pub image: Tensor,
    pub keypoints: KeypointSet,
    pub bbox: BoundingBox,
    pub meta: SampleMeta,
}

impl SampleRecord {
    /// A bare image with no annotations, for inference on external inputs.
    pub fn unlabeled(image: Tensor, bbox: BoundingBox) -> SampleRecord {
        SampleRecord {
            image,
            keypoints: KeypointSet::new(Frame::Image),
            bbox,
            meta: SampleMeta {
                seed: 0,
                difficulty: Difficulty::Easy,
                transform: Affine::IDENTITY,
                augment: None,
            },
        }
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    /// Box area scaled into the current image's pixels.
    pub fn current_area(&self) -> f64 {
        self.bbox.area() * self.meta.transform.det().abs()
    }

    /// Applies `m` (current pixels to new pixels) to the image and keypoints; keypoints
    /// landing outside the new `out_h×out_w` grid become unlabeled.
    fn transformed(
        &self,
        m: &Affine,
        out_h: usize,
        out_w: usize,
        frame: Frame,
    ) -> Result<SampleRecord> {
        let image = warp_affine(&self.image, m, out_h, out_w)?;
        let mut keypoints = KeypointSet::new(frame);
        for k in 0..keypoints.coords.len() {
            let p = m.apply(self.keypoints.coords[k]);
            keypoints.coords[k] = p;
            let inside =
                p.x >= 0.0 && p.y >= 0.0 && p.x <= (out_w - 1) as f64 && p.y <= (out_h - 1) as f64;
            if self.keypoints.labeled(k) && inside {
                keypoints.visibility[k] = Visibility::Labeled;
            }
        }
        Ok(SampleRecord {
            image,
            keypoints,
            bbox: self.bbox,
            meta: SampleMeta {
                transform: self.meta.transform.then(m),
                ..self.meta.clone()
            },
        })
    }
}

/// Renders the person for `seed` on the full canvas, in source-image coordinates.
pub fn render_sample(seed: u64, difficulty: Difficulty) -> SampleRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let person = sample_person(&mut rng, &PoseRanges::default(), difficulty);
    let image = render_person(&person, &mut rng);
    let keypoints = KeypointSet {
        coords: person.skeleton,
        visibility: person.visibility,
        frame: Frame::Image,
    };
    SampleRecord {
        image,
        keypoints,
        bbox: person.bbox,
        meta: SampleMeta {
            seed,
            difficulty,
            transform: Affine::IDENTITY,
            augment: None,
        },
    }
}

/// Source-image pixels to crop pixels for `bbox` expanded to `out_h : out_w`.
pub fn crop_transform(bbox: &BoundingBox, out_h: usize, out_w: usize) -> Result<Affine> {
    const OP: &str = "crop_to_aspect";
    if !(bbox.w > 0.0 && bbox.h > 0.0) || !bbox.x.is_finite() || !bbox.y.is_finite() {
        return Err(Error::invalid(OP, format!("degenerate box {bbox:?}")));
    }
    if out_h == 0 || out_w == 0 || 3 * out_h != 4 * out_w {
        return Err(Error::invalid(
            OP,
            format!("output {out_h}x{out_w} is not 4:3"),
        ));
    }
    let b = bbox.expand_to_aspect(out_h as f64, out_w as f64);
    let s = out_h as f64 / b.h;
    Ok(Affine::translate(-b.x, -b.y).then(&Affine::scale(s)))
}

/// Expands `bbox` to `out_h : out_w` about its center, crops (zero padding outside the
/// image) and resizes to `out_h×out_w`. Keypoints leaving the crop become unlabeled.
pub fn crop_to_aspect(
    sample: &SampleRecord,
    bbox: &BoundingBox,
    out_h: usize,
    out_w: usize,
) -> Result<SampleRecord> {
    if sample.keypoints.frame != Frame::Image {
        return Err(Error::WrongFrame {
            expected: "image",
            actual: sample.keypoints.frame.name(),
        });
    }
    let m = crop_transform(bbox, out_h, out_w)?;
    sample.transformed(&m, out_h, out_w, Frame::Crop)
}

/// Rotation about the crop center composed with an isotropic scale, then the optional mirror.
pub fn augment_transform(params: &AugmentParams, h: usize, w: usize) -> Affine {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let m = Affine::translate(-cx, -cy)
        .then(&Affine::scale(params.scale))
        .then(&Affine::rotate_deg(params.rotation_deg))
        .then(&Affine::translate(cx, cy));
    if params.flip {
        m.then(&Affine::flip_horizontal(w))
    } else {
        m
    }
}

/// Applies fixed augmentation parameters to a cropped sample.
pub fn apply_augment(
    sample: &SampleRecord,
    params: &AugmentParams,
    pairs: &FlipPairs,
) -> Result<SampleRecord> {
    if sample.keypoints.frame != Frame::Crop {
        return Err(Error::WrongFrame {
            expected: "crop",
            actual: sample.keypoints.frame.name(),
        });
    }
    let (h, w) = (sample.height(), sample.width());
    let m = augment_transform(params, h, w);
    let mut out = sample.transformed(&m, h, w, Frame::Crop)?;
    if params.flip {
        out.keypoints = out.keypoints.swap_pairs(pairs);
    }
    out.meta.augment = Some(*params);
    Ok(out)
}

/// Draws parameters from `rng` and applies them in a single resampling.
pub fn augment(
    sample: &SampleRecord,
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
    pairs: &FlipPairs,
) -> Result<SampleRecord> {
    let params = cfg.draw(rng);
    apply_augment(sample, &params, pairs)
}

/// Rounds every pixel to the nearest multiple of 1/255, the precision of the stored images.
pub fn quantize(img: &mut Tensor) {
    for v in img.data_mut() {
        *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Point;
    use crate::tensor::Shape;

    fn blank_sample(h: usize, w: usize) -> SampleRecord {
        SampleRecord::unlabeled(
            Tensor::zeros(Shape::new(1, 3, h, w)),
            BoundingBox::new(0.0, 0.0, w as f64, h as f64),
        )
    }

    #[test]
    fn same_seed_same_sample() {
        assert_eq!(
            render_sample(11, Difficulty::Occluded),
            render_sample(11, Difficulty::Occluded)
        );
        assert_ne!(
            render_sample(11, Difficulty::Easy),
            render_sample(12, Difficulty::Easy)
        );
    }

    #[test]
    fn easy_mode_labels_everything() {
        for seed in 0..50 {
            assert_eq!(
                render_sample(seed, Difficulty::Easy)
                    .keypoints
                    .num_labeled(),
                17
            );
        }
    }

    #[test]
    fn occluded_mode_hides_one_to_four() {
        for seed in 0..200 {
            let s = render_sample(seed, Difficulty::Occluded);
            let hidden = 17 - s.keypoints.num_labeled();
            assert!((1..=4).contains(&hidden), "seed {seed}: {hidden}");
        }
    }

    #[test]
    fn figures_fit_the_canvas() {
        for seed in 0..200 {
            let s = render_sample(seed, Difficulty::Easy);
            for p in &s.keypoints.coords {
                assert!(p.x >= 0.0 && p.y >= 0.0 && p.x <= 319.0 && p.y <= 239.0);
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn aligned_box_is_pure_crop_and_scale() {
        let mut s = blank_sample(400, 400);
        s.keypoints.coords[0] = Point::new(170.0, 190.0);
        s.keypoints.visibility[0] = Visibility::Labeled;
        let b = BoundingBox::new(140.0, 120.0, 120.0, 160.0);
        let c = crop_to_aspect(&s, &b, 256, 192).unwrap();
        let scale = 256.0 / 160.0;
        assert_eq!(
            c.keypoints.coords[0],
            Point::new(30.0 * scale, 70.0 * scale)
        );
        assert!(c.keypoints.labeled(0));
        assert_eq!(c.keypoints.frame, Frame::Crop);
    }

    #[test]
    fn wide_box_grows_in_height_only() {
        let m = crop_transform(&BoundingBox::new(10.0, 50.0, 90.0, 60.0), 128, 96).unwrap();
        // expanded box: w 90, h 120, top at 50 + 30 - 60 = 20
        let inv = m.inverse().unwrap();
        let tl = inv.apply(Point::new(0.0, 0.0));
        let br = inv.apply(Point::new(96.0, 128.0));
        assert!((tl.x - 10.0).abs() < 1e-12 && (tl.y - 20.0).abs() < 1e-12);
        assert!((br.x - 100.0).abs() < 1e-12 && (br.y - 140.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        let s = blank_sample(40, 40);
        for b in [
            BoundingBox::new(0.0, 0.0, 0.0, 10.0),
            BoundingBox::new(0.0, 0.0, 10.0, -1.0),
        ] {
            assert!(crop_to_aspect(&s, &b, 128, 96).is_err());
        }
        assert!(crop_to_aspect(&s, &BoundingBox::new(0.0, 0.0, 10.0, 10.0), 100, 100).is_err());
    }

    #[test]
    fn keypoints_outside_crop_become_unlabeled() {
        let mut s = blank_sample(200, 200);
        s.keypoints.coords[3] = Point::new(5.0, 5.0);
        s.keypoints.coords[4] = Point::new(100.0, 100.0);
        s.keypoints.visibility[3] = Visibility::Labeled;
        s.keypoints.visibility[4] = Visibility::Labeled;
        let c = crop_to_aspect(&s, &BoundingBox::new(70.0, 60.0, 60.0, 80.0), 128, 96).unwrap();
        assert!(!c.keypoints.labeled(3));
        assert!(c.keypoints.labeled(4));
    }

    #[test]
    fn border_box_crop_is_zero_padded() {
        let mut s = blank_sample(50, 50);
        s.image = Tensor::full(Shape::new(1, 3, 50, 50), 1.0);
        let c = crop_to_aspect(&s, &BoundingBox::new(-20.0, -20.0, 45.0, 60.0), 128, 96).unwrap();
        assert_eq!(c.image.at(0, 0, 0, 0), 0.0);
        assert_eq!(c.image.at(0, 0, 127, 95), 1.0);
    }

    #[test]
    fn identity_augment_is_identity() {
        let s = render_sample(3, Difficulty::Easy);
        let c = crop_to_aspect(&s, &s.bbox, 128, 96).unwrap();
        let a = apply_augment(&c, &AugmentParams::IDENTITY, &FlipPairs::coco()).unwrap();
        assert_eq!(a.image, c.image);
        assert_eq!(a.keypoints, c.keypoints);
    }

    #[test]
    fn quarter_turn_moves_right_to_below() {
        let mut c = blank_sample(128, 96);
        c.keypoints.frame = Frame::Crop;
        let (cx, cy) = (47.5, 63.5);
        c.keypoints.coords[0] = Point::new(cx + 20.0, cy);
        c.keypoints.visibility[0] = Visibility::Labeled;
        let p = AugmentParams {
            rotation_deg: 90.0,
            scale: 1.0,
            flip: false,
        };
        let a = apply_augment(&c, &p, &FlipPairs::coco()).unwrap();
        let q = a.keypoints.coords[0];
        assert!(
            (q.x - cx).abs() < 1e-9 && (q.y - (cy + 20.0)).abs() < 1e-9,
            "{q:?}"
        );
    }

    #[test]
    fn flip_twice_restores_sample() {
        let s = render_sample(5, Difficulty::Easy);
        let c = crop_to_aspect(&s, &s.bbox, 128, 96).unwrap();
        let p = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let pairs = FlipPairs::coco();
        let once = apply_augment(&c, &p, &pairs).unwrap();
        assert_ne!(once.keypoints, c.keypoints);
        let twice = apply_augment(&once, &p, &pairs).unwrap();
        for (a, b) in twice.image.data().iter().zip(c.image.data()) {
            assert!((a - b).abs() < 2.0 / 255.0);
        }
        assert_eq!(twice.keypoints.visibility, c.keypoints.visibility);
        for (a, b) in twice.keypoints.coords.iter().zip(&c.keypoints.coords) {
            assert!(a.dist(*b) < 1e-9);
        }
    }

    #[test]
    fn draws_respect_ranges() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut flips = 0;
        for _ in 0..2000 {
            let p = cfg.draw(&mut rng);
            assert!(p.rotation_deg.abs() <= 40.0);
            assert!((0.7..=1.3).contains(&p.scale));
            flips += p.flip as usize;
        }
        assert!((850..1150).contains(&flips), "{flips}");
    }
}
