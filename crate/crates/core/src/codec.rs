//! Keypoints ⇄ Gaussian score maps.
//!
//! Heatmaps sit at a quarter of the network input resolution and sample integer pixel
//! coordinates: heatmap pixel `(x, y)` is the location `(x, y)` of the heatmap frame,
//! which is the crop frame scaled by 1/4. `sigma` is measured in heatmap pixels.

use std::fmt;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const NUM_KEYPOINTS: usize = 17;

/// Ratio between network input and heatmap resolution.
pub const HEATMAP_STRIDE: usize = 4;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    NotLabeled,
    Labeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Pixels of the source image, before cropping.
    Image,
    /// Pixels of the network input crop.
    Crop,
    Heatmap,
}

impl Frame {
    pub fn name(self) -> &'static str {
        match self {
            Frame::Image => "image",
            Frame::Crop => "crop",
            Frame::Heatmap => "heatmap",
        }
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

/// 17 keypoints in COCO order: indices 0–4 face, 5–10 upper limbs, 11–16 lower limbs.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub coords: [Point; NUM_KEYPOINTS],
    pub visibility: [Visibility; NUM_KEYPOINTS],
    pub frame: Frame,
}

impl KeypointSet {
    pub fn new(frame: Frame) -> Self {
        KeypointSet {
            coords: [Point::default(); NUM_KEYPOINTS],
            visibility: [Visibility::NotLabeled; NUM_KEYPOINTS],
            frame,
        }
    }

    pub fn labeled(&self, k: usize) -> bool {
        self.visibility[k] == Visibility::Labeled
    }

    pub fn num_labeled(&self) -> usize {
        (0..NUM_KEYPOINTS).filter(|&k| self.labeled(k)).count()
    }

    fn expect_frame(&self, expected: Frame) -> Result<()> {
        if self.frame != expected {
            return Err(Error::WrongFrame {
                expected: expected.name(),
                actual: self.frame.name(),
            });
        }
        Ok(())
    }

    fn rescaled(&self, s: f64, frame: Frame) -> KeypointSet {
        KeypointSet {
            coords: self.coords.map(|p| p.scale(s)),
            visibility: self.visibility,
            frame,
        }
    }

    /// Swap left/right keypoint slots; coordinates are untouched.
    pub fn swap_pairs(&self, pairs: &FlipPairs) -> KeypointSet {
        let mut out = self.clone();
        for k in 0..NUM_KEYPOINTS {
            let j = pairs.partner(k);
            out.coords[k] = self.coords[j];
            out.visibility[k] = self.visibility[j];
        }
        out
    }
}

fn check_input_dims(input_h: usize, input_w: usize) -> Result<()> {
    if !input_h.is_multiple_of(HEATMAP_STRIDE)
        || !input_w.is_multiple_of(HEATMAP_STRIDE)
        || input_h == 0
        || input_w == 0
    {
        return Err(Error::invalid(
            "crop_to_heatmap",
            format!("input {input_h}x{input_w} not divisible by {HEATMAP_STRIDE}"),
        ));
    }
    Ok(())
}

pub fn crop_to_heatmap(kps: &KeypointSet, input_h: usize, input_w: usize) -> Result<KeypointSet> {
    kps.expect_frame(Frame::Crop)?;
    check_input_dims(input_h, input_w)?;
    Ok(kps.rescaled(1.0 / HEATMAP_STRIDE as f64, Frame::Heatmap))
}

pub fn heatmap_to_crop(kps: &KeypointSet, input_h: usize, input_w: usize) -> Result<KeypointSet> {
    kps.expect_frame(Frame::Heatmap)?;
    check_input_dims(input_h, input_w)?;
    Ok(kps.rescaled(HEATMAP_STRIDE as f64, Frame::Crop))
}

/// Left/right partner of every keypoint; the nose is its own partner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlipPairs {
    partner: [usize; NUM_KEYPOINTS],
}

impl FlipPairs {
    pub fn coco() -> Self {
        FlipPairs::from_pairs(&[
            (1, 2),
            (3, 4),
            (5, 6),
            (7, 8),
            (9, 10),
            (11, 12),
            (13, 14),
            (15, 16),
        ])
        .expect("COCO pairing is an involution")
    }

    /// Builds the pairing; unlisted indices pair with themselves.
    pub fn from_pairs(pairs: &[(usize, usize)]) -> Result<Self> {
        let mut partner: [usize; NUM_KEYPOINTS] = std::array::from_fn(|i| i);
        let mut seen = [false; NUM_KEYPOINTS];
        for &(a, b) in pairs {
            if a >= NUM_KEYPOINTS || b >= NUM_KEYPOINTS || seen[a] || seen[b] {
                return Err(Error::invalid("flip_pairs", format!("bad pair ({a}, {b})")));
            }
            seen[a] = true;
            seen[b] = true;
            partner[a] = b;
            partner[b] = a;
        }
        Ok(FlipPairs { partner })
    }

    pub fn partner(&self, k: usize) -> usize {
        self.partner[k]
    }
}

impl Default for FlipPairs {
    fn default() -> Self {
        FlipPairs::coco()
    }
}

/// Score maps for one instance: a `1×K×H×W` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub maps: Tensor,
    pub sigma: f64,
}

/// Gaussian targets for every labeled, in-map keypoint; the returned mask is `true`
/// exactly for the channels that carry a target.
pub fn encode_heatmaps(
    kps: &KeypointSet,
    h: usize,
    w: usize,
    sigma: f64,
) -> Result<(HeatmapStack, [bool; NUM_KEYPOINTS])> {
    kps.expect_frame(Frame::Heatmap)?;
    if !(sigma > 0.0) {
        return Err(Error::invalid(
            "encode_heatmaps",
            format!("sigma {sigma} must be > 0"),
        ));
    }
    let mut maps = Tensor::zeros(Shape::new(1, NUM_KEYPOINTS, h, w));
    let mut mask = [false; NUM_KEYPOINTS];
    let denom = 2.0 * sigma * sigma;
    for k in 0..NUM_KEYPOINTS {
        let z = kps.coords[k];
        let inside = z.x >= 0.0 && z.y >= 0.0 && z.x <= (w - 1) as f64 && z.y <= (h - 1) as f64;
        if !kps.labeled(k) || !inside {
            continue;
        }
        mask[k] = true;
        let plane = maps.plane_mut(0, k);
        for y in 0..h {
            let dy = y as f64 - z.y;
            for x in 0..w {
                let dx = x as f64 - z.x;
                plane[y * w + x] = (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }
    Ok((HeatmapStack { maps, sigma }, mask))
}

/// Integer argmax of a plane; ties go to the smallest row-major index.
pub fn argmax(plane: &[f64], w: usize) -> (usize, usize, f64) {
    let mut best = 0;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = i;
        }
    }
    (best % w, best / w, plane[best])
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Argmax refined by a quarter pixel toward the larger axis neighbour.
/// Missing neighbours at the border count as 0.
pub fn decode_plane(plane: &[f64], h: usize, w: usize) -> (Point, f64) {
    let (x, y, score) = argmax(plane, w);
    let at = |xx: isize, yy: isize| -> f64 {
        if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let (xi, yi) = (x as isize, y as isize);
    let dx = 0.25 * sign(at(xi + 1, yi) - at(xi - 1, yi));
    let dy = 0.25 * sign(at(xi, yi + 1) - at(xi, yi - 1));
    (Point::new(x as f64 + dx, y as f64 + dy), score)
}

/// Decodes sample `n` of a `N×17×H×W` prediction into the heatmap frame.
pub fn decode_keypoints(maps: &Tensor, n: usize) -> Result<(KeypointSet, [f64; NUM_KEYPOINTS])> {
    let s = maps.shape();
    if s.c != NUM_KEYPOINTS {
        return Err(Error::mismatch(
            "decode_keypoints",
            "channels",
            NUM_KEYPOINTS,
            s.c,
        ));
    }
    if s.h < 3 || s.w < 3 {
        return Err(Error::invalid(
            "decode_keypoints",
            format!("heatmaps {}x{} smaller than 3x3", s.h, s.w),
        ));
    }
    let mut kps = KeypointSet::new(Frame::Heatmap);
    let mut scores = [0.0; NUM_KEYPOINTS];
    for k in 0..NUM_KEYPOINTS {
        let (p, score) = decode_plane(maps.plane(n, k), s.h, s.w);
        kps.coords[k] = p;
        kps.visibility[k] = Visibility::Labeled;
        scores[k] = score;
    }
    Ok((kps, scores))
}

/// Horizontal mirror with left/right channel swap, applied to every sample.
pub fn mirror_swap(maps: &Tensor, pairs: &FlipPairs) -> Result<Tensor> {
    let s = maps.shape();
    if s.c != NUM_KEYPOINTS {
        return Err(Error::mismatch(
            "mirror_swap",
            "channels",
            NUM_KEYPOINTS,
            s.c,
        ));
    }
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for k in 0..s.c {
            let src = maps.plane(n, pairs.partner(k));
            let dst = out.plane_mut(n, k);
            for y in 0..s.h {
                for x in 0..s.w {
                    dst[y * s.w + x] = src[y * s.w + (s.w - 1 - x)];
                }
            }
        }
    }
    Ok(out)
}

/// Averages `orig` with the mirror+swap of the prediction made on the flipped input.
pub fn flip_merge(orig: &Tensor, flipped_out: &Tensor, pairs: &FlipPairs) -> Result<Tensor> {
    if orig.shape() != flipped_out.shape() {
        return Err(Error::invalid(
            "flip_merge",
            format!("{} vs {}", orig.shape(), flipped_out.shape()),
        ));
    }
    let mut merged = mirror_swap(flipped_out, pairs)?;
    for (m, a) in merged.data_mut().iter_mut().zip(orig.data()) {
        *m = (a + *m) / 2.0;
    }
    Ok(merged)
}

/// Offset between mirrored heatmaps and the unflipped heatmap frame.
///
/// Mirroring an input of width `4W` maps crop `x` to `4W − 1 − x`, i.e. heatmap
/// `W − 1/4 − x/4`; mirroring that back on the `W`-wide heatmap lands at `x/4 − 3/4`.
pub const FLIP_ALIGN_SHIFT: f64 = (HEATMAP_STRIDE as f64 - 1.0) / HEATMAP_STRIDE as f64;

/// Moves every plane `dx` pixels to the right by linear interpolation (zero fill).
pub fn shift_horizontal(maps: &Tensor, dx: f64) -> Tensor {
    let s = maps.shape();
    let mut out = Tensor::zeros(s);
    let base = dx.floor();
    let frac = dx - base;
    let base = base as isize;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = maps.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                let row = &src[y * s.w..(y + 1) * s.w];
                let at = |x: isize| -> f64 {
                    if x < 0 || x >= s.w as isize {
                        0.0
                    } else {
                        row[x as usize]
                    }
                };
                for x in 0..s.w {
                    // value at x comes from x - dx
                    let x0 = x as isize - base - 1;
                    let (a, b) = (at(x0), at(x0 + 1));
                    dst[y * s.w + x] = a * frac + b * (1.0 - frac);
                }
            }
        }
    }
    out
}

/// Writes one 8-bit grayscale PGM per channel of sample `n` (values clamped to [0, 1]).
pub fn export_heatmaps(maps: &Tensor, n: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let s = maps.shape();
    let mut written = Vec::with_capacity(s.c);
    for k in 0..s.c {
        let bytes: Vec<u8> = maps
            .plane(n, k)
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let name = KEYPOINT_NAMES.get(k).copied().unwrap_or("channel");
        let path = dir.join(format!("{k:02}_{name}.pgm"));
        let file = std::io::BufWriter::new(std::fs::File::create(&path)?);
        PnmEncoder::new(file)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&bytes, s.w as u32, s.h as u32, ExtendedColorType::L8)?;
        written.push(path);
    }
    Ok(written)
}
