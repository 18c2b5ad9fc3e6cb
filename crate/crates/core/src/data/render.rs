use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Point, Visibility, NUM_KEYPOINTS};
use crate::tensor::{Shape, Tensor};

use super::BoundingBox;

/// Height and width of the rendered scene.
pub const CANVAS: (usize, usize) = (240, 320);

/// Inclusive `(min, max)` bounds in degrees, except `torso_len` in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRanges {
    pub torso_tilt: (f64, f64),
    pub head_tilt: (f64, f64),
    /// Upper-arm angle away from the torso's downward axis.
    pub shoulder: (f64, f64),
    /// Additional forearm rotation relative to the upper arm.
    pub elbow: (f64, f64),
    /// Thigh angle away from the torso's downward axis.
    pub hip: (f64, f64),
    /// Inward shin rotation relative to the thigh.
    pub knee: (f64, f64),
    pub torso_len: (f64, f64),
}

impl Default for PoseRanges {
    fn default() -> Self {
        PoseRanges {
            torso_tilt: (-15.0, 15.0),
            head_tilt: (-20.0, 20.0),
            shoulder: (10.0, 150.0),
            elbow: (0.0, 120.0),
            hip: (-5.0, 35.0),
            knee: (0.0, 60.0),
            torso_len: (18.0, 56.0),
        }
    }
}

/// Joint angles in degrees; two-element arrays are `[left, right]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointAngles {
    pub torso_tilt: f64,
    pub head_tilt: f64,
    pub shoulder: [f64; 2],
    pub elbow: [f64; 2],
    pub hip: [f64; 2],
    pub knee: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// Every keypoint visible.
    Easy,
    /// A rectangle hides one to four keypoints.
    Occluded,
}

/// Segment lengths as multiples of the torso length.
const UPPER_ARM: f64 = 0.55;
const FOREARM: f64 = 0.5;
const THIGH: f64 = 0.7;
const SHIN: f64 = 0.65;

#[derive(Debug, Clone, PartialEq)]
pub struct PersonInstance {
    /// Keypoints in canvas pixels, COCO order.
    pub skeleton: [Point; NUM_KEYPOINTS],
    pub angles: JointAngles,
    pub torso_len: f64,
    pub bone_thickness: f64,
    pub occlusion: Option<BoundingBox>,
    pub visibility: [Visibility; NUM_KEYPOINTS],
    pub bbox: BoundingBox,
    neck: Point,
    pelvis: Point,
    head: Point,
}

impl PersonInstance {
    pub fn limb_lengths(&self) -> [f64; 4] {
        let l = self.torso_len;
        [UPPER_ARM * l, FOREARM * l, THIGH * l, SHIN * l]
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Unit vector at `deg` from straight down, turned toward the figure's side `s`
/// (`+1` left, which is image right for a frontal figure).
fn limb_dir(s: f64, deg: f64) -> Point {
    let (sin, cos) = deg.to_radians().sin_cos();
    Point::new(s * sin, cos)
}

fn add(a: Point, b: Point, k: f64) -> Point {
    Point::new(a.x + k * b.x, a.y + k * b.y)
}

fn rotate(p: Point, deg: f64) -> Point {
    let (s, c) = deg.to_radians().sin_cos();
    Point::new(c * p.x - s * p.y, s * p.x + c * p.y)
}

/// Samples a frontal stick figure placed fully inside the canvas.
pub fn sample_person(
    rng: &mut ChaCha8Rng,
    ranges: &PoseRanges,
    difficulty: Difficulty,
) -> PersonInstance {
    let l = draw(rng, ranges.torso_len);
    let angles = JointAngles {
        torso_tilt: draw(rng, ranges.torso_tilt),
        head_tilt: draw(rng, ranges.head_tilt),
        shoulder: [draw(rng, ranges.shoulder), draw(rng, ranges.shoulder)],
        elbow: [draw(rng, ranges.elbow), draw(rng, ranges.elbow)],
        hip: [draw(rng, ranges.hip), draw(rng, ranges.hip)],
        knee: [draw(rng, ranges.knee), draw(rng, ranges.knee)],
    };

    // Body frame: neck at the origin, torso along +y, the figure's left toward +x.
    let mut k = [Point::default(); NUM_KEYPOINTS];
    let head = rotate(Point::new(0.0, -0.45 * l), angles.head_tilt);
    k[0] = rotate(Point::new(0.0, -0.40 * l), angles.head_tilt);
    for (side, s) in [(0, 1.0), (1, -1.0)] {
        k[1 + side] = rotate(Point::new(s * 0.10 * l, -0.48 * l), angles.head_tilt);
        k[3 + side] = rotate(Point::new(s * 0.20 * l, -0.44 * l), angles.head_tilt);
        let shoulder = Point::new(s * 0.42 * l, 0.05 * l);
        let elbow = add(shoulder, limb_dir(s, angles.shoulder[side]), UPPER_ARM * l);
        let wrist = add(
            elbow,
            limb_dir(s, angles.shoulder[side] + angles.elbow[side]),
            FOREARM * l,
        );
        let hip = Point::new(s * 0.25 * l, l);
        let knee = add(hip, limb_dir(s, angles.hip[side]), THIGH * l);
        let ankle = add(
            knee,
            limb_dir(s, angles.hip[side] - angles.knee[side]),
            SHIN * l,
        );
        k[5 + side] = shoulder;
        k[7 + side] = elbow;
        k[9 + side] = wrist;
        k[11 + side] = hip;
        k[13 + side] = knee;
        k[15 + side] = ankle;
    }
    let body = |p: Point| rotate(p, angles.torso_tilt);
    let mut skeleton = k.map(body);
    let mut neck = Point::default();
    let mut pelvis = body(Point::new(0.0, l));
    let mut head = body(head);

    let pad = 0.25 * l;
    let (x0, x1) = skeleton
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.x), b.max(p.x)));
    let (y0, y1) = skeleton
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.y), b.max(p.y)));
    let (x0, x1, y0, y1) = (x0 - pad, x1 + pad, y0 - pad, y1 + pad);
    let margin = 4.0;
    let (ch, cw) = (CANVAS.0 as f64, CANVAS.1 as f64);
    let tx = draw(
        rng,
        (margin - x0, (cw - 1.0 - margin - x1).max(margin - x0)),
    );
    let ty = draw(
        rng,
        (margin - y0, (ch - 1.0 - margin - y1).max(margin - y0)),
    );
    let shift = |p: Point| Point::new(p.x + tx, p.y + ty);
    skeleton = skeleton.map(shift);
    neck = shift(neck);
    pelvis = shift(pelvis);
    head = shift(head);
    let bbox = BoundingBox::new(x0 + tx, y0 + ty, x1 - x0, y1 - y0);

    let bone_thickness = draw(rng, (0.12, 0.2)) * l;
    let mut visibility = [Visibility::Labeled; NUM_KEYPOINTS];
    let occlusion = (difficulty == Difficulty::Occluded).then(|| {
        let anchor = skeleton[rng.gen_range(0..NUM_KEYPOINTS)];
        let mut half = Point::new(draw(rng, (0.1, 0.35)) * l, draw(rng, (0.1, 0.35)) * l);
        let jitter = Point::new(draw(rng, (-0.5, 0.5)), draw(rng, (-0.5, 0.5)));
        loop {
            let rect = BoundingBox::new(
                anchor.x + jitter.x * half.x - half.x,
                anchor.y + jitter.y * half.y - half.y,
                2.0 * half.x,
                2.0 * half.y,
            );
            let hidden = skeleton.iter().filter(|p| rect.contains(**p)).count();
            if hidden <= 4 || half.x < 0.5 {
                for (v, p) in visibility.iter_mut().zip(&skeleton) {
                    if rect.contains(*p) {
                        *v = Visibility::NotLabeled;
                    }
                }
                break rect;
            }
            half = half.scale(0.8);
        }
    });

    PersonInstance {
        skeleton,
        angles,
        torso_len: l,
        bone_thickness,
        occlusion,
        visibility,
        bbox,
        neck,
        pelvis,
        head,
    }
}

type Rgb = [f64; 3];

struct Canvas {
    img: Tensor,
    h: usize,
    w: usize,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: Rgb, alpha: f64) {
        for (c, &v) in color.iter().enumerate() {
            let px = &mut self.img.plane_mut(0, c)[y * self.w + x];
            *px += alpha * (v - *px);
        }
    }

    /// Anti-aliased capsule of radius `r` around segment `a`–`b`.
    fn capsule(&mut self, a: Point, b: Point, r: f64, color: Rgb) {
        let lo_x = (a.x.min(b.x) - r - 1.0).floor().max(0.0) as usize;
        let hi_x = ((a.x.max(b.x) + r + 1.0).ceil() as usize).min(self.w - 1);
        let lo_y = (a.y.min(b.y) - r - 1.0).floor().max(0.0) as usize;
        let hi_y = ((a.y.max(b.y) + r + 1.0).ceil() as usize).min(self.h - 1);
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len2 = dx * dx + dy * dy;
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let p = Point::new(x as f64, y as f64);
                let t = if len2 > 0.0 {
                    (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let d = p.dist(Point::new(a.x + t * dx, a.y + t * dy));
                let alpha = (r - d + 0.5).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    self.blend(x, y, color, alpha);
                }
            }
        }
    }

    fn rect(&mut self, r: &BoundingBox, color: Rgb, rng: &mut ChaCha8Rng) {
        let lo_x = r.x.ceil().max(0.0) as usize;
        let lo_y = r.y.ceil().max(0.0) as usize;
        let hi_x = ((r.x + r.w).floor().max(-1.0) + 1.0).min(self.w as f64) as usize;
        let hi_y = ((r.y + r.h).floor().max(-1.0) + 1.0).min(self.h as f64) as usize;
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let n = rng.gen_range(-0.05..0.05);
                self.blend(x, y, color.map(|v| v + n), 1.0);
            }
        }
    }
}

/// Per-joint-type colors; left and right partners share a color.
const JOINT_COLORS: [Rgb; 9] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.4, 1.0],
    [1.0, 1.0, 0.2],
    [1.0, 0.2, 1.0],
    [0.2, 1.0, 1.0],
    [1.0, 0.6, 0.1],
    [0.6, 0.1, 1.0],
    [1.0, 1.0, 1.0],
];

fn joint_color(k: usize) -> Rgb {
    JOINT_COLORS[if k == 0 { 0 } else { k.div_ceil(2) }]
}

/// Draws the figure over a noisy background. Body parts use distinct color bands:
/// head, torso, upper limbs and lower limbs, with a colored dot on every keypoint.
pub fn render_person(person: &PersonInstance, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = CANVAS;
    let base: Rgb = std::array::from_fn(|_| rng.gen_range(0.05..0.3));
    let mut img = Tensor::zeros(Shape::new(1, 3, h, w));
    for c in 0..3 {
        for v in img.plane_mut(0, c) {
            *v = base[c] + rng.gen_range(-0.04..0.04);
        }
    }
    let jitter = |rng: &mut ChaCha8Rng, c: Rgb| -> Rgb {
        c.map(|v| (v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0))
    };
    let face = jitter(rng, [0.85, 0.7, 0.55]);
    let torso = jitter(rng, [0.35, 0.45, 0.75]);
    let arm = [
        jitter(rng, [0.75, 0.35, 0.3]),
        jitter(rng, [0.9, 0.55, 0.45]),
    ];
    let leg = [jitter(rng, [0.3, 0.6, 0.35]), jitter(rng, [0.45, 0.8, 0.5])];

    let mut cv = Canvas { img, h, w };
    let s = &person.skeleton;
    let l = person.torso_len;
    let r = person.bone_thickness / 2.0;
    cv.capsule(person.neck, person.pelvis, 0.25 * l, torso);
    cv.capsule(s[5], s[6], r, torso);
    cv.capsule(s[11], s[12], r, torso);
    for side in 0..2 {
        cv.capsule(s[5 + side], s[7 + side], r, arm[0]);
        cv.capsule(s[7 + side], s[9 + side], r, arm[1]);
        cv.capsule(s[11 + side], s[13 + side], r, leg[0]);
        cv.capsule(s[13 + side], s[15 + side], r, leg[1]);
    }
    cv.capsule(person.head, person.head, 0.22 * l, face);
    let dot = (0.07 * l).max(1.5);
    for (k, p) in s.iter().enumerate() {
        cv.capsule(*p, *p, dot, joint_color(k));
    }
    if let Some(rect) = &person.occlusion {
        let gray = rng.gen_range(0.3..0.6);
        cv.rect(rect, [gray; 3], rng);
    }
    for v in cv.img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    cv.img
}
