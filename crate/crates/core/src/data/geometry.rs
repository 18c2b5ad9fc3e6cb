use serde::{Deserialize, Serialize};

use crate::codec::Point;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// 2-D affine map `x' = a x + b y + c`, `y' = d x + e y + f`, stored as `[a, b, c, d, e, f]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [f64; 6]);

impl Affine {
    pub const IDENTITY: Affine = Affine([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn translate(dx: f64, dy: f64) -> Affine {
        Affine([1.0, 0.0, dx, 0.0, 1.0, dy])
    }

    pub fn scale(s: f64) -> Affine {
        Affine([s, 0.0, 0.0, 0.0, s, 0.0])
    }

    /// Rotation by `deg` degrees in image coordinates (y down): at 90°, `(d, 0)` maps to `(0, d)`.
    pub fn rotate_deg(deg: f64) -> Affine {
        let (s, c) = deg.to_radians().sin_cos();
        Affine([c, -s, 0.0, s, c, 0.0])
    }

    /// Mirror of the pixel grid `0..width`: `x' = width - 1 - x`.
    pub fn flip_horizontal(width: usize) -> Affine {
        Affine([-1.0, 0.0, width as f64 - 1.0, 0.0, 1.0, 0.0])
    }

    /// `other ∘ self`: apply `self` first.
    pub fn then(&self, other: &Affine) -> Affine {
        let [a, b, c, d, e, f] = self.0;
        let [p, q, r, s, t, u] = other.0;
        Affine([
            p * a + q * d,
            p * b + q * e,
            p * c + q * f + r,
            s * a + t * d,
            s * b + t * e,
            s * c + t * f + u,
        ])
    }

    pub fn det(&self) -> f64 {
        let [a, b, _, d, e, _] = self.0;
        a * e - b * d
    }

    pub fn inverse(&self) -> Result<Affine> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::invalid("affine", "singular transform"));
        }
        let [a, b, c, d, e, f] = self.0;
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok(Affine([
            ia,
            ib,
            -(ia * c + ib * f),
            id,
            ie,
            -(id * c + ie * f),
        ]))
    }

    pub fn apply(&self, p: Point) -> Point {
        let [a, b, c, d, e, f] = self.0;
        Point::new(a * p.x + b * p.y + c, d * p.x + e * p.y + f)
    }
}

/// Axis-aligned box `(x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Grows the deficient side about the center until `h : w = aspect_h : aspect_w`.
    pub fn expand_to_aspect(&self, aspect_h: f64, aspect_w: f64) -> BoundingBox {
        let c = self.center();
        let (mut w, mut h) = (self.w, self.h);
        if w * aspect_h > h * aspect_w {
            h = w * aspect_h / aspect_w;
        } else {
            w = h * aspect_w / aspect_h;
        }
        BoundingBox::new(c.x - w / 2.0, c.y - h / 2.0, w, h)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x && p.x <= self.x + self.w && p.y >= self.y && p.y <= self.y + self.h
    }
}

/// Resamples `img` (`1×C×H×W`) onto an `out_h×out_w` grid, where `m` maps source pixels to
/// output pixels. Bilinear sampling; samples outside the source read as zero.
pub fn warp_affine(img: &Tensor, m: &Affine, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.n != 1 {
        return Err(Error::mismatch("warp_affine", "batch", 1, s.n));
    }
    let inv = m.inverse()?;
    let mut out = Tensor::zeros(Shape::new(1, s.c, out_h, out_w));
    let (h, w) = (s.h as isize, s.w as isize);
    for v in 0..out_h {
        for u in 0..out_w {
            let p = inv.apply(Point::new(u as f64, v as f64));
            let (x0, y0) = (p.x.floor(), p.y.floor());
            let (fx, fy) = (p.x - x0, p.y - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1, y0, fx * (1.0 - fy)),
                (x0, y0 + 1, (1.0 - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ];
            for c in 0..s.c {
                let plane = img.plane(0, c);
                let mut acc = 0.0;
                for &(x, y, wt) in &taps {
                    if wt != 0.0 && x >= 0 && y >= 0 && x < w && y < h {
                        acc += wt * plane[(y * w + x) as usize];
                    }
                }
                out.plane_mut(0, c)[v * out_w + u] = acc;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_turn_convention() {
        let p = Affine::rotate_deg(90.0).apply(Point::new(5.0, 0.0));
        assert!(p.x.abs() < 1e-12 && (p.y - 5.0).abs() < 1e-12);
    }

    #[test]
    fn composition_order() {
        let m = Affine::translate(1.0, 0.0).then(&Affine::scale(2.0));
        assert_eq!(m.apply(Point::new(1.0, 1.0)), Point::new(4.0, 2.0));
    }

    #[test]
    fn inverse_round_trip() {
        let m = Affine::rotate_deg(33.0)
            .then(&Affine::scale(1.7))
            .then(&Affine::translate(-4.0, 9.5));
        let p = Point::new(3.25, -7.5);
        let q = m.inverse().unwrap().apply(m.apply(p));
        assert!(p.dist(q) < 1e-12);
    }

    #[test]
    fn aspect_expansion() {
        let b = BoundingBox::new(0.0, 0.0, 60.0, 40.0).expand_to_aspect(4.0, 3.0);
        assert_eq!((b.w, b.h), (60.0, 80.0));
        assert_eq!(b.center(), Point::new(30.0, 20.0));
        let b = BoundingBox::new(0.0, 0.0, 30.0, 80.0).expand_to_aspect(4.0, 3.0);
        assert_eq!((b.w, b.h), (60.0, 80.0));
    }

    #[test]
    fn identity_warp_is_exact() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let img = Tensor::uniform(Shape::new(1, 3, 7, 5), 0.0, 1.0, &mut rng);
        assert_eq!(warp_affine(&img, &Affine::IDENTITY, 7, 5).unwrap(), img);
        let twice = Affine::flip_horizontal(5).then(&Affine::flip_horizontal(5));
        assert_eq!(warp_affine(&img, &twice, 7, 5).unwrap(), img);
    }
}
