//! Boxes, overlaps and the camera model.
//!
//! Camera coordinates follow KITTI: x right, y down, z forward. A [`Box3d`]
//! is located by its bottom-face centre and rotated by `ry` about the y
//! axis; its bird's-eye footprint lives in the (x, z) plane.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box2d {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl Box2d {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Self {
            left,
            top,
            right,
            bottom,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.left + self.right) / 2.0, (self.top + self.bottom) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.right > self.left && self.bottom > self.top
    }
}

/// Axis-aligned IoU; degenerate boxes overlap nothing.
pub fn iou_2d(a: &Box2d, b: &Box2d) -> f64 {
    if !a.is_valid() || !b.is_valid() {
        return 0.0;
    }
    let iw = a.right.min(b.right) - a.left.max(b.left);
    let ih = a.bottom.min(b.bottom) - a.top.max(b.top);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3d {
    /// Bottom-face centre.
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub ry: f64,
}

pub type Point = (f64, f64);

impl Box3d {
    pub fn is_valid(&self) -> bool {
        self.h > 0.0 && self.w > 0.0 && self.l > 0.0
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    /// Geometric centre `(x, y - h/2, z)`.
    pub fn center(&self) -> (f64, f64, f64) {
        (self.x, self.y - self.h / 2.0, self.z)
    }

    /// Footprint corners in the (x, z) plane, counter-clockwise.
    ///
    /// The length runs along the object's heading `(cos ry, -sin ry)`.
    pub fn bev_corners(&self) -> [Point; 4] {
        let (s, c) = self.ry.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
        let mut out = [(0.0, 0.0); 4];
        for (o, &(a, b)) in out.iter_mut().zip(&local) {
            // object frame (a along heading, b across) to camera (x, z)
            *o = (self.x + a * c + b * s, self.z - a * s + b * c);
        }
        if polygon_area(&out) < 0.0 {
            out.reverse();
        }
        out
    }

    /// True if the camera-frame point lies inside the box.
    pub fn contains(&self, p: (f64, f64, f64)) -> bool {
        let (s, c) = self.ry.sin_cos();
        let (dx, dz) = (p.0 - self.x, p.2 - self.z);
        let a = dx * c - dz * s;
        let b = dx * s + dz * c;
        a.abs() <= self.l / 2.0 && b.abs() <= self.w / 2.0 && p.1 <= self.y && p.1 >= self.y - self.h
    }
}

/// Signed shoelace area (positive for counter-clockwise order).
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        a += x0 * y1 - x1 * y0;
    }
    a / 2.0
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn segment_line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Sutherland–Hodgman clipping of `subject` by the convex, counter-clockwise
/// polygon `clip`.
pub fn clip_polygon(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let p_in = cross(a, b, p) >= 0.0;
            let q_in = cross(a, b, q) >= 0.0;
            if p_in {
                out.push(p);
                if !q_in {
                    out.push(segment_line_intersection(p, q, a, b));
                }
            } else if q_in {
                out.push(segment_line_intersection(p, q, a, b));
            }
        }
    }
    out
}

/// Footprint intersection area.
pub fn bev_intersection(a: &Box3d, b: &Box3d) -> f64 {
    let clipped = clip_polygon(&a.bev_corners(), &b.bev_corners());
    polygon_area(&clipped).max(0.0)
}

pub fn iou_bev(a: &Box3d, b: &Box3d) -> f64 {
    if !a.is_valid() || !b.is_valid() {
        return 0.0;
    }
    let inter = bev_intersection(a, b);
    let union = a.l * a.w + b.l * b.w - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou_3d(a: &Box3d, b: &Box3d) -> f64 {
    if !a.is_valid() || !b.is_valid() {
        return 0.0;
    }
    let overlap_y = a.y.min(b.y) - (a.y - a.h).max(b.y - b.h);
    if overlap_y <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * overlap_y;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Camera-2 projection matrix (3×4, row-major).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub p2: [[f64; 4]; 3],
}

impl Calibration {
    pub fn new(p2: [[f64; 4]; 3]) -> Result<Self> {
        if !(p2[0][0] > 0.0 && p2[1][1] > 0.0) {
            return Err(Error::invalid(format!(
                "calibration focal lengths must be positive, got {} and {}",
                p2[0][0], p2[1][1]
            )));
        }
        Ok(Self { p2 })
    }

    /// Pinhole camera without skew or translation.
    pub fn pinhole(f: f64, cx: f64, cy: f64) -> Self {
        Self {
            p2: [[f, 0.0, cx, 0.0], [0.0, f, cy, 0.0], [0.0, 0.0, 1.0, 0.0]],
        }
    }

    pub fn focal(&self) -> (f64, f64) {
        (self.p2[0][0], self.p2[1][1])
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.p2[0][2], self.p2[1][2])
    }

    /// Pixel position of a camera-frame point in front of the camera.
    pub fn project(&self, p: (f64, f64, f64)) -> Result<(f64, f64)> {
        if p.2 <= 0.0 {
            return Err(Error::Domain {
                op: "project_center",
                msg: format!("point at z = {} is behind the camera", p.2),
            });
        }
        let row = |r: &[f64; 4]| r[0] * p.0 + r[1] * p.1 + r[2] * p.2 + r[3];
        let w = row(&self.p2[2]);
        if w <= 0.0 {
            return Err(Error::Domain {
                op: "project_center",
                msg: format!("homogeneous depth {w} is not positive"),
            });
        }
        Ok((row(&self.p2[0]) / w, row(&self.p2[1]) / w))
    }

    /// Camera-frame point at depth `z` that projects to `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Result<(f64, f64, f64)> {
        if z <= 0.0 {
            return Err(Error::Domain {
                op: "unproject",
                msg: format!("depth {z} is not positive"),
            });
        }
        let p = &self.p2;
        let (a00, a01) = (p[0][0] - u * p[2][0], p[0][1] - u * p[2][1]);
        let (a10, a11) = (p[1][0] - v * p[2][0], p[1][1] - v * p[2][1]);
        let b0 = u * (p[2][2] * z + p[2][3]) - p[0][2] * z - p[0][3];
        let b1 = v * (p[2][2] * z + p[2][3]) - p[1][2] * z - p[1][3];
        let det = a00 * a11 - a01 * a10;
        if det.abs() < 1e-12 {
            return Err(Error::Domain {
                op: "unproject",
                msg: "singular projection".into(),
            });
        }
        Ok(((b0 * a11 - a01 * b1) / det, (a00 * b1 - a10 * b0) / det, z))
    }
}

/// Projects a camera-frame centre to pixels.
pub fn project_center(center: (f64, f64, f64), calib: &Calibration) -> Result<(f64, f64)> {
    calib.project(center)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_4, SQRT_2};

    fn unit(ry: f64) -> Box3d {
        Box3d {
            x: 0.0,
            y: 1.0,
            z: 0.0,
            h: 1.0,
            w: 1.0,
            l: 1.0,
            ry,
        }
    }

    #[test]
    fn iou_2d_examples() {
        let a = Box2d::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou_2d(&a, &a), 1.0);
        assert_eq!(iou_2d(&a, &Box2d::new(2.0, 2.0, 3.0, 3.0)), 0.0);
        let b = Box2d::new(0.5, 0.0, 1.5, 1.0);
        assert!((iou_2d(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou_2d(&a, &Box2d::new(0.0, 0.0, 0.0, 1.0)), 0.0);
    }

    #[test]
    fn rotated_square_octagon() {
        let closed = 2.0 * (SQRT_2 - 1.0) / (4.0 - 2.0 * SQRT_2);
        let got = iou_bev(&unit(0.0), &unit(FRAC_PI_4));
        assert!((got - 1.0 / SQRT_2).abs() < 1e-12);
        assert!((got - closed).abs() < 1e-12);
        assert!((iou_bev(&unit(0.3), &unit(0.3)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_height_overlap() {
        let a = unit(0.0);
        let b = Box3d { y: 1.5, ..a };
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(iou_3d(&a, &Box3d { y: 5.0, ..a }), 0.0);
        assert_eq!(iou_3d(&a, &Box3d { h: 0.0, ..a }), 0.0);
    }

    #[test]
    fn projection_examples() {
        let c = Calibration::pinhole(700.0, 600.0, 180.0);
        assert_eq!(c.project((0.0, 0.0, 12.0)).unwrap(), (600.0, 180.0));
        let (u, v) = c.project((12.0 * 35.0 / 700.0, 0.0, 12.0)).unwrap();
        assert!((u - 635.0).abs() < 1e-12 && (v - 180.0).abs() < 1e-12);
        assert!(c.project((0.0, 0.0, 0.0)).is_err());
        assert!(Calibration::new([[0.0; 4]; 3]).is_err());
    }

    #[test]
    fn projection_matches_matrix_product() {
        let p2 = [
            [721.5, 0.3, 609.6, 44.9],
            [0.2, 721.5, 172.9, 0.2],
            [0.001, 0.002, 1.0, 0.003],
        ];
        let c = Calibration::new(p2).unwrap();
        let p = [1.7, -0.4, 23.0, 1.0];
        let h: Vec<f64> = p2.iter().map(|r| r.iter().zip(&p).map(|(a, b)| a * b).sum()).collect();
        let (u, v) = c.project((p[0], p[1], p[2])).unwrap();
        assert_eq!((u, v), (h[0] / h[2], h[1] / h[2]));
        let back = c.unproject(u, v, 23.0).unwrap();
        assert!((back.0 - 1.7).abs() < 1e-9 && (back.1 + 0.4).abs() < 1e-9);
    }

    fn arb_box() -> impl Strategy<Value = Box3d> {
        (-3.0..3.0f64, -1.0..1.0f64, 5.0..10.0f64, 0.5..2.5f64, 0.5..2.5f64, 0.5..5.0f64, -3.2..3.2f64)
            .prop_map(|(x, y, z, h, w, l, ry)| Box3d { x, y, z, h, w, l, ry })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            for f in [iou_bev, iou_3d] {
                let (ab, ba) = (f(&a, &b), f(&b, &a));
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&ab));
            }
            prop_assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn bev_iou_is_rotation_invariant(a in arb_box(), b in arb_box(), t in -3.2..3.2f64) {
            let (s, c) = t.sin_cos();
            let rot = |bx: &Box3d| {
                let (dx, dz) = (bx.x - 0.5, bx.z - 7.0);
                Box3d { x: 0.5 + dx * c + dz * s, z: 7.0 - dx * s + dz * c, ry: bx.ry + t, ..*bx }
            };
            prop_assert!((iou_bev(&a, &b) - iou_bev(&rot(&a), &rot(&b))).abs() < 1e-9);
        }

        #[test]
        fn iou_2d_is_symmetric(l in 0.0..50.0f64, t in 0.0..50.0f64, w in 1.0..30.0f64, h in 1.0..30.0f64, dx in -20.0..20.0f64) {
            let a = Box2d::new(l, t, l + w, t + h);
            let b = Box2d::new(l + dx, t, l + dx + h, t + w);
            prop_assert!((iou_2d(&a, &b) - iou_2d(&b, &a)).abs() < 1e-12);
        }
    }
}
