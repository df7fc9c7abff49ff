//! Synthetic driving scenes: upright cars of known 3D geometry on a flat
//! ground plane, rendered as smooth class-coloured blobs into the image and
//! as ray-cast per-pixel depth into the depth raster.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ToyConfig;
use crate::error::Result;
use crate::geometry::{iou_2d, Box2d, Box3d, Calibration};
use crate::kitti::{Frame, LabelRecord};
use crate::tensor::Tensor;

/// Depth of pixels that hit no object.
pub const FAR_PLANE: f64 = 40.0;
/// Camera height above the ground (the y of every box bottom).
pub const CAMERA_HEIGHT: f64 = 1.6;

const CAR_COLOR: [f64; 3] = [0.9, 0.35, 0.2];
const EDGE_SOFTNESS: f64 = 1.0;
const NOISE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1 << 32,
            Split::Val => 2 << 32,
        }
    }

    pub fn len(self, cfg: &ToyConfig) -> usize {
        match self {
            Split::Train => cfg.train_frames,
            Split::Val => cfg.val_frames,
        }
    }
}

pub fn calibration(cfg: &ToyConfig) -> Calibration {
    Calibration::pinhole(cfg.focal, cfg.image_width as f64 / 2.0, cfg.image_height as f64 * 0.375)
}

/// Tight image box of the eight projected corners.
pub fn project_box(b: &Box3d, calib: &Calibration) -> Result<Box2d> {
    let mut out = Box2d::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, z) in b.bev_corners() {
        for y in [b.y, b.y - b.h] {
            let (u, v) = calib.project((x, y, z))?;
            out.left = out.left.min(u);
            out.right = out.right.max(u);
            out.top = out.top.min(v);
            out.bottom = out.bottom.max(v);
        }
    }
    Ok(out)
}

/// Distance along the camera ray `(dx, dy, 1)` to the first hit of `b`.
fn ray_hit(b: &Box3d, dx: f64, dy: f64) -> Option<f64> {
    let (s, c) = b.ry.sin_cos();
    // ray in box frame: a along heading, b across, y vertical
    let to_local = |px: f64, pz: f64| (px * c - pz * s, px * s + pz * c);
    let (oa, ob) = to_local(-b.x, -b.z);
    let (da, db) = to_local(dx, 1.0);
    let slabs = [
        (oa, da, -b.l / 2.0, b.l / 2.0),
        (ob, db, -b.w / 2.0, b.w / 2.0),
        (0.0, dy, b.y - b.h, b.y),
    ];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for (o, d, lo, hi) in slabs {
        if d.abs() < 1e-12 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let (mut a, mut b) = ((lo - o) / d, (hi - o) / d);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cars of one scene, non-overlapping in the image and fully visible.
pub fn sample_cars(cfg: &ToyConfig, calib: &Calibration, rng: &mut impl Rng) -> Vec<(Box3d, Box2d)> {
    let want = rng.gen_range(1..=cfg.max_objects);
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let mut cars: Vec<(Box3d, Box2d)> = Vec::new();
    for _ in 0..50 {
        if cars.len() == want {
            break;
        }
        let z = rng.gen_range(cfg.z_min..cfg.z_max);
        let u = rng.gen_range(0.1 * w..0.9 * w);
        let b = Box3d {
            x: (u - w / 2.0) * z / cfg.focal,
            y: CAMERA_HEIGHT,
            z,
            h: rng.gen_range(1.4..1.6),
            w: rng.gen_range(1.5..1.7),
            l: rng.gen_range(3.6..4.2),
            ry: -FRAC_PI_2 + rng.gen_range(-0.2..0.2),
        };
        let Ok(bb) = project_box(&b, calib) else {
            continue;
        };
        let inside = bb.left >= 1.0 && bb.top >= 1.0 && bb.right <= w - 1.0 && bb.bottom <= h - 1.0;
        let padded = Box2d::new(bb.left - 4.0, bb.top - 4.0, bb.right + 4.0, bb.bottom + 4.0);
        if inside && cars.iter().all(|(_, o)| iou_2d(&padded, o) == 0.0) {
            cars.push((b, bb));
        }
    }
    cars
}

/// Image (1×3×H×W) and depth (1×1×H×W, metres) rasters of a scene.
pub fn render(cfg: &ToyConfig, calib: &Calibration, cars: &[(Box3d, Box2d)], rng: &mut impl Rng) -> (Tensor, Tensor) {
    let (hh, ww) = (cfg.image_height, cfg.image_width);
    let (f, _) = calib.focal();
    let (cx, cy) = calib.principal_point();
    let plane = hh * ww;
    let mut image = vec![0.0; 3 * plane];
    let mut depth = vec![FAR_PLANE; plane];
    for y in 0..hh {
        for x in 0..ww {
            let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = ((u - cx) / f, (v - cy) / f);
            let mut cover: f64 = 0.0;
            for (b, bb) in cars {
                if let Some(t) = ray_hit(b, dx, dy) {
                    depth[y * ww + x] = depth[y * ww + x].min(t);
                }
                let m = sigmoid((u - bb.left) / EDGE_SOFTNESS)
                    * sigmoid((bb.right - u) / EDGE_SOFTNESS)
                    * sigmoid((v - bb.top) / EDGE_SOFTNESS)
                    * sigmoid((bb.bottom - v) / EDGE_SOFTNESS);
                cover = cover.max(m);
            }
            for (c, col) in CAR_COLOR.iter().enumerate() {
                let noise: f64 = rng.gen_range(-NOISE..NOISE);
                image[c * plane + y * ww + x] = cover * col + noise;
            }
        }
    }
    (
        Tensor::new(&[1, 3, hh, ww], image).expect("image raster shape"),
        Tensor::new(&[1, 1, hh, ww], depth).expect("depth raster shape"),
    )
}

pub fn label_of(b: &Box3d, bb: Box2d) -> LabelRecord {
    LabelRecord {
        kind: "Car".into(),
        truncation: 0.0,
        occlusion: 0,
        alpha: b.ry - b.x.atan2(b.z),
        bbox: bb,
        dims: (b.h, b.w, b.l),
        location: (b.x, b.y, b.z),
        ry: b.ry,
        score: None,
    }
}

/// Frame `index` of `split`; depends only on the seed, split and index.
pub fn generate_frame(cfg: &ToyConfig, split: Split, index: usize) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split.stream() + index as u64);
    let calib = calibration(cfg);
    let cars = sample_cars(cfg, &calib, &mut rng);
    let (image, depth) = render(cfg, &calib, &cars, &mut rng);
    Frame {
        id: format!("{:06}", index),
        image,
        depth,
        calib,
        labels: cars.iter().map(|(b, bb)| label_of(b, *bb)).collect(),
    }
}

pub fn generate_split(cfg: &ToyConfig, split: Split) -> Vec<Frame> {
    (0..split.len(cfg)).map(|i| generate_frame(cfg, split, i)).collect()
}
