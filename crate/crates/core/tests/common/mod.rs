//! Reference implementations shared by the integration tests. Everything
//! here is written from the definitions with plain loops and avoids the
//! library's own helpers except for plain data types.
#![allow(dead_code)]

use ddmp3d::eval::FrameEval;
use ddmp3d::geometry::{Box2d, Box3d};
use ddmp3d::kitti::LabelRecord;
use ddmp3d::Tensor;
use rand::Rng;

/// Bilinear read of one H×W plane with each coordinate clamped to the
/// valid range before interpolation.
pub fn bilinear_clamped(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    (1.0 - fy) * (1.0 - fx) * at(y0, x0) + (1.0 - fy) * fx * at(y0, x1) + fy * (1.0 - fx) * at(y1, x0) + fy * fx * at(y1, x1)
}

/// Weighted-sum message of every scale, one term at a time:
///
/// `m(n,c,y,x) = Σ_l β_l Σ_j A_l(n,j,y,x) · h(n,c | p_j + Δ_j) · W_l(n,j,g(c),y,x)`
///
/// `walks` is N×2K×H×W with `(Δy_j, Δx_j)` per slot, the field is the
/// regular k×k grid around each position.
pub fn message_loop(
    h: &Tensor,
    walks: &Tensor,
    affinities: &[Tensor],
    filters: &[Tensor],
    beta: &[f64],
    groups: usize,
) -> Vec<f64> {
    let [n, c, hh, ww] = h.dims4().unwrap();
    let k = walks.shape()[1] / 2;
    let side = (k as f64).sqrt().round() as usize;
    let r = (side / 2) as isize;
    let per_group = c / groups;
    let mut out = vec![0.0; n * c * hh * ww];
    for b in 0..n {
        for ch in 0..c {
            let plane = &h.data()[(b * c + ch) * hh * ww..][..hh * ww];
            for y in 0..hh {
                for x in 0..ww {
                    let mut acc = 0.0;
                    for (l, (a, f)) in affinities.iter().zip(filters).enumerate() {
                        let mut m = 0.0;
                        for j in 0..k {
                            let oy = (j / side) as isize - r;
                            let ox = (j % side) as isize - r;
                            let sy = y as f64 + oy as f64 + walks.at4(b, 2 * j, y, x);
                            let sx = x as f64 + ox as f64 + walks.at4(b, 2 * j + 1, y, x);
                            let node = bilinear_clamped(plane, hh, ww, sy, sx);
                            m += a.at4(b, j, y, x) * node * f.at4(b, j * groups + ch / per_group, y, x);
                        }
                        acc += beta[l] * m;
                    }
                    out[((b * c + ch) * hh + y) * ww + x] = acc;
                }
            }
        }
    }
    out
}

/// Plain zero-padded 3×3 convolution with bias.
pub fn conv3x3_loop(x: &Tensor, weight: &Tensor, bias: &[f64]) -> Tensor {
    let [n, cin, h, w] = x.dims4().unwrap();
    let cout = weight.shape()[0];
    let mut out = vec![0.0; n * cout * h * w];
    for b in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = bias.get(o).copied().unwrap_or(0.0);
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += weight.at4(o, i, ky, kx) * x.at4(b, i, sy as usize, sx as usize);
                            }
                        }
                    }
                    out[((b * cout + o) * h + y) * w + xx] = s;
                }
            }
        }
    }
    Tensor::new(&[n, cout, h, w], out).unwrap()
}

fn in_footprint(b: &Box3d, x: f64, z: f64) -> bool {
    let (s, c) = b.ry.sin_cos();
    let (dx, dz) = (x - b.x, z - b.z);
    let along = dx * c - dz * s;
    let across = dx * s + dz * c;
    along.abs() <= b.l / 2.0 && across.abs() <= b.w / 2.0
}

fn footprint_bounds(b: &Box3d) -> (f64, f64, f64, f64) {
    let r = 0.5 * (b.l * b.l + b.w * b.w).sqrt();
    (b.x - r, b.x + r, b.z - r, b.z + r)
}

fn joint_bounds(a: &Box3d, b: &Box3d) -> (f64, f64, f64, f64) {
    let (a0, a1, a2, a3) = footprint_bounds(a);
    let (b0, b1, b2, b3) = footprint_bounds(b);
    (a0.min(b0), a1.max(b1), a2.min(b2), a3.max(b3))
}

/// Footprint IoU from one jittered sample in each cell of an n×n grid
/// over the joint bounding square.
pub fn mc_iou_bev(a: &Box3d, b: &Box3d, n: usize, rng: &mut impl Rng) -> f64 {
    let (x0, x1, z0, z1) = joint_bounds(a, b);
    let (dx, dz) = ((x1 - x0) / n as f64, (z1 - z0) / n as f64);
    let (mut ia, mut ib, mut both) = (0u64, 0u64, 0u64);
    for i in 0..n {
        for j in 0..n {
            let x = x0 + (i as f64 + rng.gen::<f64>()) * dx;
            let z = z0 + (j as f64 + rng.gen::<f64>()) * dz;
            let (pa, pb) = (in_footprint(a, x, z), in_footprint(b, x, z));
            ia += pa as u64;
            ib += pb as u64;
            both += (pa && pb) as u64;
        }
    }
    both as f64 / (ia + ib - both) as f64
}

/// Volume IoU from one jittered sample per cell of an n³ grid.
pub fn mc_iou_3d(a: &Box3d, b: &Box3d, n: usize, rng: &mut impl Rng) -> f64 {
    let (x0, x1, z0, z1) = joint_bounds(a, b);
    let (y0, y1) = ((a.y - a.h).min(b.y - b.h), a.y.max(b.y));
    let (dx, dy, dz) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64, (z1 - z0) / n as f64);
    let inside = |bx: &Box3d, x: f64, y: f64, z: f64| in_footprint(bx, x, z) && y <= bx.y && y >= bx.y - bx.h;
    let (mut ia, mut ib, mut both) = (0u64, 0u64, 0u64);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let x = x0 + (i as f64 + rng.gen::<f64>()) * dx;
                let y = y0 + (j as f64 + rng.gen::<f64>()) * dy;
                let z = z0 + (k as f64 + rng.gen::<f64>()) * dz;
                let (pa, pb) = (inside(a, x, y, z), inside(b, x, y, z));
                ia += pa as u64;
                ib += pb as u64;
                both += (pa && pb) as u64;
            }
        }
    }
    both as f64 / (ia + ib - both) as f64
}

pub fn iou_2d_ref(a: &Box2d, b: &Box2d) -> f64 {
    let iw = (a.right.min(b.right) - a.left.max(b.left)).max(0.0);
    let ih = (a.bottom.min(b.bottom) - a.top.max(b.top)).max(0.0);
    let inter = iw * ih;
    let area = |r: &Box2d| (r.right - r.left) * (r.bottom - r.top);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Repeatedly keeps the best remaining box (lowest index among equal
/// scores) and discards everything overlapping it by more than `thr`.
pub fn nms_reference(boxes: &[(Box2d, f64)], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if boxes[i].1 > boxes[best].1 || (boxes[i].1 == boxes[best].1 && i < best) {
                best = i;
            }
        }
        kept.push(best);
        alive.retain(|&i| i != best && iou_2d_ref(&boxes[i].0, &boxes[best].0) <= thr);
    }
    kept
}

#[derive(Clone, Copy, Debug)]
pub enum RefMetric {
    Image,
    Bev,
    Volume,
}

pub struct RefTier {
    pub min_height: f64,
    pub max_occlusion: i32,
    pub max_truncation: f64,
}

/// Easy, Moderate and Hard.
pub const REF_TIERS: [RefTier; 3] = [
    RefTier {
        min_height: 40.0,
        max_occlusion: 0,
        max_truncation: 0.15,
    },
    RefTier {
        min_height: 25.0,
        max_occlusion: 1,
        max_truncation: 0.30,
    },
    RefTier {
        min_height: 25.0,
        max_occlusion: 2,
        max_truncation: 0.50,
    },
];

fn counts(g: &LabelRecord, tier: &RefTier) -> bool {
    g.bbox.bottom - g.bbox.top >= tier.min_height && g.occlusion <= tier.max_occlusion && g.truncation <= tier.max_truncation
}

fn overlap(metric: RefMetric, a: &LabelRecord, b: &LabelRecord, overlap_3d: &dyn Fn(&Box3d, &Box3d, bool) -> f64) -> f64 {
    match metric {
        RefMetric::Image => iou_2d_ref(&a.bbox, &b.bbox),
        RefMetric::Bev => overlap_3d(&a.box3d(), &b.box3d(), false),
        RefMetric::Volume => overlap_3d(&a.box3d(), &b.box3d(), true),
    }
}

/// `(tp, fp)` of one frame when only detections scoring at least `tau`
/// are kept. Matching is redone from scratch for every threshold.
fn counts_at(
    frame: &FrameEval,
    class: &str,
    tier: &RefTier,
    metric: RefMetric,
    thr: f64,
    tau: f64,
    overlap_3d: &dyn Fn(&Box3d, &Box3d, bool) -> f64,
) -> (usize, usize) {
    let gts: Vec<&LabelRecord> = frame.gt.iter().filter(|g| g.kind == class).collect();
    let dont_care: Vec<&LabelRecord> = frame.gt.iter().filter(|g| g.kind == "DontCare").collect();
    let mut dets: Vec<(usize, &LabelRecord)> = frame
        .pred
        .iter()
        .enumerate()
        .filter(|(_, d)| d.kind == class && d.score.unwrap_or(1.0) >= tau)
        .collect();
    dets.sort_by(|a, b| {
        b.1.score
            .unwrap_or(1.0)
            .partial_cmp(&a.1.score.unwrap_or(1.0))
            .unwrap()
            .then(a.0.cmp(&b.0))
    });
    let mut used = vec![false; gts.len()];
    let (mut tp, mut fp) = (0, 0);
    for (_, d) in dets {
        let mut pick: Option<usize> = None;
        let mut best = f64::NEG_INFINITY;
        for (j, g) in gts.iter().enumerate() {
            let o = overlap(metric, d, g, overlap_3d);
            if !used[j] && o >= thr && o > best {
                best = o;
                pick = Some(j);
            }
        }
        match pick {
            Some(j) => {
                used[j] = true;
                if counts(gts[j], tier) {
                    tp += 1;
                }
            }
            None => {
                if !dont_care.iter().any(|g| iou_2d_ref(&d.bbox, &g.bbox) >= 0.5) {
                    fp += 1;
                }
            }
        }
    }
    (tp, fp)
}

/// AP by sweeping every distinct score as a cut-off. `None` when the tier
/// has no ground truth.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_ap(
    frames: &[FrameEval],
    class: &str,
    tier: &RefTier,
    metric: RefMetric,
    thr: f64,
    recall_points: &[f64],
    overlap_3d: &dyn Fn(&Box3d, &Box3d, bool) -> f64,
) -> Option<f64> {
    let total: usize = frames
        .iter()
        .map(|f| f.gt.iter().filter(|g| g.kind == class && counts(g, tier)).count())
        .sum();
    if total == 0 {
        return None;
    }
    let mut scores: Vec<f64> = frames
        .iter()
        .flat_map(|f| f.pred.iter())
        .filter(|d| d.kind == class)
        .map(|d| d.score.unwrap_or(1.0))
        .collect();
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    scores.dedup();
    let mut curve = Vec::new();
    for tau in scores {
        let (mut tp, mut fp) = (0, 0);
        for f in frames {
            let (t, p) = counts_at(f, class, tier, metric, thr, tau, overlap_3d);
            tp += t;
            fp += p;
        }
        if tp + fp > 0 {
            curve.push((tp as f64 / total as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let mut sum = 0.0;
    for &r in recall_points {
        let mut best: f64 = 0.0;
        for &(rc, p) in &curve {
            if rc >= r - 1e-12 {
                best = best.max(p);
            }
        }
        sum += best;
    }
    Some(sum / recall_points.len() as f64)
}

pub fn r11_points() -> Vec<f64> {
    (0..11).map(|i| i as f64 * 0.1).collect()
}

pub fn r40_points() -> Vec<f64> {
    (1..41).map(|i| i as f64 / 40.0).collect()
}

pub fn record(kind: &str, bbox: Box2d, b: &Box3d, score: Option<f64>) -> LabelRecord {
    LabelRecord {
        kind: kind.into(),
        truncation: 0.0,
        occlusion: 0,
        alpha: 0.0,
        bbox,
        dims: (b.h, b.w, b.l),
        location: (b.x, b.y, b.z),
        ry: b.ry,
        score,
    }
}

/// Random scenes with several classes, mixed difficulty, don't-care
/// regions, jittered true detections, duplicates and clutter. Scores are
/// quantised so that ties occur.
pub fn random_fixture(frames: usize, rng: &mut impl Rng) -> Vec<FrameEval> {
    let kinds = ["Car", "Car", "Pedestrian", "Cyclist", "Van"];
    (0..frames)
        .map(|_| {
            let mut f = FrameEval::default();
            for _ in 0..rng.gen_range(1..6) {
                let kind = kinds[rng.gen_range(0..kinds.len())];
                let b = Box3d {
                    x: rng.gen_range(-10.0..10.0),
                    y: rng.gen_range(1.4..1.8),
                    z: rng.gen_range(8.0..40.0),
                    h: rng.gen_range(1.4..1.8),
                    w: rng.gen_range(0.6..1.8),
                    l: rng.gen_range(0.8..4.4),
                    ry: rng.gen_range(-3.1..3.1),
                };
                let height = rng.gen_range(15.0..90.0);
                let u = rng.gen_range(50.0..1100.0);
                let v = rng.gen_range(120.0..250.0);
                let bbox = Box2d::new(u, v, u + height * rng.gen_range(0.5..1.6), v + height);
                let mut g = record(kind, bbox, &b, None);
                g.occlusion = rng.gen_range(0..4);
                g.truncation = [0.0, 0.1, 0.2, 0.4, 0.7][rng.gen_range(0..5)];
                f.gt.push(g.clone());
                if rng.gen_bool(0.8) {
                    for _ in 0..rng.gen_range(1..3) {
                        let j = |rng: &mut dyn rand::RngCore, s: f64| rng.gen_range(-s..s);
                        let jb = Box3d {
                            x: b.x + j(rng, 0.4),
                            y: b.y + j(rng, 0.1),
                            z: b.z + j(rng, 0.8),
                            h: b.h * (1.0 + j(rng, 0.1)),
                            w: b.w * (1.0 + j(rng, 0.1)),
                            l: b.l * (1.0 + j(rng, 0.1)),
                            ry: b.ry + j(rng, 0.3),
                        };
                        let (dx, dy) = (height * j(rng, 0.15), height * j(rng, 0.15));
                        let jbox = Box2d::new(bbox.left + dx, bbox.top + dy, bbox.right + dx, bbox.bottom + dy);
                        let score = (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0;
                        f.pred.push(record(if kind == "Van" { "Car" } else { kind }, jbox, &jb, Some(score)));
                    }
                }
            }
            for _ in 0..rng.gen_range(0..3) {
                let u = rng.gen_range(50.0..1100.0);
                let v = rng.gen_range(120.0..250.0);
                let bbox = Box2d::new(u, v, u + rng.gen_range(20.0..80.0), v + rng.gen_range(20.0..60.0));
                let dummy = Box3d {
                    x: -1000.0,
                    y: -10.0,
                    z: -1000.0,
                    h: 1.0,
                    w: 1.0,
                    l: 1.0,
                    ry: 0.0,
                };
                f.gt.push(record("DontCare", bbox, &dummy, None));
                if rng.gen_bool(0.5) {
                    let b = Box3d {
                        z: rng.gen_range(8.0..40.0),
                        x: rng.gen_range(-10.0..10.0),
                        y: 1.6,
                        ..dummy
                    };
                    let score = (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0;
                    f.pred.push(record("Car", bbox, &b, Some(score)));
                }
            }
            for _ in 0..rng.gen_range(0..3) {
                let u = rng.gen_range(50.0..1100.0);
                let v = rng.gen_range(120.0..250.0);
                let bbox = Box2d::new(u, v, u + 40.0, v + 40.0);
                let b = Box3d {
                    x: rng.gen_range(-10.0..10.0),
                    y: 1.6,
                    z: rng.gen_range(8.0..40.0),
                    h: 1.5,
                    w: 1.6,
                    l: 3.9,
                    ry: 0.0,
                };
                let kind = ["Car", "Pedestrian", "Cyclist"][rng.gen_range(0..3)];
                let score = (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0;
                f.pred.push(record(kind, bbox, &b, Some(score)));
            }
            f
        })
        .collect()
}
