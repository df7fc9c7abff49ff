//! Detection head: anchors, the box codec, the anchor-based 3D head, the
//! anchor-free centre/depth head and NMS.

pub mod anchors;
mod codec;
mod nms;

use crate::autograd::{ConvOptions, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{Box2d, Box3d, Calibration};
use crate::params::{ConvSpec, ConvVars, Init, ParamStore};
use crate::tensor::Tensor;

pub use anchors::{
    generate_anchors, match_anchors, match_anchors_at, templates, Anchor, AnchorGrid, AnchorPriors, Assignment, PriorAccumulator,
    TemplatePrior, NUM_TEMPLATES,
};
pub use codec::{decode_boxes, encode_targets, BoxTargets, TargetStats, NUM_TARGETS};
pub use nms::{nms_2d, nms_indices, NMS_IOU};

/// Foreground categories; logit 0 is background and class `k` is logit `k + 1`.
pub const CLASSES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

pub fn class_id(name: &str) -> Option<usize> {
    CLASSES.iter().position(|c| *c == name)
}

/// A decoded 3D box. `center` is the geometric box centre in camera
/// coordinates and `proj` its image projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub box2d: Box2d,
    pub proj: (f64, f64),
    pub center: (f64, f64, f64),
    /// `(h, w, l)` in metres.
    pub dims: (f64, f64, f64),
    pub ry: f64,
}

impl Detection {
    /// Observation angle.
    pub fn alpha(&self) -> f64 {
        self.ry - self.center.0.atan2(self.center.2)
    }

    pub fn box3d(&self) -> Box3d {
        let (h, w, l) = self.dims;
        Box3d {
            x: self.center.0,
            y: self.center.1 + h / 2.0,
            z: self.center.2,
            h,
            w,
            l,
            ry: self.ry,
        }
    }

    /// GT-style detection of a 3D box; the projected centre is computed
    /// from the calibration.
    pub fn from_box3d(b: &Box3d, box2d: Box2d, calib: &Calibration, class_id: usize, score: f64) -> Result<Self> {
        let center = b.center();
        Ok(Self {
            class_id,
            score,
            box2d,
            proj: calib.project(center)?,
            center,
            dims: (b.h, b.w, b.l),
            ry: b.ry,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub in_channels: usize,
    pub tower_channels: usize,
    pub num_classes: usize,
    pub num_anchors: usize,
}

impl HeadConfig {
    pub fn new(in_channels: usize, tower_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            tower_channels,
            num_classes,
            num_anchors: NUM_TEMPLATES,
        }
    }

    pub fn cls_channels(&self) -> usize {
        self.num_anchors * (self.num_classes + 1)
    }

    pub fn reg_channels(&self) -> usize {
        self.num_anchors * NUM_TARGETS
    }

    /// Channels emitted per cell.
    pub fn output_channels(&self) -> usize {
        self.num_anchors * (self.num_classes + 1 + NUM_TARGETS)
    }
}

/// Starting foreground probability of the classifier.
pub const FOREGROUND_PRIOR: f64 = 0.01;

pub fn init_head(store: &mut ParamStore, prefix: &str, cfg: &HeadConfig, seed: u64) {
    ConvSpec::new(cfg.in_channels, cfg.tower_channels, 3).init(store, &format!("{prefix}.tower"), seed, Init::He, 0.0);
    ConvSpec::new(cfg.tower_channels, cfg.cls_channels(), 1).init(
        store,
        &format!("{prefix}.cls"),
        seed,
        Init::Normal(0.01),
        0.0,
    );
    let nc1 = cfg.num_classes + 1;
    let fg_bias = -((1.0 - FOREGROUND_PRIOR) / FOREGROUND_PRIOR).ln();
    let bias = Tensor::from_fn(&[cfg.cls_channels()], |i| if i % nc1 == 0 { 0.0 } else { fg_bias });
    store.insert(format!("{prefix}.cls.bias"), bias);
    ConvSpec::new(cfg.tower_channels, cfg.reg_channels(), 1).init(store, &format!("{prefix}.reg"), seed, Init::Zeros, 0.0);
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// N × A(nc+1) × H × W, channel `a·(nc+1) + class`.
    pub cls: Var,
    /// N × 11A × H × W, channel `a·11 + field`.
    pub reg: Var,
}

/// Bound head weights.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub tower: ConvVars,
    pub cls: ConvVars,
    pub reg: ConvVars,
}

impl HeadVars {
    pub fn bind(tape: &Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            tower: ConvVars::bind(tape, store, &format!("{prefix}.tower"))?,
            cls: ConvVars::bind(tape, store, &format!("{prefix}.cls"))?,
            reg: ConvVars::bind(tape, store, &format!("{prefix}.reg"))?,
        })
    }

    pub fn forward(&self, tape: &Tape, feature: Var) -> Result<HeadOutput> {
        let t = tape.relu(self.tower.same(tape, feature)?)?;
        Ok(HeadOutput {
            cls: self.cls.forward(tape, t, ConvOptions::default())?,
            reg: self.reg.forward(tape, t, ConvOptions::default())?,
        })
    }
}

pub fn head_forward(tape: &Tape, feature: Var, store: &ParamStore, prefix: &str, cfg: &HeadConfig) -> Result<HeadOutput> {
    let shape = tape.shape(feature);
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(Error::InvalidShape {
            op: "head_forward",
            msg: format!("expected N×{}×H×W features, got {shape:?}", cfg.in_channels),
        });
    }
    HeadVars::bind(tape, store, prefix)?.forward(tape, feature)
}

/// Flat index of a class logit in [`HeadOutput::cls`].
pub fn cls_index(cfg: &HeadConfig, cells: usize, n: usize, anchor: usize, class: usize) -> usize {
    let (cell, a) = (anchor / cfg.num_anchors, anchor % cfg.num_anchors);
    let nc1 = cfg.num_classes + 1;
    ((n * cfg.num_anchors * nc1 + a * nc1 + class) * cells) + cell
}

/// Flat index of a regression channel in [`HeadOutput::reg`].
pub fn reg_index(cfg: &HeadConfig, cells: usize, n: usize, anchor: usize, field: usize) -> usize {
    let (cell, a) = (anchor / cfg.num_anchors, anchor % cfg.num_anchors);
    ((n * cfg.num_anchors * NUM_TARGETS + a * NUM_TARGETS + field) * cells) + cell
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdeConfig {
    pub in_channels: usize,
    pub hidden: usize,
}

pub const CDE_OUTPUTS: usize = 3;

pub fn init_cde_head(store: &mut ParamStore, prefix: &str, cfg: &CdeConfig, seed: u64) {
    ConvSpec::new(cfg.in_channels, cfg.hidden, 3).init(store, &format!("{prefix}.tower"), seed, Init::He, 0.0);
    ConvSpec::new(cfg.hidden, CDE_OUTPUTS, 1).init(store, &format!("{prefix}.out"), seed, Init::Zeros, 0.0);
}

/// Dense `(t'_xp, t'_yp, t'_z)` map, N×3×H×W.
pub fn cde_head_forward(tape: &Tape, depth_feature: Var, store: &ParamStore, prefix: &str) -> Result<Var> {
    let tower = ConvVars::bind(tape, store, &format!("{prefix}.tower"))?;
    let out = ConvVars::bind(tape, store, &format!("{prefix}.out"))?;
    cde_apply(tape, depth_feature, &tower, &out)
}

pub fn cde_apply(tape: &Tape, depth_feature: Var, tower: &ConvVars, out: &ConvVars) -> Result<Var> {
    let t = tape.relu(tower.same(tape, depth_feature)?)?;
    out.forward(tape, t, ConvOptions::default())
}

/// Supervision for the single cell containing a GT's projected centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CdeTarget {
    pub gt: usize,
    pub cell: usize,
    pub t: [f64; CDE_OUTPUTS],
}

/// Offsets relative to the cell centre in stride units, and
/// `z - z_mean`. GTs whose centre falls outside the map are skipped; a
/// cell claimed twice keeps the lower GT index.
pub fn cde_targets(gts: &[Detection], feature_hw: (usize, usize), stride: usize, z_mean: f64) -> Vec<CdeTarget> {
    let (fh, fw) = feature_hw;
    let s = stride as f64;
    let mut out: Vec<CdeTarget> = Vec::new();
    for (gt, g) in gts.iter().enumerate() {
        let (u, v) = g.proj;
        if u < 0.0 || v < 0.0 {
            continue;
        }
        let (cx, cy) = ((u / s).floor() as usize, (v / s).floor() as usize);
        if cx >= fw || cy >= fh {
            continue;
        }
        let cell = cy * fw + cx;
        if out.iter().any(|t| t.cell == cell) {
            continue;
        }
        out.push(CdeTarget {
            gt,
            cell,
            t: [
                (u - (cx as f64 + 0.5) * s) / s,
                (v - (cy as f64 + 0.5) * s) / s,
                g.center.2 - z_mean,
            ],
        });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub top_k: usize,
    pub nms_iou: f64,
    /// Maps the regression outputs back to codec targets.
    pub stats: TargetStats,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            top_k: 300,
            nms_iou: NMS_IOU,
            stats: TargetStats::default(),
        }
    }
}

/// Per-anchor class probabilities of image `n`, row-major `[anchor][class]`.
pub fn anchor_probabilities(cls: &Tensor, cfg: &HeadConfig, grid: &AnchorGrid, n: usize) -> Vec<Vec<f64>> {
    let cells = grid.cells();
    let nc1 = cfg.num_classes + 1;
    (0..grid.len())
        .map(|a| {
            let logits: Vec<f64> = (0..nc1).map(|c| cls.data()[cls_index(cfg, cells, n, a, c)]).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Scores, decodes and suppresses the head output of image `n`.
pub fn decode_outputs(
    cls: &Tensor,
    reg: &Tensor,
    cfg: &HeadConfig,
    grid: &AnchorGrid,
    calib: &Calibration,
    n: usize,
    dc: &DecodeConfig,
) -> Result<Vec<Detection>> {
    let cells = grid.cells();
    let probs = anchor_probabilities(cls, cfg, grid, n);
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (a, p) in probs.iter().enumerate() {
        for class in 0..cfg.num_classes {
            let s = p[class + 1];
            if s >= dc.score_threshold {
                candidates.push((s, a, class));
            }
        }
    }
    candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    candidates.truncate(dc.top_k);
    let mut dets = Vec::with_capacity(candidates.len());
    for &(score, a, class) in &candidates {
        let mut t = [0.0; NUM_TARGETS];
        for (f, v) in t.iter_mut().enumerate() {
            *v = reg.data()[reg_index(cfg, cells, n, a, f)];
        }
        let t = dc.stats.denormalize(&t);
        let Ok(mut d) = decode_boxes(&grid.anchors[a], &BoxTargets::from_array(t), calib) else {
            continue;
        };
        d.class_id = class;
        d.score = score;
        dets.push(d);
    }
    let mut kept = Vec::new();
    for class in 0..cfg.num_classes {
        let of_class: Vec<Detection> = dets.iter().copied().filter(|d| d.class_id == class).collect();
        kept.extend(nms_2d(&of_class, dc.nms_iou));
    }
    kept.sort_by(|x, y| y.score.total_cmp(&x.score));
    Ok(kept)
}
