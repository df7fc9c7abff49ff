//! Classification, box regression, centre/depth and score-balanced losses.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::head::{
    encode_targets, match_anchors_at, AnchorGrid, Assignment, CdeTarget, Detection, HeadConfig, HeadOutput,
    CDE_OUTPUTS, NUM_TARGETS,
};
use crate::geometry::Box2d;
use crate::tensor::Tensor;

/// Regression fields supervised by `L_2d`.
pub const FIELDS_2D: [usize; 4] = [0, 1, 2, 3];
/// Projected centre and 3D fields supervised by `L_3d`.
pub const FIELDS_3D: [usize; 7] = [4, 5, 6, 7, 8, 9, 10];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CdeMode {
    Z,
    Xy,
    #[default]
    Xyz,
}

impl CdeMode {
    pub fn supervises_xy(self) -> bool {
        matches!(self, CdeMode::Xy | CdeMode::Xyz)
    }

    pub fn supervises_z(self) -> bool {
        matches!(self, CdeMode::Z | CdeMode::Xyz)
    }
}

impl FromStr for CdeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(CdeMode::Z),
            "xy" => Ok(CdeMode::Xy),
            "xyz" => Ok(CdeMode::Xyz),
            other => Err(Error::invalid(format!("unknown cde mode `{other}` (expected z, xy or xyz)"))),
        }
    }
}

impl fmt::Display for CdeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CdeMode::Z => "z",
            CdeMode::Xy => "xy",
            CdeMode::Xyz => "xyz",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub det_weight: f64,
    pub aux_weight: f64,
    pub positive_iou: f64,
    pub cde_mode: CdeMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            det_weight: 1.0,
            aux_weight: 1.0,
            positive_iou: 0.5,
            cde_mode: CdeMode::Xyz,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.gamma) {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !finite_nonneg(self.det_weight) || !finite_nonneg(self.aux_weight) {
            return Err(Error::invalid(format!(
                "loss weights must be >= 0, got {}:{}",
                self.det_weight, self.aux_weight
            )));
        }
        if !(self.positive_iou > 0.0 && self.positive_iou <= 1.0) {
            return Err(Error::invalid(format!("positive IoU must be in (0, 1], got {}", self.positive_iou)));
        }
        Ok(())
    }
}

pub fn smooth_l1_value(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Subgradient `sign(d)` at `|d| = 1`.
pub fn smooth_l1_derivative(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

struct SmoothL1 {
    target: Tensor,
}

impl Backward for SmoothL1 {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(self.target.data())
            .zip(grad.data())
            .map(|((p, t), g)| g * smooth_l1_derivative(p - t))
            .collect();
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), data))]
    }
}

/// Elementwise smooth-l1 of `pred - target`, same shape as `pred`.
pub fn smooth_l1_elements(tape: &Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let p = tape.value(pred);
    if p.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "smooth_l1",
            lhs: p.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let out = p.zip_map(target, |a, b| smooth_l1_value(a - b))?;
    tape.record(&[pred], out, SmoothL1 { target: target.clone() })
}

/// Mean smooth-l1; zero when nothing is supervised.
pub fn smooth_l1(tape: &Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let el = smooth_l1_elements(tape, pred, target)?;
    if target.numel() == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    tape.mean(el)
}

/// Mean cross-entropy of `logits` (S × classes) against `labels`;
/// zero for no rows.
pub fn classification_loss(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::InvalidShape {
            op: "classification_loss",
            msg: format!("expected {} × classes logits, got {shape:?}", labels.len()),
        });
    }
    if labels.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * k + l).collect();
    let picked = tape.gather(logp, &idx)?;
    tape.scale(tape.mean(picked)?, -1.0)
}

/// One supervised anchor: a positive or a negative (label 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub image: usize,
    pub anchor: usize,
    /// 0 is background, `c + 1` is class `c`.
    pub label: usize,
    pub targets: Option<[f64; NUM_TARGETS]>,
    /// Centre/depth supervision of the matched GT: cell and targets.
    pub cde: Option<(usize, [f64; CDE_OUTPUTS])>,
}

impl Sample {
    pub fn is_positive(&self) -> bool {
        self.targets.is_some()
    }
}

/// Samples of one image. Ignored anchors are dropped; every negative is
/// kept. Positives carry encoded box targets and, when the matched GT owns
/// a centre cell, its centre/depth targets.
pub fn assign_samples(
    image: usize,
    grid: &AnchorGrid,
    gts: &[Detection],
    dont_care: &[Box2d],
    cde: &[CdeTarget],
    positive_iou: f64,
) -> Result<Vec<Sample>> {
    let boxes: Vec<Box2d> = gts.iter().map(|g| g.box2d).collect();
    let assignments = match_anchors_at(&grid.anchors, &boxes, dont_care, positive_iou);
    let mut out = Vec::with_capacity(assignments.len());
    for (anchor, a) in assignments.iter().enumerate() {
        match *a {
            Assignment::Ignored => {}
            Assignment::Negative => out.push(Sample {
                image,
                anchor,
                label: 0,
                targets: None,
                cde: None,
            }),
            Assignment::Positive { gt, .. } => {
                let g = &gts[gt];
                let t = encode_targets(&grid.anchors[anchor], g)?;
                out.push(Sample {
                    image,
                    anchor,
                    label: g.class_id + 1,
                    targets: Some(t.to_array()),
                    cde: cde.iter().find(|c| c.gt == gt).map(|c| (c.cell, c.t)),
                });
            }
        }
    }
    Ok(out)
}

/// Log-probability of each sample's assigned class, read from the head's
/// class map.
pub fn sample_log_probs(tape: &Tape, cls: Var, cfg: &HeadConfig, cells: usize, samples: &[Sample]) -> Result<Var> {
    let shape = tape.shape(cls);
    let nc1 = cfg.num_classes + 1;
    if shape.len() != 4 || shape[1] != cfg.cls_channels() || shape[2] * shape[3] != cells {
        return Err(Error::InvalidShape {
            op: "sample_log_probs",
            msg: format!("expected N×{}×H×W with H·W = {cells}, got {shape:?}", cfg.cls_channels()),
        });
    }
    let n = shape[0];
    let mut idx = Vec::with_capacity(samples.len());
    for s in samples {
        if s.image >= n || s.anchor >= cells * cfg.num_anchors || s.label >= nc1 {
            return Err(Error::invalid(format!("sample {s:?} out of range")));
        }
        idx.push(crate::head::cls_index(cfg, cells, s.image, s.anchor, s.label));
    }
    let rows = tape.reshape(cls, &[n, cfg.num_anchors, nc1, cells])?;
    let logp = tape.log_softmax(rows, 2)?;
    tape.gather(logp, &idx)
}

/// Smooth-l1 elements over `fields` of every positive, with the owning
/// sample of each element.
fn regression_elements(
    tape: &Tape,
    reg: Var,
    cfg: &HeadConfig,
    cells: usize,
    samples: &[Sample],
    fields: &[usize],
) -> Result<(Var, Vec<usize>)> {
    let mut idx = Vec::new();
    let mut target = Vec::new();
    let mut owner = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if let Some(t) = &s.targets {
            for &f in fields {
                idx.push(crate::head::reg_index(cfg, cells, s.image, s.anchor, f));
                target.push(t[f]);
                owner.push(i);
            }
        }
    }
    let picked = tape.gather(reg, &idx)?;
    let n = target.len();
    let el = smooth_l1_elements(tape, picked, &Tensor::from_parts(vec![n], target))?;
    Ok((el, owner))
}

/// Smooth-l1 elements of the centre/depth map at the matched GT's cell.
fn cde_elements(tape: &Tape, cde: Var, samples: &[Sample], channels: &[usize]) -> Result<(Var, Vec<usize>)> {
    let shape = tape.shape(cde);
    if shape.len() != 4 || shape[1] != CDE_OUTPUTS {
        return Err(Error::InvalidShape {
            op: "auxiliary_depth_loss",
            msg: format!("expected N×{CDE_OUTPUTS}×H×W, got {shape:?}"),
        });
    }
    let cells = shape[2] * shape[3];
    let mut idx = Vec::new();
    let mut target = Vec::new();
    let mut owner = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if let (true, Some((cell, t))) = (s.is_positive(), s.cde) {
            if s.image >= shape[0] || cell >= cells {
                return Err(Error::invalid(format!("cde target {s:?} out of range for {shape:?}")));
            }
            for &c in channels {
                idx.push((s.image * CDE_OUTPUTS + c) * cells + cell);
                target.push(t[c]);
                owner.push(i);
            }
        }
    }
    let picked = tape.gather(cde, &idx)?;
    let n = target.len();
    let el = smooth_l1_elements(tape, picked, &Tensor::from_parts(vec![n], target))?;
    Ok((el, owner))
}

fn mean_or_zero(tape: &Tape, v: Var, count: usize) -> Result<Var> {
    if count == 0 {
        Ok(tape.constant(Tensor::scalar(0.0)))
    } else {
        tape.mean(v)
    }
}

/// The three parts of the detection loss.
#[derive(Clone, Copy, Debug)]
pub struct DetectionTerms {
    pub cls: Var,
    pub box2d: Var,
    pub box3d: Var,
}

pub fn detection_terms(
    tape: &Tape,
    head: &HeadOutput,
    cfg: &HeadConfig,
    cells: usize,
    samples: &[Sample],
) -> Result<DetectionTerms> {
    let lp = sample_log_probs(tape, head.cls, cfg, cells, samples)?;
    let cls = tape.scale(mean_or_zero(tape, lp, samples.len())?, -1.0)?;
    let (e2, o2) = regression_elements(tape, head.reg, cfg, cells, samples, &FIELDS_2D)?;
    let (e3, o3) = regression_elements(tape, head.reg, cfg, cells, samples, &FIELDS_3D)?;
    Ok(DetectionTerms {
        cls,
        box2d: mean_or_zero(tape, e2, o2.len())?,
        box3d: mean_or_zero(tape, e3, o3.len())?,
    })
}

/// `L_cls + L_2d + L_3d`.
pub fn detection_loss(
    tape: &Tape,
    head: &HeadOutput,
    cfg: &HeadConfig,
    cells: usize,
    samples: &[Sample],
) -> Result<Var> {
    let t = detection_terms(tape, head, cfg, cells, samples)?;
    tape.add(tape.add(t.cls, t.box2d)?, t.box3d)
}

fn cde_channel_groups(mode: CdeMode) -> Vec<&'static [usize]> {
    let mut groups: Vec<&'static [usize]> = Vec::new();
    if mode.supervises_xy() {
        groups.push(&[0, 1]);
    }
    if mode.supervises_z() {
        groups.push(&[2]);
    }
    groups
}

/// Mean smooth-l1 on `(t'_xp, t'_yp)` plus mean smooth-l1 on `t'_z`, over
/// positives whose GT owns a centre cell, restricted by `mode`.
pub fn auxiliary_depth_loss(tape: &Tape, cde: Var, samples: &[Sample], mode: CdeMode) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for channels in cde_channel_groups(mode) {
        let (el, owner) = cde_elements(tape, cde, samples, channels)?;
        total = tape.add(total, mean_or_zero(tape, el, owner.len())?)?;
    }
    Ok(total)
}

/// Focal factor `(1 - s_t)^γ`.
pub fn focal_weight(s_t: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        (1.0 - s_t).powf(gamma)
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    match scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        Some(bad) => Err(Error::Domain {
            op: "total_loss",
            msg: format!("score {bad} outside [0, 1]"),
        }),
        None => Ok(()),
    }
}

/// `mean_i (1 - s_i)^γ (α ℓ_det,i + β ℓ_dep,i)` over per-sample losses;
/// the scores carry no gradient.
pub fn total_loss(tape: &Tape, det: Var, dep: Var, scores: &[f64], cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    check_scores(scores)?;
    let (sd, sp) = (tape.shape(det), tape.shape(dep));
    if sd != [scores.len()] || sp != [scores.len()] {
        return Err(Error::InvalidShape {
            op: "total_loss",
            msg: format!("per-sample losses {sd:?} / {sp:?} do not match {} scores", scores.len()),
        });
    }
    if scores.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let s = scores.len() as f64;
    let w = Tensor::from_parts(vec![scores.len()], scores.iter().map(|&p| focal_weight(p, cfg.gamma) / s).collect());
    let mixed = tape.add(tape.scale(det, cfg.det_weight)?, tape.scale(dep, cfg.aux_weight)?)?;
    tape.weighted_sum(mixed, &w)
}

/// Every term of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub cls: Var,
    pub box2d: Var,
    pub box3d: Var,
    pub depth: Var,
    pub total: Var,
}

/// Training objective over `samples`.
///
/// The per-sample losses fed to the focal mean are
/// `ℓ_det,i = ce_i + S·(Σ_{f∈2d} r_if / n_2d + Σ_{f∈3d} r_if / n_3d)` and
/// `ℓ_dep,i = S·Σ_groups Σ_c r_ic / n_group`, where `S` is the sample
/// count and `n_*` the number of supervised elements of each term, so that
/// at γ = 0 the total equals `α (L_cls + L_2d + L_3d) + β L_dep`.
pub fn objective(
    tape: &Tape,
    head: &HeadOutput,
    cde: Option<Var>,
    head_cfg: &HeadConfig,
    cells: usize,
    samples: &[Sample],
    cfg: &LossConfig,
) -> Result<Objective> {
    cfg.validate()?;
    let zero = tape.constant(Tensor::scalar(0.0));
    let lp = sample_log_probs(tape, head.cls, head_cfg, cells, samples)?;
    let s_t: Vec<f64> = tape.value(lp).data().iter().map(|l| l.exp().min(1.0)).collect();
    let weights: Vec<f64> = s_t.iter().map(|&p| focal_weight(p, cfg.gamma)).collect();
    let s = samples.len().max(1) as f64;

    let ce = tape.scale(lp, -1.0)?;
    let cls = tape.scale(mean_or_zero(tape, lp, samples.len())?, -1.0)?;
    let ce_w = Tensor::from_parts(vec![samples.len()], weights.iter().map(|w| cfg.det_weight * w / s).collect());
    let mut total = tape.weighted_sum(ce, &ce_w)?;

    let mut term = |el: Var, owner: &[usize], scale: f64| -> Result<Var> {
        if owner.is_empty() {
            return Ok(zero);
        }
        let n = owner.len() as f64;
        let w = Tensor::from_parts(vec![owner.len()], owner.iter().map(|&i| scale * weights[i] / n).collect());
        total = tape.add(total, tape.weighted_sum(el, &w)?)?;
        tape.mean(el)
    };

    let (e2, o2) = regression_elements(tape, head.reg, head_cfg, cells, samples, &FIELDS_2D)?;
    let box2d = term(e2, &o2, cfg.det_weight)?;
    let (e3, o3) = regression_elements(tape, head.reg, head_cfg, cells, samples, &FIELDS_3D)?;
    let box3d = term(e3, &o3, cfg.det_weight)?;
    let mut depth = zero;
    if let Some(cde) = cde {
        for channels in cde_channel_groups(cfg.cde_mode) {
            let (el, owner) = cde_elements(tape, cde, samples, channels)?;
            let part = term(el, &owner, cfg.aux_weight)?;
            depth = tape.add(depth, part)?;
        }
    }
    Ok(Objective {
        cls,
        box2d,
        box3d,
        depth,
        total,
    })
}
