//! KITTI-protocol evaluation: difficulty tiers, greedy matching and
//! interpolated average precision over 2D, BEV and 3D overlaps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{iou_2d, iou_3d, iou_bev};
use crate::head::CLASSES;
use crate::kitti::{list_ids, read_calib, read_labels, LabelRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

/// Minimum box height (px), maximum occlusion and maximum truncation.
const TIER_LIMITS: [(f64, i32, f64); 3] = [(40.0, 0, 0.15), (25.0, 1, 0.30), (25.0, 2, 0.50)];

/// Table column order.
pub const TIERS: [Difficulty; 3] = [Difficulty::Moderate, Difficulty::Easy, Difficulty::Hard];

impl Difficulty {
    fn limits(self) -> Option<(f64, i32, f64)> {
        match self {
            Difficulty::Easy => Some(TIER_LIMITS[0]),
            Difficulty::Moderate => Some(TIER_LIMITS[1]),
            Difficulty::Hard => Some(TIER_LIMITS[2]),
            Difficulty::Ignored => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "Easy",
            Difficulty::Moderate => "Moderate",
            Difficulty::Hard => "Hard",
            Difficulty::Ignored => "Ignored",
        }
    }
}

/// Whether `r` counts as ground truth in `tier` (tiers are cumulative).
pub fn in_tier(r: &LabelRecord, tier: Difficulty) -> bool {
    match tier.limits() {
        Some((h, occ, trunc)) => r.bbox.height() >= h && r.occlusion <= occ && r.truncation <= trunc,
        None => false,
    }
}

/// Easiest tier the record qualifies for.
pub fn assign_difficulty(r: &LabelRecord) -> Difficulty {
    [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard]
        .into_iter()
        .find(|&t| in_tier(r, t))
        .unwrap_or(Difficulty::Ignored)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Box2d,
    Bev,
    Box3d,
}

pub const METRICS: [Metric; 3] = [Metric::Box2d, Metric::Bev, Metric::Box3d];

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Box2d => "2d",
            Metric::Bev => "bev",
            Metric::Box3d => "3d",
        }
    }

    pub fn overlap(self, a: &LabelRecord, b: &LabelRecord) -> f64 {
        match self {
            Metric::Box2d => iou_2d(&a.bbox, &b.bbox),
            Metric::Bev => iou_bev(&a.box3d(), &b.box3d()),
            Metric::Box3d => iou_3d(&a.box3d(), &b.box3d()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RecallMode {
    R11,
    R40,
}

impl RecallMode {
    pub fn points(self) -> Vec<f64> {
        match self {
            RecallMode::R11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
            RecallMode::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

impl fmt::Display for RecallMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecallMode::R11 => "R11",
            RecallMode::R40 => "R40",
        })
    }
}

impl FromStr for RecallMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R11" => Ok(RecallMode::R11),
            "R40" => Ok(RecallMode::R40),
            _ => Err(Error::invalid(format!("unknown recall mode `{s}` (expected R11 or R40)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Match threshold per entry of [`CLASSES`].
    pub iou_thresholds: [f64; 3],
    pub recall_modes: Vec<RecallMode>,
    /// 2D overlap with a don't-care region above which an unmatched
    /// detection is ignored.
    pub dont_care_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: [0.7, 0.5, 0.5],
            recall_modes: vec![RecallMode::R40, RecallMode::R11],
            dont_care_iou: 0.5,
        }
    }
}

impl EvalConfig {
    /// Same threshold for every class.
    pub fn uniform(iou: f64) -> Self {
        Self {
            iou_thresholds: [iou; 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in self.iou_thresholds.iter().chain([&self.dont_care_iou]) {
            if !(*t > 0.0 && *t <= 1.0) {
                return Err(Error::invalid(format!("IoU thresholds must be in (0, 1], got {t}")));
            }
        }
        if self.recall_modes.is_empty() {
            return Err(Error::invalid("at least one recall mode is required"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// One ground-truth frame and its predictions.
#[derive(Clone, Debug, Default)]
pub struct FrameEval {
    pub gt: Vec<LabelRecord>,
    pub pred: Vec<LabelRecord>,
}

/// Greedy matching of one frame for one class, tier and metric.
/// Detections are visited by descending score (lower index first on
/// ties); each takes the unmatched GT of highest overlap at or above the
/// threshold, counting as a true positive when that GT is in the tier and
/// as ignored otherwise. Unmatched detections on a don't-care region are
/// ignored. Returns `(score, outcome)` per detection of the class, and
/// the number of tier GTs.
pub fn match_frame(
    frame: &FrameEval,
    class: usize,
    tier: Difficulty,
    metric: Metric,
    cfg: &EvalConfig,
) -> (Vec<(f64, Outcome)>, usize) {
    let thr = cfg.iou_thresholds[class];
    let gts: Vec<(&LabelRecord, bool)> = frame
        .gt
        .iter()
        .filter(|g| g.class_id() == Some(class))
        .map(|g| (g, in_tier(g, tier)))
        .collect();
    let dont_care: Vec<&LabelRecord> = frame.gt.iter().filter(|g| g.is_dont_care()).collect();
    let mut dets: Vec<&LabelRecord> = frame.pred.iter().filter(|d| d.class_id() == Some(class)).collect();
    dets.sort_by(|a, b| score(b).total_cmp(&score(a)));

    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (j, (g, _)) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let o = metric.overlap(d, g);
            if o >= thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        let outcome = match best {
            Some((j, _)) => {
                taken[j] = true;
                if gts[j].1 {
                    Outcome::TruePositive
                } else {
                    Outcome::Ignored
                }
            }
            None if dont_care.iter().any(|g| iou_2d(&d.bbox, &g.bbox) >= cfg.dont_care_iou) => Outcome::Ignored,
            None => Outcome::FalsePositive,
        };
        out.push((score(d), outcome));
    }
    (out, gts.iter().filter(|g| g.1).count())
}

fn score(r: &LabelRecord) -> f64 {
    r.score.unwrap_or(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub num_gt: usize,
    /// False when there is no ground truth; `ap` is then 0.
    pub defined: bool,
    /// `(recall, precision)` at every distinct score threshold.
    pub curve: Vec<(f64, f64)>,
}

impl ApResult {
    fn undefined() -> Self {
        Self {
            ap: 0.0,
            num_gt: 0,
            defined: false,
            curve: Vec::new(),
        }
    }
}

/// Interpolated AP of pooled `(score, outcome)` pairs. Operating points are
/// taken only between distinct scores; precision at recall `r` is the
/// largest precision at any recall `≥ r`, or 0.
pub fn compute_ap(results: &[(f64, Outcome)], num_gt: usize, mode: RecallMode) -> ApResult {
    if num_gt == 0 {
        return ApResult::undefined();
    }
    let mut scored: Vec<(f64, Outcome)> = results.iter().copied().filter(|r| r.1 != Outcome::Ignored).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, (s, o)) in scored.iter().enumerate() {
        match o {
            Outcome::TruePositive => tp += 1,
            _ => fp += 1,
        }
        if scored.get(i + 1).is_none_or(|n| n.0 != *s) {
            curve.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let points = mode.points();
    let ap = points
        .iter()
        .map(|&r| curve.iter().filter(|c| c.0 >= r - 1e-12).map(|c| c.1).fold(0.0, f64::max))
        .sum::<f64>()
        / points.len() as f64;
    ApResult {
        ap,
        num_gt,
        defined: true,
        curve,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApRow {
    pub class: &'static str,
    pub tier: Difficulty,
    pub metric: Metric,
    pub mode: RecallMode,
    pub result: ApResult,
}

impl ApRow {
    pub fn ap(&self) -> f64 {
        self.result.ap
    }
}

/// AP for every class, tier, metric and configured recall mode.
pub fn evaluate_frames(frames: &[FrameEval], cfg: &EvalConfig) -> Result<Vec<ApRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for (class, name) in CLASSES.iter().enumerate() {
        for tier in TIERS {
            for metric in METRICS {
                let mut pooled = Vec::new();
                let mut num_gt = 0;
                for f in frames {
                    let (r, n) = match_frame(f, class, tier, metric, cfg);
                    pooled.extend(r);
                    num_gt += n;
                }
                for &mode in &cfg.recall_modes {
                    rows.push(ApRow {
                        class: name,
                        tier,
                        metric,
                        mode,
                        result: compute_ap(&pooled, num_gt, mode),
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn find_row<'a>(rows: &'a [ApRow], class: &str, tier: Difficulty, metric: Metric, mode: RecallMode) -> Option<&'a ApRow> {
    rows.iter()
        .find(|r| r.class == class && r.tier == tier && r.metric == metric && r.mode == mode)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<ApRow>,
    pub frames: usize,
    /// Frames skipped, with the reason.
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// `class,tier,metric,mode,ap` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,tier,metric,mode,ap\n");
        for r in &self.rows {
            let ap = if r.result.defined { format!("{:.6}", r.ap()) } else { "nan".into() };
            s.push_str(&format!("{},{},{},{},{ap}\n", r.class, r.tier.name(), r.metric.name(), r.mode));
        }
        s
    }

    /// One line per class, metric and mode with Moderate, Easy and Hard columns.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<11} {:<4} {:<4} {:>9} {:>9} {:>9}\n", "class", "iou", "mode", "Mod.", "Easy", "Hard");
        for name in CLASSES {
            for metric in METRICS {
                let mut modes: Vec<RecallMode> = self.rows.iter().map(|r| r.mode).collect();
                modes.sort();
                modes.dedup();
                for mode in modes {
                    let cells: Vec<String> = TIERS
                        .iter()
                        .map(|&t| match find_row(&self.rows, name, t, metric, mode) {
                            Some(r) if r.result.defined => format!("{:>9.2}", 100.0 * r.ap()),
                            _ => format!("{:>9}", "n/a"),
                        })
                        .collect();
                    s.push_str(&format!("{name:<11} {:<4} {mode:<4} {}\n", metric.name(), cells.join(" ")));
                }
            }
        }
        s
    }
}

/// Evaluates `<pred_dir>/<id>.txt` against `<gt_dir>/<id>.txt` for every
/// GT id. Frames without predictions, or with unreadable files, are
/// listed as warnings and skipped.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, calib_dir: &Path, cfg: &EvalConfig) -> Result<EvalReport> {
    let ids = list_ids(gt_dir)?;
    let mut frames = Vec::with_capacity(ids.len());
    let mut warnings = Vec::new();
    for id in &ids {
        let file = format!("{id}.txt");
        let pred_path = pred_dir.join(&file);
        if !pred_path.exists() {
            warnings.push(format!("{id}: no prediction file"));
            continue;
        }
        let loaded = read_calib(&calib_dir.join(&file))
            .and_then(|_| Ok(FrameEval { gt: read_labels(&gt_dir.join(&file))?, pred: read_labels(&pred_path)? }));
        match loaded {
            Ok(f) => frames.push(f),
            Err(e) => warnings.push(format!("{id}: {e}")),
        }
    }
    Ok(EvalReport {
        rows: evaluate_frames(&frames, cfg)?,
        frames: frames.len(),
        warnings,
    })
}

#[cfg(test)]
mod tests;
