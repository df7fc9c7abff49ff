//! Anchor templates, tiling, matching and per-template 3D priors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou_2d, Box2d};

pub const HEIGHT_BASE: f64 = 30.0;
pub const HEIGHT_GROWTH: f64 = 1.265;
pub const NUM_HEIGHTS: usize = 12;
pub const ASPECT_RATIOS: [f64; 3] = [0.5, 1.0, 1.5];
pub const NUM_TEMPLATES: usize = NUM_HEIGHTS * ASPECT_RATIOS.len();
pub const POSITIVE_IOU: f64 = 0.5;

/// Template heights `30 · 1.265^n`, n = 0..12.
pub fn template_heights() -> [f64; NUM_HEIGHTS] {
    let mut h = [0.0; NUM_HEIGHTS];
    for (n, v) in h.iter_mut().enumerate() {
        *v = HEIGHT_BASE * HEIGHT_GROWTH.powi(n as i32);
    }
    h
}

/// `(width, height)` of template `n · 3 + r`.
pub fn templates() -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(NUM_TEMPLATES);
    for h in template_heights() {
        for r in ASPECT_RATIOS {
            out.push((h * r, h));
        }
    }
    out
}

/// 3D prior attached to one template.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemplatePrior {
    pub z: f64,
    pub w3: f64,
    pub h3: f64,
    pub l3: f64,
    pub ry: f64,
}

impl Default for TemplatePrior {
    fn default() -> Self {
        Self {
            z: 20.0,
            w3: 1.6,
            h3: 1.5,
            l3: 3.9,
            ry: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorPriors(pub Vec<TemplatePrior>);

impl Default for AnchorPriors {
    fn default() -> Self {
        Self(vec![TemplatePrior::default(); NUM_TEMPLATES])
    }
}

impl AnchorPriors {
    /// One `template_id z w3 h3 l3 ry` line per template.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, p) in self.0.iter().enumerate() {
            writeln!(s, "{i} {} {} {} {} {}", p.z, p.w3, p.h3, p.l3, p.ry).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut priors = vec![None; NUM_TEMPLATES];
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 fields, got {}", f.len())));
            }
            let id: usize = f[0].parse().map_err(|_| err(format!("bad template id `{}`", f[0])))?;
            if id >= NUM_TEMPLATES {
                return Err(err(format!("template id {id} out of range")));
            }
            let mut v = [0.0; 5];
            for (k, s) in f[1..].iter().enumerate() {
                v[k] = s.parse().map_err(|_| err(format!("non-numeric field `{s}`")))?;
            }
            priors[id] = Some(TemplatePrior {
                z: v[0],
                w3: v[1],
                h3: v[2],
                l3: v[3],
                ry: v[4],
            });
        }
        priors
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.ok_or_else(|| Error::invalid(format!("prior for template {i} is missing"))))
            .collect::<Result<Vec<_>>>()
            .map(AnchorPriors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// A 2D template placed at a cell centre together with its 3D prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub xp: f64,
    pub yp: f64,
    pub z: f64,
    pub w3: f64,
    pub h3: f64,
    pub l3: f64,
    pub ry: f64,
}

impl Anchor {
    pub fn box2d(&self) -> Box2d {
        Box2d::from_center(self.x, self.y, self.w, self.h)
    }
}

/// Anchors of one feature map; index `(cy · W + cx) · 36 + template`.
#[derive(Clone, Debug)]
pub struct AnchorGrid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub anchors: Vec<Anchor>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// `(cell, template)` of an anchor index.
    pub fn split(&self, index: usize) -> (usize, usize) {
        (index / NUM_TEMPLATES, index % NUM_TEMPLATES)
    }
}

pub fn generate_anchors(feature_hw: (usize, usize), stride: usize, priors: &AnchorPriors) -> AnchorGrid {
    let (fh, fw) = feature_hw;
    let temps = templates();
    let s = stride as f64;
    let mut anchors = Vec::with_capacity(fh * fw * NUM_TEMPLATES);
    for cy in 0..fh {
        for cx in 0..fw {
            let (x, y) = ((cx as f64 + 0.5) * s, (cy as f64 + 0.5) * s);
            for (t, &(w, h)) in temps.iter().enumerate() {
                let p = priors.0[t];
                anchors.push(Anchor {
                    x,
                    y,
                    w,
                    h,
                    xp: x,
                    yp: y,
                    z: p.z,
                    w3: p.w3,
                    h3: p.h3,
                    l3: p.l3,
                    ry: p.ry,
                });
            }
        }
    }
    AnchorGrid {
        height: fh,
        width: fw,
        stride,
        anchors,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Assignment {
    Positive { gt: usize, iou: f64 },
    Negative,
    /// Overlaps a don't-care region; excluded from every loss.
    Ignored,
}

impl Assignment {
    pub fn gt(&self) -> Option<usize> {
        match self {
            Assignment::Positive { gt, .. } => Some(*gt),
            _ => None,
        }
    }
}

/// Positive iff the best IoU with any GT box reaches `POSITIVE_IOU`
/// (lowest GT index on ties); otherwise ignored when a don't-care box
/// reaches it, else negative.
pub fn match_anchors(anchors: &[Anchor], gts: &[Box2d], dont_care: &[Box2d]) -> Vec<Assignment> {
    match_anchors_at(anchors, gts, dont_care, POSITIVE_IOU)
}

pub fn match_anchors_at(anchors: &[Anchor], gts: &[Box2d], dont_care: &[Box2d], threshold: f64) -> Vec<Assignment> {
    anchors
        .iter()
        .map(|a| {
            let ab = a.box2d();
            let mut best: Option<(usize, f64)> = None;
            for (g, gb) in gts.iter().enumerate() {
                let iou = iou_2d(&ab, gb);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((gt, iou)) if iou >= threshold => Assignment::Positive { gt, iou },
                _ if dont_care.iter().any(|d| iou_2d(&ab, d) >= threshold) => Assignment::Ignored,
                _ => Assignment::Negative,
            }
        })
        .collect()
}

/// Per-template mean of matched GT 3D quantities. Templates that never
/// match fall back to the mean over all matches, and to the default prior
/// when nothing matched at all.
#[derive(Clone, Debug)]
pub struct PriorAccumulator {
    sums: Vec<[f64; 5]>,
    counts: Vec<usize>,
}

impl Default for PriorAccumulator {
    fn default() -> Self {
        Self {
            sums: vec![[0.0; 5]; NUM_TEMPLATES],
            counts: vec![0; NUM_TEMPLATES],
        }
    }
}

impl PriorAccumulator {
    /// Adds one frame: each positive anchor contributes its matched GT to
    /// the anchor's template.
    pub fn add_frame(&mut self, grid: &AnchorGrid, gts: &[Detection]) {
        let boxes: Vec<Box2d> = gts.iter().map(|g| g.box2d).collect();
        for (i, asg) in match_anchors(&grid.anchors, &boxes, &[]).iter().enumerate() {
            if let Some(gt) = asg.gt() {
                let (_, t) = grid.split(i);
                let g = &gts[gt];
                let s = &mut self.sums[t];
                s[0] += g.center.2;
                s[1] += g.dims.1;
                s[2] += g.dims.0;
                s[3] += g.dims.2;
                s[4] += g.ry;
                self.counts[t] += 1;
            }
        }
    }

    pub fn count(&self, template: usize) -> usize {
        self.counts[template]
    }

    pub fn finish(&self) -> AnchorPriors {
        let total: usize = self.counts.iter().sum();
        let global = if total == 0 {
            TemplatePrior::default()
        } else {
            let mut m = [0.0; 5];
            for s in &self.sums {
                for k in 0..5 {
                    m[k] += s[k];
                }
            }
            to_prior(m, total)
        };
        AnchorPriors(
            self.sums
                .iter()
                .zip(&self.counts)
                .map(|(&s, &n)| if n == 0 { global } else { to_prior(s, n) })
                .collect(),
        )
    }
}

fn to_prior(s: [f64; 5], n: usize) -> TemplatePrior {
    let n = n as f64;
    TemplatePrior {
        z: s[0] / n,
        w3: s[1] / n,
        h3: s[2] / n,
        l3: s[3] / n,
        ry: s[4] / n,
    }
}
