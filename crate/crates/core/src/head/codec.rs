//! Anchor-relative box parameterisation.
//!
//! ```text
//! x2d = x̂ + tx·ŵ      y2d = ŷ + ty·ĥ      w2d = ŵ·e^tw    h2d = ĥ·e^th
//! xp  = x̂p + txp·ŵ    yp  = ŷp + typ·ĥ
//! z   = ẑ + tz        w3 = ŵ3·e^tw3  h3 = ĥ3·e^th3  l3 = l̂3·e^tl3
//! ry  = θ̂ + tθ
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::anchors::Anchor;
use super::Detection;
use crate::error::{Error, Result};
use crate::geometry::{Box2d, Calibration};

pub const NUM_TARGETS: usize = 11;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoxTargets {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
    pub txp: f64,
    pub typ: f64,
    pub tz: f64,
    pub tw3: f64,
    pub th3: f64,
    pub tl3: f64,
    pub tr: f64,
}

impl BoxTargets {
    pub fn to_array(&self) -> [f64; NUM_TARGETS] {
        [
            self.tx, self.ty, self.tw, self.th, self.txp, self.typ, self.tz, self.tw3, self.th3, self.tl3, self.tr,
        ]
    }

    pub fn from_array(t: [f64; NUM_TARGETS]) -> Self {
        Self {
            tx: t[0],
            ty: t[1],
            tw: t[2],
            th: t[3],
            txp: t[4],
            typ: t[5],
            tz: t[6],
            tw3: t[7],
            th3: t[8],
            tl3: t[9],
            tr: t[10],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Per-field standardisation of the regression targets: the head regresses
/// `(t - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetStats {
    pub mean: [f64; NUM_TARGETS],
    pub std: [f64; NUM_TARGETS],
}

impl Default for TargetStats {
    fn default() -> Self {
        Self {
            mean: [0.0; NUM_TARGETS],
            std: [1.0; NUM_TARGETS],
        }
    }
}

/// Fields whose spread is below this keep unit scale.
const MIN_STD: f64 = 1e-6;

impl TargetStats {
    /// Mean and standard deviation of each field; identity without samples.
    pub fn fit<'a>(targets: impl IntoIterator<Item = &'a [f64; NUM_TARGETS]>) -> Self {
        let all: Vec<&[f64; NUM_TARGETS]> = targets.into_iter().collect();
        if all.is_empty() {
            return Self::default();
        }
        let n = all.len() as f64;
        let mut out = Self::default();
        for f in 0..NUM_TARGETS {
            let m = all.iter().map(|t| t[f]).sum::<f64>() / n;
            let var = all.iter().map(|t| (t[f] - m).powi(2)).sum::<f64>() / n;
            out.mean[f] = m;
            out.std[f] = if var.sqrt() < MIN_STD { 1.0 } else { var.sqrt() };
        }
        out
    }

    pub fn normalize(&self, t: &[f64; NUM_TARGETS]) -> [f64; NUM_TARGETS] {
        std::array::from_fn(|f| (t[f] - self.mean[f]) / self.std[f])
    }

    pub fn denormalize(&self, o: &[f64; NUM_TARGETS]) -> [f64; NUM_TARGETS] {
        std::array::from_fn(|f| self.mean[f] + self.std[f] * o[f])
    }

    /// One `field mean std` line per target field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for f in 0..NUM_TARGETS {
            writeln!(s, "{f} {:e} {:e}", self.mean[f], self.std[f]).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        let mut seen = [false; NUM_TARGETS];
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let v: Vec<&str> = line.split_whitespace().collect();
            if v.len() != 3 {
                return Err(err(format!("expected 3 fields, got {}", v.len())));
            }
            let f: usize = v[0].parse().map_err(|_| err(format!("bad field index `{}`", v[0])))?;
            if f >= NUM_TARGETS {
                return Err(err(format!("field index {f} out of range")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("non-numeric value `{s}`")));
            let (m, sd) = (num(v[1])?, num(v[2])?);
            if !(m.is_finite() && sd.is_finite() && sd > 0.0) {
                return Err(err(format!("invalid statistics {m} {sd}")));
            }
            out.mean[f] = m;
            out.std[f] = sd;
            seen[f] = true;
        }
        if let Some(f) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("statistics for target field {f} are missing")));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

pub fn encode_targets(anchor: &Anchor, gt: &Detection) -> Result<BoxTargets> {
    let (cx, cy) = gt.box2d.center();
    let (gw, gh) = (gt.box2d.width(), gt.box2d.height());
    let (h3, w3, l3) = gt.dims;
    if !(gw > 0.0 && gh > 0.0 && h3 > 0.0 && w3 > 0.0 && l3 > 0.0) {
        return Err(Error::Domain {
            op: "encode_targets",
            msg: format!("non-positive GT size: 2D {gw}x{gh}, 3D {:?}", gt.dims),
        });
    }
    let t = BoxTargets {
        tx: (cx - anchor.x) / anchor.w,
        ty: (cy - anchor.y) / anchor.h,
        tw: (gw / anchor.w).ln(),
        th: (gh / anchor.h).ln(),
        txp: (gt.proj.0 - anchor.xp) / anchor.w,
        typ: (gt.proj.1 - anchor.yp) / anchor.h,
        tz: gt.center.2 - anchor.z,
        tw3: (w3 / anchor.w3).ln(),
        th3: (h3 / anchor.h3).ln(),
        tl3: (l3 / anchor.l3).ln(),
        tr: gt.ry - anchor.ry,
    };
    if !t.is_finite() {
        return Err(Error::NonFinite { op: "encode_targets" });
    }
    Ok(t)
}

/// Decodes targets against an anchor; the 3D centre is recovered by
/// back-projecting the decoded `(xp, yp)` at depth `z`. Class and score are
/// left at zero.
pub fn decode_boxes(anchor: &Anchor, t: &BoxTargets, calib: &Calibration) -> Result<Detection> {
    let x = anchor.x + t.tx * anchor.w;
    let y = anchor.y + t.ty * anchor.h;
    let w = anchor.w * t.tw.exp();
    let h = anchor.h * t.th.exp();
    let proj = (anchor.xp + t.txp * anchor.w, anchor.yp + t.typ * anchor.h);
    let z = anchor.z + t.tz;
    let center = calib.unproject(proj.0, proj.1, z)?;
    Ok(Detection {
        class_id: 0,
        score: 0.0,
        box2d: Box2d::from_center(x, y, w, h),
        proj,
        center,
        dims: (anchor.h3 * t.th3.exp(), anchor.w3 * t.tw3.exp(), anchor.l3 * t.tl3.exp()),
        ry: anchor.ry + t.tr,
    })
}
