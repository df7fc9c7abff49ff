//! KITTI-style label, calibration and prediction text files, plus the
//! frame directory layout used by the tools:
//!
//! ```text
//! <root>/image/<id>.ddmpt   N=1 × 3 × H × W
//! <root>/depth/<id>.ddmpt   1 × 1 × H × W, metres
//! <root>/calib/<id>.txt     contains a `P2:` line
//! <root>/label/<id>.txt     one object per line
//! ```
//!
//! PNG rasters can be converted with any tool that dumps raw floats; the
//! header layout is documented in the tensor module.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Box2d, Box3d, Calibration};
use crate::head::{class_id, Detection, CLASSES};
use crate::tensor::{read_tensor, write_tensor, DType, Tensor};

pub const DONT_CARE: &str = "DontCare";

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRecord {
    pub kind: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    pub bbox: Box2d,
    /// `(h, w, l)`.
    pub dims: (f64, f64, f64),
    /// Bottom centre in camera coordinates.
    pub location: (f64, f64, f64),
    pub ry: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    pub fn is_dont_care(&self) -> bool {
        self.kind == DONT_CARE
    }

    pub fn class_id(&self) -> Option<usize> {
        class_id(&self.kind)
    }

    pub fn box3d(&self) -> Box3d {
        let (h, w, l) = self.dims;
        let (x, y, z) = self.location;
        Box3d { x, y, z, h, w, l, ry: self.ry }
    }

    /// Detection view of a record of a known class. The score defaults to 1.
    pub fn to_detection(&self, calib: &Calibration) -> Result<Detection> {
        let class = self
            .class_id()
            .ok_or_else(|| Error::invalid(format!("`{}` is not a detection class", self.kind)))?;
        Detection::from_box3d(&self.box3d(), self.bbox, calib, class, self.score.unwrap_or(1.0))
    }

    /// Prediction record; truncation and occlusion are unknown (−1).
    pub fn from_detection(d: &Detection) -> Self {
        let b = d.box3d();
        Self {
            kind: CLASSES.get(d.class_id).copied().unwrap_or("Misc").to_string(),
            truncation: -1.0,
            occlusion: -1,
            alpha: d.alpha(),
            bbox: d.box2d,
            dims: d.dims,
            location: (b.x, b.y, b.z),
            ry: d.ry,
            score: Some(d.score),
        }
    }

    /// One label line: geometry at 2 decimals, score at 4.
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
            self.kind,
            self.truncation,
            self.occlusion,
            self.alpha,
            self.bbox.left,
            self.bbox.top,
            self.bbox.right,
            self.bbox.bottom,
            self.dims.0,
            self.dims.1,
            self.dims.2,
            self.location.0,
            self.location.1,
            self.location.2,
            self.ry,
        );
        if let Some(score) = self.score {
            let _ = write!(s, " {score:.4}");
        }
        s
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<LabelRecord> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 15 && fields.len() != 16 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected 15 or 16 fields, found {}", fields.len()),
        });
    }
    let mut v = [0.0; 15];
    for (i, f) in fields[1..].iter().enumerate() {
        v[i] = f.parse::<f64>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("field {} is not a number: `{f}`", i + 2),
        })?;
    }
    if v[1].fract() != 0.0 || v[1].abs() > 1e6 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("occlusion must be an integer, got {}", fields[2]),
        });
    }
    Ok(LabelRecord {
        kind: fields[0].to_string(),
        truncation: v[0],
        occlusion: v[1] as i32,
        alpha: v[2],
        bbox: Box2d::new(v[3], v[4], v[5], v[6]),
        dims: (v[7], v[8], v[9]),
        location: (v[10], v[11], v[12]),
        ry: v[13],
        score: (fields.len() == 16).then_some(v[14]),
    })
}

/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_labels(text: &str) -> Result<Vec<LabelRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn format_labels(records: &[LabelRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

pub fn parse_calib(text: &str) -> Result<Calibration> {
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim_start().strip_prefix("P2:") else {
            continue;
        };
        let nums: Vec<&str> = rest.split_whitespace().collect();
        if nums.len() != 12 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("P2 needs 12 numbers, found {}", nums.len()),
            });
        }
        let mut p2 = [[0.0; 4]; 3];
        for (k, s) in nums.iter().enumerate() {
            p2[k / 4][k % 4] = s.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("P2 entry {} is not a number: `{s}`", k + 1),
            })?;
        }
        return Calibration::new(p2);
    }
    Err(Error::Parse {
        line: 0,
        msg: "no P2 line".into(),
    })
}

/// `P2:` line with shortest round-trip float formatting.
pub fn format_calib(calib: &Calibration) -> String {
    let nums: Vec<String> = calib.p2.iter().flatten().map(|v| format!("{v}")).collect();
    format!("P2: {}\n", nums.join(" "))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn format_predictions(dets: &[Detection]) -> String {
    dets.iter().map(|d| LabelRecord::from_detection(d).to_line() + "\n").collect()
}

/// 16-field lines, one per detection; an empty set gives an empty file.
pub fn write_predictions(dets: &[Detection], path: &Path) -> Result<()> {
    write_text(path, &format_predictions(dets))
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    parse_labels(&read_text(path)?).map_err(|e| match e {
        Error::Parse { line, msg } => Error::invalid(format!("{}:{line}: {msg}", path.display())),
        other => other,
    })
}

pub fn read_calib(path: &Path) -> Result<Calibration> {
    parse_calib(&read_text(path)?).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub id: String,
    pub image: Tensor,
    pub depth: Tensor,
    pub calib: Calibration,
    pub labels: Vec<LabelRecord>,
}

pub fn frame_paths(root: &Path, id: &str) -> [PathBuf; 4] {
    [
        root.join("image").join(format!("{id}.ddmpt")),
        root.join("depth").join(format!("{id}.ddmpt")),
        root.join("calib").join(format!("{id}.txt")),
        root.join("label").join(format!("{id}.txt")),
    ]
}

/// Sorted ids of the label files under `dir`.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn list_frames(root: &Path) -> Result<Vec<String>> {
    list_ids(&root.join("label"))
}

pub fn read_frame(root: &Path, id: &str) -> Result<Frame> {
    let [image, depth, calib, label] = frame_paths(root, id);
    Ok(Frame {
        id: id.to_string(),
        image: read_tensor(&image)?,
        depth: read_tensor(&depth)?,
        calib: read_calib(&calib)?,
        labels: read_labels(&label)?,
    })
}

pub fn write_frame(root: &Path, frame: &Frame) -> Result<()> {
    let [image, depth, calib, label] = frame_paths(root, &frame.id);
    for p in [&image, &depth] {
        let dir = p.parent().unwrap();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_tensor(&image, &frame.image, DType::F32)?;
    write_tensor(&depth, &frame.depth, DType::F32)?;
    write_text(&calib, &format_calib(&frame.calib))?;
    write_text(&label, &format_labels(&frame.labels))
}
