//! Flat `key=value` run configuration for the toy pipeline.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are
//! rejected so that typos surface early.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::ddmp::{AffinityMode, FusionMode};
use crate::error::{Error, Result};
use crate::losses::{CdeMode, LossConfig};

/// Fusion variant of the network, one per ablation arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    /// Elementwise image ⊙ depth fusion.
    Baseline,
    /// DDMP with the depth stage matching each block.
    DdmpSingle,
    /// DDMP over depth stages 2, 3 and 4.
    DdmpMulti,
    /// Multi-scale DDMP plus the centre/depth auxiliary head.
    DdmpCde,
}

pub const ARMS: [Arm; 4] = [Arm::Baseline, Arm::DdmpSingle, Arm::DdmpMulti, Arm::DdmpCde];

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::DdmpSingle => "ddmp-single",
            Arm::DdmpMulti => "ddmp-multi",
            Arm::DdmpCde => "ddmp-cde",
        }
    }

    pub fn uses_cde(self) -> bool {
        self == Arm::DdmpCde
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ARMS.iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown arm `{s}` (expected one of baseline, ddmp-single, ddmp-multi, ddmp-cde)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,

    pub image_height: usize,
    pub image_width: usize,
    pub focal: f64,
    pub train_frames: usize,
    pub val_frames: usize,
    pub max_objects: usize,
    pub z_min: f64,
    pub z_max: f64,

    pub stage_channels: [usize; 5],
    pub ddmp_channels: usize,
    pub graph_samples: usize,
    pub graph_groups: usize,
    pub affinity_mode: AffinityMode,
    pub fusion_mode: FusionMode,
    pub filter_deformable: bool,
    pub learn_beta: bool,
    /// Initial fusion weights for depth stages 2, 3 and 4 (weighted-sum
    /// fusion only); each block takes the entries of the stages it fuses.
    pub beta: Option<Vec<f64>>,
    pub arm: Arm,
    /// Depth stage used by both blocks of the single-scale arm; each block
    /// uses its own stage when unset.
    pub single_stage: Option<usize>,
    pub head_tower: usize,
    pub cde_hidden: usize,
    /// Multiplier applied to depth rasters (metres) before the depth branch.
    pub depth_scale: f64,

    pub loss: LossConfig,

    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Standardise box targets with training-set statistics.
    pub normalize_targets: bool,

    pub score_threshold: f64,
    pub top_k: usize,
    pub nms_iou: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            image_height: 96,
            image_width: 320,
            focal: 240.0,
            train_frames: 48,
            val_frames: 16,
            max_objects: 3,
            z_min: 7.0,
            z_max: 13.0,
            stage_channels: [8, 16, 32, 64, 64],
            ddmp_channels: 16,
            graph_samples: 9,
            graph_groups: 1,
            affinity_mode: AffinityMode::Raw,
            fusion_mode: FusionMode::ConcatConv,
            filter_deformable: false,
            learn_beta: true,
            beta: None,
            arm: Arm::DdmpCde,
            single_stage: None,
            head_tower: 128,
            cde_hidden: 16,
            depth_scale: 0.05,
            loss: LossConfig::default(),
            iters: 300,
            batch: 2,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            clip_norm: 10.0,
            normalize_targets: false,
            score_threshold: 0.05,
            top_k: 300,
            nms_iou: 0.4,
        }
    }
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("expected a boolean, got `{s}`"))),
    }
}

fn parse_num<T: FromStr>(key: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::invalid(format!("`{key}`: cannot parse `{s}`")))
}

fn parse_list<T: FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    s.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ToyConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "image_height" => self.image_height = parse_num(key, v)?,
            "image_width" => self.image_width = parse_num(key, v)?,
            "focal" => self.focal = parse_num(key, v)?,
            "train_frames" => self.train_frames = parse_num(key, v)?,
            "val_frames" => self.val_frames = parse_num(key, v)?,
            "max_objects" => self.max_objects = parse_num(key, v)?,
            "z_min" => self.z_min = parse_num(key, v)?,
            "z_max" => self.z_max = parse_num(key, v)?,
            "stage_channels" => {
                let c: Vec<usize> = parse_list(key, v)?;
                self.stage_channels = c
                    .try_into()
                    .map_err(|_| Error::invalid("`stage_channels` needs exactly 5 values"))?;
            }
            "ddmp_channels" => self.ddmp_channels = parse_num(key, v)?,
            "graph_samples" => self.graph_samples = parse_num(key, v)?,
            "graph_groups" => self.graph_groups = parse_num(key, v)?,
            "affinity_mode" => {
                self.affinity_mode = match v {
                    "raw" => AffinityMode::Raw,
                    "softmax" => AffinityMode::Softmax,
                    _ => return Err(Error::invalid(format!("unknown affinity_mode `{v}`"))),
                }
            }
            "fusion_mode" => {
                self.fusion_mode = match v {
                    "concat_conv" => FusionMode::ConcatConv,
                    "weighted_sum" => FusionMode::WeightedSum,
                    _ => return Err(Error::invalid(format!("unknown fusion_mode `{v}`"))),
                }
            }
            "filter_deformable" => self.filter_deformable = parse_bool(v)?,
            "learn_beta" => self.learn_beta = parse_bool(v)?,
            "beta" => self.beta = if v.is_empty() { None } else { Some(parse_list(key, v)?) },
            "arm" => self.arm = v.parse()?,
            "single_stage" => self.single_stage = if v.is_empty() { None } else { Some(parse_num(key, v)?) },
            "head_tower" => self.head_tower = parse_num(key, v)?,
            "cde_hidden" => self.cde_hidden = parse_num(key, v)?,
            "depth_scale" => self.depth_scale = parse_num(key, v)?,
            "gamma" => self.loss.gamma = parse_num(key, v)?,
            "det_weight" => self.loss.det_weight = parse_num(key, v)?,
            "aux_weight" => self.loss.aux_weight = parse_num(key, v)?,
            "positive_iou" => self.loss.positive_iou = parse_num(key, v)?,
            "cde_mode" => self.loss.cde_mode = v.parse::<CdeMode>()?,
            "iters" => self.iters = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "clip_norm" => self.clip_norm = parse_num(key, v)?,
            "normalize_targets" => self.normalize_targets = parse_bool(v)?,
            "score_threshold" => self.score_threshold = parse_num(key, v)?,
            "top_k" => self.top_k = parse_num(key, v)?,
            "nms_iou" => self.nms_iou = parse_num(key, v)?,
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its canonical text value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let affinity = match self.affinity_mode {
            AffinityMode::Raw => "raw",
            AffinityMode::Softmax => "softmax",
        };
        let fusion = match self.fusion_mode {
            FusionMode::ConcatConv => "concat_conv",
            FusionMode::WeightedSum => "weighted_sum",
        };
        vec![
            ("seed", self.seed.to_string()),
            ("image_height", self.image_height.to_string()),
            ("image_width", self.image_width.to_string()),
            ("focal", self.focal.to_string()),
            ("train_frames", self.train_frames.to_string()),
            ("val_frames", self.val_frames.to_string()),
            ("max_objects", self.max_objects.to_string()),
            ("z_min", self.z_min.to_string()),
            ("z_max", self.z_max.to_string()),
            ("stage_channels", join(&self.stage_channels)),
            ("ddmp_channels", self.ddmp_channels.to_string()),
            ("graph_samples", self.graph_samples.to_string()),
            ("graph_groups", self.graph_groups.to_string()),
            ("affinity_mode", affinity.into()),
            ("fusion_mode", fusion.into()),
            ("filter_deformable", self.filter_deformable.to_string()),
            ("learn_beta", self.learn_beta.to_string()),
            ("beta", self.beta.as_deref().map(join).unwrap_or_default()),
            ("arm", self.arm.to_string()),
            ("single_stage", self.single_stage.map(|s| s.to_string()).unwrap_or_default()),
            ("head_tower", self.head_tower.to_string()),
            ("cde_hidden", self.cde_hidden.to_string()),
            ("depth_scale", self.depth_scale.to_string()),
            ("gamma", self.loss.gamma.to_string()),
            ("det_weight", self.loss.det_weight.to_string()),
            ("aux_weight", self.loss.aux_weight.to_string()),
            ("positive_iou", self.loss.positive_iou.to_string()),
            ("cde_mode", self.loss.cde_mode.to_string()),
            ("iters", self.iters.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("normalize_targets", self.normalize_targets.to_string()),
            ("score_threshold", self.score_threshold.to_string()),
            ("top_k", self.top_k.to_string()),
            ("nms_iou", self.nms_iou.to_string()),
        ]
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            cfg.set(k.trim(), v).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.image_height % 16 != 0 || self.image_width % 16 != 0 || self.image_height == 0 || self.image_width == 0 {
            return bad(format!("image size {}x{} must be a positive multiple of 16", self.image_height, self.image_width));
        }
        if !(self.focal > 0.0) {
            return bad(format!("focal must be positive, got {}", self.focal));
        }
        if !(self.z_min > 0.0 && self.z_max > self.z_min) {
            return bad(format!("need 0 < z_min < z_max, got {} and {}", self.z_min, self.z_max));
        }
        if self.train_frames == 0 || self.batch == 0 || self.max_objects == 0 {
            return bad("train_frames, batch and max_objects must be positive".into());
        }
        if self.stage_channels.contains(&0) || self.ddmp_channels == 0 || self.head_tower == 0 || self.cde_hidden == 0 {
            return bad("channel widths must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad(format!(
                "invalid optimiser settings lr={} momentum={} weight_decay={} clip_norm={}",
                self.lr, self.momentum, self.weight_decay, self.clip_norm
            ));
        }
        if self.single_stage.is_some_and(|s| !(2..=4).contains(&s)) {
            return bad(format!("single_stage must be 2, 3 or 4, got {:?}", self.single_stage));
        }
        if !(self.depth_scale > 0.0) {
            return bad(format!("depth_scale must be positive, got {}", self.depth_scale));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad("score_threshold and nms_iou must lie in [0, 1]".into());
        }
        self.loss.validate()
    }
}
