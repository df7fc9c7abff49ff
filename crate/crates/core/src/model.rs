//! The toy detector: image and depth backbones, two fusion blocks after
//! image stages 2 and 3, a detection head on image stage 4 and an optional
//! centre/depth head on depth stage 4.

use crate::autograd::{ConvOptions, Tape, Var};
use crate::backbone::{extract_stages, init_backbone, stage_forward, BackboneConfig, Stages, STAGE_STRIDES};
use crate::config::{Arm, ToyConfig};
use crate::ddmp::{baseline_fuse, ddmp_forward, DdmpParams, FusionMode, GraphConfig};
use crate::error::{Error, Result};
use crate::head::{cde_head_forward, head_forward, init_cde_head, init_head, CdeConfig, HeadConfig, HeadOutput, CLASSES};
use crate::params::{ConvSpec, ConvVars, Init, ParamStore};
use crate::tensor::Tensor;

/// Image stages followed by a fusion block.
pub const FUSED_STAGES: [usize; 2] = [2, 3];
/// Backbone stage feeding the detection head.
pub const HEAD_STAGE: usize = 4;
/// Depth stages a block can draw on; `beta` has one entry per stage.
pub const DEPTH_STAGES: [usize; 3] = [2, 3, 4];

/// Shapes and sub-configurations derived from a run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub arm: Arm,
    pub image: BackboneConfig,
    pub depth: BackboneConfig,
    /// One graph configuration per fused stage (unused by the baseline).
    pub blocks: [GraphConfig; 2],
    pub head: HeadConfig,
    pub cde: CdeConfig,
    pub depth_scale: f64,
    pub beta: Option<Vec<f64>>,
}

fn block_prefix(i: usize) -> String {
    format!("block{}", i + 1)
}

impl ModelSpec {
    pub fn new(cfg: &ToyConfig) -> Result<Self> {
        let hw = (cfg.image_height, cfg.image_width);
        let image = BackboneConfig {
            stage_channels: cfg.stage_channels,
            ..BackboneConfig::toy(3, hw)
        };
        let depth = BackboneConfig { in_channels: 1, ..image.clone() };
        Self::from_parts(cfg, image, depth)
    }

    /// Same wiring with the full-scale backbone widths and input size.
    pub fn full_scale(cfg: &ToyConfig) -> Result<Self> {
        Self::from_parts(cfg, BackboneConfig::full_scale(3), BackboneConfig::full_scale(1))
    }

    fn from_parts(cfg: &ToyConfig, image: BackboneConfig, depth: BackboneConfig) -> Result<Self> {
        let blocks = FUSED_STAGES.map(|s| GraphConfig {
            samples: cfg.graph_samples,
            groups: cfg.graph_groups,
            channels: cfg.ddmp_channels,
            iterations: 1,
            stages: match cfg.arm {
                Arm::Baseline => vec![s],
                Arm::DdmpSingle => vec![cfg.single_stage.unwrap_or(s)],
                Arm::DdmpMulti | Arm::DdmpCde => DEPTH_STAGES.to_vec(),
            },
            affinity_mode: cfg.affinity_mode,
            fusion_mode: cfg.fusion_mode,
            filter_deformable: cfg.filter_deformable,
            out_channels: Some(image.stage_channels[s]),
            learn_beta: cfg.learn_beta,
        });
        let spec = Self {
            arm: cfg.arm,
            head: HeadConfig::new(image.stage_channels[HEAD_STAGE], cfg.head_tower, CLASSES.len()),
            cde: CdeConfig {
                in_channels: depth.stage_channels[HEAD_STAGE],
                hidden: cfg.cde_hidden,
            },
            image,
            depth,
            blocks,
            depth_scale: cfg.depth_scale,
            beta: cfg.beta.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.depth.validate()?;
        if self.arm != Arm::Baseline {
            for b in &self.blocks {
                b.validate()?;
            }
        }
        if let Some(beta) = &self.beta {
            if self.blocks.iter().any(|b| b.fusion_mode != FusionMode::WeightedSum) {
                return Err(Error::invalid("beta requires weighted-sum fusion"));
            }
            if beta.len() != DEPTH_STAGES.len() {
                return Err(Error::invalid(format!(
                    "beta needs one weight per depth stage {DEPTH_STAGES:?}, got {} entries",
                    beta.len()
                )));
            }
        }
        Ok(())
    }

    /// Resolution of the head's feature map.
    pub fn feature_hw(&self) -> (usize, usize) {
        let s = self.stride();
        (self.image.input_hw.0 / s, self.image.input_hw.1 / s)
    }

    pub fn stride(&self) -> usize {
        STAGE_STRIDES[HEAD_STAGE - 1]
    }

    /// Freshly initialised parameters; fusion outputs start at zero.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        init_backbone(&mut store, "img", &self.image, seed)?;
        init_backbone(&mut store, "dep", &self.depth, seed)?;
        for (i, &s) in FUSED_STAGES.iter().enumerate() {
            let p = block_prefix(i);
            let g = &self.blocks[i];
            let c = g.channels;
            ConvSpec::new(self.image.stage_channels[s], c, 1).init(&mut store, &format!("{p}.proj_img"), seed, Init::He, 0.0);
            for &l in &g.stages {
                ConvSpec::new(self.depth.stage_channels[l], c, 1).init(&mut store, &format!("{p}.proj_dep{l}"), seed, Init::He, 0.0);
            }
            if self.arm == Arm::Baseline {
                ConvSpec::new(c, self.image.stage_channels[s], 1).init(&mut store, &format!("{p}.fuse"), seed, Init::Zeros, 0.0);
                continue;
            }
            DdmpParams::init(&mut store, &p, g, seed)?;
            let name = format!("{p}.output.weight");
            let zeros = Tensor::zeros(store.get(&name)?.shape());
            store.insert(name, zeros);
            if let Some(beta) = &self.beta {
                let name = format!("{p}.beta");
                let frozen = store.is_frozen(&name);
                let picked: Vec<f64> = g.stages.iter().map(|&l| beta[l - DEPTH_STAGES[0]]).collect();
                store.insert(&name, Tensor::new(&[picked.len()], picked)?);
                if frozen {
                    store.freeze(&name);
                }
            }
        }
        init_head(&mut store, "head", &self.head, seed);
        if self.arm.uses_cde() {
            init_cde_head(&mut store, "cde", &self.cde, seed);
        }
        Ok(store)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub head: HeadOutput,
    /// Dense centre/depth map on the head grid, when requested and present.
    pub cde: Option<Var>,
}

fn fuse_block(
    tape: &Tape,
    store: &ParamStore,
    spec: &ModelSpec,
    block: usize,
    img: Var,
    depth: &Stages,
) -> Result<Var> {
    let p = block_prefix(block);
    let g = &spec.blocks[block];
    let proj = |name: &str, x: Var| -> Result<Var> {
        ConvVars::bind(tape, store, &format!("{p}.{name}"))?.forward(tape, x, ConvOptions::default())
    };
    let h = proj("proj_img", img)?;
    let out = if spec.arm == Arm::Baseline {
        let s = FUSED_STAGES[block];
        let d = proj(&format!("proj_dep{s}"), depth.get(s))?;
        proj("fuse", baseline_fuse(tape, h, d)?)?
    } else {
        let feats = g
            .stages
            .iter()
            .map(|&l| proj(&format!("proj_dep{l}"), depth.get(l)))
            .collect::<Result<Vec<_>>>()?;
        let params = DdmpParams::bind(tape, store, &p, g)?;
        ddmp_forward(tape, h, &feats, &params, g)?
    };
    tape.add(img, out)
}

/// Forward pass over a batch. `image` is N×3×H×W, `depth` N×1×H×W in
/// metres.
pub fn forward(tape: &Tape, store: &ParamStore, spec: &ModelSpec, image: &Tensor, depth: &Tensor, with_cde: bool) -> Result<ModelOutput> {
    let x = tape.constant(image.clone());
    let d = tape.constant(depth.map(|v| v * spec.depth_scale));
    let depth_stages = extract_stages(tape, d, store, "dep", &spec.depth)?;
    let mut x = x;
    for stage in 1..=HEAD_STAGE {
        x = stage_forward(tape, x, store, "img", &spec.image, stage)?;
        if let Some(block) = FUSED_STAGES.iter().position(|&s| s == stage) {
            x = fuse_block(tape, store, spec, block, x, &depth_stages)?;
        }
    }
    let head = head_forward(tape, x, store, "head", &spec.head)?;
    let cde = if with_cde && spec.arm.uses_cde() {
        Some(cde_head_forward(tape, depth_stages.get(HEAD_STAGE), store, "cde")?)
    } else {
        None
    };
    Ok(ModelOutput { head, cde })
}

/// Stacks N×C×H×W tensors along the batch axis.
pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape()[1..] != shape[1..] {
            return Err(Error::ShapeMismatch {
                op: "stack_batch",
                lhs: shape.clone(),
                rhs: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    shape[0] = items.iter().map(|t| t.shape()[0]).sum();
    Tensor::new(&shape, data)
}
