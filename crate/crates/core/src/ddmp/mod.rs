//! Depth-conditioned dynamic message propagation.
//!
//! One block refines an image feature map `h` (N×C×H×W) with messages
//! gathered from K dynamically sampled neighbours:
//!
//! 1. a 3×3 conv on `h` predicts a walk `(Δy, Δx)` for each of the K slots of
//!    a regular field; the neighbours are bilinearly sampled at
//!    `base_j + Δd_j` ([`predict_walks`], [`sample_nodes`]);
//! 2. for each depth scale `l`, a deformable 3×3 conv over the aligned depth
//!    features yields per-slot affinities `A_l`, and a 3×3 conv yields the
//!    per-slot, per-group filters `W_l` ([`generate_affinity_filters`]);
//! 3. `m_l(i) = Σ_j A_l(i,j) · h'_j ⊙ W_l(i,j)` and the scales are fused either
//!    by concat + 3×3 conv or by a `β`-weighted sum ([`propagate_message`]);
//! 4. `h ← ReLU(h + α·m)` ([`update_nodes`]), repeated T times.

mod aggregate;

use crate::autograd::{ConvOptions, ResizeMode, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ConvSpec, ConvVars, Init, ParamStore};
use crate::tensor::Tensor;

pub use aggregate::aggregate_slots;

/// Walks live in the image plane: (height, width).
pub const WALK_DIMS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AffinityMode {
    Raw,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    ConcatConv,
    WeightedSum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphConfig {
    /// Sampled nodes per receiver (K), an odd square.
    pub samples: usize,
    /// Filter groups (G); must divide `channels`.
    pub groups: usize,
    /// Working channel width (C).
    pub channels: usize,
    /// Propagation iterations (T).
    pub iterations: usize,
    /// Depth stages feeding the block, in the order the depth features are
    /// passed to [`ddmp_forward`].
    pub stages: Vec<usize>,
    pub affinity_mode: AffinityMode,
    pub fusion_mode: FusionMode,
    /// Generate the filters with the deformable sampler as well.
    pub filter_deformable: bool,
    /// Optional 1×1 projection of the refined map to a different width.
    pub out_channels: Option<usize>,
    /// Train the scale weights β (weighted-sum fusion only).
    pub learn_beta: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            samples: 9,
            groups: 1,
            channels: 256,
            iterations: 1,
            stages: vec![2, 3, 4],
            affinity_mode: AffinityMode::Raw,
            fusion_mode: FusionMode::ConcatConv,
            filter_deformable: false,
            out_channels: None,
            learn_beta: true,
        }
    }
}

impl GraphConfig {
    pub fn with_channels(channels: usize) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn field_size(&self) -> usize {
        (self.samples as f64).sqrt().round() as usize
    }

    pub fn scales(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.field_size();
        if s * s != self.samples || s % 2 == 0 {
            return Err(Error::invalid(format!(
                "sample count {} is not an odd square",
                self.samples
            )));
        }
        if self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::invalid(format!(
                "{} groups do not divide {} channels",
                self.groups, self.channels
            )));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("at least one propagation iteration is required"));
        }
        if self.stages.is_empty() {
            return Err(Error::invalid("at least one depth stage is required"));
        }
        Ok(())
    }

    /// Regular field offsets `(dy, dx)` of each slot, row-major.
    pub fn field_offsets(&self) -> Vec<(f64, f64)> {
        let s = self.field_size();
        let r = (s / 2) as f64;
        (0..self.samples)
            .map(|j| ((j / s) as f64 - r, (j % s) as f64 - r))
            .collect()
    }
}

/// Bound parameters of one block.
#[derive(Clone, Debug)]
pub struct DdmpParams {
    pub walk_img: ConvVars,
    pub walk_dep: Vec<ConvVars>,
    pub affinity: Vec<ConvVars>,
    pub filter: Vec<ConvVars>,
    /// Per-scale fusion weights, shape `[L]` (weighted-sum fusion only).
    pub beta: Option<Var>,
    /// Concat + 3×3 conv fusion (concat-conv mode only).
    pub fusion: Option<ConvVars>,
    /// Message scale, shape `[1]`.
    pub alpha: Var,
    pub output: Option<ConvVars>,
}

impl DdmpParams {
    /// Writes freshly initialised parameters under `prefix`.
    ///
    /// Walk kernels, affinity kernels and α start at zero, so the block is an
    /// identity residual at step 0. Affinity biases start at `1/K` in raw
    /// mode (uniform weights, same as the softmax start) and filter biases at
    /// one, which keeps the initial message a plain neighbourhood average and
    /// gives α a non-zero gradient.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &GraphConfig, seed: u64) -> Result<()> {
        cfg.validate()?;
        let (c, k, g) = (cfg.channels, cfg.samples, cfg.groups);
        let s = cfg.field_size();
        ConvSpec::new(c, WALK_DIMS * k, 3).init(store, &format!("{prefix}.walk_img"), seed, Init::Zeros, 0.0);
        let affinity_bias = match cfg.affinity_mode {
            AffinityMode::Raw => 1.0 / k as f64,
            AffinityMode::Softmax => 0.0,
        };
        let filter_scale = 1.0 / ((c * s * s) as f64).sqrt();
        for &l in &cfg.stages {
            ConvSpec::new(c, WALK_DIMS * k, 3).init(store, &format!("{prefix}.walk_dep{l}"), seed, Init::Zeros, 0.0);
            ConvSpec::new(c, k, s).init(store, &format!("{prefix}.affinity{l}"), seed, Init::Zeros, affinity_bias);
            ConvSpec::new(c, k * g, s).init(
                store,
                &format!("{prefix}.filter{l}"),
                seed,
                Init::Uniform(0.1 * filter_scale),
                1.0,
            );
        }
        match cfg.fusion_mode {
            FusionMode::WeightedSum => {
                let name = format!("{prefix}.beta");
                store.insert(&name, Tensor::full(&[cfg.scales()], 1.0 / cfg.scales() as f64));
                if !cfg.learn_beta {
                    store.freeze(&name);
                }
            }
            FusionMode::ConcatConv => {
                ConvSpec::new(cfg.scales() * c, c, 3).init(store, &format!("{prefix}.fusion"), seed, Init::He, 0.0);
            }
        }
        store.insert(format!("{prefix}.alpha"), Tensor::zeros(&[1]));
        if let Some(out) = cfg.out_channels {
            ConvSpec::new(c, out, 1).init(store, &format!("{prefix}.output"), seed, Init::He, 0.0);
        }
        Ok(())
    }

    pub fn bind(tape: &Tape, store: &ParamStore, prefix: &str, cfg: &GraphConfig) -> Result<Self> {
        Self::bind_with(prefix, cfg, |name| {
            if store.contains(name) {
                store.bind(tape, name).map(Some)
            } else {
                Ok(None)
            }
        })
    }

    /// Builds the parameter set from any name → variable lookup; a missing
    /// bias is allowed, every other missing name is an error.
    pub fn bind_with(
        prefix: &str,
        cfg: &GraphConfig,
        mut lookup: impl FnMut(&str) -> Result<Option<Var>>,
    ) -> Result<Self> {
        let required = |name: String, lookup: &mut dyn FnMut(&str) -> Result<Option<Var>>| {
            lookup(&name)?.ok_or(Error::MissingParam(name))
        };
        let conv = |name: &str, lookup: &mut dyn FnMut(&str) -> Result<Option<Var>>| -> Result<ConvVars> {
            let weight = required(format!("{prefix}.{name}.weight"), lookup)?;
            let bias = lookup(&format!("{prefix}.{name}.bias"))?;
            Ok(ConvVars { weight, bias })
        };
        let walk_img = conv("walk_img", &mut lookup)?;
        let mut walk_dep = Vec::new();
        let mut affinity = Vec::new();
        let mut filter = Vec::new();
        for &l in &cfg.stages {
            walk_dep.push(conv(&format!("walk_dep{l}"), &mut lookup)?);
            affinity.push(conv(&format!("affinity{l}"), &mut lookup)?);
            filter.push(conv(&format!("filter{l}"), &mut lookup)?);
        }
        let (beta, fusion) = match cfg.fusion_mode {
            FusionMode::WeightedSum => {
                let name = format!("{prefix}.beta");
                (Some(lookup(&name)?.ok_or(Error::MissingParam(name))?), None)
            }
            FusionMode::ConcatConv => (None, Some(conv("fusion", &mut lookup)?)),
        };
        let name = format!("{prefix}.alpha");
        let alpha = lookup(&name)?.ok_or(Error::MissingParam(name))?;
        let output = match cfg.out_channels {
            Some(_) => Some(conv("output", &mut lookup)?),
            None => None,
        };
        Ok(Self {
            walk_img,
            walk_dep,
            affinity,
            filter,
            beta,
            fusion,
            alpha,
            output,
        })
    }
}

fn dims4(tape: &Tape, v: Var, op: &'static str) -> Result<[usize; 4]> {
    let s = tape.shape(v);
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op,
            msg: format!("expected N×C×H×W, got {s:?}"),
        });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Per-position walks, N×2K×H×W with channels `(Δy_j, Δx_j)` for each slot.
pub fn predict_walks(tape: &Tape, latent: Var, walk: &ConvVars) -> Result<Var> {
    let [_, c, _, _] = dims4(tape, latent, "predict_walks")?;
    let ws = tape.shape(walk.weight);
    if ws[1] != c || ws[0] % WALK_DIMS != 0 {
        return Err(Error::ShapeMismatch {
            op: "predict_walks",
            lhs: tape.shape(latent),
            rhs: ws,
        });
    }
    walk.same(tape, latent)
}

/// Regular field coordinates of one slot, N×2×H×W.
fn base_coords(n: usize, h: usize, w: usize, (dy, dx): (f64, f64)) -> Tensor {
    let plane = h * w;
    Tensor::from_fn(&[n, 2, h, w], |i| {
        let p = i % plane;
        let ch = (i / plane) % 2;
        if ch == 0 {
            (p / w) as f64 + dy
        } else {
            (p % w) as f64 + dx
        }
    })
}

/// Bilinearly samples `feature` at `base_j(i) + walk_j(i)` for every slot,
/// giving N×C×K×H×W.
pub fn sample_nodes(tape: &Tape, feature: Var, walks: Var, samples: usize) -> Result<Var> {
    let [n, _, h, w] = dims4(tape, feature, "sample_nodes")?;
    let ws = tape.shape(walks);
    if ws != [n, WALK_DIMS * samples, h, w] {
        return Err(Error::ShapeMismatch {
            op: "sample_nodes",
            lhs: vec![n, WALK_DIMS * samples, h, w],
            rhs: ws,
        });
    }
    let s = (samples as f64).sqrt().round() as usize;
    let r = (s / 2) as f64;
    let mut slots = Vec::with_capacity(samples);
    for j in 0..samples {
        let offset = ((j / s) as f64 - r, (j % s) as f64 - r);
        let base = tape.constant(base_coords(n, h, w, offset));
        let walk = tape.narrow(walks, 1, WALK_DIMS * j, WALK_DIMS)?;
        let coords = tape.add(base, walk)?;
        slots.push(tape.bilinear_sample(feature, coords)?);
    }
    tape.stack(&slots, 2)
}

/// Deformable conv: sample the K field points at the walked positions, then
/// contract over (channel, slot) with an s×s kernel.
pub fn deform_conv(tape: &Tape, feature: Var, walks: Var, conv: &ConvVars) -> Result<Var> {
    let [n, c, h, w] = dims4(tape, feature, "deform_conv")?;
    let ws = tape.shape(conv.weight);
    let k = ws[2] * ws[3];
    if ws[1] != c {
        return Err(Error::ShapeMismatch {
            op: "deform_conv",
            lhs: vec![n, c, h, w],
            rhs: ws,
        });
    }
    let sampled = sample_nodes(tape, feature, walks, k)?;
    let cols = tape.reshape(sampled, &[n, c * k, h, w])?;
    let kernel = tape.reshape(conv.weight, &[ws[0], c * k, 1, 1])?;
    tape.conv2d(cols, kernel, conv.bias, ConvOptions::default())
}

/// Affinities `A_l` (N×K×H×W) and filters `W_l` (N×KG×H×W) for one depth
/// scale. `depth` must already be aligned to the image grid.
pub fn generate_affinity_filters(
    tape: &Tape,
    depth: Var,
    image_hw: (usize, usize),
    params: &DdmpParams,
    scale: usize,
    cfg: &GraphConfig,
) -> Result<(Var, Var)> {
    let [_, _, h, w] = dims4(tape, depth, "generate_affinity_filters")?;
    if (h, w) != image_hw {
        return Err(Error::InvalidShape {
            op: "generate_affinity_filters",
            msg: format!("depth features {h}x{w} not aligned to {}x{}", image_hw.0, image_hw.1),
        });
    }
    let walks = predict_walks(tape, depth, &params.walk_dep[scale])?;
    let mut affinity = deform_conv(tape, depth, walks, &params.affinity[scale])?;
    if cfg.affinity_mode == AffinityMode::Softmax {
        affinity = tape.softmax(affinity, 1)?;
    }
    let filter = if cfg.filter_deformable {
        deform_conv(tape, depth, walks, &params.filter[scale])?
    } else {
        params.filter[scale].same(tape, depth)?
    };
    Ok((affinity, filter))
}

/// Messages for every scale, fused into one N×C×H×W map.
pub fn propagate_message(
    tape: &Tape,
    sampled: Var,
    affinities: &[Var],
    filters: &[Var],
    params: &DdmpParams,
    cfg: &GraphConfig,
) -> Result<Var> {
    if affinities.len() != cfg.scales() || filters.len() != cfg.scales() {
        return Err(Error::invalid(format!(
            "expected {} scales, got {} affinities and {} filters",
            cfg.scales(),
            affinities.len(),
            filters.len()
        )));
    }
    let messages = affinities
        .iter()
        .zip(filters)
        .map(|(&a, &w)| aggregate_slots(tape, sampled, a, w, cfg.groups))
        .collect::<Result<Vec<_>>>()?;
    match cfg.fusion_mode {
        FusionMode::WeightedSum => {
            let beta = params
                .beta
                .ok_or_else(|| Error::MissingParam("beta".into()))?;
            let mut fused: Option<Var> = None;
            for (l, &m) in messages.iter().enumerate() {
                let b = tape.narrow(beta, 0, l, 1)?;
                let term = tape.mul(b, m)?;
                fused = Some(match fused {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            Ok(fused.expect("at least one scale"))
        }
        FusionMode::ConcatConv => {
            let fusion = params
                .fusion
                .as_ref()
                .ok_or_else(|| Error::MissingParam("fusion".into()))?;
            let cat = if messages.len() == 1 {
                messages[0]
            } else {
                tape.concat(&messages, 1)?
            };
            fusion.same(tape, cat)
        }
    }
}

/// `ReLU(h + α·m)`.
pub fn update_nodes(tape: &Tape, h: Var, message: Var, alpha: Var) -> Result<Var> {
    if tape.shape(h) != tape.shape(message) {
        return Err(Error::ShapeMismatch {
            op: "update_nodes",
            lhs: tape.shape(h),
            rhs: tape.shape(message),
        });
    }
    let scaled = tape.mul(alpha, message)?;
    tape.relu(tape.add(h, scaled)?)
}

/// Brings a depth feature map to the image grid: integer-factor
/// downscaling by strided max pooling, anything else by bilinear resize.
pub fn align_depth_features(tape: &Tape, depth: Var, target: (usize, usize)) -> Result<Var> {
    let [_, _, h, w] = dims4(tape, depth, "align_depth_features")?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidShape {
            op: "align_depth_features",
            msg: format!("zero target {th}x{tw}"),
        });
    }
    if (h, w) == target {
        return Ok(depth);
    }
    if h > th && h % th == 0 && w % tw == 0 && h / th == w / tw {
        let f = h / th;
        return tape.maxpool(depth, f, f);
    }
    tape.resize(depth, target, ResizeMode::Bilinear)
}

/// Full block. `depth_feats` follow `cfg.stages` and carry `cfg.channels`
/// channels; they are aligned to the image grid here.
pub fn ddmp_forward(
    tape: &Tape,
    image_feat: Var,
    depth_feats: &[Var],
    params: &DdmpParams,
    cfg: &GraphConfig,
) -> Result<Var> {
    cfg.validate()?;
    let [_, c, h, w] = dims4(tape, image_feat, "ddmp_forward")?;
    if c != cfg.channels {
        return Err(Error::InvalidShape {
            op: "ddmp_forward",
            msg: format!("image features have {c} channels, block expects {}", cfg.channels),
        });
    }
    if depth_feats.len() != cfg.scales() {
        return Err(Error::invalid(format!(
            "block expects {} depth scales, got {}",
            cfg.scales(),
            depth_feats.len()
        )));
    }
    let mut affinities = Vec::with_capacity(cfg.scales());
    let mut filters = Vec::with_capacity(cfg.scales());
    for (l, &d) in depth_feats.iter().enumerate() {
        let aligned = align_depth_features(tape, d, (h, w))?;
        let (a, f) = generate_affinity_filters(tape, aligned, (h, w), params, l, cfg)?;
        affinities.push(a);
        filters.push(f);
    }
    let mut latent = image_feat;
    for _ in 0..cfg.iterations {
        let walks = predict_walks(tape, latent, &params.walk_img)?;
        let sampled = sample_nodes(tape, latent, walks, cfg.samples)?;
        let message = propagate_message(tape, sampled, &affinities, &filters, params, cfg)?;
        latent = update_nodes(tape, latent, message, params.alpha)?;
    }
    match &params.output {
        Some(out) => out.forward(tape, latent, ConvOptions::default()),
        None => Ok(latent),
    }
}

/// Non-propagating fusion arm: elementwise image ⊙ depth.
pub fn baseline_fuse(tape: &Tape, image_feat: Var, depth_feat: Var) -> Result<Var> {
    if tape.shape(image_feat) != tape.shape(depth_feat) {
        return Err(Error::ShapeMismatch {
            op: "baseline_fuse",
            lhs: tape.shape(image_feat),
            rhs: tape.shape(depth_feat),
        });
    }
    tape.mul(image_feat, depth_feat)
}
