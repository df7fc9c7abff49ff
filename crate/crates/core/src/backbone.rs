//! Small five-level conv stack with the stride schedule of a dilated
//! ResNet: a stride-2 stem, stages 1..3 each halving resolution, and a
//! stride-1 dilation-2 stage 4. Every conv is followed by a learned
//! per-channel scale and shift (a depthwise 1×1 conv) and ReLU.

use crate::autograd::{ConvOptions, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ConvSpec, ConvVars, Init, ParamStore};

/// Output stride of stages 1..=4.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 16];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Stem followed by stages 1..=4.
    pub stage_channels: [usize; 5],
    pub in_channels: usize,
    pub input_hw: (usize, usize),
    pub dilated_final: bool,
}

impl BackboneConfig {
    pub fn toy(in_channels: usize, input_hw: (usize, usize)) -> Self {
        Self {
            stage_channels: [8, 16, 32, 64, 64],
            in_channels,
            input_hw,
            dilated_final: true,
        }
    }

    /// Widths and input size of the full-scale reference network.
    pub fn full_scale(in_channels: usize) -> Self {
        Self {
            stage_channels: [64, 256, 512, 1024, 2048],
            in_channels,
            input_hw: (512, 1760),
            dilated_final: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::invalid("backbone channel widths must be positive"));
        }
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::InvalidShape {
                op: "backbone",
                msg: format!("input {h}x{w} is not divisible by 16"),
            });
        }
        Ok(())
    }

    /// `(channels, height, width)` of stages 1..=4.
    pub fn stage_shapes(&self) -> Result<[(usize, usize, usize); 4]> {
        self.validate()?;
        let (h, w) = self.input_hw;
        let mut out = [(0, 0, 0); 4];
        for (i, s) in STAGE_STRIDES.iter().enumerate() {
            out[i] = (self.stage_channels[i + 1], h / s, w / s);
        }
        Ok(out)
    }

    fn layers(&self) -> Vec<Layer> {
        let c = self.stage_channels;
        let mut layers = vec![Layer {
            name: "stem".into(),
            cin: self.in_channels,
            cout: c[0],
            stride: 2,
            dilation: 1,
        }];
        for stage in 1..=4 {
            let (stride, dilation) = match stage {
                4 if self.dilated_final => (1, 2),
                4 => (1, 1),
                _ => (2, 1),
            };
            for j in 0..2 {
                layers.push(Layer {
                    name: format!("s{stage}.conv{j}"),
                    cin: if j == 0 { c[stage - 1] } else { c[stage] },
                    cout: c[stage],
                    stride: if j == 0 { stride } else { 1 },
                    dilation,
                });
            }
        }
        layers
    }
}

struct Layer {
    name: String,
    cin: usize,
    cout: usize,
    stride: usize,
    dilation: usize,
}

impl Layer {
    fn opts(&self) -> ConvOptions {
        ConvOptions::same(3, self.dilation).with_stride(self.stride)
    }
}

pub fn init_backbone(store: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    for layer in cfg.layers() {
        let p = format!("{prefix}.{}", layer.name);
        ConvSpec::new(layer.cin, layer.cout, 3)
            .no_bias()
            .init(store, &p, seed, Init::He, 0.0);
        ConvSpec::new(layer.cout, layer.cout, 1)
            .groups(layer.cout)
            .init(store, &format!("{p}.norm"), seed, Init::Identity, 0.0);
    }
    Ok(())
}

/// Feature maps of stages 1..=4.
#[derive(Clone, Copy, Debug)]
pub struct Stages(pub [Var; 4]);

impl Stages {
    /// Stage by its 1-based index.
    pub fn get(&self, stage: usize) -> Var {
        self.0[stage - 1]
    }
}

pub fn extract_stages(tape: &Tape, input: Var, store: &ParamStore, prefix: &str, cfg: &BackboneConfig) -> Result<Stages> {
    cfg.validate()?;
    let shape = tape.shape(input);
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(Error::InvalidShape {
            op: "extract_stages",
            msg: format!("expected N×{}×H×W input, got {shape:?}", cfg.in_channels),
        });
    }
    if shape[2] % 16 != 0 || shape[3] % 16 != 0 {
        return Err(Error::InvalidShape {
            op: "extract_stages",
            msg: format!("input {}x{} is not divisible by 16", shape[2], shape[3]),
        });
    }
    let mut x = input;
    let mut outs = [input; 4];
    for (stage, out) in outs.iter_mut().enumerate() {
        x = stage_forward(tape, x, store, prefix, cfg, stage + 1)?;
        *out = x;
    }
    Ok(Stages(outs))
}

/// Runs the convs of one stage (stage 1 includes the stem) on `x`, so that
/// features can be modified between stages.
pub fn stage_forward(
    tape: &Tape,
    x: Var,
    store: &ParamStore,
    prefix: &str,
    cfg: &BackboneConfig,
    stage: usize,
) -> Result<Var> {
    if !(1..=4).contains(&stage) {
        return Err(Error::invalid(format!("backbone stage must be in 1..=4, got {stage}")));
    }
    let layers = cfg.layers();
    let range = if stage == 1 { 0..3 } else { 2 * stage - 1..2 * stage + 1 };
    let mut x = x;
    for layer in &layers[range] {
        let p = format!("{prefix}.{}", layer.name);
        let conv = ConvVars::bind(tape, store, &p)?;
        let norm = ConvVars::bind(tape, store, &format!("{p}.norm"))?;
        x = conv.forward(tape, x, layer.opts())?;
        x = norm.forward(tape, x, ConvOptions::default().with_groups(layer.cout))?;
        x = tape.relu(x)?;
    }
    Ok(x)
}

/// 1×1 projection to the working width.
pub fn project_channels(tape: &Tape, feat: Var, proj: &ConvVars) -> Result<Var> {
    proj.forward(tape, feat, ConvOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_scale_stage_sizes() {
        let s = BackboneConfig::full_scale(3).stage_shapes().unwrap();
        assert_eq!(s[1], (512, 64, 220));
        assert_eq!(s[2], (1024, 32, 110));
        assert_eq!(s[3], (2048, 32, 110));
    }

    #[test]
    fn toy_stage_sizes_match_schedule() {
        let cfg = BackboneConfig::toy(3, (64, 64));
        let mut store = ParamStore::new();
        init_backbone(&mut store, "img", &cfg, 1).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 3, 64, 64]));
        let st = extract_stages(&tape, x, &store, "img", &cfg).unwrap();
        let expect = cfg.stage_shapes().unwrap();
        for i in 1..=4 {
            let (c, h, w) = expect[i - 1];
            assert_eq!(tape.shape(st.get(i)), vec![1, c, h, w]);
        }
        assert_eq!(tape.shape(st.get(2)), vec![1, 32, 8, 8]);
        assert_eq!(tape.shape(st.get(4)), vec![1, 64, 4, 4]);
    }

    #[test]
    fn zero_input_gives_zero_stages() {
        let cfg = BackboneConfig::toy(1, (32, 48));
        let mut store = ParamStore::new();
        init_backbone(&mut store, "dep", &cfg, 2).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 32, 48]));
        let st = extract_stages(&tape, x, &store, "dep", &cfg).unwrap();
        for i in 1..=4 {
            assert_eq!(tape.value(st.get(i)).max_abs(), 0.0);
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        assert!(BackboneConfig::toy(3, (60, 64)).validate().is_err());
        let cfg = BackboneConfig::toy(3, (64, 64));
        let mut store = ParamStore::new();
        init_backbone(&mut store, "img", &cfg, 1).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 3, 40, 64]));
        assert!(extract_stages(&tape, x, &store, "img", &cfg).is_err());
    }

    #[test]
    fn projection_examples() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let mut store = ParamStore::new();
        ConvSpec::new(4, 4, 1).no_bias().init(&mut store, "p", 0, Init::Identity, 0.0);
        ConvSpec::new(4, 2, 1).init(&mut store, "z", 0, Init::Zeros, 0.0);
        let id = ConvVars::bind(&tape, &store, "p").unwrap();
        let xv = tape.leaf(x.clone());
        assert_eq!(tape.value(project_channels(&tape, xv, &id).unwrap()), x);
        let zero = ConvVars::bind(&tape, &store, "z").unwrap();
        let out = tape.value(project_channels(&tape, xv, &zero).unwrap());
        assert_eq!(out.shape(), &[1, 2, 3, 3]);
        assert_eq!(out.max_abs(), 0.0);

        let w = Tensor::uniform(&[3, 4, 1, 1], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
        let probe = Tensor::uniform(&[1, 3, 3, 3], -1.0, 1.0, &mut rng);
        let rep = gradcheck(
            |t, v| {
                let conv = ConvVars {
                    weight: v[1],
                    bias: Some(v[2]),
                };
                t.weighted_sum(project_channels(t, v[0], &conv)?, &probe)
            },
            &[x, w, b],
            1e-6,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
