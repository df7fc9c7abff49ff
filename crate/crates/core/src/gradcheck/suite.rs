//! Named gradient checks over every differentiable operation, grouped by
//! scope.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, GradReport};
use crate::autograd::{ConvOptions, ResizeMode, Tape, Var};
use crate::ddmp::{ddmp_forward, predict_walks, sample_nodes, AffinityMode, DdmpParams, FusionMode, GraphConfig};
use crate::error::{Error, Result};
use crate::head::{cde_apply, HeadConfig, HeadOutput, HeadVars};
use crate::losses::{classification_loss, objective, smooth_l1, total_loss, CdeMode, LossConfig, Sample};
use crate::params::{ConvVars, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Ddmp,
    Head,
    Losses,
    All,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::Primitives => "primitives",
            Scope::Ddmp => "ddmp",
            Scope::Head => "head",
            Scope::Losses => "losses",
            Scope::All => "all",
        }
    }

    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Scope::Primitives, Scope::Ddmp, Scope::Head, Scope::Losses, Scope::All]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scope `{s}` (expected primitives, ddmp, head, losses or all)")))
    }
}

/// Outcome of one named check.
#[derive(Debug)]
pub struct CheckResult {
    pub scope: Scope,
    pub name: String,
    pub report: Result<GradReport>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.as_ref().is_ok_and(|r| r.passed())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.report.as_ref().map(|r| r.max_rel_err).unwrap_or(f64::INFINITY)
    }
}

type Case = (String, Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>, Vec<Tensor>);

struct Rng(ChaCha8Rng);

impl Rng {
    fn u(&mut self, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut self.0)
    }

    fn pos(&mut self, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape, 0.5, 2.0, &mut self.0)
    }
}

fn case(name: &str, f: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static, inputs: Vec<Tensor>) -> Case {
    (name.to_string(), Box::new(f), inputs)
}

/// Reduces `v` to a scalar with fixed random weights, so every output
/// element gets a distinct cotangent.
fn probe(t: &Tape, v: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(&t.shape(v), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    t.weighted_sum(v, &w)
}

fn primitive_cases(r: &mut Rng) -> Vec<Case> {
    let s = [2, 3];
    let mut cases = vec![
        case("add", |t, v| probe(t, t.add(v[0], v[1])?, 1), vec![r.u(&s), r.u(&s)]),
        case("sub", |t, v| probe(t, t.sub(v[0], v[1])?, 2), vec![r.u(&s), r.u(&s)]),
        case("mul", |t, v| probe(t, t.mul(v[0], v[1])?, 3), vec![r.u(&s), r.u(&s)]),
        case("exp", |t, v| probe(t, t.exp(v[0])?, 4), vec![r.u(&s)]),
        case("log", |t, v| probe(t, t.log(v[0])?, 5), vec![r.pos(&s)]),
        case("relu", |t, v| probe(t, t.relu(v[0])?, 6), vec![r.u(&s)]),
        case("scale", |t, v| probe(t, t.scale(v[0], -1.7)?, 7), vec![r.u(&s)]),
        case("add_scalar", |t, v| probe(t, t.add_scalar(v[0], 0.3)?, 8), vec![r.u(&s)]),
        case("concat", |t, v| probe(t, t.concat(&[v[0], v[1]], 1)?, 9), vec![r.u(&[2, 3]), r.u(&[2, 2])]),
        case("narrow", |t, v| probe(t, t.narrow(v[0], 1, 1, 2)?, 10), vec![r.u(&[2, 4])]),
        case("reshape", |t, v| probe(t, t.reshape(v[0], &[3, 2])?, 11), vec![r.u(&s)]),
        case("stack", |t, v| probe(t, t.stack(&[v[0], v[1]], 0)?, 12), vec![r.u(&s), r.u(&s)]),
        case("matmul", |t, v| probe(t, t.matmul(v[0], v[1])?, 13), vec![r.u(&[2, 3]), r.u(&[3, 4])]),
        case("sum", |t, v| t.sum(t.mul(v[0], v[0])?), vec![r.u(&s)]),
        case("mean", |t, v| t.mean(t.mul(v[0], v[0])?), vec![r.u(&s)]),
        case("weighted_sum", |t, v| probe(t, v[0], 14), vec![r.u(&s)]),
        case("gather", |t, v| probe(t, t.gather(v[0], &[4, 0, 4, 2])?, 15), vec![r.u(&s)]),
        case("softmax", |t, v| probe(t, t.softmax(v[0], 1)?, 16), vec![r.u(&[2, 4])]),
        case("log_softmax", |t, v| probe(t, t.log_softmax(v[0], 0)?, 17), vec![r.u(&[3, 2])]),
        case("maxpool", |t, v| probe(t, t.maxpool(v[0], 2, 2)?, 18), vec![r.u(&[1, 2, 4, 6])]),
        case(
            "resize_bilinear",
            |t, v| probe(t, t.resize(v[0], (5, 7), ResizeMode::Bilinear)?, 19),
            vec![r.u(&[1, 2, 3, 4])],
        ),
        case(
            "resize_nearest",
            |t, v| probe(t, t.resize(v[0], (6, 8), ResizeMode::Nearest)?, 20),
            vec![r.u(&[1, 2, 3, 4])],
        ),
    ];
    let convs = [
        ("conv2d", ConvOptions::same(3, 1), 2, 3),
        ("conv2d_stride2", ConvOptions::same(3, 1).with_stride(2), 2, 3),
        ("conv2d_dilated", ConvOptions::same(3, 2), 2, 3),
        ("conv2d_grouped", ConvOptions::same(3, 1).with_groups(2), 4, 4),
        ("conv2d_1x1", ConvOptions::default(), 2, 3),
    ];
    for (name, opts, cin, cout) in convs {
        let k = if opts.padding == 0 && opts.dilation == 1 { 1 } else { 3 };
        let w = r.u(&[cout, cin / opts.groups, k, k]);
        cases.push(case(
            name,
            move |t, v| probe(t, t.conv2d(v[0], v[1], Some(v[2]), opts)?, 21),
            vec![r.u(&[1, cin, 5, 6]), w, r.u(&[cout])],
        ));
    }
    let coords = Tensor::uniform(&[1, 2, 3, 4], 0.1, 3.9, &mut r.0);
    cases.push(case(
        "bilinear_sample",
        |t, v| probe(t, t.bilinear_sample(v[0], v[1])?, 22),
        vec![r.u(&[1, 2, 5, 5]), coords],
    ));
    cases
}

fn random_block(cfg: &GraphConfig, r: &mut Rng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    DdmpParams::init(&mut store, "b", cfg, 0)?;
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    for name in names {
        let shape = store.get(&name)?.shape().to_vec();
        let scale = if name.contains("walk") { 0.05 } else { 0.3 };
        let fresh = if name.ends_with("alpha") {
            Tensor::full(&shape, 0.7)
        } else {
            Tensor::uniform(&shape, -scale, scale, &mut r.0)
        };
        store.insert(name, fresh);
    }
    Ok(store)
}

fn block_case(name: &str, cfg: GraphConfig, r: &mut Rng) -> Result<Case> {
    let store = random_block(&cfg, r)?;
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    let mut inputs = vec![r.u(&[1, cfg.channels, 6, 8])];
    let sizes = [(12, 16), (6, 8), (3, 4)];
    for &(h, w) in &sizes[..cfg.scales()] {
        inputs.push(r.u(&[1, cfg.channels, h, w]));
    }
    let n = cfg.scales() + 1;
    for name in &names {
        inputs.push(store.get(name)?.clone());
    }
    Ok(case(
        name,
        move |t, v| {
            let by_name: BTreeMap<&str, Var> = names.iter().map(String::as_str).zip(v[n..].iter().copied()).collect();
            let p = DdmpParams::bind_with("b", &cfg, |k| Ok(by_name.get(k).copied()))?;
            probe(t, ddmp_forward(t, v[0], &v[1..n], &p, &cfg)?, 30)
        },
        inputs,
    ))
}

fn ddmp_cases(r: &mut Rng) -> Result<Vec<Case>> {
    let base = GraphConfig {
        groups: 2,
        ..GraphConfig::with_channels(4)
    };
    let walk_w = Tensor::uniform(&[18, 4, 3, 3], -0.05, 0.05, &mut r.0);
    let mut cases = vec![case(
        "walks_and_sampling",
        |t, v| {
            let walk = ConvVars {
                weight: v[1],
                bias: Some(v[2]),
            };
            let walks = predict_walks(t, v[0], &walk)?;
            probe(t, sample_nodes(t, v[0], walks, 9)?, 31)
        },
        vec![r.u(&[1, 4, 5, 6]), walk_w, r.u(&[18])],
    )];
    cases.push(block_case("block_three_scales", base.clone(), r)?);
    cases.push(block_case(
        "block_softmax_weighted_sum",
        GraphConfig {
            affinity_mode: AffinityMode::Softmax,
            fusion_mode: FusionMode::WeightedSum,
            ..base.clone()
        },
        r,
    )?);
    cases.push(block_case(
        "block_deformable_filters",
        GraphConfig {
            filter_deformable: true,
            out_channels: Some(3),
            ..base.clone()
        },
        r,
    )?);
    cases.push(block_case(
        "block_two_iterations",
        GraphConfig {
            iterations: 2,
            stages: vec![3],
            ..base
        },
        r,
    )?);
    Ok(cases)
}

fn conv_vars(v: &[Var], i: usize) -> ConvVars {
    ConvVars {
        weight: v[i],
        bias: Some(v[i + 1]),
    }
}

fn head_cases(r: &mut Rng) -> Vec<Case> {
    let cfg = HeadConfig {
        num_anchors: 2,
        ..HeadConfig::new(3, 4, 2)
    };
    let inputs = vec![
        r.u(&[1, 3, 4, 5]),
        r.u(&[4, 3, 3, 3]),
        r.u(&[4]),
        r.u(&[cfg.cls_channels(), 4, 1, 1]),
        r.u(&[cfg.cls_channels()]),
        r.u(&[cfg.reg_channels(), 4, 1, 1]),
        r.u(&[cfg.reg_channels()]),
    ];
    vec![
        case(
            "detection_head",
            |t, v| {
                let head = HeadVars {
                    tower: conv_vars(v, 1),
                    cls: conv_vars(v, 3),
                    reg: conv_vars(v, 5),
                };
                let out = head.forward(t, v[0])?;
                t.add(probe(t, out.cls, 40)?, probe(t, out.reg, 41)?)
            },
            inputs,
        ),
        case(
            "cde_head",
            |t, v| probe(t, cde_apply(t, v[0], &conv_vars(v, 1), &conv_vars(v, 3))?, 42),
            vec![r.u(&[1, 3, 4, 5]), r.u(&[4, 3, 3, 3]), r.u(&[4]), r.u(&[3, 4, 1, 1]), r.u(&[3])],
        ),
    ]
}

fn loss_cases(r: &mut Rng) -> Vec<Case> {
    let cfg = HeadConfig {
        num_anchors: 2,
        ..HeadConfig::new(4, 4, 2)
    };
    let cells = 6;
    let (cc, rc) = (cfg.cls_channels(), cfg.reg_channels());
    let target = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut r.0);
    let mut samples = Vec::new();
    for anchor in 0..cells * cfg.num_anchors {
        let positive = anchor % 3 == 0;
        let mut t = [0.0; 11];
        for v in t.iter_mut() {
            *v = Tensor::uniform(&[1], -1.0, 1.0, &mut r.0).data()[0];
        }
        samples.push(Sample {
            image: 0,
            anchor,
            label: if positive { 1 + anchor % 2 } else { 0 },
            targets: positive.then_some(t),
            cde: positive.then_some((anchor / 2, [t[4], t[5], t[6]])),
        });
    }
    let lc = LossConfig {
        gamma: 0.0,
        cde_mode: CdeMode::Xyz,
        aux_weight: 0.5,
        ..LossConfig::default()
    };
    let scores = [0.2, 0.9, 0.5, 0.05];
    vec![
        case(
            "smooth_l1",
            move |t, v| smooth_l1(t, v[0], &target),
            vec![Tensor::uniform(&[3, 4], -2.0, 2.0, &mut r.0)],
        ),
        case("cross_entropy", |t, v| classification_loss(t, v[0], &[0, 2, 1]), vec![r.u(&[3, 3])]),
        case(
            "total_loss",
            move |t, v| total_loss(t, v[0], v[1], &scores, &LossConfig::default()),
            vec![r.pos(&[4]), r.pos(&[4])],
        ),
        case(
            "objective",
            move |t, v| {
                let head = HeadOutput { cls: v[0], reg: v[1] };
                Ok(objective(t, &head, Some(v[2]), &cfg, cells, &samples, &lc)?.total)
            },
            vec![
                r.u(&[1, cc, 2, 3]),
                r.u(&[1, rc, 2, 3]),
                r.u(&[1, 3, 2, 3]),
            ],
        ),
    ]
}

/// Runs every check of `scope` with inputs drawn from `seed`.
pub fn run_suite(scope: Scope, seed: u64, eps: f64) -> Result<Vec<CheckResult>> {
    let mut r = Rng(ChaCha8Rng::seed_from_u64(seed));
    let mut groups: Vec<(Scope, Vec<Case>)> = Vec::new();
    if scope.includes(Scope::Primitives) {
        groups.push((Scope::Primitives, primitive_cases(&mut r)));
    }
    if scope.includes(Scope::Ddmp) {
        groups.push((Scope::Ddmp, ddmp_cases(&mut r)?));
    }
    if scope.includes(Scope::Head) {
        groups.push((Scope::Head, head_cases(&mut r)));
    }
    if scope.includes(Scope::Losses) {
        groups.push((Scope::Losses, loss_cases(&mut r)));
    }
    let mut out = Vec::new();
    for (s, cases) in groups {
        for (name, f, inputs) in cases {
            out.push(CheckResult {
                scope: s,
                name,
                report: gradcheck(f, &inputs, eps),
            });
        }
    }
    Ok(out)
}
