//! Training, inference and ablation on synthetic frames.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::config::{Arm, ToyConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_frames, find_row, ApRow, Difficulty, EvalConfig, FrameEval, Metric, RecallMode};
use crate::geometry::Box2d;
use crate::head::{
    cde_targets, decode_outputs, generate_anchors, AnchorGrid, AnchorPriors, DecodeConfig, Detection, PriorAccumulator, TargetStats,
};
use crate::kitti::{Frame, LabelRecord};
use crate::losses::{assign_samples, objective, Sample};
use crate::model::{forward, stack_batch, ModelSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const PRIORS_FILE: &str = "priors.txt";
pub const TARGET_STATS_FILE: &str = "target_stats.txt";
const Z_MEAN_KEY: &str = "z_mean";

/// Frames with their ground truth in detection form.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub gts: Vec<Vec<Detection>>,
    pub dont_care: Vec<Vec<Box2d>>,
}

impl Dataset {
    /// Records of unknown classes other than DontCare are dropped.
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let mut gts = Vec::with_capacity(frames.len());
        let mut dont_care = Vec::with_capacity(frames.len());
        for f in &frames {
            let mut g = Vec::new();
            let mut dc = Vec::new();
            for l in &f.labels {
                if l.is_dont_care() {
                    dc.push(l.bbox);
                } else if l.class_id().is_some() {
                    g.push(l.to_detection(&f.calib)?);
                }
            }
            gts.push(g);
            dont_care.push(dc);
        }
        Ok(Self { frames, gts, dont_care })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Mean ground-truth depth, or `fallback` without objects.
    pub fn mean_depth(&self, fallback: f64) -> f64 {
        let zs: Vec<f64> = self.gts.iter().flatten().map(|g| g.center.2).collect();
        if zs.is_empty() {
            fallback
        } else {
            zs.iter().sum::<f64>() / zs.len() as f64
        }
    }

    /// Per-template 3D priors from the anchors each GT matches.
    pub fn fit_priors(&self, spec: &ModelSpec) -> AnchorPriors {
        let grid = generate_anchors(spec.feature_hw(), spec.stride(), &AnchorPriors::default());
        let mut acc = PriorAccumulator::default();
        for g in &self.gts {
            acc.add_frame(&grid, g);
        }
        acc.finish()
    }

    /// Spread of the encoded targets of every positive anchor of `grid`.
    pub fn fit_target_stats(&self, grid: &AnchorGrid, positive_iou: f64) -> Result<TargetStats> {
        let mut all = Vec::new();
        for (gts, dc) in self.gts.iter().zip(&self.dont_care) {
            for s in assign_samples(0, grid, gts, dc, &[], positive_iou)? {
                all.extend(s.targets);
            }
        }
        Ok(TargetStats::fit(&all))
    }
}

/// SGD with momentum and optional global-norm clipping. Frozen
/// parameters are never updated.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    velocity: BTreeMap<String, Tensor>,
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

impl Sgd {
    pub fn new(cfg: &ToyConfig) -> Self {
        Self {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let trainable: BTreeMap<String, Tensor> = grads
            .iter()
            .filter(|(n, _)| !store.is_frozen(n))
            .map(|(n, g)| (n.clone(), g.clone()))
            .collect();
        let norm = global_norm(&trainable);
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "sgd" });
        }
        let clip = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        for (name, g) in trainable {
            let p = store.get_mut(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            let wd = self.weight_decay;
            let step = g.zip_map(p, |gv, pv| gv * clip + wd * pv)?;
            let v = match self.velocity.remove(&name) {
                Some(v) => v.zip_map(&step, |vv, sv| self.momentum * vv + sv)?,
                None => step,
            };
            *p = p.zip_map(&v, |pv, vv| pv - self.lr * vv)?;
            self.velocity.insert(name, v);
        }
        Ok(norm)
    }
}

/// Losses of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub cls: f64,
    pub box2d: f64,
    pub box3d: f64,
    pub depth: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub const LOSS_CSV_HEADER: &str = "iter,L_cls,L_2d,L_3d,L_dep,total";

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6},{:.6}", r.iter, r.cls, r.box2d, r.box3d, r.depth, r.total);
    }
    s
}

/// Relative drop of the mean total loss between the first and last
/// `window` iterations.
pub fn loss_reduction(records: &[LossRecord], window: usize) -> f64 {
    let w = window.clamp(1, records.len().max(1));
    if records.is_empty() {
        return 0.0;
    }
    let mean = |r: &[LossRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    let first = mean(&records[..w]);
    let last = mean(&records[records.len() - w..]);
    if first <= 0.0 {
        0.0
    } else {
        1.0 - last / first
    }
}

/// A trained network with everything inference needs.
#[derive(Clone, Debug)]
pub struct Trained {
    pub cfg: ToyConfig,
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub priors: AnchorPriors,
    pub stats: TargetStats,
    pub z_mean: f64,
}

impl Trained {
    pub fn grid(&self) -> AnchorGrid {
        generate_anchors(self.spec.feature_hw(), self.spec.stride(), &self.priors)
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            score_threshold: self.cfg.score_threshold,
            top_k: self.cfg.top_k,
            nms_iou: self.cfg.nms_iou,
            stats: self.stats,
        }
    }

    /// Parameters, anchor priors, target statistics and the run
    /// configuration under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut map = self.cfg.to_map();
        map.insert(Z_MEAN_KEY.into(), format!("{:e}", self.z_mean));
        self.store.save(dir, &map)?;
        self.priors.save(&dir.join(PRIORS_FILE))?;
        self.stats.save(&dir.join(TARGET_STATS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, mut map) = ParamStore::load(dir)?;
        let z = map
            .remove(Z_MEAN_KEY)
            .ok_or_else(|| Error::invalid(format!("{}: checkpoint has no {Z_MEAN_KEY}", dir.display())))?;
        let z_mean = z
            .parse()
            .map_err(|_| Error::invalid(format!("bad {Z_MEAN_KEY} `{z}`")))?;
        let cfg = ToyConfig::from_map(&map)?;
        let spec = ModelSpec::new(&cfg)?;
        let priors = AnchorPriors::load(&dir.join(PRIORS_FILE))?;
        let stats = TargetStats::load(&dir.join(TARGET_STATS_FILE))?;
        Ok(Self {
            cfg,
            spec,
            store,
            priors,
            stats,
            z_mean,
        })
    }

    /// Detections of each frame, without the auxiliary head.
    pub fn predict(&self, frames: &[Frame]) -> Result<Vec<Vec<Detection>>> {
        let grid = self.grid();
        let dc = self.decode_config();
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            let tape = Tape::new();
            let o = forward(&tape, &self.store, &self.spec, &f.image, &f.depth, false)?;
            let cls = tape.value(o.head.cls);
            let reg = tape.value(o.head.reg);
            out.push(decode_outputs(&cls, &reg, &self.spec.head, &grid, &f.calib, 0, &dc)?);
        }
        Ok(out)
    }

    /// Average precision rows of the predictions on `frames`.
    pub fn evaluate(&self, frames: &[Frame], cfg: &EvalConfig) -> Result<Vec<ApRow>> {
        let preds = self.predict(frames)?;
        let evals: Vec<FrameEval> = frames
            .iter()
            .zip(&preds)
            .map(|(f, p)| FrameEval {
                gt: f.labels.clone(),
                pred: p.iter().map(LabelRecord::from_detection).collect(),
            })
            .collect();
        evaluate_frames(&evals, cfg)
    }
}

/// Samples of every image in a batch, with standardised box targets.
pub fn batch_samples(
    data: &Dataset,
    idx: &[usize],
    grid: &AnchorGrid,
    spec: &ModelSpec,
    z_mean: f64,
    positive_iou: f64,
    stats: &TargetStats,
) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (b, &i) in idx.iter().enumerate() {
        let cde = cde_targets(&data.gts[i], spec.feature_hw(), spec.stride(), z_mean);
        let mut s = assign_samples(b, grid, &data.gts[i], &data.dont_care[i], &cde, positive_iou)?;
        for t in s.iter_mut().filter_map(|s| s.targets.as_mut()) {
            *t = stats.normalize(t);
        }
        samples.extend(s);
    }
    Ok(samples)
}

/// Trains from scratch; `on_iter` sees every iteration's losses.
pub fn train(cfg: &ToyConfig, data: &Dataset, mut on_iter: impl FnMut(&LossRecord)) -> Result<(Trained, Vec<LossRecord>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training frames"));
    }
    let spec = ModelSpec::new(cfg)?;
    let priors = data.fit_priors(&spec);
    let z_mean = data.mean_depth((cfg.z_min + cfg.z_max) / 2.0);
    let grid = generate_anchors(spec.feature_hw(), spec.stride(), &priors);
    let stats = if cfg.normalize_targets {
        data.fit_target_stats(&grid, cfg.loss.positive_iou)?
    } else {
        TargetStats::default()
    };
    let mut model = Trained {
        cfg: cfg.clone(),
        store: spec.init(cfg.seed)?,
        spec,
        priors,
        stats,
        z_mean,
    };
    let mut sgd = Sgd::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.min(data.len()) {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().unwrap());
        }
        let images: Vec<&Tensor> = idx.iter().map(|&i| &data.frames[i].image).collect();
        let depths: Vec<&Tensor> = idx.iter().map(|&i| &data.frames[i].depth).collect();
        let tape = Tape::new();
        let out = forward(&tape, &model.store, &model.spec, &stack_batch(&images)?, &stack_batch(&depths)?, true)?;
        let samples = batch_samples(data, &idx, &grid, &model.spec, z_mean, cfg.loss.positive_iou, &model.stats)?;
        let obj = objective(&tape, &out.head, out.cde, &model.spec.head, grid.cells(), &samples, &cfg.loss)?;
        let scalar = |v| tape.value(v).item();
        let mut rec = LossRecord {
            iter,
            cls: scalar(obj.cls)?,
            box2d: scalar(obj.box2d)?,
            box3d: scalar(obj.box3d)?,
            depth: scalar(obj.depth)?,
            total: scalar(obj.total)?,
            grad_norm: f64::NAN,
        };
        if ![rec.cls, rec.box2d, rec.box3d, rec.depth, rec.total].iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                iter,
                msg: format!("non-finite loss {rec:?}"),
            });
        }
        tape.backward(obj.total)?;
        rec.grad_norm = sgd.step(&mut model.store, &tape.param_grads()).map_err(|e| Error::Diverged {
            iter,
            msg: e.to_string(),
        })?;
        on_iter(&rec);
        records.push(rec);
    }
    Ok((model, records))
}

/// Result of [`run_toytrain`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<LossRecord>,
    pub model: Trained,
    pub config_hash: String,
}

/// Generates data, trains and writes `loss.csv`, `manifest.txt`, the
/// checkpoint and the frames under `out`.
pub fn run_toytrain(cfg: &ToyConfig, out: &Path, on_iter: impl FnMut(&LossRecord)) -> Result<RunSummary> {
    use crate::synth::{generate_split, Split};
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for split in [Split::Train, Split::Val] {
        let dir = out.join("data").join(split.name());
        for f in generate_split(cfg, split) {
            crate::kitti::write_frame(&dir, &f)?;
        }
    }
    let data = Dataset::new(generate_split(cfg, Split::Train))?;
    let (model, records) = train(cfg, &data, on_iter)?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("loss.csv", loss_csv(&records))?;
    let config_hash = cfg.hash();
    write(
        "manifest.txt",
        format!("command=toytrain\nseed={}\nconfig_hash={config_hash}\n{}", cfg.seed, cfg.to_text()),
    )?;
    model.save(&out.join("checkpoint"))?;
    Ok(RunSummary {
        records,
        model,
        config_hash,
    })
}

/// One arm of an ablation.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub arm: Arm,
    pub rows: Vec<ApRow>,
    pub final_loss: f64,
}

impl AblationRow {
    pub fn ap(&self, class: &str, tier: Difficulty, metric: Metric, mode: RecallMode) -> f64 {
        find_row(&self.rows, class, tier, metric, mode).map(|r| r.ap()).unwrap_or(f64::NAN)
    }
}

/// Trains every arm with otherwise identical settings.
pub fn ablate(cfg: &ToyConfig, arms: &[Arm], train_data: &Dataset, val: &[Frame], eval: &EvalConfig) -> Result<Vec<AblationRow>> {
    arms.iter()
        .map(|&arm| {
            let c = ToyConfig { arm, ..cfg.clone() };
            let (model, records) = train(&c, train_data, |_| {})?;
            Ok(AblationRow {
                arm,
                rows: model.evaluate(val, eval)?,
                final_loss: records.last().map(|r| r.total).unwrap_or(f64::NAN),
            })
        })
        .collect()
}

/// `arm` followed by Car AP at Moderate/Easy/Hard for each metric.
pub fn ablation_table(rows: &[AblationRow], mode: RecallMode) -> String {
    let tiers = [Difficulty::Moderate, Difficulty::Easy, Difficulty::Hard];
    let mut s = format!("{:<12}", "arm");
    for m in [Metric::Box2d, Metric::Bev, Metric::Box3d] {
        for t in tiers {
            let _ = write!(s, " {:>9}", format!("{}/{}", m.name(), &t.name()[..3]));
        }
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:<12}", r.arm.name());
        for m in [Metric::Box2d, Metric::Bev, Metric::Box3d] {
            for t in tiers {
                let _ = write!(s, " {:>9.4}", r.ap("Car", t, m, mode));
            }
        }
        s.push('\n');
    }
    s
}
