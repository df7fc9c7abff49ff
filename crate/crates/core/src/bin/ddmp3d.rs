use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ddmp3d::config::{Arm, ToyConfig};
use ddmp3d::eval::{evaluate, EvalConfig, RecallMode};
use ddmp3d::gradcheck::suite::{run_suite, Scope};
use ddmp3d::kitti::{list_frames, read_frame, write_frame, write_predictions};
use ddmp3d::losses::CdeMode;
use ddmp3d::synth::{generate_split, Split};
use ddmp3d::train::{ablate, ablation_table, loss_reduction, run_toytrain, Dataset, Trained};

#[derive(Parser)]
#[command(name = "ddmp3d", version, about = "Toy monocular 3D detection with depth-guided message propagation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Finite-difference checks of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
    /// Write the synthetic train and val frames.
    Synth {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train on synthetic frames and write the loss curve and checkpoint.
    Toytrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        det_weight: Option<f64>,
        #[arg(long)]
        aux_weight: Option<f64>,
        #[arg(long)]
        cde_mode: Option<CdeMode>,
        #[arg(long)]
        arm: Option<Arm>,
    },
    /// Write KITTI prediction files for a directory of frames.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average precision of prediction files against labels.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        /// Defaults to `calib` next to the label directory.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// R40 or R11; both when omitted.
        #[arg(long)]
        mode: Option<RecallMode>,
        /// One match threshold for every class instead of 0.7/0.5/0.5.
        #[arg(long)]
        iou: Option<f64>,
        /// Also write the machine-readable rows here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate each fusion arm under identical settings.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "baseline,ddmp-single,ddmp-multi,ddmp-cde")]
        arms: Vec<Arm>,
        #[arg(long, default_value = "R40")]
        mode: RecallMode,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<ToyConfig> {
        let mut cfg = match &self.config {
            Some(p) => ToyConfig::load(p)?,
            None => ToyConfig::default(),
        };
        if let Some(i) = self.iters {
            cfg.iters = i;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_manifest(out: &Path, cfg: &ToyConfig, command: &str) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = format!("command={command}\nseed={}\nconfig_hash={}\n", cfg.seed, cfg.hash());
    let path = out.join("manifest.txt");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn gradcheck_cmd(scope: Scope, seed: u64, eps: f64) -> anyhow::Result<ExitCode> {
    let start = Instant::now();
    let results = run_suite(scope, seed, eps)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        match &r.report {
            Ok(rep) => println!("{:<11} {:<28} max_rel_err {:.3e}  {status}", r.scope.name(), r.name, rep.max_rel_err),
            Err(e) => println!("{:<11} {:<28} error: {e}  {status}", r.scope.name(), r.name),
        }
        if !r.passed() {
            failed.push(format!("{}/{}", r.scope, r.name));
        }
    }
    println!("{} checks in {:.1?}", results.len(), start.elapsed());
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        println!("failing: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn synth_cmd(run: &RunArgs) -> anyhow::Result<ExitCode> {
    let cfg = run.config()?;
    for split in [Split::Train, Split::Val] {
        let dir = run.out.join(split.name());
        let frames = generate_split(&cfg, split);
        for f in &frames {
            write_frame(&dir, f)?;
        }
        println!("{}: {} frames in {}", split.name(), frames.len(), dir.display());
    }
    write_manifest(&run.out, &cfg, "synth")?;
    Ok(ExitCode::SUCCESS)
}

fn toytrain_cmd(
    run: &RunArgs,
    det_weight: Option<f64>,
    aux_weight: Option<f64>,
    cde_mode: Option<CdeMode>,
    arm: Option<Arm>,
) -> anyhow::Result<ExitCode> {
    let mut cfg = run.config()?;
    if let Some(w) = det_weight {
        cfg.loss.det_weight = w;
    }
    if let Some(w) = aux_weight {
        cfg.loss.aux_weight = w;
    }
    if let Some(m) = cde_mode {
        cfg.loss.cde_mode = m;
    }
    if let Some(a) = arm {
        cfg.arm = a;
    }
    cfg.validate()?;
    let start = Instant::now();
    let summary = run_toytrain(&cfg, &run.out, |r| {
        if r.iter % 25 == 0 {
            eprintln!("iter {:4}  total {:.4}", r.iter, r.total);
        }
    })?;
    println!(
        "{} iterations in {:.1?}; total loss {:.4} -> {:.4} ({:.1}% reduction over 10-iteration windows)",
        summary.records.len(),
        start.elapsed(),
        summary.records.first().map(|r| r.total).unwrap_or(f64::NAN),
        summary.records.last().map(|r| r.total).unwrap_or(f64::NAN),
        100.0 * loss_reduction(&summary.records, 10),
    );
    println!("config hash {}", summary.config_hash);
    println!("checkpoint {}", run.out.join("checkpoint").display());
    Ok(ExitCode::SUCCESS)
}

fn infer_cmd(checkpoint: &Path, frames: &Path, out: &Path) -> anyhow::Result<ExitCode> {
    let model = Trained::load(checkpoint)?;
    let ids = list_frames(frames)?;
    if ids.is_empty() {
        bail!("no frames under {}", frames.display());
    }
    let mut count = 0;
    for id in &ids {
        let frame = read_frame(frames, id)?;
        let dets = model.predict(std::slice::from_ref(&frame))?.remove(0);
        count += dets.len();
        write_predictions(&dets, &out.join(format!("{id}.txt")))?;
    }
    println!("{} frames, {count} detections written to {}", ids.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn evaluate_cmd(
    preds: &Path,
    gts: &Path,
    calib: Option<PathBuf>,
    mode: Option<RecallMode>,
    iou: Option<f64>,
    csv: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let calib = calib.unwrap_or_else(|| gts.parent().unwrap_or(Path::new(".")).join("calib"));
    let mut cfg = match iou {
        Some(t) => EvalConfig::uniform(t),
        None => EvalConfig::default(),
    };
    if let Some(m) = mode {
        cfg.recall_modes = vec![m];
    }
    cfg.validate()?;
    let report = evaluate(preds, gts, &calib, &cfg)?;
    print!("{}", report.to_table());
    if let Some(path) = csv {
        fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{} frames evaluated, {} warnings", report.frames, report.warnings.len());
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(if report.warnings.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn ablate_cmd(run: &RunArgs, arms: &[Arm], mode: RecallMode, iou: f64) -> anyhow::Result<ExitCode> {
    let cfg = run.config()?;
    let names: Vec<&str> = arms.iter().map(|a| a.name()).collect();
    eprintln!("training arms: {}", names.join(","));
    let train = Dataset::new(generate_split(&cfg, Split::Train))?;
    let val = generate_split(&cfg, Split::Val);
    let eval = EvalConfig {
        recall_modes: vec![mode],
        ..EvalConfig::uniform(iou)
    };
    let start = Instant::now();
    let rows = ablate(&cfg, arms, &train, &val, &eval)?;
    let table = format!("arms: {}\nCar AP ({mode}, IoU {iou})\n{}", names.join(","), ablation_table(&rows, mode));
    print!("{table}");
    println!("{} arms in {:.1?}", rows.len(), start.elapsed());
    write_manifest(&run.out, &cfg, "ablate")?;
    let path = run.out.join("ablation.txt");
    fs::write(&path, table).with_context(|| format!("writing {}", path.display()))?;
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ddmp3d::Error>() {
        Some(ddmp3d::Error::Diverged { .. }) | Some(ddmp3d::Error::NonFinite { .. }) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Gradcheck { scope, seed, eps } => gradcheck_cmd(*scope, *seed, *eps),
        Cmd::Synth { run } => synth_cmd(run),
        Cmd::Toytrain {
            run,
            det_weight,
            aux_weight,
            cde_mode,
            arm,
        } => toytrain_cmd(run, *det_weight, *aux_weight, *cde_mode, *arm),
        Cmd::Infer { checkpoint, frames, out } => infer_cmd(checkpoint, frames, out),
        Cmd::Evaluate {
            preds,
            gts,
            calib,
            mode,
            iou,
            csv,
        } => evaluate_cmd(preds, gts, calib.clone(), *mode, *iou, csv.clone()),
        Cmd::Ablate { run, arms, mode, iou } => ablate_cmd(run, arms, *mode, *iou),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
