//! KITTI-style AP over prediction and label directories.
//!
//! cargo run --release --example evaluate -- <pred_dir> <label_dir> [calib_dir]
//!
//! Without arguments, scores jittered copies of synthetic validation labels
//! so the effect of localisation noise on each metric is visible.

use std::path::{Path, PathBuf};

use ddmp3d::config::ToyConfig;
use ddmp3d::eval::{evaluate, evaluate_frames, find_row, Difficulty, EvalConfig, FrameEval, Metric, RecallMode};
use ddmp3d::synth::{generate_split, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() >= 2 {
        let (preds, gts) = (PathBuf::from(&args[0]), PathBuf::from(&args[1]));
        let calib = args
            .get(2)
            .map(PathBuf::from)
            .unwrap_or_else(|| gts.parent().unwrap_or(Path::new(".")).join("calib"));
        let report = evaluate(&preds, &gts, &calib, &EvalConfig::default())?;
        print!("{}", report.to_table());
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
        return Ok(());
    }

    let cfg = ToyConfig {
        val_frames: 40,
        ..ToyConfig::default()
    };
    let val = generate_split(&cfg, Split::Val);
    let eval = EvalConfig::uniform(0.5);
    println!("{:>10} {:>8} {:>8} {:>8}", "noise (m)", "2d", "bev", "3d");
    for noise in [0.0, 0.1, 0.2, 0.4, 0.8] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<FrameEval> = val
            .iter()
            .map(|f| {
                let pred = f
                    .labels
                    .iter()
                    .map(|g| {
                        let mut p = g.clone();
                        let j = |rng: &mut ChaCha8Rng| if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 };
                        p.location.0 += j(&mut rng);
                        p.location.2 += 2.0 * j(&mut rng);
                        let (dx, dy) = (10.0 * j(&mut rng), 10.0 * j(&mut rng));
                        p.bbox.left += dx;
                        p.bbox.right += dx;
                        p.bbox.top += dy;
                        p.bbox.bottom += dy;
                        p.score = Some(rng.gen_range(0.5..1.0));
                        p
                    })
                    .collect();
                FrameEval { gt: f.labels.clone(), pred }
            })
            .collect();
        let rows = evaluate_frames(&frames, &eval)?;
        let ap = |m| find_row(&rows, "Car", Difficulty::Moderate, m, RecallMode::R40).map(|r| r.ap()).unwrap_or(f64::NAN);
        println!("{noise:>10.1} {:>8.4} {:>8.4} {:>8.4}", ap(Metric::Box2d), ap(Metric::Bev), ap(Metric::Box3d));
    }
    Ok(())
}
