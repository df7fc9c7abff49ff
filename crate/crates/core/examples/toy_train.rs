//! Trains the default toy detector and reports validation AP.
//!
//! cargo run --release --example toy_train -- [out_dir] [key=value ...]

use std::path::PathBuf;
use std::time::Instant;

use ddmp3d::config::ToyConfig;
use ddmp3d::eval::{find_row, Difficulty, EvalConfig, Metric, RecallMode};
use ddmp3d::synth::{generate_split, Split};
use ddmp3d::train::{loss_reduction, run_toytrain};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy_run".into()));
    let mut cfg = ToyConfig::default();
    for kv in args {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow::anyhow!("expected key=value, got `{kv}`"))?;
        cfg.set(k, v)?;
    }
    let start = Instant::now();
    let run = run_toytrain(&cfg, &out, |r| {
        if r.iter % 10 == 0 {
            println!(
                "iter {:4} total {:.4} cls {:.4} 2d {:.4} 3d {:.4} dep {:.4} |g| {:.2}",
                r.iter, r.total, r.cls, r.box2d, r.box3d, r.depth, r.grad_norm
            );
        }
    })?;
    println!("trained in {:.1?}, loss reduced by {:.1}%", start.elapsed(), 100.0 * loss_reduction(&run.records, 10));

    let val = generate_split(&cfg, Split::Val);
    let rows = run.model.evaluate(&val, &EvalConfig::uniform(0.5))?;
    for metric in [Metric::Box2d, Metric::Bev, Metric::Box3d] {
        let ap = find_row(&rows, "Car", Difficulty::Moderate, metric, RecallMode::R40).map(|r| r.ap()).unwrap_or(f64::NAN);
        println!("Car moderate {:<3} AP@0.5 (R40): {ap:.4}", metric.name());
    }
    println!("total {:.1?}", start.elapsed());
    Ok(())
}
