//! Trains the four fusion arms on the same data and prints the AP table.
//!
//! cargo run --release --example ablation -- [iters] [key=value ...]

use std::time::Instant;

use ddmp3d::config::{Arm, ToyConfig};
use ddmp3d::eval::{EvalConfig, RecallMode};
use ddmp3d::synth::{generate_split, Split};
use ddmp3d::train::{ablate, ablation_table, Dataset};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = ToyConfig::default();
    if let Some(iters) = args.next() {
        cfg.iters = iters.parse()?;
    }
    for kv in args {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow::anyhow!("expected key=value, got `{kv}`"))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let train = Dataset::new(generate_split(&cfg, Split::Train))?;
    let val = generate_split(&cfg, Split::Val);
    let eval = EvalConfig {
        recall_modes: vec![RecallMode::R40],
        ..EvalConfig::uniform(0.5)
    };
    let arms = [Arm::Baseline, Arm::DdmpSingle, Arm::DdmpMulti, Arm::DdmpCde];
    let start = Instant::now();
    let rows = ablate(&cfg, &arms, &train, &val, &eval)?;
    print!("{}", ablation_table(&rows, RecallMode::R40));
    for r in &rows {
        println!("{:<12} final loss {:.4}", r.arm.name(), r.final_loss);
    }
    println!("{} iterations per arm, {:.1?}", cfg.iters, start.elapsed());
    Ok(())
}
