//! Finite-difference check of every differentiable operation and block.
//!
//! cargo run --release --example gradcheck -- [primitives|ddmp|head|losses|all]

use ddmp3d::gradcheck::suite::{run_suite, Scope};
use ddmp3d::gradcheck::GRADCHECK_TOLERANCE;

fn main() -> anyhow::Result<()> {
    let scope = match std::env::args().nth(1).as_deref() {
        None | Some("all") => Scope::All,
        Some("primitives") => Scope::Primitives,
        Some("ddmp") => Scope::Ddmp,
        Some("head") => Scope::Head,
        Some("losses") => Scope::Losses,
        Some(other) => anyhow::bail!("unknown scope `{other}`"),
    };
    let results = run_suite(scope, 0, 1e-6)?;
    let mut worst: f64 = 0.0;
    for r in &results {
        worst = worst.max(r.max_rel_err());
        println!("{:<11} {:<28} {:.2e} {}", r.scope.name(), r.name, r.max_rel_err(), if r.passed() { "ok" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed, worst relative error {worst:.2e} (tolerance {GRADCHECK_TOLERANCE:.0e})", results.len());
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
