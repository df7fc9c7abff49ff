//! Generates one synthetic frame, prints its labels and draws the image
//! and depth rasters as ASCII.
//!
//! cargo run --release --example synth_scene -- [index] [key=value ...]

use ddmp3d::config::ToyConfig;
use ddmp3d::synth::{generate_frame, Split};

const SHADES: &[u8] = b" .:-=+*#%@";

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let index: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let mut cfg = ToyConfig::default();
    for kv in args {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow::anyhow!("expected key=value, got `{kv}`"))?;
        cfg.set(k, v)?;
    }
    let frame = generate_frame(&cfg, Split::Train, index);
    println!("frame {} ({}x{})", frame.id, cfg.image_width, cfg.image_height);
    for r in &frame.labels {
        println!("{}", r.to_line());
    }

    let [_, _, h, w] = frame.image.dims4()?;
    let (step_y, step_x) = (4, 4);
    println!("\nimage (red channel)");
    for y in (0..h).step_by(step_y) {
        let row: String = (0..w)
            .step_by(step_x)
            .map(|x| {
                let v = frame.image.at4(0, 0, y, x).clamp(0.0, 1.0);
                SHADES[(v * (SHADES.len() - 1) as f64).round() as usize] as char
            })
            .collect();
        println!("{row}");
    }
    let far = frame.depth.data().iter().cloned().fold(0.0, f64::max);
    println!("\ndepth (darker is nearer, far plane {far:.0} m)");
    for y in (0..h).step_by(step_y) {
        let row: String = (0..w)
            .step_by(step_x)
            .map(|x| {
                let v = 1.0 - (frame.depth.at4(0, 0, y, x) / far).clamp(0.0, 1.0);
                SHADES[(v * (SHADES.len() - 1) as f64).round() as usize] as char
            })
            .collect();
        println!("{row}");
    }
    Ok(())
}
