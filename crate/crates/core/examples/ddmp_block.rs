//! Runs one depth-guided propagation block on random features and reports
//! how far the refined map moves from its input, for both affinity modes.
//!
//! cargo run --release --example ddmp_block

use ddmp3d::ddmp::{ddmp_forward, AffinityMode, DdmpParams, GraphConfig};
use ddmp3d::params::ParamStore;
use ddmp3d::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (c, h, w) = (8, 12, 20);
    let image = Tensor::uniform(&[1, c, h, w], 0.0, 1.0, &mut rng);
    // three depth scales at strides 1, 2 and 4 relative to the image map
    let depths: Vec<Tensor> = [1, 2, 4]
        .iter()
        .map(|s| Tensor::uniform(&[1, c, h / s, w / s], -1.0, 1.0, &mut rng))
        .collect();

    for mode in [AffinityMode::Raw, AffinityMode::Softmax] {
        let cfg = GraphConfig {
            channels: c,
            affinity_mode: mode,
            ..GraphConfig::default()
        };
        let mut store = ParamStore::new();
        DdmpParams::init(&mut store, "block", &cfg, 3)?;
        // move off the identity initialisation so the message is visible
        let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.insert(&name, Tensor::uniform(&shape, -0.2, 0.2, &mut rng));
        }

        let tape = Tape::new();
        let params = DdmpParams::bind(&tape, &store, "block", &cfg)?;
        let x = tape.constant(image.clone());
        let d: Vec<_> = depths.iter().map(|t| tape.constant(t.clone())).collect();
        let y = ddmp_forward(&tape, x, &d, &params, &cfg)?;
        let loss = tape.mean(y)?;
        tape.backward(loss)?;

        let out = tape.value(y);
        let moved = out.max_abs_diff(&image.map(|v| v.max(0.0)))?;
        println!("{mode:?} affinities: output {:?}, max |y - relu(x)| {moved:.4}", out.shape());
        for (name, g) in tape.param_grads() {
            let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            println!("  d mean(y) / d {name:<28} |g| {norm:.3e}");
        }
    }
    Ok(())
}
