//! Anchor templates, target encoding and decoding for one car.
//!
//! cargo run --release --example box_codec

use ddmp3d::geometry::{iou_2d, iou_3d, Box3d};
use ddmp3d::head::anchors::template_heights;
use ddmp3d::head::{decode_boxes, encode_targets, generate_anchors, AnchorPriors, Detection, NUM_TEMPLATES};
use ddmp3d::synth::{calibration, project_box};
use ddmp3d::config::ToyConfig;

fn main() -> anyhow::Result<()> {
    let heights: Vec<String> = template_heights().iter().map(|h| format!("{h:.0}")).collect();
    println!("{NUM_TEMPLATES} templates, heights {} px", heights.join(" "));

    let cfg = ToyConfig::default();
    let calib = calibration(&cfg);
    let car = Box3d { x: 1.2, y: 1.65, z: 10.0, h: 1.5, w: 1.6, l: 3.9, ry: -1.5 };
    let bb = project_box(&car, &calib)?;
    let gt = Detection::from_box3d(&car, bb, &calib, 0, 1.0)?;
    println!("car 2D box {:.1} {:.1} {:.1} {:.1}, projected centre {:.1} {:.1}", bb.left, bb.top, bb.right, bb.bottom, gt.proj.0, gt.proj.1);

    let grid = generate_anchors((cfg.image_height / 16, cfg.image_width / 16), 16, &AnchorPriors::default());
    let (best, iou) = grid
        .anchors
        .iter()
        .enumerate()
        .map(|(i, a)| (i, iou_2d(&a.box2d(), &bb)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let anchor = grid.anchors[best];
    let (cell, template) = grid.split(best);
    println!("best of {} anchors: cell {cell}, template {template}, IoU {iou:.3}", grid.len());

    let t = encode_targets(&anchor, &gt)?;
    let names = ["tx", "ty", "tw", "th", "txp", "typ", "tz", "tw3", "th3", "tl3", "try"];
    for (n, v) in names.iter().zip(t.to_array()) {
        println!("  {n:<4} {v:+.4}");
    }
    let back = decode_boxes(&anchor, &t, &calib)?;
    let b3 = Box3d {
        x: back.center.0,
        y: back.center.1 + back.dims.0 / 2.0,
        z: back.center.2,
        h: back.dims.0,
        w: back.dims.1,
        l: back.dims.2,
        ry: back.ry,
    };
    println!("decoded 3D IoU with the car: {:.6}", iou_3d(&b3, &car));
    Ok(())
}
