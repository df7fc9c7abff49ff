mod common;

use common::{iou_2d_ref, mc_iou_3d, mc_iou_bev, nms_reference};
use ddmp3d::geometry::{iou_2d, iou_3d, iou_bev, Box2d, Box3d, Calibration};
use ddmp3d::head::{nms_indices, Detection};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn box3d() -> impl Strategy<Value = Box3d> {
    (-3.0..3.0f64, 0.5..2.0f64, 5.0..11.0f64, 0.5..2.5f64, 0.5..2.5f64, 0.5..5.0f64, -3.2..3.2f64)
        .prop_map(|(x, y, z, h, w, l, ry)| Box3d { x, y, z, h, w, l, ry })
}

fn box2d() -> impl Strategy<Value = Box2d> {
    (0.0..200.0f64, 0.0..100.0f64, 1.0..120.0f64, 1.0..80.0f64).prop_map(|(l, t, w, h)| Box2d::new(l, t, l + w, t + h))
}

fn rotated(b: &Box3d, theta: f64) -> Box3d {
    // rotation about the camera y axis, matching the box's own ry convention
    let (s, c) = theta.sin_cos();
    Box3d {
        x: b.x * c + b.z * s,
        z: -b.x * s + b.z * c,
        ry: b.ry + theta,
        ..*b
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn overlaps_are_symmetric_and_bounded(a in box3d(), b in box3d()) {
        for f in [iou_bev, iou_3d] {
            let (ab, ba) = (f(&a, &b), f(&b, &a));
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        }
    }

    #[test]
    fn self_overlap_is_one(a in box3d()) {
        prop_assert!((iou_bev(&a, &a) - 1.0).abs() <= 1e-9);
        prop_assert!((iou_3d(&a, &a) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn overlaps_survive_a_rigid_motion(a in box3d(), b in box3d(), theta in -3.2..3.2f64, dx in -5.0..5.0f64, dz in -5.0..5.0f64) {
        let shift = |b: &Box3d| Box3d { x: b.x + dx, z: b.z + dz, ..*b };
        let (ra, rb) = (shift(&rotated(&a, theta)), shift(&rotated(&b, theta)));
        prop_assert!((iou_bev(&a, &b) - iou_bev(&ra, &rb)).abs() <= 1e-9);
        prop_assert!((iou_3d(&a, &b) - iou_3d(&ra, &rb)).abs() <= 1e-9);
    }

    #[test]
    fn half_turn_is_the_same_box(a in box3d(), b in box3d()) {
        let flipped = Box3d { ry: a.ry + std::f64::consts::PI, ..a };
        prop_assert!((iou_bev(&a, &b) - iou_bev(&flipped, &b)).abs() <= 1e-9);
    }

    #[test]
    fn volume_overlap_matches_bev_for_equal_slabs(a in box3d(), b in box3d()) {
        let b = Box3d { y: a.y, h: a.h, ..b };
        prop_assert!((iou_3d(&a, &b) - iou_bev(&a, &b)).abs() <= 1e-9);
    }

    #[test]
    fn image_overlap_matches_reference(a in box2d(), b in box2d()) {
        prop_assert!((iou_2d(&a, &b) - iou_2d_ref(&a, &b)).abs() <= 1e-12);
        prop_assert!((iou_2d(&a, &b) - iou_2d(&b, &a)).abs() <= 1e-15);
    }

    #[test]
    fn projection_round_trips(x in -10.0..10.0f64, y in -2.0..3.0f64, z in 2.0..60.0f64) {
        let calib = Calibration::pinhole(721.5, 609.6, 172.9);
        let (u, v) = calib.project((x, y, z)).unwrap();
        let (bx, by, bz) = calib.unproject(u, v, z).unwrap();
        prop_assert!((bx - x).abs() <= 1e-9 && (by - y).abs() <= 1e-9 && (bz - z).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn overlaps_agree_with_sampling(a in box3d(), dx in -1.5..1.5f64, dz in -1.5..1.5f64, dy in -0.6..0.6f64, ry in -3.2..3.2f64, seed in 0u64..1000) {
        let b = Box3d { x: a.x + dx, y: a.y + dy, z: a.z + dz, ry, ..a };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!((iou_bev(&a, &b) - mc_iou_bev(&a, &b, 300, &mut rng)).abs() <= 0.01);
        prop_assert!((iou_3d(&a, &b) - mc_iou_3d(&a, &b, 60, &mut rng)).abs() <= 0.01);
    }

    #[test]
    fn nms_matches_reference(boxes in prop::collection::vec((box2d(), 0u32..20), 1..40), thr in 0.1..0.9f64) {
        let calib = Calibration::pinhole(100.0, 50.0, 50.0);
        let dets: Vec<Detection> = boxes
            .iter()
            .map(|(bb, s)| {
                let b = Box3d { x: 0.0, y: 1.0, z: 10.0, h: 1.5, w: 1.6, l: 3.9, ry: 0.0 };
                Detection::from_box3d(&b, *bb, &calib, 0, *s as f64 / 20.0).unwrap()
            })
            .collect();
        let scored: Vec<(Box2d, f64)> = dets.iter().map(|d| (d.box2d, d.score)).collect();
        let mut got = nms_indices(&dets, thr);
        let mut want = nms_reference(&scored, thr);
        got.sort_unstable();
        want.sort_unstable();
        prop_assert_eq!(got, want);
    }
}
