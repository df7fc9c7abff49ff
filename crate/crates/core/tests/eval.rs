mod common;

use common::*;
use ddmp3d::eval::{compute_ap, evaluate_frames, Difficulty, EvalConfig, Metric, Outcome, RecallMode};
use ddmp3d::geometry::{iou_3d, iou_bev, Box2d, Box3d};
use ddmp3d::head::CLASSES;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn oracle_for(frames: &[ddmp3d::eval::FrameEval], row: &ddmp3d::eval::ApRow, cfg: &EvalConfig) -> Option<f64> {
    let class = CLASSES.iter().position(|&c| c == row.class).unwrap();
    let tier = match row.tier {
        Difficulty::Easy => &REF_TIERS[0],
        Difficulty::Moderate => &REF_TIERS[1],
        Difficulty::Hard => &REF_TIERS[2],
        Difficulty::Ignored => unreachable!(),
    };
    let metric = match row.metric {
        Metric::Box2d => RefMetric::Image,
        Metric::Bev => RefMetric::Bev,
        Metric::Box3d => RefMetric::Volume,
    };
    let points = match row.mode {
        RecallMode::R11 => r11_points(),
        RecallMode::R40 => r40_points(),
    };
    let overlap = |a: &Box3d, b: &Box3d, vol: bool| if vol { iou_3d(a, b) } else { iou_bev(a, b) };
    brute_force_ap(frames, row.class, tier, metric, cfg.iou_thresholds[class], &points, &overlap)
}

fn outcomes() -> impl Strategy<Value = Vec<(f64, Outcome)>> {
    prop::collection::vec(
        (0u32..10, prop_oneof![Just(Outcome::TruePositive), Just(Outcome::FalsePositive), Just(Outcome::Ignored)]),
        0..30,
    )
    .prop_map(|v| v.into_iter().map(|(s, o)| (s as f64 / 10.0, o)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn evaluator_matches_brute_force(seed in 0u64..10_000, iou in prop_oneof![Just(0.5), Just(0.7)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = random_fixture(8, &mut rng);
        let cfg = EvalConfig::uniform(iou);
        for row in evaluate_frames(&frames, &cfg).unwrap() {
            match oracle_for(&frames, &row, &cfg) {
                Some(want) => {
                    prop_assert!(row.result.defined);
                    prop_assert!((want - row.ap()).abs() <= 1e-9, "{} {:?} {:?} {:?}: {} vs {}", row.class, row.tier, row.metric, row.mode, row.ap(), want);
                }
                None => prop_assert!(!row.result.defined),
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ap_is_a_fraction(results in outcomes(), extra_gt in 0usize..5) {
        let tps = results.iter().filter(|r| r.1 == Outcome::TruePositive).count();
        for mode in [RecallMode::R11, RecallMode::R40] {
            let r = compute_ap(&results, tps + extra_gt, mode);
            if tps + extra_gt == 0 {
                prop_assert!(!r.defined);
            } else {
                prop_assert!((0.0..=1.0).contains(&r.ap));
                prop_assert!(r.curve.windows(2).all(|w| w[1].0 >= w[0].0));
            }
        }
    }

    #[test]
    fn a_trailing_false_positive_never_helps(results in outcomes(), extra_gt in 1usize..5) {
        let tps = results.iter().filter(|r| r.1 == Outcome::TruePositive).count();
        let mut worse = results.clone();
        worse.push((-1.0, Outcome::FalsePositive));
        for mode in [RecallMode::R11, RecallMode::R40] {
            let a = compute_ap(&results, tps + extra_gt, mode).ap;
            let b = compute_ap(&worse, tps + extra_gt, mode).ap;
            prop_assert!(b <= a + 1e-15);
        }
    }

    #[test]
    fn turning_a_false_positive_into_a_hit_never_hurts(results in outcomes(), pick in 0usize..30, extra_gt in 1usize..5) {
        let fps: Vec<usize> = (0..results.len()).filter(|&i| results[i].1 == Outcome::FalsePositive).collect();
        prop_assume!(!fps.is_empty());
        let tps = results.iter().filter(|r| r.1 == Outcome::TruePositive).count();
        let mut better = results.clone();
        better[fps[pick % fps.len()]].1 = Outcome::TruePositive;
        let n = tps + extra_gt;
        for mode in [RecallMode::R11, RecallMode::R40] {
            prop_assert!(compute_ap(&better, n, mode).ap + 1e-15 >= compute_ap(&results, n, mode).ap);
        }
    }

    #[test]
    fn ignored_detections_do_not_count(results in outcomes(), extra_gt in 1usize..5) {
        let tps = results.iter().filter(|r| r.1 == Outcome::TruePositive).count();
        let kept: Vec<(f64, Outcome)> = results.iter().copied().filter(|r| r.1 != Outcome::Ignored).collect();
        for mode in [RecallMode::R11, RecallMode::R40] {
            prop_assert_eq!(compute_ap(&results, tps + extra_gt, mode).ap, compute_ap(&kept, tps + extra_gt, mode).ap);
        }
    }
}

#[test]
fn perfect_predictions_score_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut frames = random_fixture(10, &mut rng);
    for f in &mut frames {
        f.pred = f
            .gt
            .iter()
            .filter(|g| CLASSES.contains(&g.kind.as_str()))
            .map(|g| {
                let mut p = g.clone();
                p.score = Some(0.9);
                p
            })
            .collect();
    }
    for row in evaluate_frames(&frames, &EvalConfig::default()).unwrap() {
        if row.result.defined {
            assert_eq!(row.ap(), 1.0, "{} {:?} {:?} {:?}", row.class, row.tier, row.metric, row.mode);
        }
    }
}

#[test]
fn hand_computed_eleven_point_ap() {
    let r = compute_ap(
        &[(0.9, Outcome::TruePositive), (0.8, Outcome::FalsePositive), (0.7, Outcome::TruePositive)],
        2,
        RecallMode::R11,
    );
    // precision 1 up to recall 0.5, then 2/3 up to recall 1
    let want = (6.0 + 5.0 * 2.0 / 3.0) / 11.0;
    assert!((r.ap - want).abs() <= 1e-12);
    assert_eq!(r.curve, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
}

#[test]
fn tied_scores_enter_together() {
    let a = compute_ap(&[(0.5, Outcome::FalsePositive), (0.5, Outcome::TruePositive)], 1, RecallMode::R40);
    let b = compute_ap(&[(0.5, Outcome::TruePositive), (0.5, Outcome::FalsePositive)], 1, RecallMode::R40);
    assert_eq!(a, b);
    assert!((a.ap - 0.5).abs() <= 1e-12);
}

#[test]
fn recall_grids() {
    for (mode, want) in [(RecallMode::R11, r11_points()), (RecallMode::R40, r40_points())] {
        let got = mode.points();
        assert_eq!(got.len(), want.len());
        assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
    let b = Box3d { x: 0.0, y: 1.5, z: 10.0, h: 1.5, w: 1.6, l: 3.9, ry: 0.0 };
    let g = record("Car", Box2d::new(0.0, 0.0, 50.0, 50.0), &b, None);
    assert!((Metric::Box3d.overlap(&g, &g) - 1.0).abs() <= 1e-12);
}
