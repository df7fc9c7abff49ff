use super::*;
use crate::geometry::Box2d;
use proptest::prelude::*;

fn rec(kind: &str, bbox: Box2d, occ: i32, trunc: f64, x: f64, z: f64, score: Option<f64>) -> LabelRecord {
    LabelRecord {
        kind: kind.into(),
        truncation: trunc,
        occlusion: occ,
        alpha: 0.0,
        bbox,
        dims: (1.5, 1.6, 3.9),
        location: (x, 1.6, z),
        ry: 0.0,
        score,
    }
}

fn car_at(i: usize, score: Option<f64>) -> LabelRecord {
    let b = Box2d::new(100.0 * i as f64, 100.0, 100.0 * i as f64 + 60.0, 150.0);
    rec("Car", b, 0, 0.0, 5.0 * i as f64, 20.0, score)
}

fn height(h: f64, occ: i32, trunc: f64) -> LabelRecord {
    rec("Car", Box2d::new(0.0, 0.0, 50.0, h), occ, trunc, 0.0, 10.0, None)
}

#[test]
fn difficulty_examples() {
    assert_eq!(assign_difficulty(&height(45.0, 0, 0.1)), Difficulty::Easy);
    assert_eq!(assign_difficulty(&height(30.0, 1, 0.2)), Difficulty::Moderate);
    assert_eq!(assign_difficulty(&height(30.0, 2, 0.45)), Difficulty::Hard);
    let small = height(20.0, 0, 0.0);
    assert_eq!(assign_difficulty(&small), Difficulty::Ignored);
    assert!(TIERS.iter().all(|&t| !in_tier(&small, t)));
    assert_eq!(assign_difficulty(&height(50.0, 3, 0.0)), Difficulty::Ignored);
    assert_eq!(assign_difficulty(&height(50.0, 0, 0.6)), Difficulty::Ignored);
}

#[test]
fn tiers_are_cumulative() {
    let easy = height(45.0, 0, 0.1);
    assert!(TIERS.iter().all(|&t| in_tier(&easy, t)));
    let moderate = height(30.0, 1, 0.2);
    assert!(!in_tier(&moderate, Difficulty::Easy));
    assert!(in_tier(&moderate, Difficulty::Hard));
}

#[test]
fn hand_enumerated_curve() {
    use Outcome::*;
    let results = [(0.9, TruePositive), (0.8, FalsePositive), (0.7, TruePositive)];
    let r11 = compute_ap(&results, 2, RecallMode::R11);
    assert_eq!(r11.curve.len(), 3);
    assert!((r11.curve[2].0 - 1.0).abs() < 1e-15 && (r11.curve[2].1 - 2.0 / 3.0).abs() < 1e-15);
    assert!((r11.ap - 0.8485).abs() < 1e-4);
    assert!((r11.ap - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-15);
    let r40 = compute_ap(&results, 2, RecallMode::R40);
    assert!((r40.ap - (20.0 + 20.0 * 2.0 / 3.0) / 40.0).abs() < 1e-15);
}

#[test]
fn perfect_and_empty_detectors() {
    let perfect: Vec<(f64, Outcome)> = (0..7).map(|i| (1.0 - i as f64 * 0.1, Outcome::TruePositive)).collect();
    for mode in [RecallMode::R11, RecallMode::R40] {
        assert_eq!(compute_ap(&perfect, 7, mode).ap, 1.0);
        assert_eq!(compute_ap(&[], 7, mode).ap, 0.0);
        let none = compute_ap(&perfect, 0, mode);
        assert!(!none.defined);
        assert_eq!(none.ap, 0.0);
    }
}

#[test]
fn tied_scores_form_one_operating_point() {
    use Outcome::*;
    let a = compute_ap(&[(0.5, FalsePositive), (0.5, TruePositive)], 1, RecallMode::R11);
    let b = compute_ap(&[(0.5, TruePositive), (0.5, FalsePositive)], 1, RecallMode::R11);
    assert_eq!(a, b);
    assert_eq!(a.ap, 0.5);
}

#[test]
fn ignored_detections_do_not_count() {
    use Outcome::*;
    let a = compute_ap(&[(0.9, TruePositive), (0.95, Ignored)], 1, RecallMode::R40);
    assert_eq!(a.ap, 1.0);
}

#[test]
fn match_frame_rules() {
    let cfg = EvalConfig::default();
    let hard = rec("Car", Box2d::new(400.0, 100.0, 460.0, 120.0), 0, 0.0, 20.0, 20.0, None);
    let dc = rec("DontCare", Box2d::new(600.0, 100.0, 660.0, 150.0), -1, -1.0, -1000.0, -1000.0, None);
    let frame = FrameEval {
        gt: vec![car_at(0, None), car_at(1, None), hard.clone(), dc.clone()],
        pred: vec![
            car_at(0, Some(0.9)),
            car_at(0, Some(0.8)),
            LabelRecord { score: Some(0.7), kind: "Car".into(), ..hard },
            LabelRecord { score: Some(0.6), kind: "Car".into(), ..dc },
            LabelRecord { score: Some(0.5), kind: "Pedestrian".into(), ..car_at(1, None) },
        ],
    };
    let (out, n) = match_frame(&frame, 0, Difficulty::Moderate, Metric::Box3d, &cfg);
    assert_eq!(n, 2);
    let outcomes: Vec<Outcome> = out.iter().map(|o| o.1).collect();
    assert_eq!(
        outcomes,
        vec![Outcome::TruePositive, Outcome::FalsePositive, Outcome::Ignored, Outcome::Ignored]
    );
}

#[test]
fn identical_predictions_score_one() {
    let gts: Vec<LabelRecord> = (0..4).map(|i| car_at(i, None)).collect();
    let preds: Vec<LabelRecord> = gts.iter().map(|g| LabelRecord { score: Some(1.0), ..g.clone() }).collect();
    let rows = evaluate_frames(&[FrameEval { gt: gts, pred: preds }], &EvalConfig::default()).unwrap();
    for r in rows.iter().filter(|r| r.class == "Car") {
        assert_eq!(r.ap(), 1.0, "{r:?}");
    }
    assert!(rows.iter().filter(|r| r.class != "Car").all(|r| !r.result.defined));
    assert_eq!(rows.len(), 3 * 3 * 3 * 2);
}

#[test]
fn csv_rows_follow_tier_order() {
    let report = EvalReport {
        rows: evaluate_frames(&[FrameEval { gt: vec![car_at(0, None)], pred: vec![] }], &EvalConfig::default()).unwrap(),
        frames: 1,
        warnings: vec![],
    };
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("class,tier,metric,mode,ap"));
    assert_eq!(lines.next(), Some("Car,Moderate,2d,R40,0.000000"));
    assert_eq!(lines.next(), Some("Car,Moderate,2d,R11,0.000000"));
    assert!(csv.contains("Pedestrian,Moderate,2d,R40,nan"));
    let table = report.to_table();
    assert!(table.lines().next().unwrap().contains("Mod."));
    assert_eq!(table.lines().count(), 1 + 3 * 3 * 2);
}

#[test]
fn recall_mode_parsing() {
    assert_eq!("r40".parse::<RecallMode>().unwrap(), RecallMode::R40);
    assert_eq!("R11".parse::<RecallMode>().unwrap(), RecallMode::R11);
    assert!("R20".parse::<RecallMode>().is_err());
    assert_eq!(RecallMode::R40.points().len(), 40);
    assert_eq!(RecallMode::R11.points()[0], 0.0);
}

#[test]
fn config_validation() {
    assert!(EvalConfig::default().validate().is_ok());
    assert!(EvalConfig::uniform(0.0).validate().is_err());
    assert!(EvalConfig { recall_modes: vec![], ..EvalConfig::default() }.validate().is_err());
}

fn outcomes() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((0.0..1.0f64, any::<bool>()), 0..30)
}

proptest! {
    #[test]
    fn top_scored_true_positive_never_lowers_ap(dets in outcomes(), extra in 0usize..5) {
        let results: Vec<(f64, Outcome)> = dets
            .iter()
            .map(|&(s, tp)| (s, if tp { Outcome::TruePositive } else { Outcome::FalsePositive }))
            .collect();
        let tps = results.iter().filter(|r| r.1 == Outcome::TruePositive).count();
        let num_gt = tps + 1 + extra;
        let mut more = results.clone();
        more.push((2.0, Outcome::TruePositive));
        for mode in [RecallMode::R11, RecallMode::R40] {
            let base = compute_ap(&results, num_gt, mode).ap;
            let up = compute_ap(&more, num_gt, mode).ap;
            prop_assert!(up >= base - 1e-12, "{} -> {}", base, up);
            prop_assert!((0.0..=1.0).contains(&up));
        }
    }
}
