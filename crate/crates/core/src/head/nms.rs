use super::Detection;
use crate::geometry::iou_2d;

pub const NMS_IOU: f64 = 0.4;

/// Greedy suppression in descending score order (lower index first on
/// ties); a box is dropped when its IoU with a kept box exceeds `iou`.
/// Returns the kept indices in visiting order.
pub fn nms_indices(dets: &[Detection], iou: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou_2d(&dets[k].box2d, &dets[i].box2d) <= iou) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms_2d(dets: &[Detection], iou: f64) -> Vec<Detection> {
    nms_indices(dets, iou).into_iter().map(|i| dets[i]).collect()
}
