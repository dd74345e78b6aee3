use crate::error::Result;
use crate::head::Detection;
use crate::scenesim::{GroundTruthBox, ObjectClass};

use super::rotated_bev_iou;

/// Detections and ground truth of one scene, both in the ego frame.
#[derive(Clone, Copy, Debug)]
pub struct Frame<'a> {
    pub detections: &'a [Detection],
    pub ground_truth: &'a [GroundTruthBox],
}

fn in_range(center: [f64; 3], range_xy: f64) -> bool {
    center[0].abs() <= range_xy && center[1].abs() <= range_xy
}

/// Single-scene AP; `None` when the class has no ground truth in range.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    iou_thr: f64,
    class: ObjectClass,
    range_xy: f64,
) -> Result<Option<f64>> {
    average_precision_frames(&[Frame { detections, ground_truth }], iou_thr, class, range_xy)
}

/// AP pooled over scenes: detections are ranked globally by score (ties by
/// scene, then input order) and matched greedily within their own scene.
/// The PR curve is integrated under its precision envelope at every recall
/// step.
pub fn average_precision_frames(
    frames: &[Frame],
    iou_thr: f64,
    class: ObjectClass,
    range_xy: f64,
) -> Result<Option<f64>> {
    let gts: Vec<Vec<&GroundTruthBox>> = frames
        .iter()
        .map(|f| f.ground_truth.iter().filter(|g| g.class == class && in_range(g.center, range_xy)).collect())
        .collect();
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Ok(None);
    }
    let mut ranked: Vec<(usize, usize, &Detection)> = frames
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| {
            f.detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.class == class && in_range(d.center, range_xy))
                .map(move |(di, d)| (fi, di, d))
        })
        .collect();
    ranked.sort_by(|a, b| b.2.score.total_cmp(&a.2.score).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (k, (fi, _, det)) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts[*fi].iter().enumerate() {
            if claimed[*fi][gi] {
                continue;
            }
            let iou = rotated_bev_iou(&det.geometry(), &g.geometry())?;
            if iou > iou_thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            claimed[*fi][gi] = true;
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }

    let mut envelope = vec![0.0; curve.len()];
    let mut running = 0.0f64;
    for (k, &(_, precision)) in curve.iter().enumerate().rev() {
        running = running.max(precision);
        envelope[k] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(recall, _), p) in curve.iter().zip(&envelope) {
        ap += (recall - prev_recall) * p;
        prev_recall = recall;
    }
    Ok(Some(ap))
}

/// Mean over the classes that have an AP.
pub fn mean_ap(aps: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}
