use serde::{Deserialize, Serialize};

use crate::detector::{score_order, Detection};
use crate::error::{DmsnError, Result};
use crate::synth_data::BoxAnnotation;

/// Precision and recall after each ranked detection of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_id: usize,
    pub num_gt: usize,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub ap: Option<f64>,
}

/// Ranks every detection of `class_id` over all images and greedily matches
/// each to the unmatched ground truth of highest IoU in its image.
pub fn pr_curve(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<BoxAnnotation>],
    class_id: usize,
    iou_match_threshold: f64,
) -> Result<PrCurve> {
    if detections.len() != ground_truth.len() {
        return Err(DmsnError::Shape(format!(
            "{} detection lists for {} images",
            detections.len(),
            ground_truth.len()
        )));
    }
    let mut flat = Vec::new();
    for (img, dets) in detections.iter().enumerate() {
        for d in dets.iter().filter(|d| d.class_id == class_id) {
            if !d.bbox.is_valid() || !d.score.is_finite() {
                return Err(DmsnError::Precondition(format!("malformed detection {d:?}")));
            }
            flat.push((img, *d));
        }
    }
    let gts: Vec<Vec<&BoxAnnotation>> = ground_truth
        .iter()
        .map(|g| g.iter().filter(|a| a.class_id == class_id).collect())
        .collect();
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let scores: Vec<f64> = flat.iter().map(|(_, d)| d.score).collect();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(flat.len());
    let mut precision = Vec::with_capacity(flat.len());
    for i in score_order(&scores) {
        let (img, d) = &flat[i];
        let best = gts[*img]
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*img][*j])
            .map(|(j, g)| (j, g.bbox.iou(&d.bbox)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        match best {
            Some((j, v)) if v >= iou_match_threshold => {
                used[*img][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    let ap = (num_gt > 0).then(|| all_points_ap(&recall, &precision));
    Ok(PrCurve {
        class_id,
        num_gt,
        recall,
        precision,
        ap,
    })
}

/// Area under the precision envelope.
fn all_points_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = vec![0.0];
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len()).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
}

/// VOC all-points AP of one class; `None` when the class has no ground truth.
pub fn compute_ap(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<BoxAnnotation>],
    class_id: usize,
    iou_match_threshold: f64,
) -> Result<Option<f64>> {
    Ok(pr_curve(detections, ground_truth, class_id, iou_match_threshold)?.ap)
}
