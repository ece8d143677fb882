use serde::{Deserialize, Serialize};

use crate::detector::{nms, Detection};
use crate::error::{DmsnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Union of every subnet's detections, then class-wise NMS.
    Union,
    /// Union-then-NMS boxes rescored by the weighted mean, over subnets, of
    /// each subnet's best overlapping score (0 where a subnet has none).
    ScoreAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOptions {
    pub mode: FusionMode,
    pub iou_threshold: f64,
    /// Per-subnet weights for `ScoreAverage`, indexed by `subnet_id`.
    /// Uniform when absent.
    pub weights: Option<Vec<f64>>,
}

impl Default for FusionOptions {
    fn default() -> Self {
        FusionOptions {
            mode: FusionMode::Union,
            iou_threshold: 0.5,
            weights: None,
        }
    }
}

/// Merges the detections of all subnets for one image. Output is sorted by
/// class, then descending score.
pub fn fuse_predictions(per_subnet: &[Vec<Detection>], iou_threshold: f64) -> Result<Vec<Detection>> {
    let mut all: Vec<(usize, Detection)> = Vec::new();
    for dets in per_subnet {
        for (i, d) in dets.iter().enumerate() {
            if !d.bbox.is_valid() || !d.score.is_finite() {
                return Err(DmsnError::Precondition(format!("malformed detection {d:?}")));
            }
            all.push((i, *d));
        }
    }
    // equal scores resolve by (subnet_id, index) whatever the list order
    all.sort_by_key(|(i, d)| (d.subnet_id, *i));
    let mut classes: Vec<usize> = all.iter().map(|(_, d)| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for c in classes {
        let group: Vec<Detection> = all.iter().filter(|(_, d)| d.class_id == c).map(|(_, d)| *d).collect();
        let boxes: Vec<_> = group.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = group.iter().map(|d| d.score).collect();
        out.extend(nms(&boxes, &scores, iou_threshold)?.into_iter().map(|k| group[k]));
    }
    Ok(out)
}

/// `fuse_predictions` followed by the rescoring selected in `options`.
pub fn fuse_with(per_subnet: &[Vec<Detection>], options: &FusionOptions) -> Result<Vec<Detection>> {
    let fused = fuse_predictions(per_subnet, options.iou_threshold)?;
    if options.mode == FusionMode::Union {
        return Ok(fused);
    }
    let n = per_subnet
        .iter()
        .flatten()
        .map(|d| d.subnet_id + 1)
        .max()
        .unwrap_or(0)
        .max(per_subnet.len());
    let weights = match &options.weights {
        Some(w) if w.len() < n => {
            return Err(DmsnError::Config(format!("{} fusion weights for {n} subnets", w.len())));
        }
        Some(w) => w.clone(),
        None => vec![1.0; n],
    };
    let wsum: f64 = weights[..n].iter().sum();
    if !(wsum > 0.0) {
        return Err(DmsnError::Config("fusion weights must have a positive sum".into()));
    }
    let mut best = vec![vec![0.0f64; n]; fused.len()];
    for d in per_subnet.iter().flatten() {
        for (k, f) in fused.iter().enumerate() {
            if (f.class_id == d.class_id && f.bbox.iou(&d.bbox) > options.iou_threshold) || *f == *d {
                best[k][d.subnet_id] = best[k][d.subnet_id].max(d.score);
            }
        }
    }
    let mut out: Vec<Detection> = fused
        .iter()
        .zip(&best)
        .map(|(f, b)| Detection {
            score: b.iter().zip(&weights).map(|(s, w)| s * w).sum::<f64>() / wsum,
            ..*f
        })
        .collect();
    out.sort_by(|a, b| a.class_id.cmp(&b.class_id).then(b.score.total_cmp(&a.score)));
    Ok(out)
}
