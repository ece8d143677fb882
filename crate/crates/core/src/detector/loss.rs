//! Two-stage training targets and the supervised detection loss
//! `rpn_cls + rpn_reg + rcnn_cls + rcnn_reg`.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{decode_proposals, distinct_prefix, g2_forward, rpn_head, roi_forward, Anchors, DetectorConfig, Proposal};
use crate::autograd::{Tape, Var};
use crate::boxes::BBox;
use crate::params::Binding;
use crate::synth_data::BoxAnnotation;

/// ROI regression targets are divided by these before the loss.
pub const ROI_DELTA_STD: [f64; 4] = [0.1, 0.1, 0.2, 0.2];
const RPN_BETA: f64 = 1.0 / 9.0;
const RCNN_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RpnSample {
    pub anchor: usize,
    pub positive: bool,
    /// Regression target, meaningful for positives only.
    pub target: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiSample {
    pub bbox: BBox,
    /// 0 is background, `c + 1` is foreground class `c`.
    pub label: usize,
    pub target: [f64; 4],
}

/// Sampled anchors and ROIs for one image. Frozen once drawn, so the loss is a
/// smooth function of the parameters for a fixed plan.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingPlan {
    pub rpn: Vec<RpnSample>,
    pub rois: Vec<RoiSample>,
}

impl TrainingPlan {
    pub fn roi_boxes(&self) -> Vec<[f64; 4]> {
        self.rois.iter().map(|r| r.bbox.as_array()).collect()
    }
}

fn max_iou(b: &BBox, gt: &[BoxAnnotation]) -> Option<(usize, f64)> {
    gt.iter()
        .enumerate()
        .map(|(i, g)| (i, b.iou(&g.bbox)))
        .fold(None, |best, (i, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
}

pub fn plan_targets(
    config: &DetectorConfig,
    anchors: &Anchors,
    proposals: &[Proposal],
    gt: &[BoxAnnotation],
    rng: &mut ChaCha8Rng,
) -> TrainingPlan {
    // anchors
    let best: Vec<Option<(usize, f64)>> = anchors.boxes.iter().map(|a| max_iou(a, gt)).collect();
    let mut positive = vec![false; anchors.len()];
    for g in gt {
        let top = anchors.boxes.iter().map(|a| a.iou(&g.bbox)).fold(0.0, f64::max);
        if top <= 0.0 {
            continue;
        }
        for (ai, a) in anchors.boxes.iter().enumerate() {
            if a.iou(&g.bbox) == top {
                positive[ai] = true;
            }
        }
    }
    for (ai, b) in best.iter().enumerate() {
        if let Some((_, v)) = b {
            if *v >= config.rpn_pos_iou {
                positive[ai] = true;
            }
        }
    }
    let mut pos: Vec<usize> = (0..anchors.len()).filter(|&a| positive[a]).collect();
    let mut neg: Vec<usize> = (0..anchors.len())
        .filter(|&a| !positive[a] && best[a].map_or(0.0, |(_, v)| v) < config.rpn_neg_iou)
        .collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min((config.rpn_batch as f64 * config.rpn_pos_fraction) as usize);
    pos.truncate(n_pos);
    neg.truncate(config.rpn_batch - n_pos);
    let mut rpn = Vec::with_capacity(pos.len() + neg.len());
    for &a in &pos {
        // the assigned box is the anchor's best-overlapping ground truth
        let gi = anchor_match(&anchors.boxes[a], gt);
        rpn.push(RpnSample {
            anchor: a,
            positive: true,
            target: anchors.boxes[a].encode(&gt[gi].bbox),
        });
    }
    for &a in &neg {
        rpn.push(RpnSample {
            anchor: a,
            positive: false,
            target: [0.0; 4],
        });
    }

    // ROIs: current proposals plus the ground truth itself
    let mut cands: Vec<BBox> = distinct_prefix(proposals)
        .iter()
        .take(config.train_proposals)
        .map(|p| p.bbox)
        .filter(|b| b.area() >= 1.0)
        .collect();
    cands.extend(gt.iter().map(|g| g.bbox));
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for b in cands {
        match max_iou(&b, gt) {
            Some((gi, v)) if v >= config.roi_pos_iou => {
                let d = b.encode(&gt[gi].bbox);
                fg.push(RoiSample {
                    bbox: b,
                    label: gt[gi].class_id + 1,
                    target: [0, 1, 2, 3].map(|k| d[k] / ROI_DELTA_STD[k]),
                });
            }
            _ => bg.push(RoiSample {
                bbox: b,
                label: 0,
                target: [0.0; 4],
            }),
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    let n_fg = fg.len().min((config.roi_batch as f64 * config.roi_pos_fraction) as usize);
    fg.truncate(n_fg);
    bg.truncate(config.roi_batch - n_fg);
    fg.extend(bg);
    TrainingPlan { rpn, rois: fg }
}

/// Ground truth index with the highest IoU (first on ties).
fn anchor_match(a: &BBox, gt: &[BoxAnnotation]) -> usize {
    let mut best = 0;
    let mut bv = f64::NEG_INFINITY;
    for (i, g) in gt.iter().enumerate() {
        let v = a.iou(&g.bbox);
        if v > bv {
            bv = v;
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
pub struct DetLossVars {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub rcnn_cls: Var,
    pub rcnn_reg: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct DetLoss {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub rcnn_cls: f64,
    pub rcnn_reg: f64,
}

impl DetLoss {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.rcnn_cls + self.rcnn_reg
    }

    pub fn read(tape: &Tape, v: &DetLossVars) -> Self {
        DetLoss {
            rpn_cls: tape.value(v.rpn_cls).item(),
            rpn_reg: tape.value(v.rpn_reg).item(),
            rcnn_cls: tape.value(v.rcnn_cls).item(),
            rcnn_reg: tape.value(v.rcnn_reg).item(),
        }
    }

    pub fn add(&mut self, o: &DetLoss) {
        self.rpn_cls += o.rpn_cls;
        self.rpn_reg += o.rpn_reg;
        self.rcnn_cls += o.rcnn_cls;
        self.rcnn_reg += o.rcnn_reg;
    }
}

/// Loss terms from raw head outputs and a frozen plan. `cls`/`bbox` rows
/// must follow `plan.rois` order.
pub fn det_loss_terms(
    tape: &mut Tape,
    anchors: &Anchors,
    obj: Var,
    deltas: Var,
    cls: Var,
    bbox: Var,
    plan: &TrainingPlan,
    num_classes: usize,
) -> DetLossVars {
    let n_rpn = plan.rpn.len().max(1) as f64;
    let idx: Vec<usize> = plan.rpn.iter().map(|s| anchors.obj_index(s.anchor)).collect();
    let labels: Vec<f64> = plan.rpn.iter().map(|s| f64::from(u8::from(s.positive))).collect();
    let logits = tape.gather(obj, idx);
    let rpn_cls = tape.bce_logits(logits, labels, vec![1.0 / n_rpn; plan.rpn.len()]);

    let mut didx = Vec::new();
    let mut dtgt = Vec::new();
    for s in plan.rpn.iter().filter(|s| s.positive) {
        for k in 0..4 {
            didx.push(anchors.delta_index(s.anchor, k));
            dtgt.push(s.target[k]);
        }
    }
    let n = didx.len();
    let d = tape.gather(deltas, didx);
    let rpn_reg = tape.smooth_l1(d, dtgt, vec![1.0 / n_rpn; n], RPN_BETA);

    let n_roi = plan.rois.len().max(1) as f64;
    let labels: Vec<usize> = plan.rois.iter().map(|r| r.label).collect();
    let rcnn_cls = tape.softmax_ce(cls, labels, vec![1.0 / n_roi; plan.rois.len()]);

    let k = num_classes + 1;
    let mut bidx = Vec::new();
    let mut btgt = Vec::new();
    for (r, s) in plan.rois.iter().enumerate() {
        if s.label == 0 {
            continue;
        }
        for j in 0..4 {
            bidx.push(r * 4 * k + 4 * s.label + j);
            btgt.push(s.target[j]);
        }
    }
    let n = bidx.len();
    let b = tape.gather(bbox, bidx);
    let rcnn_reg = tape.smooth_l1(b, btgt, vec![1.0 / n_roi; n], RCNN_BETA);

    let total = tape.weighted_sum(&[(rpn_cls, 1.0), (rpn_reg, 1.0), (rcnn_cls, 1.0), (rcnn_reg, 1.0)]);
    DetLossVars {
        rpn_cls,
        rpn_reg,
        rcnn_cls,
        rcnn_reg,
        total,
    }
}

/// Everything a supervised branch pass leaves on the tape.
#[derive(Debug, Clone)]
pub struct SupervisedPass {
    pub high: Var,
    pub obj: Var,
    pub deltas: Var,
    pub loss: DetLossVars,
    pub plan: TrainingPlan,
    pub proposals: Vec<Proposal>,
}

/// G2 → RPN → sample → ROI head → detection loss for one labeled image.
#[allow(clippy::too_many_arguments)]
pub fn supervised_pass(
    tape: &mut Tape,
    config: &DetectorConfig,
    anchors: &Anchors,
    branch: Binding,
    low: Var,
    gt: &[BoxAnnotation],
    rng: &mut ChaCha8Rng,
    plan_override: Option<&TrainingPlan>,
) -> SupervisedPass {
    let high = g2_forward(tape, branch, low);
    let (obj, deltas) = rpn_head(tape, branch, high);
    let proposals = decode_proposals(
        config,
        anchors,
        tape.value(obj),
        tape.value(deltas),
        config.train_proposals.max(1),
    )
    .expect("anchor grid validated at construction");
    let plan = match plan_override {
        Some(p) => p.clone(),
        None => plan_targets(config, anchors, &proposals, gt, rng),
    };
    let (cls, bbox) = roi_forward(tape, branch, config, high, &plan.roi_boxes());
    let loss = det_loss_terms(tape, anchors, obj, deltas, cls, bbox, &plan, config.num_classes);
    SupervisedPass {
        high,
        obj,
        deltas,
        loss,
        plan,
        proposals,
    }
}
