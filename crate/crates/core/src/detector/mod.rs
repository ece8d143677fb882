//! Two-stage detector with the spindle topology: one shared low-level
//! extractor (G1) feeding `M + 1` parameter-disjoint high-level branches, each
//! owning a second-stage extractor (G2), a region proposal network and an ROI
//! head. Branch `M` is the pseudo target subnet.

mod loss;
mod nms;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::boxes::BBox;
use crate::error::{DmsnError, Result};
use crate::params::{add_conv, add_linear, Binding, ParamSet};
use crate::synth_data::ImageSample;
use crate::tensor::Tensor;

pub use loss::{
    det_loss_terms, plan_targets, supervised_pass, DetLoss, DetLossVars, RoiSample, RpnSample, SupervisedPass,
    TrainingPlan, ROI_DELTA_STD,
};
pub use nms::{nms, score_order};

/// Input pixels per G1 feature cell.
pub const LOW_STRIDE: usize = 4;
/// Input pixels per G2 feature cell (anchor stride).
pub const HIGH_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// `(height, width)` of every input image.
    pub image_size: (usize, usize),
    pub num_classes: usize,
    pub g1_channels: [usize; 3],
    pub g2_channels: [usize; 3],
    pub rpn_channels: usize,
    pub roi_hidden: usize,
    pub roi_pool: usize,
    pub roi_samples: usize,
    pub anchor_scales: Vec<f64>,

    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_nms_iou: f64,
    pub train_proposals: usize,
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    pub roi_pos_iou: f64,

    pub test_proposals: usize,
    pub score_threshold: f64,
    pub detection_nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: (64, 64),
            num_classes: 3,
            g1_channels: [16, 32, 32],
            g2_channels: [32, 48, 48],
            rpn_channels: 32,
            roi_hidden: 64,
            roi_pool: 4,
            roi_samples: 2,
            anchor_scales: vec![8.0, 16.0, 32.0],
            rpn_batch: 64,
            rpn_pos_fraction: 0.5,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_nms_iou: 0.7,
            train_proposals: 48,
            roi_batch: 32,
            roi_pos_fraction: 0.25,
            roi_pos_iou: 0.5,
            test_proposals: 48,
            score_threshold: 0.05,
            detection_nms_iou: 0.5,
            max_detections: 20,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < HIGH_STRIDE || w < HIGH_STRIDE {
            return Err(DmsnError::Shape(format!(
                "image {h}x{w} smaller than one anchor cell ({HIGH_STRIDE} px)"
            )));
        }
        if self.num_classes == 0 || self.anchor_scales.is_empty() {
            return Err(DmsnError::Config("need at least one class and one anchor scale".into()));
        }
        if self.roi_pool == 0 || self.roi_samples == 0 || self.rpn_batch == 0 || self.roi_batch == 0 {
            return Err(DmsnError::Config("pooling and sampling sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn low_size(&self) -> (usize, usize) {
        let (h, w) = self.image_size;
        let s1 = |v: usize| v; // conv1 stride 1
        let s2 = |v: usize| (v - 1) / 2 + 1; // 3x3, pad 1, stride 2
        (s2(s2(s1(h))), s2(s2(s1(w))))
    }

    pub fn high_size(&self) -> (usize, usize) {
        let (h, w) = self.low_size();
        ((h - 1) / 2 + 1, (w - 1) / 2 + 1)
    }

    pub fn num_anchors_per_cell(&self) -> usize {
        self.anchor_scales.len()
    }

    /// Feature width after the ROI pooling, the ROI head's fan-in.
    pub fn roi_features(&self) -> usize {
        self.g2_channels[2] * self.roi_pool * self.roi_pool
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub activations: Tensor,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    /// Objectness logit.
    pub objectness: f64,
    /// 1 = highest objectness.
    pub rank: usize,
    /// Anchor that produced this proposal.
    pub anchor: usize,
}

impl Proposal {
    pub fn probability(&self) -> f64 {
        crate::autograd::sigmoid_scalar(self.objectness)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Foreground class in `[0, C)`.
    pub class_id: usize,
    pub score: f64,
    pub subnet_id: usize,
}

#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub proposals: Vec<Proposal>,
    /// Per-proposal probabilities over `C + 1` classes, background first.
    pub class_scores: Vec<Vec<f64>>,
    /// Per-proposal `4 * (C + 1)` regression offsets.
    pub box_deltas: Vec<Vec<f64>>,
    pub high_feature: FeatureMap,
}

/// Anchor grid over the G2 feature map. Anchor index order is
/// `(cell_y, cell_x, scale)`, which is also the proposal tie-break order.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchors {
    pub boxes: Vec<BBox>,
    pub height: usize,
    pub width: usize,
    pub per_cell: usize,
}

impl Anchors {
    pub fn new(config: &DetectorConfig) -> Self {
        let (height, width) = config.high_size();
        let per_cell = config.num_anchors_per_cell();
        let s = HIGH_STRIDE as f64;
        let mut boxes = Vec::with_capacity(height * width * per_cell);
        for y in 0..height {
            for x in 0..width {
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                for &scale in &config.anchor_scales {
                    let h = 0.5 * scale;
                    boxes.push(BBox::new(cx - h, cy - h, cx + h, cy + h));
                }
            }
        }
        Anchors {
            boxes,
            height,
            width,
            per_cell,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    fn split(&self, anchor: usize) -> (usize, usize, usize) {
        let a = anchor % self.per_cell;
        let cell = anchor / self.per_cell;
        (cell / self.width, cell % self.width, a)
    }

    /// Flat index into the `[A, H, W]` objectness map.
    pub fn obj_index(&self, anchor: usize) -> usize {
        let (y, x, a) = self.split(anchor);
        (a * self.height + y) * self.width + x
    }

    /// Flat index into the `[4A, H, W]` delta map.
    pub fn delta_index(&self, anchor: usize, d: usize) -> usize {
        let (y, x, a) = self.split(anchor);
        ((a * 4 + d) * self.height + y) * self.width + x
    }
}

/// Parameters for the shared extractor plus every branch.
#[derive(Debug, Clone, PartialEq)]
pub struct SpindleDetector {
    pub config: DetectorConfig,
    anchors: Anchors,
    pub g1: ParamSet,
    /// Source branches `0..M`, then the pseudo branch when present.
    pub branches: Vec<ParamSet>,
    pub num_sources: usize,
    pub has_pseudo: bool,
}

/// Initialise the G1 parameters.
pub fn init_g1(config: &DetectorConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let he = 2f64.sqrt();
    let c = config.g1_channels;
    let mut p = ParamSet::new();
    add_conv(&mut p, rng, "conv1", 3, c[0], 3, he);
    add_conv(&mut p, rng, "conv2", c[0], c[1], 3, he);
    add_conv(&mut p, rng, "conv3", c[1], c[2], 3, he);
    p
}

/// Initialise one high-level branch (G2, RPN, ROI head).
pub fn init_branch(config: &DetectorConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let he = 2f64.sqrt();
    let c1 = config.g1_channels[2];
    let c = config.g2_channels;
    let a = config.num_anchors_per_cell();
    let k = config.num_classes + 1;
    let mut p = ParamSet::new();
    add_conv(&mut p, rng, "g2/conv1", c1, c[0], 3, he);
    add_conv(&mut p, rng, "g2/conv2", c[0], c[1], 3, he);
    add_conv(&mut p, rng, "g2/conv3", c[1], c[2], 3, he);
    add_conv(&mut p, rng, "rpn/conv", c[2], config.rpn_channels, 3, he);
    add_conv(&mut p, rng, "rpn/obj", config.rpn_channels, a, 1, 0.1);
    add_conv(&mut p, rng, "rpn/delta", config.rpn_channels, 4 * a, 1, 0.05);
    add_linear(&mut p, rng, "roi/fc1", config.roi_features(), config.roi_hidden, he);
    add_linear(&mut p, rng, "roi/cls", config.roi_hidden, k, 0.1);
    add_linear(&mut p, rng, "roi/bbox", config.roi_hidden, 4 * k, 0.02);
    p
}

pub fn g1_forward(tape: &mut Tape, p: Binding, x: Var) -> Var {
    let mut h = x;
    for (name, stride) in [("conv1", 1), ("conv2", 2), ("conv3", 2)] {
        let w = p.bind(tape, &format!("{name}/w"));
        let b = p.bind(tape, &format!("{name}/b"));
        h = tape.conv2d(h, w, b, stride, 1);
        h = tape.relu(h);
    }
    h
}

pub fn g2_forward(tape: &mut Tape, p: Binding, f1: Var) -> Var {
    let mut h = f1;
    for (name, stride) in [("g2/conv1", 2), ("g2/conv2", 1), ("g2/conv3", 1)] {
        let w = p.bind(tape, &format!("{name}/w"));
        let b = p.bind(tape, &format!("{name}/b"));
        h = tape.conv2d(h, w, b, stride, 1);
        h = tape.relu(h);
    }
    h
}

/// Returns `(objectness logits [A,H,W], deltas [4A,H,W])`.
pub fn rpn_head(tape: &mut Tape, p: Binding, f2: Var) -> (Var, Var) {
    let w = p.bind(tape, "rpn/conv/w");
    let b = p.bind(tape, "rpn/conv/b");
    let h = tape.conv2d(f2, w, b, 1, 1);
    let h = tape.relu(h);
    let w = p.bind(tape, "rpn/obj/w");
    let b = p.bind(tape, "rpn/obj/b");
    let obj = tape.conv2d(h, w, b, 1, 0);
    let w = p.bind(tape, "rpn/delta/w");
    let b = p.bind(tape, "rpn/delta/b");
    let deltas = tape.conv2d(h, w, b, 1, 0);
    (obj, deltas)
}

/// Returns `(class logits [R, C+1], deltas [R, 4(C+1)])`.
pub fn roi_forward(tape: &mut Tape, p: Binding, config: &DetectorConfig, f2: Var, boxes: &[[f64; 4]]) -> (Var, Var) {
    let pooled = tape.roi_align(
        f2,
        boxes,
        1.0 / HIGH_STRIDE as f64,
        config.roi_pool,
        config.roi_samples,
    );
    let w = p.bind(tape, "roi/fc1/w");
    let b = p.bind(tape, "roi/fc1/b");
    let h = tape.linear(pooled, w, b);
    let h = tape.relu(h);
    let w = p.bind(tape, "roi/cls/w");
    let b = p.bind(tape, "roi/cls/b");
    let cls = tape.linear(h, w, b);
    let w = p.bind(tape, "roi/bbox/w");
    let b = p.bind(tape, "roi/bbox/b");
    let deltas = tape.linear(h, w, b);
    (cls, deltas)
}

/// Decodes every anchor, suppresses overlaps and keeps the `n_keep` best,
/// padding by repeating the lowest-ranked survivor. Ties in objectness keep
/// anchor-index order.
pub fn decode_proposals(
    config: &DetectorConfig,
    anchors: &Anchors,
    obj: &Tensor,
    deltas: &Tensor,
    n_keep: usize,
) -> Result<Vec<Proposal>> {
    if n_keep == 0 {
        return Err(DmsnError::Precondition("n_keep must be at least 1".into()));
    }
    if anchors.is_empty() {
        return Err(DmsnError::Shape("feature map smaller than one anchor cell".into()));
    }
    let (h, w) = config.image_size;
    let od = obj.data();
    let dd = deltas.data();
    let scores: Vec<f64> = (0..anchors.len()).map(|a| od[anchors.obj_index(a)]).collect();
    let boxes: Vec<BBox> = anchors
        .boxes
        .iter()
        .enumerate()
        .map(|(a, ab)| {
            let d = [0, 1, 2, 3].map(|k| dd[anchors.delta_index(a, k)]);
            ab.decode(d).clip(w as f64, h as f64)
        })
        .collect();
    let keep = nms(&boxes, &scores, config.rpn_nms_iou)?;
    let mut out: Vec<Proposal> = keep
        .iter()
        .take(n_keep)
        .map(|&a| Proposal {
            bbox: boxes[a],
            objectness: scores[a],
            rank: 0,
            anchor: a,
        })
        .collect();
    let last = *out.last().expect("nms keeps the top box");
    while out.len() < n_keep {
        out.push(last);
    }
    for (i, p) in out.iter_mut().enumerate() {
        p.rank = i + 1;
    }
    Ok(out)
}

/// Proposals that are not padding repeats.
pub fn distinct_prefix(proposals: &[Proposal]) -> &[Proposal] {
    let n = proposals.len();
    let mut end = n;
    while end > 1 && proposals[end - 1].anchor == proposals[end - 2].anchor {
        end -= 1;
    }
    &proposals[..end]
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = crate::autograd::log_sum_exp(row);
    row.iter().map(|v| (v - lse).exp()).collect()
}

impl SpindleDetector {
    /// All branches start from the same parameter draw unless
    /// `shared_branch_init` is false.
    pub fn new(
        config: DetectorConfig,
        num_sources: usize,
        has_pseudo: bool,
        seed: u64,
        shared_branch_init: bool,
    ) -> Result<Self> {
        config.validate()?;
        if num_sources == 0 {
            return Err(DmsnError::Config("need at least one source branch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g1 = init_g1(&config, &mut rng);
        let n = num_sources + usize::from(has_pseudo);
        let first = init_branch(&config, &mut rng);
        let mut branches = vec![first];
        for _ in 1..n {
            if shared_branch_init {
                branches.push(branches[0].clone());
            } else {
                branches.push(init_branch(&config, &mut rng));
            }
        }
        Ok(SpindleDetector {
            anchors: Anchors::new(&config),
            config,
            g1,
            branches,
            num_sources,
            has_pseudo,
        })
    }

    /// Rebuilds a detector from stored parameter sets.
    pub fn from_parts(
        config: DetectorConfig,
        g1: ParamSet,
        branches: Vec<ParamSet>,
        num_sources: usize,
        has_pseudo: bool,
    ) -> Result<Self> {
        config.validate()?;
        if branches.len() != num_sources + usize::from(has_pseudo) || num_sources == 0 {
            return Err(DmsnError::Config(format!(
                "{} branches for {num_sources} sources (pseudo: {has_pseudo})",
                branches.len()
            )));
        }
        Ok(SpindleDetector {
            anchors: Anchors::new(&config),
            config,
            g1,
            branches,
            num_sources,
            has_pseudo,
        })
    }

    pub fn anchors(&self) -> &Anchors {
        &self.anchors
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn pseudo_id(&self) -> Option<usize> {
        self.has_pseudo.then_some(self.num_sources)
    }

    pub fn branch(&self, id: usize) -> Result<&ParamSet> {
        self.branches.get(id).ok_or(DmsnError::UnknownBranch {
            branch: id,
            available: self.branches.len(),
        })
    }

    fn check_image(&self, image: &ImageSample) -> Result<Tensor> {
        let (h, w) = self.config.image_size;
        if image.pixels.height != h || image.pixels.width != w {
            return Err(DmsnError::Precondition(format!(
                "image {}x{} does not match detector input {h}x{w}",
                image.pixels.height, image.pixels.width
            )));
        }
        if image.pixels.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DmsnError::Precondition("pixels outside [0, 1]".into()));
        }
        Ok(input_tensor(image))
    }

    pub fn extract_low(&self, image: &ImageSample) -> Result<FeatureMap> {
        let x = self.check_image(image)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let f = g1_forward(&mut tape, Binding::frozen(&self.g1), xv);
        let activations = tape.value(f).clone();
        if !activations.is_finite() {
            return Err(DmsnError::Numeric("non-finite low-level activations".into()));
        }
        Ok(FeatureMap {
            activations,
            stride: LOW_STRIDE,
        })
    }

    pub fn extract_high(&self, branch_id: usize, fmap: &FeatureMap) -> Result<FeatureMap> {
        let p = self.branch(branch_id)?;
        let mut tape = Tape::new();
        let f1 = tape.constant(fmap.activations.clone());
        let f2 = g2_forward(&mut tape, Binding::frozen(p), f1);
        Ok(FeatureMap {
            activations: tape.value(f2).clone(),
            stride: HIGH_STRIDE,
        })
    }

    /// Top-`n_keep` ranked proposals of a branch on a high-level feature map.
    pub fn rpn_forward(&self, branch_id: usize, fmap: &FeatureMap, n_keep: usize) -> Result<Vec<Proposal>> {
        let p = self.branch(branch_id)?;
        let s = fmap.activations.shape();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 {
            return Err(DmsnError::Shape("feature map smaller than one anchor cell".into()));
        }
        let anchors = self.anchors();
        if (s[1], s[2]) != (anchors.height, anchors.width) {
            return Err(DmsnError::Shape(format!(
                "feature map {}x{} does not match anchor grid {}x{}",
                s[1], s[2], anchors.height, anchors.width
            )));
        }
        let mut tape = Tape::new();
        let f2 = tape.constant(fmap.activations.clone());
        let (obj, deltas) = rpn_head(&mut tape, Binding::frozen(p), f2);
        decode_proposals(&self.config, anchors, tape.value(obj), tape.value(deltas), n_keep)
    }

    /// Class probabilities and regression offsets per proposal. Proposals
    /// with area below one square pixel are reported as certain background.
    pub fn roi_head(
        &self,
        branch_id: usize,
        fmap: &FeatureMap,
        proposals: &[Proposal],
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if proposals.is_empty() {
            return Err(DmsnError::Precondition("roi_head needs at least one proposal".into()));
        }
        let p = self.branch(branch_id)?;
        let mut tape = Tape::new();
        let f2 = tape.constant(fmap.activations.clone());
        let boxes: Vec<[f64; 4]> = proposals.iter().map(|p| p.bbox.as_array()).collect();
        let (cls, deltas) = roi_forward(&mut tape, Binding::frozen(p), &self.config, f2, &boxes);
        let k = self.config.num_classes + 1;
        let cv = tape.value(cls).data();
        let dv = tape.value(deltas).data();
        let mut scores = Vec::with_capacity(proposals.len());
        let mut offs = Vec::with_capacity(proposals.len());
        for (r, prop) in proposals.iter().enumerate() {
            if prop.bbox.area() < 1.0 {
                let mut bg = vec![0.0; k];
                bg[0] = 1.0;
                scores.push(bg);
                offs.push(vec![0.0; 4 * k]);
            } else {
                scores.push(softmax(&cv[r * k..(r + 1) * k]));
                offs.push(dv[r * 4 * k..(r + 1) * 4 * k].to_vec());
            }
        }
        Ok((scores, offs))
    }

    pub fn branch_outputs(&self, branch_id: usize, low: &FeatureMap, n_keep: usize) -> Result<BranchOutputs> {
        let high = self.extract_high(branch_id, low)?;
        let proposals = self.rpn_forward(branch_id, &high, n_keep)?;
        let (class_scores, box_deltas) = self.roi_head(branch_id, &high, &proposals)?;
        Ok(BranchOutputs {
            proposals,
            class_scores,
            box_deltas,
            high_feature: high,
        })
    }

    /// Final detections of one branch on a low-level feature map.
    pub fn detect(&self, branch_id: usize, low: &FeatureMap) -> Result<Vec<Detection>> {
        let out = self.branch_outputs(branch_id, low, self.config.test_proposals)?;
        let n = distinct_prefix(&out.proposals).len();
        Ok(postprocess(
            &self.config,
            &out.proposals[..n],
            &out.class_scores[..n],
            &out.box_deltas[..n],
            branch_id,
        ))
    }
}

/// Network input: `[3, H, W]` pixels mapped from `[0, 1]` to `[-1, 1]`.
pub fn input_tensor(image: &ImageSample) -> Tensor {
    let mut t = image.pixels.to_chw();
    for v in t.data_mut() {
        *v = 2.0 * *v - 1.0;
    }
    t
}

/// Per-class decoding, score thresholding and NMS of ROI-head outputs.
pub fn postprocess(
    config: &DetectorConfig,
    proposals: &[Proposal],
    class_scores: &[Vec<f64>],
    box_deltas: &[Vec<f64>],
    subnet_id: usize,
) -> Vec<Detection> {
    let (h, w) = config.image_size;
    let mut dets = Vec::new();
    for c in 1..=config.num_classes {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (r, prop) in proposals.iter().enumerate() {
            let s = class_scores[r][c];
            if s < config.score_threshold || prop.bbox.area() < 1.0 {
                continue;
            }
            let d = &box_deltas[r][4 * c..4 * c + 4];
            let d = [
                d[0] * ROI_DELTA_STD[0],
                d[1] * ROI_DELTA_STD[1],
                d[2] * ROI_DELTA_STD[2],
                d[3] * ROI_DELTA_STD[3],
            ];
            let b = prop.bbox.decode(d).clip(w as f64, h as f64);
            if b.area() < 1.0 {
                continue;
            }
            boxes.push(b);
            scores.push(s);
        }
        let keep = nms(&boxes, &scores, config.detection_nms_iou).expect("equal lengths");
        for i in keep {
            dets.push(Detection {
                bbox: boxes[i],
                class_id: c - 1,
                score: scores[i],
                subnet_id,
            });
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(config.max_detections);
    dets
}

#[cfg(test)]
mod tests;
