//! Fusion of per-subnet detections, VOC-style AP/mAP and run reports.

mod ap;
mod fusion;
mod report;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Detection, SpindleDetector};
use crate::error::{DmsnError, Result};
use crate::synth_data::{BoxAnnotation, Dataset, ImageSample};
use crate::trainer::{file_sha256, load_checkpoint, TrainState};

pub use ap::{compute_ap, pr_curve, PrCurve};
pub use fusion::{fuse_predictions, fuse_with, FusionMode, FusionOptions};
pub use report::{write_report, RunReport};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub fusion: FusionOptions,
    pub iou_match_threshold: f64,
    /// Count classes without ground truth as AP 0 in the mean.
    pub include_empty_classes: bool,
    /// Scale score-average fusion weights by the checkpoint's source β,
    /// with the pseudo subnet weighted like the mean source.
    pub beta_weights: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            fusion: FusionOptions::default(),
            iou_match_threshold: 0.5,
            include_empty_classes: false,
            beta_weights: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain: u32,
    pub num_images: usize,
    pub class_names: Vec<String>,
    /// Ground-truth instances per class.
    pub num_gt: Vec<usize>,
    /// Fused AP per class; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    /// Subnets that took part in fusion.
    pub subnets: Vec<usize>,
    /// Standalone mAP of each entry of `subnets`.
    pub per_subnet_map: Vec<f64>,
    pub options: EvalOptions,
    pub config_fingerprint: String,
    pub checkpoint_sha256: Option<String>,
    pub pr_curves: Vec<PrCurve>,
}

impl EvalReport {
    pub fn best_subnet_map(&self) -> f64 {
        self.per_subnet_map.iter().cloned().fold(0.0, f64::max)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| DmsnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DmsnError::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Mean over classes with ground truth, or over all classes with empty ones
/// scored 0.
pub fn mean_ap(per_class: &[Option<f64>], include_empty_classes: bool) -> f64 {
    let vals: Vec<f64> = if include_empty_classes {
        per_class.iter().map(|a| a.unwrap_or(0.0)).collect()
    } else {
        per_class.iter().flatten().copied().collect()
    };
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn class_aps(
    dets: &[Vec<Detection>],
    gts: &[Vec<BoxAnnotation>],
    num_classes: usize,
    thr: f64,
) -> Result<Vec<PrCurve>> {
    (0..num_classes).map(|c| pr_curve(dets, gts, c, thr)).collect()
}

/// Runs G1 once per image, every listed subnet on the shared features,
/// fuses and scores against the annotations of `samples`.
pub fn evaluate(
    detector: &SpindleDetector,
    subnets: &[usize],
    samples: &[ImageSample],
    class_names: &[String],
    options: &EvalOptions,
) -> Result<EvalReport> {
    let nc = detector.config.num_classes;
    if class_names.len() != nc {
        return Err(DmsnError::Config(format!(
            "detector predicts {nc} classes but the data has {}",
            class_names.len()
        )));
    }
    if subnets.is_empty() {
        return Err(DmsnError::Precondition("no subnets to evaluate".into()));
    }
    if let Some(s) = samples.iter().flat_map(|s| &s.boxes).find(|b| b.class_id >= nc) {
        return Err(DmsnError::Config(format!("annotation class {} outside [0, {nc})", s.class_id)));
    }
    let mut fused = Vec::with_capacity(samples.len());
    let mut standalone: Vec<Vec<Vec<Detection>>> = vec![Vec::with_capacity(samples.len()); subnets.len()];
    for img in samples {
        let low = detector.extract_low(img)?;
        let mut per = Vec::with_capacity(subnets.len());
        for (k, &b) in subnets.iter().enumerate() {
            let d = detector.detect(b, &low)?;
            standalone[k].push(d.clone());
            per.push(d);
        }
        fused.push(fuse_with(&per, &options.fusion)?);
    }
    let gts: Vec<Vec<BoxAnnotation>> = samples.iter().map(|s| s.boxes.clone()).collect();
    let thr = options.iou_match_threshold;
    let curves = class_aps(&fused, &gts, nc, thr)?;
    let per_class_ap: Vec<Option<f64>> = curves.iter().map(|c| c.ap).collect();
    let per_subnet_map = standalone
        .iter()
        .map(|d| {
            let aps: Vec<Option<f64>> = class_aps(d, &gts, nc, thr)?.iter().map(|c| c.ap).collect();
            Ok(mean_ap(&aps, options.include_empty_classes))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport {
        domain: samples.first().map_or(0, |s| s.domain_id),
        num_images: samples.len(),
        class_names: class_names.to_vec(),
        num_gt: curves.iter().map(|c| c.num_gt).collect(),
        map: mean_ap(&per_class_ap, options.include_empty_classes),
        per_class_ap,
        subnets: subnets.to_vec(),
        per_subnet_map,
        options: options.clone(),
        config_fingerprint: String::new(),
        checkpoint_sha256: None,
        pr_curves: curves,
    })
}

/// Subnets that carry trained weights: every source branch, plus the pseudo
/// branch once it has been initialised.
pub fn active_subnets(state: &TrainState) -> Vec<usize> {
    let mut s: Vec<usize> = (0..state.num_branches()).collect();
    if let Some(p) = state.detector.pseudo_id() {
        if state.pseudo_initialized {
            s.push(p);
        }
    }
    s
}

/// Evaluates a training state on one domain of `data`.
pub fn evaluate_state(state: &TrainState, data: &Dataset, domain: u32, options: &EvalOptions) -> Result<EvalReport> {
    if data.num_classes() != state.config.detector.num_classes {
        return Err(DmsnError::Config(format!(
            "checkpoint has {} classes, dataset {}",
            state.config.detector.num_classes,
            data.num_classes()
        )));
    }
    let subnets = active_subnets(state);
    let mut options = options.clone();
    if options.beta_weights {
        let m = state.num_branches();
        let mut w = vec![0.0; state.detector.num_branches()];
        for (i, b) in state.beta.iter().enumerate().take(m) {
            w[i] = *b;
        }
        if let Some(p) = state.detector.pseudo_id() {
            w[p] = 1.0 / m as f64;
        }
        options.fusion.weights = Some(w);
    }
    let names: Vec<String> = data.classes().iter().map(|c| c.name().to_string()).collect();
    let mut report = evaluate(&state.detector, &subnets, data.domain(domain)?, &names, &options)?;
    report.domain = domain;
    report.config_fingerprint = state.config.fingerprint();
    Ok(report)
}

/// Loads a checkpoint and evaluates it on `domain` (the run's target domain
/// when `None`).
pub fn evaluate_checkpoint(
    ckpt: &Path,
    data: &Dataset,
    domain: Option<u32>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let state = load_checkpoint(ckpt)?;
    let domain = domain.unwrap_or(state.config.target_domain);
    let mut report = evaluate_state(&state, data, domain, options)?;
    report.checkpoint_sha256 = Some(file_sha256(ckpt)?);
    Ok(report)
}
