//! Two-phase training: supervised detection plus hierarchical alignment in
//! phase 1, then pseudo subnet aggregation and RPN consistency in phase 2.

mod checkpoint;
mod config;
mod data;
mod run;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    high_level_term, low_level_source_term, low_level_target_term, GrlGate, HighLevelDiscriminator,
    LowLevelDiscriminator,
};
use crate::autograd::{Tape, Var};
use crate::consistency::{match_proposals, rank_cost, surrogate_term, ProposalSet};
use crate::detector::{
    decode_proposals, g1_forward, input_tensor, g2_forward, rpn_head, supervised_pass, DetLoss, DetLossVars, FeatureMap,
    SpindleDetector, LOW_STRIDE,
};
use crate::error::{DmsnError, Result};
use crate::params::{Binding, ParamSet};
use crate::psl::{compute_beta, ema_update, init_pseudo, residual_norm, LossMemoryBank, SourceWeights};
use crate::synth_data::image_seed;
use crate::tensor::Tensor;

pub use checkpoint::{file_sha256, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::TrainConfig;
pub use data::{load_split, Batch, TrainData};
pub use run::{run_steps, run_training, RunSummary, StepLog, FINAL_CHECKPOINT, LOG_FILE, SUMMARY_FILE};

/// Everything needed to continue a run: parameters, optimizer velocity,
/// loss memory bank and counters. Per-step randomness is derived from
/// `(seed, step)`, so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub detector: SpindleDetector,
    pub d_low: ParamSet,
    pub d_high: Vec<ParamSet>,
    pub velocity: BTreeMap<String, Tensor>,
    pub lmb: LossMemoryBank,
    pub step: usize,
    pub steps_per_epoch: usize,
    pub faulted_steps: usize,
    pub pseudo_initialized: bool,
    pub beta: Vec<f64>,
}

/// Per-step values written to the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    pub det: DetLoss,
    pub low: f64,
    /// `L_h` per source branch.
    pub high: Vec<f64>,
    pub con_surrogate: f64,
    /// Discrete overlap-weighted rank distance.
    pub con_rank: f64,
    pub con_overlap: f64,
    pub total: f64,
    /// Loss memory bank means after the step.
    pub bank_means: Vec<f64>,
    pub beta: Vec<f64>,
    pub beta_fallback: bool,
    pub ema_residual: Option<f64>,
    pub grad_norm: f64,
    pub faulted: bool,
    pub probe_accuracy: Option<f64>,
}

impl StepRecord {
    /// `L_det + λ (L_l + Σ L_h + L_con)` from the logged parts.
    pub fn recompose(&self, lambda: f64) -> f64 {
        self.det.total() + lambda * (self.low + self.high.iter().sum::<f64>() + self.con_surrogate)
    }
}

struct Objective {
    total: Var,
    det: Vec<DetLossVars>,
    low: Option<Var>,
    high: Vec<Var>,
    con: Option<Var>,
    con_rank: f64,
    con_overlap: f64,
}

fn branch_prefix(b: usize) -> String {
    format!("branch{b}/")
}

fn d_high_prefix(b: usize) -> String {
    format!("d_high{b}/")
}

impl TrainState {
    pub fn new(config: &TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        config.validate()?;
        if steps_per_epoch == 0 {
            return Err(DmsnError::Config("an epoch needs at least one step".into()));
        }
        let m = config.num_branches();
        let detector = SpindleDetector::new(
            config.detector.clone(),
            m,
            config.pseudo_subnet,
            config.seed,
            config.shared_branch_init,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(config.seed, "discriminators"));
        let d_low = LowLevelDiscriminator::new(&mut rng, config.detector.g1_channels[2], config.low_disc_hidden, m).params;
        let d_high = (0..m)
            .map(|_| HighLevelDiscriminator::new(&mut rng, config.detector.g2_channels[2], config.high_disc_hidden).params)
            .collect();
        Ok(TrainState {
            config: config.clone(),
            detector,
            d_low,
            d_high,
            velocity: BTreeMap::new(),
            lmb: LossMemoryBank::new(m, config.lmb_capacity)?,
            step: 0,
            steps_per_epoch,
            faulted_steps: 0,
            pseudo_initialized: false,
            beta: vec![1.0 / m as f64; m],
        })
    }

    pub fn num_branches(&self) -> usize {
        self.detector.num_sources
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch
    }

    pub fn epoch(&self) -> usize {
        self.step / self.steps_per_epoch
    }

    pub fn phase(&self) -> u8 {
        self.config.phase_of_epoch(self.epoch())
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.step, self.total_steps())
    }

    /// Named parameter set for a trainable key prefix.
    fn param_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        let (head, rest) = key.split_once('/')?;
        if head == "g1" {
            return self.detector.g1.get_mut(rest);
        }
        if head == "d_low" {
            return self.d_low.get_mut(rest);
        }
        if let Some(i) = head.strip_prefix("d_high") {
            return self.d_high.get_mut(i.parse::<usize>().ok()?)?.get_mut(rest);
        }
        let b: usize = head.strip_prefix("branch")?.parse().ok()?;
        if Some(b) == self.detector.pseudo_id() {
            return None;
        }
        self.detector.branches.get_mut(b)?.get_mut(rest)
    }

    /// Builds the step objective on `tape`.
    fn objective(&self, tape: &mut Tape, batch: &Batch, phase: u8, rng: &mut ChaCha8Rng) -> Result<Objective> {
        let cfg = &self.config;
        let det_cfg = &self.detector.config;
        let anchors = self.detector.anchors();
        let m = self.num_branches();
        let gate = GrlGate::new(cfg.grl_at(self.step))?;
        let g1 = Binding::trainable(&self.detector.g1, "g1/");
        let prefixes: Vec<String> = (0..m).map(branch_prefix).collect();
        let dh_prefixes: Vec<String> = (0..m).map(d_high_prefix).collect();
        let branch = |b: usize| Binding::trainable(&self.detector.branches[b], &prefixes[b]);
        let d_low = Binding::trainable(&self.d_low, "d_low/");

        let mut per_branch = vec![0usize; m];
        for (b, _) in &batch.sources {
            per_branch[*b] += 1;
        }

        let mut det = Vec::new();
        let mut low_terms = Vec::new();
        let mut high_src: Vec<Vec<Var>> = vec![Vec::new(); m];
        for (b, img) in &batch.sources {
            let x = tape.constant(input_tensor(img));
            let low = g1_forward(tape, g1, x);
            let pass = supervised_pass(tape, det_cfg, anchors, branch(*b), low, &img.boxes, rng, None);
            det.push(pass.loss);
            if cfg.alignment {
                let w = 1.0 / per_branch[*b] as f64;
                let r = gate.apply(tape, low);
                let probs = LowLevelDiscriminator::forward(tape, d_low, r);
                let t = low_level_source_term(tape, probs, b + 1);
                low_terms.push((t, w));
                let r = gate.apply(tape, pass.high);
                let d = HighLevelDiscriminator::forward_logit(
                    tape,
                    Binding::trainable(&self.d_high[*b], &dh_prefixes[*b]),
                    r,
                );
                high_src[*b].push(high_level_term(tape, d, true, cfg.gamma, w));
            }
        }

        let mut high = Vec::new();
        let mut con_terms = Vec::new();
        let (mut con_rank, mut con_overlap) = (0.0, 0.0);
        if cfg.alignment || phase == 2 {
            let x = tape.constant(input_tensor(batch.target));
            let low_t = g1_forward(tape, g1, x);
            if cfg.alignment {
                let r = gate.apply(tape, low_t);
                let probs = LowLevelDiscriminator::forward(tape, d_low, r);
                low_terms.push((low_level_target_term(tape, probs), 1.0));
            }
            let pseudo = if phase == 2 {
                let pid = self.detector.pseudo_id().expect("phase 2 needs a pseudo branch");
                let fmap = FeatureMap {
                    activations: tape.value(low_t).clone(),
                    stride: LOW_STRIDE,
                };
                let high_p = self.detector.extract_high(pid, &fmap)?;
                Some(ProposalSet::new(self.detector.rpn_forward(pid, &high_p, cfg.n_proposals)?)?)
            } else {
                None
            };
            for b in 0..m {
                let high_t = g2_forward(tape, branch(b), low_t);
                if cfg.alignment {
                    let r = gate.apply(tape, high_t);
                    let d =
                        HighLevelDiscriminator::forward_logit(tape, Binding::trainable(&self.d_high[b], &dh_prefixes[b]), r);
                    let tgt = high_level_term(tape, d, false, cfg.gamma, 1.0);
                    let mut parts: Vec<(Var, f64)> = high_src[b].iter().map(|v| (*v, 1.0)).collect();
                    parts.push((tgt, 1.0));
                    high.push(tape.weighted_sum(&parts));
                }
                if let Some(pseudo) = &pseudo {
                    // consistency reaches the source RPN heads only
                    let frozen = tape.constant(tape.value(high_t).clone());
                    let (obj, deltas) = rpn_head(tape, branch(b), frozen);
                    let src = ProposalSet::new(decode_proposals(
                        det_cfg,
                        anchors,
                        tape.value(obj),
                        tape.value(deltas),
                        cfg.n_proposals,
                    )?)?;
                    let mr = match_proposals(&src, pseudo)?;
                    con_rank += rank_cost(&mr);
                    con_overlap += mr.mean_overlap() / m as f64;
                    con_terms.push((surrogate_term(tape, anchors, obj, &src, &mr, pseudo), 1.0));
                }
            }
        }

        let low = (!low_terms.is_empty()).then(|| tape.weighted_sum(&low_terms));
        let con = (!con_terms.is_empty()).then(|| tape.weighted_sum(&con_terms));
        let lam = cfg.lambda_tradeoff;
        let mut parts: Vec<(Var, f64)> = det.iter().map(|d| (d.total, 1.0)).collect();
        parts.extend(low.map(|v| (v, lam)));
        parts.extend(high.iter().map(|v| (*v, lam)));
        parts.extend(con.map(|v| (v, lam)));
        let total = tape.weighted_sum(&parts);
        Ok(Objective {
            total,
            det,
            low,
            high,
            con,
            con_rank,
            con_overlap,
        })
    }

    /// Momentum SGD with global-norm clipping. Returns the pre-clip norm.
    fn apply_gradients(&mut self, grads: BTreeMap<String, Tensor>, lr: f64) -> Result<f64> {
        let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
        let clip = if self.config.max_grad_norm > 0.0 && norm > self.config.max_grad_norm {
            self.config.max_grad_norm / norm
        } else {
            1.0
        };
        let mu = self.config.momentum;
        for (key, mut g) in grads {
            g.scale_assign(clip);
            let v = self.velocity.entry(key.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            v.scale_assign(mu);
            v.add_assign(&g);
            let v = v.clone();
            let p = self
                .param_mut(&key)
                .ok_or_else(|| DmsnError::Contract(format!("gradient for unknown parameter {key}")))?;
            for (pv, vv) in p.data_mut().iter_mut().zip(v.data()) {
                *pv -= lr * vv;
            }
        }
        Ok(norm)
    }

    fn source_sets(&self) -> Vec<&ParamSet> {
        self.detector.branches[..self.num_branches()].iter().collect()
    }

    fn run_step(&mut self, batch: &Batch, phase: u8) -> Result<StepRecord> {
        let step = self.step;
        let lr = self.lr();
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(self.config.seed, &format!("step{step}")));
        let mut tape = Tape::new();
        let obj = self.objective(&mut tape, batch, phase, &mut rng)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let mut det = DetLoss::default();
        for d in &obj.det {
            det.add(&DetLoss::read(&tape, d));
        }
        let high: Vec<f64> = obj.high.iter().map(|v| tape.value(*v).item()).collect();
        let mut record = StepRecord {
            step,
            epoch: self.epoch(),
            phase,
            lr,
            det,
            low: value(obj.low),
            high,
            con_surrogate: value(obj.con),
            con_rank: obj.con_rank,
            con_overlap: obj.con_overlap,
            total: tape.value(obj.total).item(),
            bank_means: vec![],
            beta: self.beta.clone(),
            beta_fallback: false,
            ema_residual: None,
            grad_norm: 0.0,
            faulted: false,
            probe_accuracy: None,
        };
        let grads = tape.backward(obj.total).into_param_grads();
        let finite = record.total.is_finite()
            && record.high.iter().all(|h| h.is_finite())
            && grads.values().all(Tensor::is_finite);
        if !finite {
            log::warn!("step {step}: non-finite loss or gradient, skipped");
            record.faulted = true;
            self.faulted_steps += 1;
        } else {
            record.grad_norm = self.apply_gradients(grads, lr)?;
            for (b, h) in record.high.iter().enumerate() {
                self.lmb.push(b, *h)?;
            }
        }
        record.bank_means = self.lmb.means();
        self.step += 1;
        Ok(record)
    }

    /// Supervised detection on every source branch plus `λ (L_l + L_h)`.
    /// The pseudo branch is not touched.
    pub fn train_step_phase1(&mut self, batch: &Batch) -> Result<StepRecord> {
        self.run_step(batch, 1)
    }

    /// Phase-1 objective plus `λ L_con`, followed by the EMA aggregation of
    /// the source branches into the pseudo branch. The pseudo branch is set
    /// to the β-weighted source average on the first call.
    pub fn train_step_phase2(&mut self, batch: &Batch) -> Result<StepRecord> {
        let pid = self
            .detector
            .pseudo_id()
            .ok_or_else(|| DmsnError::Config("phase 2 requires pseudo_subnet = true".into()))?;
        if !self.pseudo_initialized {
            let w = compute_beta(&self.lmb.means())?;
            self.detector.branches[pid] = init_pseudo(&self.source_sets(), &w.beta)?;
            self.beta = w.beta;
            self.pseudo_initialized = true;
        }
        let refresh = !self.config.beta_per_epoch || self.step % self.steps_per_epoch == 0;
        let mut record = self.run_step(batch, 2)?;
        let w = if refresh {
            compute_beta(&self.lmb.means())?
        } else {
            SourceWeights {
                beta: self.beta.clone(),
                fallback: false,
            }
        };
        let updated = ema_update(&self.detector.branches[pid], &self.source_sets(), &w.beta, self.config.alpha_ema)?;
        self.detector.branches[pid] = updated;
        record.ema_residual = Some(residual_norm(&self.detector.branches[pid], &self.source_sets(), &w.beta)?);
        record.beta = w.beta.clone();
        record.beta_fallback = w.fallback;
        self.beta = w.beta;
        Ok(record)
    }

    /// Dispatches on the phase of the current epoch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        match self.phase() {
            1 => self.train_step_phase1(batch),
            _ => self.train_step_phase2(batch),
        }
    }

    /// Per-location domain accuracy of the low-level discriminator on the
    /// probe sets. A location counts as target when the target channel is
    /// at least 0.5 and as the strongest source channel otherwise.
    pub fn probe_accuracy(&self, probe: &[Vec<crate::synth_data::ImageSample>]) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (d, imgs) in probe.iter().enumerate() {
            for img in imgs {
                let low = self.detector.extract_low(img)?;
                let mut tape = Tape::new();
                let f = tape.constant(low.activations);
                let p = LowLevelDiscriminator::forward(&mut tape, Binding::frozen(&self.d_low), f);
                let v = tape.value(p);
                let (k, hw) = (v.shape()[0], v.shape()[1] * v.shape()[2]);
                for loc in 0..hw {
                    // target channel first, then the source channels
                    let at = |c: usize| v.data()[c * hw + loc];
                    let arg = if at(k - 1) >= 0.5 {
                        k - 1
                    } else {
                        (0..k - 1).max_by(|&a, &b| at(a).total_cmp(&at(b))).expect("at least one source channel")
                    };
                    correct += usize::from(arg == d);
                    total += 1;
                }
            }
        }
        if total == 0 {
            return Err(DmsnError::Precondition("empty probe set".into()));
        }
        Ok(correct as f64 / total as f64)
    }
}

#[cfg(test)]
mod tests;
