//! RPN consistency between the pseudo target branch and every source branch.
//!
//! Each pseudo proposal is matched to its highest-IoU proposal in a source
//! list; the reported cost is the overlap-weighted rank distance of the
//! matches. Ranks are discrete, so training uses a surrogate that pulls the
//! matched source objectness toward the pseudo objectness.

use crate::autograd::{sigmoid_scalar, Tape, Var};
use crate::boxes::BBox;
use crate::detector::{Anchors, Proposal};
use crate::error::{DmsnError, Result};

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Exactly `N` proposals ranked `1..=N` by non-increasing objectness.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn new(proposals: Vec<Proposal>) -> Result<Self> {
        if proposals.is_empty() {
            return Err(DmsnError::Contract("empty proposal set".into()));
        }
        for (i, p) in proposals.iter().enumerate() {
            if p.rank != i + 1 {
                return Err(DmsnError::Contract(format!("proposal {i} has rank {}", p.rank)));
            }
        }
        if proposals.windows(2).any(|w| w[1].objectness > w[0].objectness) {
            return Err(DmsnError::Contract("ranks disagree with objectness order".into()));
        }
        Ok(ProposalSet { proposals })
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn proposals(&self) -> &[Proposal] {
        &self.proposals
    }
}

/// For each pseudo proposal `n`: the best IoU `O_n` in one source list and
/// the 1-based rank `n*` attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub best_iou: Vec<f64>,
    pub matched_rank: Vec<usize>,
}

impl MatchResult {
    pub fn mean_overlap(&self) -> f64 {
        self.best_iou.iter().sum::<f64>() / self.best_iou.len() as f64
    }
}

/// Argmax-IoU matching; ties go to the better-ranked source proposal.
pub fn match_proposals(source: &ProposalSet, pseudo: &ProposalSet) -> Result<MatchResult> {
    if source.len() != pseudo.len() {
        return Err(DmsnError::Contract(format!(
            "source set has {} proposals, pseudo set {}",
            source.len(),
            pseudo.len()
        )));
    }
    let n = pseudo.len();
    let mut best_iou = Vec::with_capacity(n);
    let mut matched_rank = Vec::with_capacity(n);
    for t in pseudo.proposals() {
        let mut best = (0.0, 1);
        for (j, s) in source.proposals().iter().enumerate() {
            let v = s.bbox.iou(&t.bbox);
            if v > best.0 {
                best = (v, j + 1);
            }
        }
        best_iou.push(best.0);
        matched_rank.push(best.1);
    }
    Ok(MatchResult {
        best_iou,
        matched_rank,
    })
}

/// `(1/N) Σ_n O_n |n* − n|` for one source match.
pub fn rank_cost(m: &MatchResult) -> f64 {
    let n = m.best_iou.len();
    m.best_iou
        .iter()
        .zip(&m.matched_rank)
        .enumerate()
        .map(|(i, (o, &r))| o * (r as f64 - (i + 1) as f64).abs())
        .sum::<f64>()
        / n as f64
}

/// `(1/N) Σ_n Σ_i O_n^i |n*_i − n|` over all source sets.
pub fn consistency_loss(sources: &[ProposalSet], pseudo: &ProposalSet) -> Result<f64> {
    let mut total = 0.0;
    for s in sources {
        total += rank_cost(&match_proposals(s, pseudo)?);
    }
    Ok(total)
}

/// Differentiable stand-in for one source: `(1/N) Σ_n O_n |σ(s_{n*}) − σ(s^T_n)|`
/// with the matches frozen, `s_{n*}` read from the source objectness map and
/// the pseudo scores constant.
pub fn surrogate_term(
    tape: &mut Tape,
    anchors: &Anchors,
    source_obj: Var,
    source: &ProposalSet,
    m: &MatchResult,
    pseudo: &ProposalSet,
) -> Var {
    let n = pseudo.len() as f64;
    let idx: Vec<usize> = m
        .matched_rank
        .iter()
        .map(|&r| anchors.obj_index(source.proposals()[r - 1].anchor))
        .collect();
    let targets: Vec<f64> = pseudo.proposals().iter().map(|p| sigmoid_scalar(p.objectness)).collect();
    let weights: Vec<f64> = m.best_iou.iter().map(|o| o / n).collect();
    let s = tape.gather(source_obj, idx);
    tape.sigmoid_abs_diff(s, targets, weights)
}
