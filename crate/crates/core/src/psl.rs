//! Pseudo subnet learning: loss memory banks over the high-level domain
//! losses, similarity weights derived from them, and the EMA aggregation of
//! source branch parameters into the pseudo target branch.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{DmsnError, Result};
use crate::params::ParamSet;

/// Per-source ring buffers of recent high-level domain losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossMemoryBank {
    capacity: usize,
    banks: Vec<VecDeque<f64>>,
}

impl LossMemoryBank {
    pub fn new(num_sources: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 || num_sources == 0 {
            return Err(DmsnError::Config("memory bank needs capacity and sources".into()));
        }
        Ok(LossMemoryBank {
            capacity,
            banks: vec![VecDeque::with_capacity(capacity); num_sources],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_sources(&self) -> usize {
        self.banks.len()
    }

    /// Appends a loss for `source` (0-based), evicting the oldest value when full.
    pub fn push(&mut self, source: usize, value: f64) -> Result<()> {
        if !value.is_finite() || value < 0.0 {
            return Err(DmsnError::Numeric(format!("memory bank rejects loss {value}")));
        }
        let available = self.banks.len();
        let bank = self.banks.get_mut(source).ok_or(DmsnError::UnknownBranch {
            branch: source,
            available,
        })?;
        if bank.len() == self.capacity {
            bank.pop_front();
        }
        bank.push_back(value);
        Ok(())
    }

    pub fn values(&self, source: usize) -> Option<&VecDeque<f64>> {
        self.banks.get(source)
    }

    pub fn len(&self, source: usize) -> usize {
        self.banks.get(source).map_or(0, VecDeque::len)
    }

    pub fn is_full(&self) -> bool {
        self.banks.iter().all(|b| b.len() == self.capacity)
    }

    /// `V_i`, or `None` for an empty bank.
    pub fn mean(&self, source: usize) -> Option<f64> {
        let b = self.banks.get(source)?;
        (!b.is_empty()).then(|| b.iter().sum::<f64>() / b.len() as f64)
    }

    /// Means of every bank, with empty banks reported as 0.
    pub fn means(&self) -> Vec<f64> {
        (0..self.banks.len()).map(|i| self.mean(i).unwrap_or(0.0)).collect()
    }

    /// Raw contents in push order, for checkpoints.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.banks.iter().map(|b| b.iter().copied().collect()).collect()
    }

    pub fn restore(capacity: usize, contents: Vec<Vec<f64>>) -> Result<Self> {
        let mut bank = LossMemoryBank::new(contents.len(), capacity)?;
        for (i, vals) in contents.into_iter().enumerate() {
            for v in vals {
                bank.push(i, v)?;
            }
        }
        Ok(bank)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceWeights {
    pub beta: Vec<f64>,
    /// Set when the weights are the uniform fallback.
    pub fallback: bool,
}

impl SourceWeights {
    pub fn uniform(m: usize) -> Self {
        SourceWeights {
            beta: vec![1.0 / m as f64; m],
            fallback: true,
        }
    }
}

/// `β_i = V_i / Σ_j V_j`; all-zero means give uniform weights.
pub fn compute_beta(means: &[f64]) -> Result<SourceWeights> {
    if means.is_empty() {
        return Err(DmsnError::Precondition("no sources to weight".into()));
    }
    if means.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(DmsnError::Precondition(format!("bank means must be finite and ≥ 0: {means:?}")));
    }
    let sum: f64 = means.iter().sum();
    if sum <= 0.0 {
        return Ok(SourceWeights::uniform(means.len()));
    }
    Ok(SourceWeights {
        beta: means.iter().map(|v| v / sum).collect(),
        fallback: false,
    })
}

fn check_inputs(pseudo: Option<&ParamSet>, sources: &[&ParamSet], beta: &[f64]) -> Result<()> {
    let first = *sources
        .first()
        .ok_or_else(|| DmsnError::Aggregation("no source parameter sets".into()))?;
    if beta.len() != sources.len() {
        return Err(DmsnError::Aggregation(format!(
            "{} weights for {} sources",
            beta.len(),
            sources.len()
        )));
    }
    for s in &sources[1..] {
        first.check_compatible(s)?;
    }
    if let Some(p) = pseudo {
        p.check_compatible(first)?;
    }
    Ok(())
}

/// `P_T ← α P_T + (1 − α) Σ_i β_i P_{S_i}` for every key.
pub fn ema_update(pseudo: &ParamSet, sources: &[&ParamSet], beta: &[f64], alpha: f64) -> Result<ParamSet> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(DmsnError::Precondition(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    check_inputs(Some(pseudo), sources, beta)?;
    let mut out = pseudo.clone();
    for (key, t) in out.iter_mut() {
        let srcs: Vec<&[f64]> = sources.iter().map(|s| s.get(key).expect("checked").data()).collect();
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            let mix: f64 = srcs.iter().zip(beta).map(|(s, b)| b * s[j]).sum();
            *v = alpha * *v + (1.0 - alpha) * mix;
        }
    }
    Ok(out)
}

/// β-weighted average of the source sets.
pub fn init_pseudo(sources: &[&ParamSet], beta: &[f64]) -> Result<ParamSet> {
    check_inputs(None, sources, beta)?;
    ema_update(sources[0], sources, beta, 0.0)
}

/// `‖P_T − Σ β_i P_{S_i}‖₂` over all keys.
pub fn residual_norm(pseudo: &ParamSet, sources: &[&ParamSet], beta: &[f64]) -> Result<f64> {
    check_inputs(Some(pseudo), sources, beta)?;
    let mut s = 0.0;
    for (key, t) in pseudo.iter() {
        let srcs: Vec<&[f64]> = sources.iter().map(|p| p.get(key).expect("checked").data()).collect();
        for (j, v) in t.data().iter().enumerate() {
            let mix: f64 = srcs.iter().zip(beta).map(|(s, b)| b * s[j]).sum();
            s += (v - mix) * (v - mix);
        }
    }
    Ok(s.sqrt())
}
