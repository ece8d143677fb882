use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::DetectorConfig;
use crate::error::{DmsnError, Result};

/// Every hyperparameter and schedule switch of a training run. Read from a
/// TOML file whose keys are these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Focusing parameter of the high-level focal loss.
    pub gamma: f64,
    /// Weight of the alignment and consistency terms.
    pub lambda_tradeoff: f64,
    pub alpha_ema: f64,
    /// Proposals per branch entering the consistency match.
    pub n_proposals: usize,
    pub lmb_capacity: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// 0-based epoch at which pseudo subnet learning and consistency start.
    pub phase2_start_epoch: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub max_grad_norm: f64,
    pub grl_scale: f64,
    /// Steps over which the reversal scale ramps linearly up to `grl_scale`.
    pub grl_warmup_steps: usize,
    /// Cap on steps per epoch; 0 means one pass over the largest source.
    pub max_steps_per_epoch: usize,
    /// Failure threshold on the fraction of skipped steps.
    pub max_fault_fraction: f64,

    /// Merge every source into one labeled pool served by a single branch.
    pub combine_sources: bool,
    /// Low- and high-level adversarial alignment.
    pub alignment: bool,
    /// Pseudo target branch with EMA aggregation and RPN consistency.
    pub pseudo_subnet: bool,
    /// Start every branch from the same draw.
    pub shared_branch_init: bool,
    /// Refresh the source weights once per epoch instead of every step.
    pub beta_per_epoch: bool,
    pub low_disc_hidden: usize,
    pub high_disc_hidden: usize,

    /// Probe the low-level discriminator every this many steps; 0 disables.
    pub probe_every: usize,
    /// Probe images per domain, taken from the probe split.
    pub probe_images: usize,

    pub source_domains: Vec<u32>,
    pub target_domain: u32,
    /// Directory holding one saved dataset per split. Without it the toy
    /// corpus is generated in memory.
    pub data_root: Option<PathBuf>,
    pub train_split: String,
    pub probe_split: String,
    pub synthetic_images: usize,
    pub synthetic_test_images: usize,
    pub data_seed: u64,

    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 5.0,
            lambda_tradeoff: 1.0,
            alpha_ema: 0.99,
            n_proposals: 256,
            lmb_capacity: 100,
            lr: 0.001,
            momentum: 0.9,
            epochs: 20,
            phase2_start_epoch: 10,
            seed: 0,
            max_grad_norm: 10.0,
            grl_scale: 1.0,
            grl_warmup_steps: 0,
            max_steps_per_epoch: 0,
            max_fault_fraction: 0.01,
            combine_sources: false,
            alignment: true,
            pseudo_subnet: true,
            shared_branch_init: true,
            beta_per_epoch: false,
            low_disc_hidden: 32,
            high_disc_hidden: 32,
            probe_every: 50,
            probe_images: 8,
            source_domains: vec![0, 1],
            target_domain: 2,
            data_root: None,
            train_split: "train".into(),
            probe_split: "test".into(),
            synthetic_images: 200,
            synthetic_test_images: 50,
            data_seed: 0,
            detector: DetectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| DmsnError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DmsnError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DmsnError::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DmsnError::Config(m));
        if !(0.0..1.0).contains(&self.alpha_ema) {
            return bad(format!("alpha_ema must lie in [0, 1), got {}", self.alpha_ema));
        }
        if self.epochs == 0 || self.phase2_start_epoch > self.epochs {
            return bad(format!(
                "need 0 < epochs and phase2_start_epoch ≤ epochs, got {} / {}",
                self.epochs, self.phase2_start_epoch
            ));
        }
        if !(self.gamma >= 0.0) || !(self.lambda_tradeoff >= 0.0) || !(self.lr >= 0.0) {
            return bad("gamma, lambda_tradeoff and lr must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.grl_scale > 0.0) {
            return bad("grl_scale must be positive".into());
        }
        if self.n_proposals == 0 || self.lmb_capacity == 0 {
            return bad("n_proposals and lmb_capacity must be positive".into());
        }
        if self.source_domains.is_empty() {
            return bad("need at least one source domain".into());
        }
        if (self.alignment || self.pseudo_subnet) && self.source_domains.contains(&self.target_domain) {
            return bad("the target domain cannot also be a source when adapting".into());
        }
        if self.data_root.is_none() && self.synthetic_images == 0 {
            return bad("synthetic_images must be positive without a data_root".into());
        }
        self.detector.validate()
    }

    /// Number of source branches after the merge switch.
    pub fn num_branches(&self) -> usize {
        if self.combine_sources {
            1
        } else {
            self.source_domains.len()
        }
    }

    /// 0-based epoch → 1 or 2.
    pub fn phase_of_epoch(&self, epoch: usize) -> u8 {
        if self.pseudo_subnet && epoch >= self.phase2_start_epoch {
            2
        } else {
            1
        }
    }

    /// Cosine decay from `lr` to 0 across `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let t = step as f64 / total.max(1) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Reversal scale in effect at a 0-based global step.
    pub fn grl_at(&self, step: usize) -> f64 {
        if step >= self.grl_warmup_steps {
            self.grl_scale
        } else {
            self.grl_scale * (step + 1) as f64 / self.grl_warmup_steps as f64
        }
    }

    /// sha256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reversal_warmup_is_linear() {
        let c = TrainConfig {
            grl_scale: 0.8,
            grl_warmup_steps: 4,
            ..TrainConfig::default()
        };
        for (s, want) in [0.2, 0.4, 0.6, 0.8, 0.8, 0.8].into_iter().enumerate() {
            assert!((c.grl_at(s) - want).abs() < 1e-12);
        }
        assert_eq!(TrainConfig::default().grl_at(0), 1.0);
    }

    #[test]
    fn defaults_and_toml_round_trip() {
        let c = TrainConfig::default();
        assert_eq!((c.gamma, c.lambda_tradeoff, c.alpha_ema), (5.0, 1.0, 0.99));
        assert_eq!((c.n_proposals, c.lmb_capacity, c.epochs, c.phase2_start_epoch), (256, 100, 20, 10));
        assert_eq!(c.lr, 0.001);
        let text = c.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), c);
        let partial = TrainConfig::from_toml_str("gamma = 2.0\nepochs = 4\nphase2_start_epoch = 2\n").unwrap();
        assert_eq!(partial.gamma, 2.0);
        assert_eq!(partial.lmb_capacity, 100);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "alpha_ema = 1.0",
            "epochs = 4\nphase2_start_epoch = 5",
            "n_proposals = 0",
            "unknown_key = 3",
            "source_domains = [2]",
        ] {
            assert!(TrainConfig::from_toml_str(text).is_err(), "{text}");
        }
        assert!(TrainConfig::from_toml_str("source_domains = [2]\nalignment = false\npseudo_subnet = false").is_ok());
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        let total = 20 * 200;
        assert_eq!(c.lr_at(0, total), 0.001);
        assert!(c.lr_at(total - 1, total) < 1e-5);
        assert!((c.lr_at(total / 2, total) - 0.0005).abs() < 1e-12);
        assert_eq!(c.phase_of_epoch(9), 1);
        assert_eq!(c.phase_of_epoch(10), 2);
        let mut off = c.clone();
        off.pseudo_subnet = false;
        assert_eq!(off.phase_of_epoch(15), 1);
    }
}
