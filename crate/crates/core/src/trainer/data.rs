use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::error::{DmsnError, Result};
use crate::synth_data::{generate_dataset, image_seed, load_dataset, toy_specs, Dataset, ImageSample};

/// One optimisation step's images: one labeled image per source domain and
/// one unlabeled target image.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    /// `(branch, image)` pairs.
    pub sources: Vec<(usize, &'a ImageSample)>,
    pub target: &'a ImageSample,
}

/// Training pools resolved from a config.
#[derive(Debug, Clone)]
pub struct TrainData {
    /// Labeled pool per source branch.
    pub branches: Vec<Vec<ImageSample>>,
    /// Source images drawn per step.
    pub sources_per_step: usize,
    /// Target images with annotations stripped.
    pub target: Vec<ImageSample>,
    /// Held-out probe images per discriminator channel (branches, then target).
    pub probe: Vec<Vec<ImageSample>>,
    steps_per_epoch: usize,
}

/// Loads `<root>/<split>` or generates the toy corpus split in memory.
pub fn load_split(config: &TrainConfig, split: &str) -> Result<Dataset> {
    match &config.data_root {
        Some(root) => load_dataset(&root.join(split)),
        None => {
            let (n, seed) = if split == config.train_split {
                (config.synthetic_images, config.data_seed)
            } else {
                (config.synthetic_test_images, config.data_seed.wrapping_add(1))
            };
            generate_dataset(&toy_specs(n), seed)
        }
    }
}

impl TrainData {
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let train = load_split(config, &config.train_split)?;
        let probe = load_split(config, &config.probe_split)?;
        Self::from_datasets(config, &train, &probe)
    }

    pub fn from_datasets(config: &TrainConfig, train: &Dataset, probe: &Dataset) -> Result<Self> {
        if train.image_size() != config.detector.image_size {
            return Err(DmsnError::Config(format!(
                "dataset images are {:?} but the detector expects {:?}",
                train.image_size(),
                config.detector.image_size
            )));
        }
        if train.num_classes() != config.detector.num_classes {
            return Err(DmsnError::Config(format!(
                "dataset has {} classes, detector {}",
                train.num_classes(),
                config.detector.num_classes
            )));
        }
        let mut per_domain = Vec::new();
        for d in &config.source_domains {
            let imgs = train.domain(*d)?;
            if imgs.is_empty() {
                return Err(DmsnError::Config(format!("source domain {d} has no images")));
            }
            per_domain.push(imgs.to_vec());
        }
        let steps = per_domain.iter().map(Vec::len).max().unwrap_or(0);
        let steps_per_epoch = match config.max_steps_per_epoch {
            0 => steps,
            cap => steps.min(cap),
        };
        let branches = if config.combine_sources {
            vec![per_domain.concat()]
        } else {
            per_domain
        };
        let target: Vec<ImageSample> = train.domain(config.target_domain)?.iter().map(|s| s.unlabeled()).collect();
        if target.is_empty() {
            return Err(DmsnError::Config("target domain has no images".into()));
        }
        let take = |d: u32| -> Result<Vec<ImageSample>> {
            Ok(probe.domain(d)?.iter().take(config.probe_images).cloned().collect())
        };
        let mut probe_sets = Vec::new();
        if config.combine_sources {
            let mut all = Vec::new();
            for d in &config.source_domains {
                all.extend(take(*d)?);
            }
            probe_sets.push(all);
        } else {
            for d in &config.source_domains {
                probe_sets.push(take(*d)?);
            }
        }
        probe_sets.push(take(config.target_domain)?);
        Ok(TrainData {
            branches,
            sources_per_step: config.source_domains.len(),
            target,
            probe: probe_sets,
            steps_per_epoch,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    fn permutation(seed: u64, epoch: usize, pool: &str, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, &format!("epoch{epoch}/{pool}")));
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng);
        p
    }

    /// Images for global step `step`. Each epoch reshuffles every pool from
    /// `(seed, epoch)`; pools smaller than an epoch cycle.
    pub fn batch_indices(&self, seed: u64, step: usize) -> (Vec<(usize, usize)>, usize) {
        let epoch = step / self.steps_per_epoch;
        let k = step % self.steps_per_epoch;
        let mut sources = Vec::with_capacity(self.sources_per_step);
        if self.branches.len() == 1 && self.sources_per_step > 1 {
            let n = self.branches[0].len();
            let p = Self::permutation(seed, epoch, "pool", n);
            for j in 0..self.sources_per_step {
                sources.push((0, p[(k * self.sources_per_step + j) % n]));
            }
        } else {
            for (b, pool) in self.branches.iter().enumerate() {
                let p = Self::permutation(seed, epoch, &format!("branch{b}"), pool.len());
                sources.push((b, p[k % pool.len()]));
            }
        }
        let p = Self::permutation(seed, epoch, "target", self.target.len());
        (sources, p[k % self.target.len()])
    }

    pub fn batch(&self, seed: u64, step: usize) -> Batch<'_> {
        let (s, t) = self.batch_indices(seed, step);
        Batch {
            sources: s.into_iter().map(|(b, i)| (b, &self.branches[b][i])).collect(),
            target: &self.target[t],
        }
    }
}
