//! Classifier training set built from reward-annotated trajectories.
//!
//! Every trajectory is cropped from the end to a random length. Trajectories
//! that end in a worst-case terminus are additionally expanded into several
//! shorter prefixes that keep the positive label.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::trajectory::Trajectory;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("trajectory {0} has no reward annotation")]
    NotAnnotated(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Upper bound on the shortest crop length.
    pub l_thres: usize,
    /// Prefixes drawn per WCT trajectory.
    pub eta: usize,
    /// Fraction of source trajectories held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            l_thres: 100,
            eta: 5,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.l_thres < 2 {
            return Err(DatasetError::InvalidConfig("l_thres must be at least 2".into()));
        }
        if self.eta < 1 {
            return Err(DatasetError::InvalidConfig("eta must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(DatasetError::InvalidConfig("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Crops `traj` to a length drawn uniformly from `[min(l_min, l_thres), len]`.
///
/// Returns `None` when the trajectory is shorter than the lower bound; the
/// caller keeps it unclipped.
pub fn end_clip(traj: &Trajectory, l_min: usize, cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Option<Trajectory> {
    let lo = l_min.min(cfg.l_thres);
    let n = traj.len();
    if n < lo || n < 2 {
        return None;
    }
    let k = rng.random_range(lo..=n);
    Some(traj.prefix(k, format!("{}#c{k}", traj.id)))
}

/// `min(eta, n - 2)` prefixes with distinct lengths drawn from `[2, n)`.
pub fn expand_prefixes(traj: &Trajectory, cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Vec<Trajectory> {
    let n = traj.len();
    if n < 3 {
        return Vec::new();
    }
    let count = cfg.eta.min(n - 2);
    let mut lengths: Vec<usize> = index::sample(rng, n - 2, count).into_iter().map(|i| i + 2).collect();
    lengths.sort_unstable();
    lengths
        .into_iter()
        .map(|k| traj.prefix(k, format!("{}#p{k}", traj.id)))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sources: usize,
    pub clipped: usize,
    pub expanded: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Sources kept whole because they were shorter than the crop bound.
    pub unclipped: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct WctDataset {
    pub items: Vec<Trajectory>,
    pub stats: DatasetStats,
}

impl WctDataset {
    pub fn source_of(item: &Trajectory) -> &str {
        item.src.as_deref().unwrap_or(&item.id)
    }

    /// Splits items by source id so that a source's prefixes never straddle the split.
    pub fn split(&self, val_fraction: f64, seed_value: u64) -> (Vec<Trajectory>, Vec<Trajectory>) {
        let sources: BTreeSet<&str> = self.items.iter().map(Self::source_of).collect();
        let mut sources: Vec<&str> = sources.into_iter().collect();
        sources.shuffle(&mut seed::rng(seed::derive(seed_value, "split")));
        let n_val = (sources.len() as f64 * val_fraction).round() as usize;
        let val: BTreeSet<&str> = sources[..n_val].iter().copied().collect();
        let (v, t): (Vec<_>, Vec<_>) = self
            .items
            .iter()
            .cloned()
            .partition(|it| val.contains(Self::source_of(it)));
        (t, v)
    }
}

pub fn build_dataset(trajs: &[Trajectory], cfg: &SamplerConfig) -> Result<WctDataset, DatasetError> {
    cfg.validate()?;
    if let Some(t) = trajs.iter().find(|t| !t.is_annotated()) {
        return Err(DatasetError::NotAnnotated(t.id.clone()));
    }
    let l_min = trajs.iter().map(Trajectory::len).min().unwrap_or(0);
    let parts: Vec<(Trajectory, bool, Vec<Trajectory>)> = trajs
        .par_iter()
        .map(|t| {
            let mut rng = seed::rng(seed::derive(cfg.seed, &t.id));
            let (clip, cut) = match end_clip(t, l_min, cfg, &mut rng) {
                Some(c) => (c, true),
                None => (t.prefix(t.len(), t.id.clone()), false),
            };
            let expanded = if t.wct_label == 1 {
                expand_prefixes(t, cfg, &mut rng)
            } else {
                Vec::new()
            };
            (clip, cut, expanded)
        })
        .collect();

    let mut stats = DatasetStats {
        sources: trajs.len(),
        ..DatasetStats::default()
    };
    let mut items = Vec::new();
    for (clip, cut, expanded) in parts {
        if cut {
            stats.clipped += 1;
        } else {
            stats.unclipped.push(clip.id.clone());
        }
        stats.expanded += expanded.len();
        items.push(clip);
        items.extend(expanded);
    }
    items.shuffle(&mut seed::rng(seed::derive(cfg.seed, "shuffle")));
    stats.positives = items.iter().filter(|t| t.wct_label == 1).count();
    stats.negatives = items.len() - stats.positives;
    log::info!(
        "dataset: {} items from {} sources ({} positive, {} negative)",
        items.len(),
        stats.sources,
        stats.positives,
        stats.negatives
    );
    Ok(WctDataset { items, stats })
}
