//! Run configuration: one JSON file with a section per pipeline stage.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use trapkit_core::classifier::ClassifierConfig;
use trapkit_core::dataset::SamplerConfig;
use trapkit_core::labeler::LabelerConfig;
use trapkit_core::noise::{Intensity, NoiseFamily, NoiseParams};
use trapkit_core::reward::RewardConfig;
use trapkit_core::seed;
use trapkit_core::simulator::{check_disjoint, MixSpec, ScenarioConfig};

/// Half-open seed range, written `"A..B"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn range(self) -> Range<u64> {
        self.start..self.end
    }

    pub fn len(self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

impl FromStr for SeedRange {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got {s:?}"))?;
        let start = a.trim().parse().map_err(|e| format!("bad range start {a:?}: {e}"))?;
        let end = b.trim().parse().map_err(|e| format!("bad range end {b:?}: {e}"))?;
        if end <= start {
            return Err(format!("empty seed range {s}"));
        }
        Ok(Self { start, end })
    }
}

impl TryFrom<String> for SeedRange {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SeedRange> for String {
    fn from(r: SeedRange) -> String {
        r.to_string()
    }
}

impl fmt::Display for SeedRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub expert_seeds: SeedRange,
    pub test_seeds: SeedRange,
    pub expert_mix: MixSpec,
    pub test_mix: MixSpec,
    /// Train the reward only on rollouts without a scripted anomaly.
    pub reward_clean_only: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            expert_seeds: SeedRange { start: 0, end: 2000 },
            test_seeds: SeedRange { start: 1_000_000, end: 1_001_000 },
            expert_mix: MixSpec {
                anomaly_fraction: 0.3,
                ..MixSpec::expert_ladder()
            },
            test_mix: MixSpec {
                anomaly_fraction: 0.5,
                ..MixSpec::clean()
            },
            reward_clean_only: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Applied to the test set before evaluation when set.
    pub family: Option<NoiseFamily>,
    pub intensity: Intensity,
    pub params: NoiseParams,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            family: None,
            intensity: Intensity::Med,
            params: NoiseParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthRule {
    /// Any rule-labeled anomaly or a worst-case terminus.
    AnomalousOrWct,
    WctOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Steps removed from the end of each test trajectory before scoring.
    pub trim: usize,
    pub threshold: f64,
    pub truth: TruthRule,
    pub baseline: bool,
    pub lead_time: bool,
    /// Re-score the test set under every noise family and intensity.
    pub noise_sweep: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            trim: 5,
            threshold: 0.5,
            truth: TruthRule::AnomalousOrWct,
            baseline: true,
            lead_time: true,
            noise_sweep: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scenario: ScenarioConfig,
    pub data: DataConfig,
    pub labeler: LabelerConfig,
    pub noise: NoiseConfig,
    pub reward: RewardConfig,
    pub sampler: SamplerConfig,
    pub classifier: ClassifierConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs/desk"),
            scenario: ScenarioConfig::default(),
            data: DataConfig::default(),
            labeler: LabelerConfig::default(),
            noise: NoiseConfig::default(),
            reward: RewardConfig::default(),
            sampler: SamplerConfig::default(),
            classifier: ClassifierConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl RunConfig {
    /// 500 expert and 200 test trajectories.
    pub fn quickstart() -> Self {
        let mut cfg = Self::default();
        cfg.out_dir = PathBuf::from("runs/quickstart");
        cfg.data.expert_seeds = SeedRange { start: 0, end: 500 };
        cfg.data.test_seeds = SeedRange { start: 1_000_000, end: 1_000_200 };
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate().map_err(anyhow::Error::msg)?;
        self.labeler.validate().map_err(anyhow::Error::msg)?;
        self.reward.validate().map_err(anyhow::Error::msg)?;
        self.sampler.validate().map_err(anyhow::Error::msg)?;
        self.classifier.validate().map_err(anyhow::Error::msg)?;
        check_disjoint(&self.data.expert_seeds.range(), &self.data.test_seeds.range()).map_err(anyhow::Error::msg)?;
        if !(0.0..1.0).contains(&self.evaluation.threshold) {
            bail!("evaluation.threshold must be in [0, 1)");
        }
        Ok(())
    }

    /// Seed of a stage, derived from the global seed and the stage name.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive(self.seed, stage)
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            seed: self.stage_seed("train-reward"),
            ..self.reward.clone()
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.stage_seed("build-dataset"),
            ..self.sampler.clone()
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            seed: self.stage_seed("train-classifier"),
            ..self.classifier.clone()
        }
    }

    pub fn noise_seed(&self) -> u64 {
        self.stage_seed("noise")
    }
}
