//! Experiment configuration files for `sweep`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use lnadapt_core::{AdapterKind, CorpusConfig, InsertionPolicy, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "sd")]
    Sd,
    #[serde(rename = "ol")]
    Ol,
    #[serde(rename = "ol+full-ln")]
    OlFullLn,
    #[serde(rename = "ol+lrpd-ln")]
    OlLrpdLn,
}

impl System {
    pub const ALL: [System; 4] = [System::Sd, System::Ol, System::OlFullLn, System::OlLrpdLn];

    pub fn label(self) -> &'static str {
        match self {
            System::Sd => "SD",
            System::Ol => "OL",
            System::OlFullLn => "OL+Full-LN",
            System::OlLrpdLn => "OL+LRPD-LN",
        }
    }

    /// The adapter kind inserted by this system, if it adapts with adapters.
    pub fn adapter(self, rank: usize) -> Option<AdapterKind> {
        match self {
            System::OlFullLn => Some(AdapterKind::Full),
            System::OlLrpdLn => Some(AdapterKind::Lrpd { rank }),
            _ => None,
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Trend checks evaluated on the median table of one target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// Every adaptation system beats SD at every size.
    BeatsSd,
    /// The OL minus OL+Full-LN gap is larger at the largest size than at
    /// the smallest.
    GapGrows,
    /// LRPD is no worse than Full at the smallest size and Full no worse
    /// than LRPD at the largest.
    RankCrossover,
}

impl Check {
    pub fn label(self) -> &'static str {
        match self {
            Check::BeatsSd => "adaptation beats SD at every size",
            Check::GapGrows => "OL vs OL+Full-LN gap grows with data",
            Check::RankCrossover => "LRPD wins small, Full wins large",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerConfig {
    pub seed: u64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub name: String,
    pub seed: u64,
    pub distance: f64,
    #[serde(default = "all_checks")]
    pub checks: Vec<Check>,
}

fn all_checks() -> Vec<Check> {
    vec![Check::BeatsSd, Check::GapGrows, Check::RankCrossover]
}

/// Optional overrides on top of a default [`TrainConfig`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr_decay: Option<f64>,
    pub early_stop_patience: Option<usize>,
    pub clip_norm: Option<f64>,
    pub min_updates: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, mut base: TrainConfig) -> TrainConfig {
        if let Some(v) = self.learning_rate {
            base.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            base.epochs = v;
        }
        if let Some(v) = self.batch {
            base.batch = v;
        }
        if let Some(v) = self.lr_decay {
            base.lr_decay = v;
        }
        if let Some(v) = self.early_stop_patience {
            base.early_stop_patience = v;
        }
        if let Some(v) = self.clip_norm {
            base.clip_norm = Some(v);
        }
        if let Some(v) = self.min_updates {
            base.min_updates = v;
        }
        base
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: SpeakerConfig,
    #[serde(rename = "target")]
    pub targets: Vec<TargetConfig>,
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_systems")]
    pub systems: Vec<System>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_source_utts")]
    pub source_utts: usize,
    /// Seed for the source model's initialization and shuffling.
    #[serde(default)]
    pub source_train_seed: u64,
    /// Reuse a trained source model file instead of training one.
    #[serde(default)]
    pub source_model: Option<std::path::PathBuf>,
    #[serde(default, with = "policy_text")]
    pub policy: InsertionPolicy,
    #[serde(default)]
    pub corpus: Option<CorpusConfig>,
    /// Training of the source model.
    #[serde(default)]
    pub source_train: TrainOverrides,
    /// Training of target-speaker SD baselines.
    #[serde(default)]
    pub sd_train: TrainOverrides,
    /// OL and adapter training.
    #[serde(default)]
    pub adapt_train: TrainOverrides,
}

fn default_sizes() -> Vec<usize> {
    vec![10, 20, 40, 100, 200]
}

fn default_systems() -> Vec<System> {
    System::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_rank() -> usize {
    10
}

fn default_source_utts() -> usize {
    1000
}

mod policy_text {
    use lnadapt_core::InsertionPolicy;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &InsertionPolicy, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&p.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<InsertionPolicy, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl ExperimentConfig {
    pub fn corpus_config(&self) -> CorpusConfig {
        self.corpus.clone().unwrap_or_default()
    }

    pub fn source_tcfg(&self) -> TrainConfig {
        self.source_train.apply(TrainConfig::sd_default())
    }

    pub fn sd_tcfg(&self) -> TrainConfig {
        self.sd_train.apply(TrainConfig::sd_default())
    }

    pub fn adapt_tcfg(&self) -> TrainConfig {
        self.adapt_train.apply(TrainConfig::adapt_default())
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            bail!("sizes must be a non-empty list of positive counts");
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            bail!("sizes must be strictly increasing, got {:?}", self.sizes);
        }
        if self.systems.is_empty() {
            bail!("at least one system is required");
        }
        if self.seeds.is_empty() {
            bail!("at least one repetition seed is required");
        }
        if self.targets.is_empty() {
            bail!("at least one [[target]] section is required");
        }
        let mut names: Vec<&str> = self.targets.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            bail!("target names must be unique");
        }
        if self.source_utts == 0 {
            bail!("source_utts must be positive");
        }
        let corpus = self.corpus_config();
        corpus.validate()?;
        for t in [self.source_tcfg(), self.sd_tcfg(), self.adapt_tcfg()] {
            t.validate()?;
        }
        if self.systems.contains(&System::OlLrpdLn) {
            for pos in &self.policy.positions {
                let slot = pos.resolve(&corpus.teacher)?;
                let k = corpus.teacher.slot_width(slot);
                AdapterKind::Lrpd { rank: self.rank }
                    .validate(k)
                    .with_context(|| format!("rank {} at slot {slot}", self.rank))?;
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }
}

impl FromStr for ExperimentConfig {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_toml(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
source = { seed = 1, distance = 0.0 }

[[target]]
name = "easy"
seed = 2
distance = 0.2
"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.sizes, vec![10, 20, 40, 100, 200]);
        assert_eq!(c.systems.len(), 4);
        assert_eq!(c.rank, 10);
        assert_eq!(c.targets[0].checks.len(), 3);
        assert_eq!(c.adapt_tcfg().learning_rate, 0.002);
        assert_eq!(c.policy, InsertionPolicy::default());
    }

    #[test]
    fn rejects_unsorted_sizes_and_empty_systems() {
        assert!(ExperimentConfig::from_toml(&format!("sizes = [20, 10]\n{MINIMAL}")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("systems = []\n{MINIMAL}")).is_err());
    }

    #[test]
    fn rejects_rank_at_slot_width() {
        let err = ExperimentConfig::from_toml(&format!("rank = 32\n{MINIMAL}")).unwrap_err();
        assert!(format!("{err:#}").contains("rank"), "{err:#}");
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::from_toml(&format!("{MINIMAL}\n[adapt_train]\nepochs = 7\n"))
            .unwrap();
        assert_eq!(c.adapt_tcfg().epochs, 7);
        assert_eq!(c.adapt_tcfg().learning_rate, 0.002);
    }

    #[test]
    fn system_names() {
        let c =
            ExperimentConfig::from_toml(&format!("systems = [\"ol+lrpd-ln\", \"sd\"]\n{MINIMAL}"))
                .unwrap();
        assert_eq!(c.systems, vec![System::OlLrpdLn, System::Sd]);
        assert_eq!(System::OlLrpdLn.to_string(), "OL+LRPD-LN");
    }
}
