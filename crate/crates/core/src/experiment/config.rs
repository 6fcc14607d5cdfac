//! Experiment configuration: a TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::{LlmConfig, NoiseProfile, SearchTemplate};
use crate::dataset::{SyntheticSearchSpec, SyntheticSpec};
use crate::encoder::{TrainConfig, BASE_SCALE, BASE_SEED, DEFAULT_DIMS};
use crate::error::{Error, Result};
use crate::sampling::Strategy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Pairs,
    Search,
}

/// Absolute count, or a fraction of the pool resolved by flooring.
/// In TOML an integer is a count and a float is a fraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    Count(usize),
    Fraction(f64),
}

impl Budget {
    pub fn resolve(self, pool: usize) -> usize {
        match self {
            Budget::Count(b) => b,
            Budget::Fraction(f) => (f * pool as f64).floor() as usize,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    pub seed: u64,
    pub scale: f64,
    pub dims: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            seed: BASE_SEED,
            scale: BASE_SCALE,
            dims: DEFAULT_DIMS,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    /// Easiest and hardest examples by base error form the pool.
    Extreme,
    /// A seeded random `split_fraction` of the examples stays labeled.
    #[default]
    Random,
    /// The pool comes from its own file.
    Given,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    /// Pair dataset, or search queries.
    pub train: PathBuf,
    #[serde(default)]
    pub pool: Option<PathBuf>,
    /// Sealed labels (pairs) or relevance (search) of the pool.
    #[serde(default)]
    pub pool_truth: Option<PathBuf>,
    pub test: PathBuf,
    /// Label corpus (search only).
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub split: SplitKind,
    /// Pool share for `extreme`, labeled share for `random`.
    #[serde(default = "default_split_fraction")]
    pub split_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// Size of the synthetic test draw.
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub synthetic_search: Option<SyntheticSearchSpec>,
    #[serde(default)]
    pub files: Option<DataFiles>,
}

fn default_split_fraction() -> f64 {
    0.6
}
fn default_test_size() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AnnotatorConfig {
    Gt,
    Simulated {
        profile: NoiseProfile,
    },
    Llm {
        llm: LlmConfig,
        #[serde(default)]
        template: Option<SearchTemplate>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub data: DataConfig,
    #[serde(default)]
    pub base: BaseConfig,
    /// `train.seed` is replaced by each run seed.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    pub annotator: AnnotatorConfig,
    pub budget: Budget,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub parallel_seeds: bool,
    /// Write every trained model to `<output_dir>/seed-N/<arm>/model.json`.
    #[serde(default)]
    pub save_models: bool,
    /// Share of the test set forming the high/low base-error subsets.
    #[serde(default = "default_split_fraction")]
    pub extreme_fraction: f64,
    #[serde(default = "default_quantiles")]
    pub n_quantiles: usize,
    /// Candidate labels shown per search query.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_motivation")]
    pub motivation_strategies: Vec<Strategy>,
}

fn default_strategy() -> Strategy {
    Strategy::CondInformativeness
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_quantiles() -> usize {
    20
}
fn default_top_k() -> usize {
    10
}
fn default_motivation() -> Vec<Strategy> {
    vec![
        Strategy::Random,
        Strategy::Uncertainty,
        Strategy::BaseConsistent,
        Strategy::BaseInconsistent,
    ]
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    /// Parses TOML and applies `key=value` overrides. Keys are dotted paths
    /// (`train.learning_rate`); values are TOML literals, and anything that
    /// does not parse as one is taken as a string.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let config: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    /// Hex digest of the canonical JSON form; every field contributes.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("at least one seed is required"));
        }
        if let Budget::Fraction(f) = self.budget {
            if !(f > 0.0 && f <= 1.0) {
                return Err(config_err(format!("fraction budget {f} outside (0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.extreme_fraction) {
            return Err(config_err("extreme_fraction outside [0, 1]"));
        }
        if self.save_models && self.output_dir.is_none() {
            return Err(config_err("save_models needs output_dir"));
        }
        if self.n_quantiles == 0 {
            return Err(config_err("n_quantiles must be at least 1"));
        }
        if self.top_k == 0 {
            return Err(config_err("top_k must be at least 1"));
        }
        if self.train.batch_size == 0 || self.train.learning_rate.is_nan() || self.train.learning_rate < 0.0 {
            return Err(config_err(
                "train needs batch_size ≥ 1 and a non-negative learning_rate",
            ));
        }
        if self.base.scale.is_nan() || self.base.scale <= 0.0 || self.base.dims == 0 {
            return Err(config_err("base needs a positive scale and dims"));
        }
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.split_fraction) {
            return Err(config_err("data.split_fraction outside [0, 1]"));
        }
        let sources = usize::from(d.synthetic.is_some())
            + usize::from(d.synthetic_search.is_some())
            + usize::from(d.files.is_some());
        if sources != 1 {
            return Err(config_err(
                "exactly one of data.synthetic, data.synthetic_search, data.files is required",
            ));
        }
        match self.task {
            Task::Pairs if d.synthetic_search.is_some() => {
                return Err(config_err("data.synthetic_search needs task = \"search\""));
            }
            Task::Search if d.synthetic.is_some() => {
                return Err(config_err("data.synthetic needs task = \"pairs\""));
            }
            Task::Search if d.split == SplitKind::Extreme => {
                return Err(config_err("the extreme split applies to pairs only"));
            }
            _ => {}
        }
        if let Some(f) = &d.files {
            if d.split == SplitKind::Given && f.pool.is_none() {
                return Err(config_err("split = \"given\" needs data.files.pool"));
            }
            if self.task == Task::Search && f.labels.is_none() {
                return Err(config_err("search data needs data.files.labels"));
            }
        } else if d.split == SplitKind::Given {
            return Err(config_err("split = \"given\" needs data.files"));
        }
        if self.task == Task::Search && self.strategy.needs_truth() {
            return Err(config_err("base-extreme strategies apply to pairs only"));
        }
        match &self.annotator {
            AnnotatorConfig::Gt => {}
            AnnotatorConfig::Simulated { profile } => {
                profile.validate().map_err(|e| config_err(e.to_string()))?;
            }
            AnnotatorConfig::Llm { llm, template } => {
                llm.validate()?;
                if self.task == Task::Search && template.is_none() {
                    return Err(config_err("search annotation with an LLM needs annotator.template"));
                }
            }
        }
        Ok(())
    }

    /// Annotation cache directory of one seed, when caching is on.
    pub(crate) fn seed_cache_dir(&self, seed: u64) -> Option<PathBuf> {
        match &self.annotator {
            AnnotatorConfig::Llm { llm, .. } => llm.cache_dir.as_ref().map(|d| d.join(format!("seed-{seed}"))),
            _ => None,
        }
    }
}

/// Splits `--key=value` / `key=value` into its parts.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let s = arg.strip_prefix("--").unwrap_or(arg);
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{arg}` is not key=value")))?;
    if k.is_empty() {
        return Err(config_err(format!("override `{arg}` has an empty key")));
    }
    Ok((k.replace('-', "_"), v.to_string()))
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let next = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw));
    Ok(())
}
