//! Run configuration: the TOML file, CLI overrides, and the config hash
//! recorded in manifests and tree dumps.

use std::collections::hash_map::DefaultHasher;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use stepsearch::backend::{HttpBackendConfig, MockScript};
use stepsearch::decoder::DecodeParams;
use stepsearch::labeler::{LabelConfig, LabelScheme};
use stepsearch::tree::SearchConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMethod {
    /// Single greedy chain-of-thought generation.
    Cot,
    /// Majority vote over extracted answers.
    Sc,
    /// Reward-guided best-of-N on min step score.
    Bon,
    /// Reward-guided vote-sum over answer groups.
    Pvs,
}

impl DecodeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cot => "cot",
            Self::Sc => "sc",
            Self::Bon => "bon",
            Self::Pvs => "pvs",
        }
    }
}

/// Scriptable mock settings (the test-only override table is not exposed
/// through the file format).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSettings {
    pub seed: u64,
    pub accuracy: f64,
    pub finish_ratio: f64,
}

impl Default for MockSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            accuracy: 0.5,
            finish_ratio: 0.25,
        }
    }
}

impl MockSettings {
    pub fn to_script(&self) -> MockScript {
        MockScript {
            seed: self.seed,
            accuracy: self.accuracy,
            finish_ratio: self.finish_ratio,
            overrides: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSettings {
    pub kind: BackendKind,
    pub mock: MockSettings,
    pub http: HttpBackendConfig,
}

impl Default for BackendSettings {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            mock: MockSettings::default(),
            http: HttpBackendConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumSettings {
    /// Rejection samples per problem when profiling.
    pub samples: usize,
    /// Problems to select; 0 means every eligible problem.
    pub take: usize,
}

impl Default for CurriculumSettings {
    fn default() -> Self {
        Self {
            samples: 8,
            take: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSettings {
    pub method: DecodeMethod,
    #[serde(flatten)]
    pub params: DecodeParams,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            method: DecodeMethod::Bon,
            params: DecodeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExtractSettings {
    /// Minimum sibling value gap for a preference pair.
    pub min_gap: f64,
}

/// The effective configuration of one run. Hashing it yields the config
/// hash recorded in every manifest and tree dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seeds: PathBuf,
    pub output_dir: PathBuf,
    pub parallelism: usize,
    /// Evolution round this run belongs to (1 or 2).
    pub iteration: u32,
    pub prompt_dir: Option<PathBuf>,
    pub search: SearchConfig,
    pub label: LabelConfig,
    pub curriculum: CurriculumSettings,
    pub decode: DecodeSettings,
    pub extract: ExtractSettings,
    pub backend: BackendSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: PathBuf::from("seeds.jsonl"),
            output_dir: PathBuf::from("out"),
            parallelism: 4,
            iteration: 1,
            prompt_dir: None,
            search: SearchConfig::default(),
            label: LabelConfig::default(),
            curriculum: CurriculumSettings::default(),
            decode: DecodeSettings::default(),
            extract: ExtractSettings::default(),
            backend: BackendSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config `{}`", path.display()))?;
        let mut config: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config `{}`", path.display()))?;
        config.backend.http.apply_env();
        Ok(config)
    }
}

pub fn parse_scheme(name: &str) -> Result<LabelScheme> {
    match name {
        "soft_dual" => Ok(LabelScheme::SoftDual),
        "hard_single" => Ok(LabelScheme::HardSingle),
        "hard_dual" => Ok(LabelScheme::HardDual),
        other => anyhow::bail!("unknown label scheme `{other}`"),
    }
}

/// FNV-1a over the canonical JSON form: stable across runs, sensitive to
/// every field.
pub fn config_hash(config: &RunConfig) -> String {
    use std::hash::Hasher;
    let canonical = serde_json::to_string(config).expect("config serializes");
    let mut hasher = DefaultHasher::new();
    hasher.write(canonical.as_bytes());
    format!("{:016x}", hasher.finish())
}
