//! Run configuration: one TOML document with a section per module, dotted
//! `key=value` overrides, and a resolved echo for the run directory.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::curation::DifficultyConfig;
use crate::judge::HttpJudgeConfig;
use crate::reward::{RewardWeights, TaskKindMap};
use crate::rollout::{ExternalPolicyConfig, PolicyKind, RolloutConfig};
use crate::sandbox::{ExecutionLimits, SandboxConfig};
use crate::tapo::TapoConfig;
use crate::toy::ToyTrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path:?}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("override {0:?}: expected key=value with a dotted key")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SandboxSection {
    pub root: PathBuf,
    pub interpreter_path: PathBuf,
    pub wall_clock_limit_ms: u64,
    pub max_stdout_bytes: usize,
    pub max_artifact_bytes: u64,
    pub shim_path: Option<PathBuf>,
}

impl Default for SandboxSection {
    fn default() -> Self {
        let l = ExecutionLimits::default();
        Self {
            root: PathBuf::from("sandbox"),
            interpreter_path: PathBuf::from("python3"),
            wall_clock_limit_ms: l.wall_clock_limit.as_millis() as u64,
            max_stdout_bytes: l.max_stdout_bytes,
            max_artifact_bytes: l.max_artifact_bytes,
            shim_path: None,
        }
    }
}

impl SandboxSection {
    pub fn limits(&self) -> ExecutionLimits {
        ExecutionLimits {
            wall_clock_limit: Duration::from_millis(self.wall_clock_limit_ms),
            max_stdout_bytes: self.max_stdout_bytes,
            max_artifact_bytes: self.max_artifact_bytes,
        }
    }

    /// Sandbox config with a relative root resolved against `base`.
    pub fn sandbox_config(&self, base: &Path) -> SandboxConfig {
        SandboxConfig {
            root: base.join(&self.root),
            interpreter_path: self.interpreter_path.clone(),
            limits: self.limits(),
            shim_path: self.shim_path.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeSection {
    pub endpoint_url: String,
    pub model_name: String,
    pub max_concurrency: usize,
    pub cache_dir: Option<PathBuf>,
    pub api_key_env: Option<String>,
    pub timeout_ms: u64,
    pub attempts: usize,
    pub backoff_ms: u64,
    /// JSONL of {example_id, crop_id, verdict} for the mock judge.
    pub mock_fixture: Option<PathBuf>,
    /// Mock verdict for pairs missing from the fixture.
    pub mock_default: Option<f64>,
}

impl Default for JudgeSection {
    fn default() -> Self {
        let h = HttpJudgeConfig::default();
        Self {
            endpoint_url: h.endpoint_url,
            model_name: h.model_name,
            max_concurrency: h.max_concurrency,
            cache_dir: None,
            api_key_env: h.api_key_env,
            timeout_ms: h.timeout.as_millis() as u64,
            attempts: h.attempts,
            backoff_ms: h.backoff.as_millis() as u64,
            mock_fixture: None,
            mock_default: None,
        }
    }
}

impl JudgeSection {
    pub fn http_config(&self) -> HttpJudgeConfig {
        HttpJudgeConfig {
            endpoint_url: self.endpoint_url.clone(),
            model_name: self.model_name.clone(),
            max_concurrency: self.max_concurrency,
            api_key_env: self.api_key_env.clone(),
            timeout: Duration::from_millis(self.timeout_ms),
            attempts: self.attempts,
            backoff: Duration::from_millis(self.backoff_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub lambda_acc: f64,
    pub lambda_tool: f64,
    pub fmt_max: f64,
    pub redline_penalty: f64,
    pub task_kind_map: TaskKindMap,
}

impl Default for RewardSection {
    fn default() -> Self {
        let w = RewardWeights::default();
        Self {
            lambda_acc: w.lambda_acc,
            lambda_tool: w.lambda_tool,
            fmt_max: w.fmt_max,
            redline_penalty: w.redline_penalty,
            task_kind_map: TaskKindMap::default(),
        }
    }
}

impl RewardSection {
    pub fn weights(&self) -> RewardWeights {
        RewardWeights {
            lambda_acc: self.lambda_acc,
            lambda_tool: self.lambda_tool,
            fmt_max: self.fmt_max,
            redline_penalty: self.redline_penalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub t_max: usize,
    pub temperature: f64,
    pub k: usize,
    pub policy: PolicyKind,
    /// Toy tasks generated when no task file is given.
    pub n_tasks: usize,
    /// JSONL of {task_id, image, question, transcript?}.
    pub tasks: Option<PathBuf>,
    /// Toy policy parameters written by train-toy.
    pub params: Option<PathBuf>,
    pub external: ExternalPolicyConfig,
}

impl Default for RolloutSection {
    fn default() -> Self {
        let r = RolloutConfig::default();
        Self {
            t_max: r.t_max,
            temperature: r.temperature,
            k: r.k,
            policy: PolicyKind::Toy,
            n_tasks: 10,
            tasks: None,
            params: None,
            external: ExternalPolicyConfig::default(),
        }
    }
}

impl RolloutSection {
    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            t_max: self.t_max,
            temperature: self.temperature,
            k: self.k,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaithfulnessSection {
    pub trajectories: Option<PathBuf>,
    pub answers: Option<PathBuf>,
    /// Directory artifact references are resolved against.
    pub artifacts_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationSection {
    pub input: Option<PathBuf>,
    /// Sources removed for needing outside knowledge.
    pub blacklist: Vec<String>,
    pub blacklist_file: Option<PathBuf>,
    /// JSONL of {record_id, correct: [bool]} replayed as policy samples.
    pub sampler_fixture: Option<PathBuf>,
    pub n_samples: usize,
    pub threshold: f64,
    pub attempts: usize,
    /// Run the judge-based label check.
    pub label_check: bool,
    pub image_root: Option<PathBuf>,
}

impl Default for CurationSection {
    fn default() -> Self {
        let d = DifficultyConfig::default();
        Self {
            input: None,
            blacklist: Vec::new(),
            blacklist_file: None,
            sampler_fixture: None,
            n_samples: d.n_samples,
            threshold: d.threshold,
            attempts: d.attempts,
            label_check: false,
            image_root: None,
        }
    }
}

impl CurationSection {
    pub fn difficulty(&self) -> DifficultyConfig {
        DifficultyConfig {
            n_samples: self.n_samples,
            threshold: self.threshold,
            attempts: self.attempts,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sandbox: SandboxSection,
    pub judge: JudgeSection,
    pub reward: RewardSection,
    pub tapo: TapoConfig,
    pub toy: ToyTrainConfig,
    pub rollout: RolloutSection,
    pub faithfulness: FaithfulnessSection,
    pub curation: CurationSection,
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.into()));
    }
    let (last, path) = parts.split_last().expect("non-empty split");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(ConfigError::Override(assignment.into())),
        };
    }
    cur.insert(last.to_string(), override_value(value));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or defaults when absent) and applies the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.into(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.reward.weights().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.tapo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sandbox.limits().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.rollout.t_max == 0 {
            return Err(ConfigError::Invalid("rollout.t_max must be positive".into()));
        }
        if !(self.rollout.temperature > 0.0) {
            return Err(ConfigError::Invalid("rollout.temperature must be positive".into()));
        }
        if self.toy.grid_size < 2 {
            return Err(ConfigError::Invalid("toy.grid_size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.toy.cue_fraction) {
            return Err(ConfigError::Invalid("toy.cue_fraction must lie in [0, 1]".into()));
        }
        if self.curation.n_samples == 0 || self.curation.attempts == 0 {
            return Err(ConfigError::Invalid("curation.n_samples and curation.attempts must be positive".into()));
        }
        Ok(())
    }

    /// Fully resolved config as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
