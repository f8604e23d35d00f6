//! Run configuration: built from defaults, then a TOML file, then environment
//! variables, then explicit flag overrides — later layers win. Every knob is
//! range-checked once, at load time, so pipelines can trust the values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialoguesynth::DialogueLimits;

pub const ENV_API_KEY: &str = "SYTHIA_API_KEY";
pub const ENV_ENDPOINT: &str = "SYTHIA_ENDPOINT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("CONFIG_INVALID: {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("config file {path}: {message}")]
    File { path: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: message.into() }
}

/// Completion backend selection. `script` takes precedence over the HTTP
/// endpoint: when set, runs replay canned replies and are bit-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: String,
    pub max_in_flight: usize,
    /// Path to a JSONL file of scripted replies.
    pub script: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: None,
            api_key: None,
            model: "sythia-default".to_string(),
            max_in_flight: 4,
            script: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordsConfig {
    pub domain: String,
    pub use_case: Option<String>,
    pub count: usize,
    pub num_possible_scenarios: usize,
    pub retry_budget: usize,
}

impl Default for RecordsConfig {
    fn default() -> Self {
        RecordsConfig {
            domain: "Contract Lifecycle Management (CLM)".to_string(),
            use_case: None,
            count: 1,
            num_possible_scenarios: 5,
            retry_budget: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DagConfig {
    pub count: usize,
    pub max_nodes: usize,
    /// Judge rating threshold; triples below it are filtered. Range 1..5.
    pub threshold: u8,
    pub max_repairs: usize,
    pub retry_budget: usize,
}

impl Default for DagConfig {
    fn default() -> Self {
        DagConfig { count: 1, max_nodes: 8, threshold: 4, max_repairs: 2, retry_budget: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DialogueConfig {
    pub count: usize,
    pub max_turns: usize,
    pub max_revisions: usize,
    pub max_followups: usize,
    /// Probability of an injected tool failure per call. Range 0..1.
    pub failure_rate: f64,
    pub retry_budget: usize,
}

impl Default for DialogueConfig {
    fn default() -> Self {
        let limits = DialogueLimits::default();
        DialogueConfig {
            count: 1,
            max_turns: limits.max_turns,
            max_revisions: limits.max_revisions,
            max_followups: limits.max_followups,
            failure_rate: 0.15,
            retry_budget: 3,
        }
    }
}

impl DialogueConfig {
    pub fn limits(&self) -> DialogueLimits {
        DialogueLimits {
            max_turns: self.max_turns,
            max_revisions: self.max_revisions,
            max_followups: self.max_followups,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// Ascending token-count boundaries; labels must number boundaries + 1.
    pub buckets: Vec<usize>,
    pub labels: Vec<String>,
    /// Path to a JSON array of prompt templates; None uses the built-ins.
    pub templates: Option<String>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            buckets: vec![1024, 2048, 4096, 8192],
            labels: ["xs", "s", "m", "l", "xl"].map(str::to_string).to_vec(),
            templates: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub out_dir: String,
    /// Existing record JSONL consumed by `dialogue` and `rollout` when they
    /// run standalone.
    pub input: Option<String>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { out_dir: "out".to_string(), input: None }
    }
}

/// The fully merged, validated run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backend: BackendConfig,
    pub seed: u64,
    pub records: RecordsConfig,
    pub dag: DagConfig,
    pub dialogue: DialogueConfig,
    pub rollout: RolloutConfig,
    pub paths: PathsConfig,
}

/// Flag-level overrides: every field is optional; `None` leaves the lower
/// layer's value in place.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub max_in_flight: Option<usize>,
    pub script: Option<String>,
    pub seed: Option<u64>,
    pub domain: Option<String>,
    pub use_case: Option<String>,
    pub records: Option<usize>,
    pub expand_scenarios: Option<usize>,
    pub dags: Option<usize>,
    pub max_nodes: Option<usize>,
    pub threshold: Option<u8>,
    pub max_repairs: Option<usize>,
    pub conversations: Option<usize>,
    pub turns: Option<usize>,
    pub failure_rate: Option<f64>,
    pub buckets: Option<Vec<usize>>,
    pub templates: Option<String>,
    pub out_dir: Option<String>,
    pub input: Option<String>,
    pub retry_budget: Option<usize>,
}

fn apply_env(config: &mut RunConfig, env: &BTreeMap<String, String>) {
    if let Some(endpoint) = env.get(ENV_ENDPOINT) {
        config.backend.endpoint = Some(endpoint.clone());
    }
    if let Some(key) = env.get(ENV_API_KEY) {
        config.backend.api_key = Some(key.clone());
    }
}

fn apply_overrides(config: &mut RunConfig, flags: &Overrides) {
    macro_rules! set {
        ($target:expr, $source:expr) => {
            if let Some(v) = &$source {
                $target = v.clone();
            }
        };
    }
    set!(config.backend.model, flags.model);
    set!(config.backend.max_in_flight, flags.max_in_flight);
    if flags.endpoint.is_some() {
        config.backend.endpoint = flags.endpoint.clone();
    }
    if flags.api_key.is_some() {
        config.backend.api_key = flags.api_key.clone();
    }
    if flags.script.is_some() {
        config.backend.script = flags.script.clone();
    }
    set!(config.seed, flags.seed);
    set!(config.records.domain, flags.domain);
    if flags.use_case.is_some() {
        config.records.use_case = flags.use_case.clone();
    }
    set!(config.records.count, flags.records);
    set!(config.records.num_possible_scenarios, flags.expand_scenarios);
    set!(config.dag.count, flags.dags);
    set!(config.dag.max_nodes, flags.max_nodes);
    set!(config.dag.threshold, flags.threshold);
    set!(config.dag.max_repairs, flags.max_repairs);
    set!(config.dialogue.count, flags.conversations);
    set!(config.dialogue.max_turns, flags.turns);
    set!(config.dialogue.failure_rate, flags.failure_rate);
    set!(config.rollout.buckets, flags.buckets);
    if flags.templates.is_some() {
        config.rollout.templates = flags.templates.clone();
    }
    set!(config.paths.out_dir, flags.out_dir);
    if flags.input.is_some() {
        config.paths.input = flags.input.clone();
    }
    if let Some(budget) = flags.retry_budget {
        config.records.retry_budget = budget;
        config.dag.retry_budget = budget;
        config.dialogue.retry_budget = budget;
    }
}

fn validate(config: &RunConfig) -> Result<(), ConfigError> {
    if config.backend.max_in_flight == 0 {
        return Err(invalid("backend.max_in_flight", "must be at least 1"));
    }
    if !(1..=5).contains(&config.dag.threshold) {
        return Err(invalid(
            "dag.threshold",
            format!("{} out of range 1..5", config.dag.threshold),
        ));
    }
    if !(0.0..=1.0).contains(&config.dialogue.failure_rate) {
        return Err(invalid(
            "dialogue.failure_rate",
            format!("{} out of range 0..1", config.dialogue.failure_rate),
        ));
    }
    for (field, budget) in [
        ("records.retry_budget", config.records.retry_budget),
        ("dag.retry_budget", config.dag.retry_budget),
        ("dialogue.retry_budget", config.dialogue.retry_budget),
    ] {
        if budget == 0 {
            return Err(invalid(field, "must be at least 1"));
        }
    }
    if config.dag.max_nodes == 0 {
        return Err(invalid("dag.max_nodes", "must be at least 1"));
    }
    if config.dialogue.max_turns == 0 {
        return Err(invalid("dialogue.max_turns", "must be at least 1"));
    }
    if config.rollout.buckets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("rollout.buckets", "boundaries must be strictly increasing"));
    }
    if config.rollout.labels.len() != config.rollout.buckets.len() + 1 {
        return Err(invalid(
            "rollout.labels",
            format!(
                "{} labels for {} boundaries (need boundaries + 1)",
                config.rollout.labels.len(),
                config.rollout.buckets.len()
            ),
        ));
    }
    Ok(())
}

/// Merge defaults ← file ← env ← flags and validate the result.
pub fn load_config(
    path: Option<&Path>,
    env: &BTreeMap<String, String>,
    flags: &Overrides,
) -> Result<RunConfig, ConfigError> {
    let mut config = match path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            toml::from_str(&text).map_err(|e| ConfigError::File {
                path: path.display().to_string(),
                message: e.to_string(),
            })?
        }
        None => RunConfig::default(),
    };
    apply_env(&mut config, env);
    apply_overrides(&mut config, flags);
    validate(&config)?;
    Ok(config)
}

/// Snapshot the environment variables this crate reads.
pub fn env_snapshot() -> BTreeMap<String, String> {
    [ENV_API_KEY, ENV_ENDPOINT]
        .iter()
        .filter_map(|k| std::env::var(k).ok().map(|v| (k.to_string(), v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pass_validation() {
        let config = load_config(None, &BTreeMap::new(), &Overrides::default()).unwrap();
        assert_eq!(config.dag.threshold, 4);
        assert_eq!(config.rollout.labels.len(), 5);
    }

    #[test]
    fn threshold_out_of_range_names_field() {
        let flags = Overrides { threshold: Some(6), ..Overrides::default() };
        let err = load_config(None, &BTreeMap::new(), &flags).unwrap_err();
        let message = err.to_string();
        assert!(message.starts_with("CONFIG_INVALID: dag.threshold"), "{message}");
        assert!(message.contains("1..5"));
    }

    #[test]
    fn env_key_used_when_file_lacks_it() {
        let env: BTreeMap<String, String> =
            [(ENV_API_KEY.to_string(), "k-123".to_string())].into_iter().collect();
        let config = load_config(None, &env, &Overrides::default()).unwrap();
        assert_eq!(config.backend.api_key.as_deref(), Some("k-123"));
    }

    #[test]
    fn flags_beat_env_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 7\n[backend]\nendpoint = \"http://file\"\nmodel = \"file-model\"\nmax_in_flight = 2\n",
        )
        .unwrap();
        let env: BTreeMap<String, String> =
            [(ENV_ENDPOINT.to_string(), "http://env".to_string())].into_iter().collect();
        let flags = Overrides { seed: Some(9), ..Overrides::default() };
        let config = load_config(Some(&path), &env, &flags).unwrap();
        assert_eq!(config.backend.endpoint.as_deref(), Some("http://env"));
        assert_eq!(config.backend.model, "file-model");
        assert_eq!(config.seed, 9);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[dag]\nthreshold = 5\n").unwrap();
        let config = load_config(Some(&path), &BTreeMap::new(), &Overrides::default()).unwrap();
        assert_eq!(config.dag.threshold, 5);
        assert_eq!(config.dag.max_repairs, 2);
        assert_eq!(config.dialogue.failure_rate, 0.15);
    }

    #[test]
    fn bad_bucket_order_rejected() {
        let flags = Overrides { buckets: Some(vec![2048, 1024]), ..Overrides::default() };
        let err = load_config(None, &BTreeMap::new(), &flags).unwrap_err();
        assert!(err.to_string().contains("rollout.buckets"));
    }

    #[test]
    fn failure_rate_range_checked() {
        let flags = Overrides { failure_rate: Some(1.5), ..Overrides::default() };
        let err = load_config(None, &BTreeMap::new(), &flags).unwrap_err();
        assert!(err.to_string().contains("dialogue.failure_rate"));
    }

    #[test]
    fn partial_toml_sections_deserialize() {
        // RunConfig must tolerate missing sections entirely
        let config: RunConfig = toml::from_str("seed = 3").unwrap();
        assert_eq!(config.seed, 3);
        assert_eq!(config.records.retry_budget, 3);
    }
}
