//! Run orchestration behind the CLI: executes the pipelines over a chosen
//! backend, writes JSONL artifacts, and records a manifest with the config
//! snapshot, input/output hashes, and per-gate counts. `all` chains the
//! pipelines: records feed the triple, dialogue, and rollout stages.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::batch::run_batch;
use crate::config::RunConfig;
use crate::dagengine::{
    builtin_templates, pick_template, run_dag_pipeline, trace_from_io, DagOptions, TripleRow,
};
use crate::dialoguesynth::{run_conversation, Conversation, DialogueOptions};
use crate::fixtures;
use crate::gateway::{ChatBackend, HttpBackend, ScriptedBackend};
use crate::model::AgenticRecord;
use crate::recordsynth::{synthesize_record, RecordOptions};
use crate::rollout::{
    assemble_entry, conversation_bindings, conversation_response, dedup_entries,
    instantiate_prompt, record_bindings, record_response, serialize_dataset, ApproxTokenizer,
    BucketScheme, RolloutEntry, RolloutTemplate,
};
use crate::wire;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("no backend: set an endpoint (flag/env/file) or a --script file")]
    NoBackend,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Wire(#[from] wire::WireError),
    #[error("script file: {0}")]
    Script(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DriverError + '_ {
    move |source| DriverError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Records,
    Dag,
    Dialogue,
    Rollout,
    All,
    Fixtures,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Records => "records",
            Command::Dag => "dag",
            Command::Dialogue => "dialogue",
            Command::Rollout => "rollout",
            Command::All => "all",
            Command::Fixtures => "fixtures",
        }
    }
}

/// Per-gate outcome counts: `emitted + rejected` covers every attempted item.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GateCount {
    pub emitted: usize,
    pub rejected: usize,
}

/// Written at the end of every run that completed or aborted cleanly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub input_hashes: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
    pub counts: BTreeMap<String, GateCount>,
    pub errors: Vec<String>,
    /// Name and cause of the stage that aborted, if any.
    pub aborted: Option<String>,
    pub wall_time_ms: u128,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String, DriverError> {
    Ok(sha256_hex(&std::fs::read(path).map_err(io_err(path))?))
}

fn make_backend(config: &RunConfig) -> Result<Box<dyn ChatBackend>, DriverError> {
    if let Some(script) = &config.backend.script {
        let path = Path::new(script);
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let backend =
            ScriptedBackend::from_jsonl(&text).map_err(|e| DriverError::Script(e.to_string()))?;
        return Ok(Box::new(backend));
    }
    if let Some(endpoint) = &config.backend.endpoint {
        let mut backend = HttpBackend::new(endpoint.clone(), config.backend.model.clone())
            .with_in_flight(config.backend.max_in_flight);
        if let Some(key) = &config.backend.api_key {
            backend = backend.with_api_key(key.clone());
        }
        return Ok(Box::new(backend));
    }
    Err(DriverError::NoBackend)
}

/// Scripted replies must be consumed in authored order, so scripted runs are
/// single-worker; live runs use the configured in-flight limit.
fn worker_limit(config: &RunConfig) -> usize {
    if config.backend.script.is_some() {
        1
    } else {
        config.backend.max_in_flight.max(1)
    }
}

/// Description of the expected assistant output shape, bound to the
/// `output_schema_format` placeholder in rollout templates.
pub const OUTPUT_SCHEMA_TEXT: &str = "Reply with the ordered tool-call trace as a JSON array, \
then the final answer between [BEGIN FINAL RESPONSE] and [END FINAL RESPONSE] markers.";

/// Built-in rollout prompt template used when no template file is given.
pub fn default_rollout_templates() -> Vec<RolloutTemplate> {
    vec![RolloutTemplate {
        id: "default".to_string(),
        body: "You are an agent operating under this policy:\n{{policy}}\n\n\
               Available tools with input schemas:\n{{tools_inputs}}\n\n\
               Tool results so far:\n{{tool_result_history}}\n\n\
               Output format: {{output_schema_format}}\n\n\
               User request: {{user_instruction}}"
            .to_string(),
    }]
}

fn load_rollout_templates(config: &RunConfig) -> Result<Vec<RolloutTemplate>, DriverError> {
    match &config.rollout.templates {
        None => Ok(default_rollout_templates()),
        Some(path) => {
            let path = Path::new(path);
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str(&text).map_err(|e| DriverError::Script(e.to_string()))
        }
    }
}

struct RunState {
    manifest: RunManifest,
    out_dir: PathBuf,
    records: Vec<AgenticRecord>,
    conversations: Vec<Conversation>,
}

impl RunState {
    fn record_output(&mut self, name: &str, path: &Path) -> Result<(), DriverError> {
        self.manifest.output_hashes.insert(name.to_string(), hash_file(path)?);
        Ok(())
    }

    fn abort(&mut self, stage: &str, cause: impl std::fmt::Display) {
        self.manifest.aborted = Some(format!("{stage}: {cause}"));
    }
}

fn stage_records(state: &mut RunState, config: &RunConfig, backend: &dyn ChatBackend) {
    let mut count = GateCount::default();
    let seeds: Vec<u64> = (0..config.records.count as u64).map(|i| config.seed + i).collect();
    let results = run_batch(seeds, worker_limit(config), |seed| {
        let options = RecordOptions {
            num_possible_scenarios: config.records.num_possible_scenarios,
            retry_budget: config.records.retry_budget,
            seed,
        };
        synthesize_record(backend, &config.records.domain, config.records.use_case.as_deref(), &options)
    });
    for result in results {
        match result {
            Ok(synthesized) => {
                count.emitted += 1;
                state.records.push(synthesized.record);
            }
            Err(e) => {
                count.rejected += 1;
                state.manifest.errors.push(format!("records: {e}"));
            }
        }
    }
    state.manifest.counts.insert("records".to_string(), count);
    let path = state.out_dir.join("records.jsonl");
    let mut buffer = Vec::new();
    if let Err(e) = wire::write_records(&mut buffer, &state.records) {
        state.abort("records", e);
        return;
    }
    if let Err(e) = std::fs::write(&path, &buffer) {
        state.abort("records", e);
        return;
    }
    if let Err(e) = state.record_output("records.jsonl", &path) {
        state.abort("records", e);
    }
}

fn load_input_records(state: &mut RunState, config: &RunConfig, stage: &str) -> bool {
    if !state.records.is_empty() {
        return true;
    }
    let Some(input) = &config.paths.input else {
        state.abort(stage, "no input records: run `records` first or pass --in");
        return false;
    };
    let path = Path::new(input);
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) => {
            state.abort(stage, format!("{input}: {e}"));
            return false;
        }
    };
    match wire::read_records(text.as_bytes()) {
        Ok(records) => {
            state
                .manifest
                .input_hashes
                .insert(input.clone(), sha256_hex(text.as_bytes()));
            state.records = records;
            true
        }
        Err(e) => {
            state.abort(stage, format!("{input}: {e}"));
            false
        }
    }
}

fn stage_dag(state: &mut RunState, config: &RunConfig, backend: &dyn ChatBackend) {
    if !load_input_records(state, config, "dag") {
        return;
    }
    let templates = builtin_templates();
    let mut count = GateCount::default();
    let mut rows: Vec<TripleRow> = Vec::new();
    let items: Vec<(u64, &AgenticRecord)> = state
        .records
        .iter()
        .take(config.dag.count)
        .enumerate()
        .map(|(i, r)| (config.seed + i as u64, r))
        .collect();
    let results = run_batch(items, worker_limit(config), |(seed, record)| {
        let Some(template) = pick_template(&templates, config.dag.max_nodes, seed) else {
            return Err(crate::dagengine::DagError::InsufficientPool);
        };
        let trace = trace_from_io(&record.scenario_pack.function_inputs_outputs, &record.function_specs);
        let options = DagOptions {
            threshold: config.dag.threshold,
            max_repairs: config.dag.max_repairs,
            retry_budget: config.dag.retry_budget,
            seed,
            ..DagOptions::default()
        };
        run_dag_pipeline(backend, template, &record.function_specs, &trace, &options)
    });
    for result in results {
        match result {
            Ok((mut emitted, stats)) => {
                count.emitted += emitted.len();
                count.rejected += stats.filtered + stats.errors.len();
                state.manifest.errors.extend(stats.errors.iter().map(|e| format!("dag: {e}")));
                rows.append(&mut emitted);
            }
            Err(e) => {
                count.rejected += 1;
                state.manifest.errors.push(format!("dag: {e}"));
            }
        }
    }
    state.manifest.counts.insert("dag".to_string(), count);
    let path = state.out_dir.join("triples.jsonl");
    let lines: Vec<String> = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable"))
        .collect();
    if let Err(e) = std::fs::write(&path, lines.join("\n") + "\n") {
        state.abort("dag", e);
        return;
    }
    if let Err(e) = state.record_output("triples.jsonl", &path) {
        state.abort("dag", e);
    }
}

fn stage_dialogue(state: &mut RunState, config: &RunConfig, backend: &dyn ChatBackend) {
    if !load_input_records(state, config, "dialogue") {
        return;
    }
    let mut count = GateCount::default();
    let items: Vec<(u64, &AgenticRecord)> = state
        .records
        .iter()
        .take(config.dialogue.count)
        .enumerate()
        .map(|(i, r)| (config.seed + i as u64, r))
        .collect();
    let results = run_batch(items, worker_limit(config), |(seed, record)| {
        let options = DialogueOptions {
            limits: config.dialogue.limits(),
            failure_rate: config.dialogue.failure_rate,
            retry_budget: config.dialogue.retry_budget,
            seed,
        };
        run_conversation(record, &record.selected_scenario, json!({}), backend, &options)
    });
    let mut conversations = Vec::new();
    for result in results {
        match result {
            Ok(conversation) => {
                if conversation.failed {
                    count.rejected += 1;
                    state
                        .manifest
                        .errors
                        .extend(conversation.error_logging.iter().map(|e| format!("dialogue: {e}")));
                } else {
                    count.emitted += 1;
                }
                conversations.push(conversation);
            }
            Err(e) => {
                count.rejected += 1;
                state.manifest.errors.push(format!("dialogue: {e}"));
            }
        }
    }
    state.manifest.counts.insert("dialogue".to_string(), count);
    let path = state.out_dir.join("conversations.jsonl");
    let lines: Vec<String> = conversations
        .iter()
        .map(|c| serde_json::to_string(c).expect("serializable"))
        .collect();
    if let Err(e) = std::fs::write(&path, lines.join("\n") + "\n") {
        state.abort("dialogue", e);
        return;
    }
    if let Err(e) = state.record_output("conversations.jsonl", &path) {
        state.abort("dialogue", e);
        return;
    }
    state.conversations = conversations;
}

fn stage_rollout(state: &mut RunState, config: &RunConfig) {
    if !load_input_records(state, config, "rollout") {
        return;
    }
    let templates = match load_rollout_templates(config) {
        Ok(templates) => templates,
        Err(e) => {
            state.abort("rollout", e);
            return;
        }
    };
    let scheme = BucketScheme {
        boundaries: config.rollout.buckets.clone(),
        labels: config.rollout.labels.clone(),
    };
    if let Err(e) = scheme.validate() {
        state.abort("rollout", e);
        return;
    }
    let tokenizer = ApproxTokenizer;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut count = GateCount::default();
    let mut jobs = Vec::new();
    for record in &state.records {
        jobs.push((
            record_bindings(record, OUTPUT_SCHEMA_TEXT),
            record_response(record),
            "record",
        ));
    }
    for (record, conversation) in state.records.iter().zip(&state.conversations) {
        if conversation.failed {
            continue;
        }
        jobs.push((
            conversation_bindings(record, conversation, OUTPUT_SCHEMA_TEXT),
            conversation_response(conversation),
            "conversation",
        ));
    }
    let mut entries: Vec<RolloutEntry> = Vec::new();
    for (bindings, response, tag) in jobs {
        let prompt = match instantiate_prompt(&bindings, &templates, config.seed) {
            Ok(prompt) => prompt,
            Err(e) => {
                count.rejected += 1;
                state.manifest.errors.push(format!("rollout: {e}"));
                continue;
            }
        };
        let tags = vec![tag.to_string()];
        match assemble_entry(&prompt, &response, &tokenizer, &scheme, &tags, json!({}), &mut rng) {
            Ok(entry) => entries.push(entry),
            Err(e) => {
                count.rejected += 1;
                state.manifest.errors.push(format!("rollout: {e}"));
            }
        }
    }
    let entries = dedup_entries(entries);
    let path = state.out_dir.join("rollout.jsonl");
    match serialize_dataset(&entries, &scheme, &path) {
        Ok(stats) => {
            count.emitted = stats.emitted;
            count.rejected += stats.rejected_entries;
            state.manifest.counts.insert("rollout".to_string(), count);
            let stats_path = state.out_dir.join("rollout_stats.json");
            let stats_json = serde_json::to_string_pretty(&stats).expect("serializable");
            if let Err(e) = std::fs::write(&stats_path, stats_json) {
                state.abort("rollout", e);
                return;
            }
            if let Err(e) = state.record_output("rollout.jsonl", &path) {
                state.abort("rollout", e);
                return;
            }
            if let Err(e) = state.record_output("rollout_stats.json", &stats_path) {
                state.abort("rollout", e);
            }
        }
        Err(e) => {
            state.manifest.counts.insert("rollout".to_string(), count);
            state.abort("rollout", e);
        }
    }
}

fn stage_fixtures(state: &mut RunState) {
    match fixtures::verify_all() {
        Ok(results) => {
            let mut count = GateCount::default();
            for (name, report) in results {
                if report.is_empty() {
                    count.emitted += 1;
                } else {
                    count.rejected += 1;
                    let first = report.first().expect("non-empty report");
                    state.manifest.errors.push(format!("fixtures: {name}: {first}"));
                }
            }
            if count.rejected > 0 {
                state.abort("fixtures", "replay diverged from stored payload");
            }
            state.manifest.counts.insert("fixtures".to_string(), count);
        }
        Err(e) => state.abort("fixtures", e),
    }
}

/// Execute one command. Returns the manifest and the process exit status:
/// zero iff no stage aborted. The manifest is also written to the output
/// directory as `manifest-<command>.json`.
pub fn run(command: Command, config: &RunConfig) -> Result<(i32, RunManifest), DriverError> {
    let started = Instant::now();
    let out_dir = PathBuf::from(&config.paths.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let mut state = RunState {
        manifest: RunManifest {
            command: command.name().to_string(),
            config: config.clone(),
            input_hashes: BTreeMap::new(),
            output_hashes: BTreeMap::new(),
            counts: BTreeMap::new(),
            errors: Vec::new(),
            aborted: None,
            wall_time_ms: 0,
        },
        out_dir,
        records: Vec::new(),
        conversations: Vec::new(),
    };
    if let Some(script) = &config.backend.script {
        let path = Path::new(script);
        state
            .manifest
            .input_hashes
            .insert(script.clone(), hash_file(path)?);
    }

    let needs_backend = !matches!(command, Command::Rollout | Command::Fixtures);
    let backend = if needs_backend { Some(make_backend(config)?) } else { None };
    let backend = backend.as_deref();

    let stages: Vec<Command> = match command {
        Command::All => vec![Command::Records, Command::Dag, Command::Dialogue, Command::Rollout],
        other => vec![other],
    };
    for stage in stages {
        if state.manifest.aborted.is_some() {
            break;
        }
        match stage {
            Command::Records => stage_records(&mut state, config, backend.expect("backend")),
            Command::Dag => stage_dag(&mut state, config, backend.expect("backend")),
            Command::Dialogue => stage_dialogue(&mut state, config, backend.expect("backend")),
            Command::Rollout => stage_rollout(&mut state, config),
            Command::Fixtures => stage_fixtures(&mut state),
            Command::All => unreachable!(),
        }
    }

    state.manifest.wall_time_ms = started.elapsed().as_millis();
    let manifest_path = state.out_dir.join(format!("manifest-{}.json", command.name()));
    let manifest_json =
        serde_json::to_string_pretty(&state.manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, manifest_json).map_err(io_err(&manifest_path))?;
    let exit = if state.manifest.aborted.is_none() { 0 } else { 1 };
    Ok((exit, state.manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{RECORD_FIXTURE, RECORD_SCRIPT};

    fn scripted_config(dir: &Path, script_lines: &str, out: &str) -> RunConfig {
        let script_path = dir.join("script.jsonl");
        std::fs::write(&script_path, script_lines).unwrap();
        let mut config = RunConfig::default();
        config.backend.script = Some(script_path.display().to_string());
        config.paths.out_dir = dir.join(out).display().to_string();
        config.records.num_possible_scenarios = 1;
        config
    }

    #[test]
    fn records_run_writes_manifest_and_output() {
        let dir = tempfile::tempdir().unwrap();
        let config = scripted_config(dir.path(), RECORD_SCRIPT, "out");
        let (exit, manifest) = run(Command::Records, &config).unwrap();
        assert_eq!(exit, 0);
        assert_eq!(manifest.counts["records"].emitted, 1);
        assert_eq!(manifest.counts["records"].rejected, 0);
        assert!(manifest.output_hashes.contains_key("records.jsonl"));
        assert!(dir.path().join("out/manifest-records.json").exists());
        // the emitted record matches the stored fixture payload's domain
        let fixture: serde_json::Value = serde_json::from_str(RECORD_FIXTURE).unwrap();
        let line = std::fs::read_to_string(dir.path().join("out/records.jsonl")).unwrap();
        let emitted: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert_eq!(emitted["domain"], fixture["payload"]["domain"]);
    }

    #[test]
    fn missing_backend_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = RunConfig::default();
        config.paths.out_dir = dir.path().join("out").display().to_string();
        let err = run(Command::Records, &config).unwrap_err();
        assert!(matches!(err, DriverError::NoBackend));
    }

    #[test]
    fn rollout_without_input_aborts_with_stage_name() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = RunConfig::default();
        config.paths.out_dir = dir.path().join("out").display().to_string();
        let (exit, manifest) = run(Command::Rollout, &config).unwrap();
        assert_eq!(exit, 1);
        assert!(manifest.aborted.unwrap().starts_with("rollout:"));
    }

    #[test]
    fn rollout_over_stored_records_conserves_counts() {
        let dir = tempfile::tempdir().unwrap();
        // produce records first
        let config = scripted_config(dir.path(), RECORD_SCRIPT, "out");
        run(Command::Records, &config).unwrap();
        let mut config = RunConfig::default();
        config.paths.out_dir = dir.path().join("out2").display().to_string();
        config.paths.input =
            Some(dir.path().join("out/records.jsonl").display().to_string());
        let (exit, manifest) = run(Command::Rollout, &config).unwrap();
        assert_eq!(exit, 0);
        let count = &manifest.counts["rollout"];
        assert_eq!(count.emitted + count.rejected, 1);
        assert!(manifest.input_hashes.len() == 1);
    }

    #[test]
    fn missing_template_file_aborts_rollout() {
        let dir = tempfile::tempdir().unwrap();
        let config = scripted_config(dir.path(), RECORD_SCRIPT, "out");
        run(Command::Records, &config).unwrap();
        let mut config = RunConfig::default();
        config.paths.out_dir = dir.path().join("out3").display().to_string();
        config.paths.input =
            Some(dir.path().join("out/records.jsonl").display().to_string());
        config.rollout.templates = Some(dir.path().join("missing.json").display().to_string());
        let (exit, manifest) = run(Command::Rollout, &config).unwrap();
        assert_eq!(exit, 1);
        assert!(manifest.aborted.unwrap().starts_with("rollout:"));
    }

    #[test]
    fn fixtures_command_verifies_goldens() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = RunConfig::default();
        config.paths.out_dir = dir.path().join("out").display().to_string();
        let (exit, manifest) = run(Command::Fixtures, &config).unwrap();
        assert_eq!(exit, 0);
        assert_eq!(manifest.counts["fixtures"].emitted, 2);
    }

    #[test]
    fn seeded_records_runs_hash_identically() {
        let dir = tempfile::tempdir().unwrap();
        let config_a = scripted_config(dir.path(), RECORD_SCRIPT, "a");
        let config_b = scripted_config(dir.path(), RECORD_SCRIPT, "b");
        let (_, first) = run(Command::Records, &config_a).unwrap();
        let (_, second) = run(Command::Records, &config_b).unwrap();
        assert_eq!(first.output_hashes["records.jsonl"], second.output_hashes["records.jsonl"]);
    }
}
