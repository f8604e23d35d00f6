//! Golden replay fixtures: canned backend scripts drive the record and
//! conversation pipelines end to end, and the output is diffed against a
//! stored expected payload. Fixtures live as data files next to the crate so
//! they double as documentation of the wire formats.
//!
//! Some stored strings are marked prefix-match-only (`prefix_only` paths):
//! the source transcripts truncated them, so the stored value is a verified
//! prefix of the regenerated text rather than the full string.

use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use crate::dialoguesynth::{
    finish_spec, run_session, DialogueLimits, DialogueOptions, DialogueSession,
};
use crate::gateway::ScriptedBackend;
use crate::model::FunctionSpec;
use crate::recordsynth::{synthesize_record, RecordOptions};
use crate::wire::RecordWire;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("malformed fixture: {0}")]
    Malformed(String),
    #[error("replay aborted: {0}")]
    Replay(String),
}

/// A stored fixture: expected payload plus matching rules.
#[derive(Debug, Clone, Deserialize)]
pub struct Fixture {
    pub name: String,
    /// Paths compared as string prefixes (source transcript was truncated).
    #[serde(default)]
    pub prefix_only: Vec<String>,
    /// Paths excluded from comparison (generated ids).
    #[serde(default)]
    pub ignore: Vec<String>,
    pub payload: Value,
}

/// One divergence between expected and replayed output.
#[derive(Debug, Clone)]
pub struct DiffEntry {
    pub path: String,
    pub expected: Value,
    pub actual: Value,
}

impl std::fmt::Display for DiffEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DIFF at {}: expected {}, got {}", self.path, self.expected, self.actual)
    }
}

/// Ordered divergence list; empty means the replay reproduced the payload.
#[derive(Debug, Clone, Default)]
pub struct DiffReport {
    pub divergences: Vec<DiffEntry>,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.divergences.is_empty()
    }

    /// First divergent path, the headline of a failed replay.
    pub fn first(&self) -> Option<&DiffEntry> {
        self.divergences.first()
    }
}

fn push_diff(report: &mut DiffReport, path: &str, expected: &Value, actual: &Value) {
    report.divergences.push(DiffEntry {
        path: path.to_string(),
        expected: expected.clone(),
        actual: actual.clone(),
    });
}

fn diff_walk(
    expected: &Value,
    actual: &Value,
    path: &str,
    prefix_only: &[String],
    ignore: &[String],
    report: &mut DiffReport,
) {
    if ignore.iter().any(|p| p == path) {
        return;
    }
    if prefix_only.iter().any(|p| p == path) {
        match (expected.as_str(), actual.as_str()) {
            (Some(e), Some(a)) if a.starts_with(e) => return,
            _ => {
                push_diff(report, path, expected, actual);
                return;
            }
        }
    }
    match (expected, actual) {
        (Value::Object(e), Value::Object(a)) => {
            for (key, ev) in e {
                let child = format!("{path}/{key}");
                match a.get(key) {
                    Some(av) => diff_walk(ev, av, &child, prefix_only, ignore, report),
                    None => push_diff(report, &child, ev, &Value::Null),
                }
            }
            for (key, av) in a {
                if !e.contains_key(key) {
                    let child = format!("{path}/{key}");
                    if !ignore.iter().any(|p| p == &child) {
                        push_diff(report, &child, &Value::Null, av);
                    }
                }
            }
        }
        (Value::Array(e), Value::Array(a)) => {
            if e.len() != a.len() {
                push_diff(report, path, expected, actual);
                return;
            }
            for (i, (ev, av)) in e.iter().zip(a).enumerate() {
                diff_walk(ev, av, &format!("{path}/{i}"), prefix_only, ignore, report);
            }
        }
        _ if expected == actual => {}
        _ => push_diff(report, path, expected, actual),
    }
}

/// Structural diff of the replayed output against the stored payload,
/// honoring the fixture's prefix-only and ignore paths.
pub fn diff_values(
    expected: &Value,
    actual: &Value,
    prefix_only: &[String],
    ignore: &[String],
) -> DiffReport {
    let mut report = DiffReport::default();
    diff_walk(expected, actual, "", prefix_only, ignore, &mut report);
    report
}

pub const RECORD_FIXTURE: &str = include_str!("../fixtures/record_golden.json");
pub const RECORD_SCRIPT: &str = include_str!("../fixtures/record_replay_script.jsonl");
pub const CONVERSATION_FIXTURE: &str = include_str!("../fixtures/conversation_golden.json");
pub const CONVERSATION_SCRIPT: &str =
    include_str!("../fixtures/conversation_replay_script.jsonl");
pub const CONVERSATION_CONTEXT: &str = include_str!("../fixtures/conversation_context.json");

fn load_fixture(source: &str) -> Result<Fixture, FixtureError> {
    serde_json::from_str(source).map_err(|e| FixtureError::Malformed(e.to_string()))
}

pub fn record_fixture() -> Result<Fixture, FixtureError> {
    load_fixture(RECORD_FIXTURE)
}

pub fn conversation_fixture() -> Result<Fixture, FixtureError> {
    load_fixture(CONVERSATION_FIXTURE)
}

/// Run the eight-stage record pipeline against the canned script and return
/// the replayed record in wire form.
pub fn replay_record_output() -> Result<Value, FixtureError> {
    let fixture = record_fixture()?;
    let backend = ScriptedBackend::from_jsonl(RECORD_SCRIPT)
        .map_err(|e| FixtureError::Malformed(e.to_string()))?;
    let domain = fixture.payload["domain"]
        .as_str()
        .ok_or_else(|| FixtureError::Malformed("payload lacks domain".to_string()))?;
    let options = RecordOptions { num_possible_scenarios: 1, retry_budget: 3, seed: 0 };
    let synthesized = synthesize_record(&backend, domain, None, &options)
        .map_err(|e| FixtureError::Replay(e.to_string()))?;
    serde_json::to_value(RecordWire::from(&synthesized.record))
        .map_err(|e| FixtureError::Replay(e.to_string()))
}

/// Replay the record fixture and diff against its stored payload.
pub fn replay_record() -> Result<DiffReport, FixtureError> {
    let fixture = record_fixture()?;
    let actual = replay_record_output()?;
    Ok(diff_values(&fixture.payload, &actual, &fixture.prefix_only, &fixture.ignore))
}

#[derive(Debug, Deserialize)]
struct ConversationContext {
    built_scenario: String,
    user_metadata: Value,
    tools: Vec<FunctionSpec>,
}

/// Run the dialogue loop against the canned script and return the replayed
/// conversation in wire form.
pub fn replay_conversation_output() -> Result<Value, FixtureError> {
    let context: ConversationContext = serde_json::from_str(CONVERSATION_CONTEXT)
        .map_err(|e| FixtureError::Malformed(e.to_string()))?;
    let backend = ScriptedBackend::from_jsonl(CONVERSATION_SCRIPT)
        .map_err(|e| FixtureError::Malformed(e.to_string()))?;
    let mut tools = context.tools;
    tools.push(finish_spec());
    let session = DialogueSession {
        built_scenario: context.built_scenario,
        user_metadata: context.user_metadata,
        tools,
        limits: DialogueLimits::default(),
        chat_history: Vec::new(),
        scratchpad: Vec::new(),
        followups: 0,
    };
    let options = DialogueOptions {
        limits: DialogueLimits::default(),
        failure_rate: 0.0, // replay must be injection-free
        retry_budget: 3,
        seed: 0,
    };
    let conversation = run_session(session, &backend, &options);
    serde_json::to_value(&conversation).map_err(|e| FixtureError::Replay(e.to_string()))
}

/// Replay the conversation fixture and diff against its stored payload.
pub fn replay_conversation() -> Result<DiffReport, FixtureError> {
    let fixture = conversation_fixture()?;
    let actual = replay_conversation_output()?;
    Ok(diff_values(&fixture.payload, &actual, &fixture.prefix_only, &fixture.ignore))
}

/// Replay every fixture; returns (name, report) pairs for `fixtures --verify`.
pub fn verify_all() -> Result<Vec<(String, DiffReport)>, FixtureError> {
    Ok(vec![
        (record_fixture()?.name, replay_record()?),
        (conversation_fixture()?.name, replay_conversation()?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn equal_values_diff_empty() {
        let v = json!({"a": [1, 2], "b": {"c": "x"}});
        assert!(diff_values(&v, &v, &[], &[]).is_empty());
    }

    #[test]
    fn mutated_field_reports_path() {
        let expected = json!({"a": {"b": [1, 2, 3]}});
        let actual = json!({"a": {"b": [1, 9, 3]}});
        let report = diff_values(&expected, &actual, &[], &[]);
        assert_eq!(report.first().unwrap().path, "/a/b/1");
    }

    #[test]
    fn prefix_only_accepts_longer_actual() {
        let expected = json!({"note": "cut at 40"});
        let actual = json!({"note": "cut at 40% and beyond"});
        let paths = vec!["/note".to_string()];
        assert!(diff_values(&expected, &actual, &paths, &[]).is_empty());
        // but not a different prefix
        let wrong = json!({"note": "other text"});
        assert!(!diff_values(&expected, &wrong, &paths, &[]).is_empty());
    }

    #[test]
    fn ignored_paths_are_skipped() {
        let expected = json!({"id": 0, "x": 1});
        let actual = json!({"id": "f00", "x": 1});
        assert!(diff_values(&expected, &actual, &[], &["/id".to_string()]).is_empty());
    }

    #[test]
    fn missing_and_extra_keys_diverge() {
        let expected = json!({"a": 1});
        let actual = json!({"b": 2});
        let report = diff_values(&expected, &actual, &[], &[]);
        assert_eq!(report.divergences.len(), 2);
    }

    #[test]
    fn record_fixture_replays_clean() {
        let report = replay_record().unwrap();
        assert!(
            report.is_empty(),
            "record fixture diverged: {}",
            report.first().unwrap()
        );
    }

    #[test]
    fn conversation_fixture_replays_clean() {
        let report = replay_conversation().unwrap();
        assert!(
            report.is_empty(),
            "conversation fixture diverged: {}",
            report.first().unwrap()
        );
    }

    #[test]
    fn verify_all_covers_both_fixtures() {
        let results = verify_all().unwrap();
        assert_eq!(results.len(), 2);
        assert!(results.iter().all(|(_, r)| r.is_empty()));
    }

    /// Keep a stored prefix-only value when the regenerated text still
    /// extends it, so regeneration never widens a truncated source field.
    fn keep_stored_prefixes(payload: &mut Value, stored: &Value, prefix_only: &[String]) {
        for path in prefix_only {
            let pointer = path.as_str();
            let (Some(old), Some(new)) = (stored.pointer(pointer), payload.pointer(pointer))
            else {
                continue;
            };
            if let (Some(old), Some(new)) = (old.as_str(), new.as_str()) {
                if new.starts_with(old) {
                    let old = old.to_string();
                    *payload.pointer_mut(pointer).unwrap() = Value::String(old);
                }
            }
        }
    }

    // Regeneration helper: replays both fixtures and rewrites the golden
    // payloads in place. Run explicitly after intentional format changes:
    // `cargo test -p sythia-core regenerate_goldens -- --ignored`
    #[test]
    #[ignore]
    fn regenerate_goldens() {
        let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
        for (file, output) in [
            ("record_golden.json", replay_record_output().unwrap()),
            ("conversation_golden.json", replay_conversation_output().unwrap()),
        ] {
            let stored = std::fs::read_to_string(format!("{dir}/{file}")).unwrap();
            let fixture: Fixture = serde_json::from_str(&stored).unwrap();
            let mut payload = output;
            keep_stored_prefixes(&mut payload, &fixture.payload, &fixture.prefix_only);
            let wrapped = json!({
                "name": fixture.name,
                "prefix_only": fixture.prefix_only,
                "ignore": fixture.ignore,
                "payload": payload,
            });
            std::fs::write(
                format!("{dir}/{file}"),
                serde_json::to_string_pretty(&wrapped).unwrap(),
            )
            .unwrap();
        }
    }
}
