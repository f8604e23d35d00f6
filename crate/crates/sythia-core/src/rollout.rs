//! Training-ready dataset assembly: prompt templates with a fixed
//! placeholder contract, final-response marker normalization, pluggable
//! token counting with length buckets, and conservation-checked JSONL
//! serialization.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dialoguesynth::Conversation;
use crate::model::AgenticRecord;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("NO_VALID_TEMPLATE: every template is missing required placeholders")]
    NoValidTemplate,
    #[error("MISSING_BINDING: no value for placeholder '{0}'")]
    MissingBinding(String),
    #[error("residual placeholder '{0}' after instantiation")]
    ResidualMarker(String),
    #[error("MARKER_UNBALANCED: {0}")]
    MarkerUnbalanced(String),
    #[error("EMPTY_SIDE: {0} text is empty")]
    EmptySide(&'static str),
    #[error("TOKENIZER_UNAVAILABLE: {0}")]
    TokenizerUnavailable(String),
    #[error("invalid bucket scheme: {0}")]
    BadScheme(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The placeholder contract every prompt template must satisfy.
pub const REQUIRED_PLACEHOLDERS: [&str; 5] = [
    "policy",
    "user_instruction",
    "tools_inputs",
    "tool_result_history",
    "output_schema_format",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTemplate {
    pub id: String,
    pub body: String,
}

fn placeholder_pattern() -> &'static regex::Regex {
    static PATTERN: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    PATTERN.get_or_init(|| regex::Regex::new(r"\{\{([A-Za-z_][A-Za-z0-9_]*)\}\}").unwrap())
}

/// A template is usable iff all five required placeholders appear.
pub fn validate_template(template: &RolloutTemplate) -> Result<(), Vec<String>> {
    let missing: Vec<String> = REQUIRED_PLACEHOLDERS
        .iter()
        .filter(|p| !template.body.contains(&format!("{{{{{p}}}}}")))
        .map(|p| p.to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(missing)
    }
}

/// Fill one uniformly chosen valid template; the result must carry zero
/// residual markers.
pub fn instantiate_prompt(
    bindings: &BTreeMap<String, String>,
    templates: &[RolloutTemplate],
    seed: u64,
) -> Result<String, RolloutError> {
    let valid: Vec<&RolloutTemplate> =
        templates.iter().filter(|t| validate_template(t).is_ok()).collect();
    if valid.is_empty() {
        return Err(RolloutError::NoValidTemplate);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = valid[rng.gen_range(0..valid.len())];
    let mut missing = None;
    let filled = placeholder_pattern().replace_all(&template.body, |caps: &regex::Captures| {
        let name = &caps[1];
        match bindings.get(name) {
            Some(value) => value.clone(),
            None => {
                missing.get_or_insert_with(|| name.to_string());
                String::new()
            }
        }
    });
    if let Some(name) = missing {
        return Err(RolloutError::MissingBinding(name));
    }
    if let Some(caps) = placeholder_pattern().captures(&filled) {
        return Err(RolloutError::ResidualMarker(caps[1].to_string()));
    }
    Ok(filled.into_owned())
}

pub const BEGIN_MARKER: &str = "[BEGIN FINAL RESPONSE]";
pub const END_MARKER: &str = "[END FINAL RESPONSE]";

fn marker_regex(which: &str) -> regex::Regex {
    regex::Regex::new(&format!(r"(?i)\[\s*{which}\s+final\s+response\s*\]")).unwrap()
}

/// Rewrite final-response markers to canonical form: casing and whitespace
/// variants normalized, duplicates collapsed to the first occurrence, BEGIN
/// strictly before END. Text without any marker passes through unchanged.
pub fn normalize_markers(text: &str) -> Result<String, RolloutError> {
    let begin_re = marker_regex("begin");
    let end_re = marker_regex("end");
    let begins = begin_re.find_iter(text).count();
    let ends = end_re.find_iter(text).count();
    if begins == 0 && ends == 0 {
        return Ok(text.to_string());
    }
    if begins == 0 || ends == 0 {
        return Err(RolloutError::MarkerUnbalanced(
            "one marker side is absent".to_string(),
        ));
    }
    let mut seen_begin = false;
    let canonical = begin_re.replace_all(text, |_: &regex::Captures| {
        if seen_begin {
            String::new()
        } else {
            seen_begin = true;
            BEGIN_MARKER.to_string()
        }
    });
    let mut seen_end = false;
    let canonical = end_re.replace_all(&canonical, |_: &regex::Captures| {
        if seen_end {
            String::new()
        } else {
            seen_end = true;
            END_MARKER.to_string()
        }
    });
    let begin_at = canonical.find(BEGIN_MARKER).expect("inserted above");
    let end_at = canonical.find(END_MARKER).expect("inserted above");
    if end_at < begin_at {
        return Err(RolloutError::MarkerUnbalanced(
            "END marker precedes BEGIN marker".to_string(),
        ));
    }
    Ok(canonical.into_owned())
}

/// Token counting backends. The builtin approximation is ceil(bytes/4); an
/// external vocabulary file can be loaded for exact counts.
pub trait Tokenizer {
    fn count(&self, text: &str) -> Result<usize, RolloutError>;
}

/// ceil(bytes / 4).
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxTokenizer;

impl Tokenizer for ApproxTokenizer {
    fn count(&self, text: &str) -> Result<usize, RolloutError> {
        Ok(text.len().div_ceil(4))
    }
}

/// Greedy longest-match over a newline-separated vocabulary file; bytes with
/// no vocabulary match count as one token each.
#[derive(Debug, Clone)]
pub struct VocabTokenizer {
    vocab: std::collections::BTreeSet<String>,
    max_len: usize,
}

impl VocabTokenizer {
    pub fn from_file(path: &Path) -> Result<Self, RolloutError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| RolloutError::TokenizerUnavailable(format!("{}: {e}", path.display())))?;
        let vocab: std::collections::BTreeSet<String> =
            raw.lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
        if vocab.is_empty() {
            return Err(RolloutError::TokenizerUnavailable(format!(
                "{}: empty vocabulary",
                path.display()
            )));
        }
        let max_len = vocab.iter().map(|t| t.len()).max().unwrap_or(1);
        Ok(VocabTokenizer { vocab, max_len })
    }
}

impl Tokenizer for VocabTokenizer {
    fn count(&self, text: &str) -> Result<usize, RolloutError> {
        let mut at = 0;
        let mut tokens = 0;
        while at < text.len() {
            let mut matched = 0;
            let upper = (at + self.max_len).min(text.len());
            for end in (at + 1..=upper).rev() {
                if !text.is_char_boundary(end) {
                    continue;
                }
                if self.vocab.contains(&text[at..end]) {
                    matched = end - at;
                    break;
                }
            }
            if matched == 0 {
                matched = text[at..].chars().next().map_or(1, char::len_utf8);
            }
            at += matched;
            tokens += 1;
        }
        Ok(tokens)
    }
}

/// Ascending boundaries splitting counts into half-open [lo, hi) intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketScheme {
    pub boundaries: Vec<usize>,
    pub labels: Vec<String>,
}

impl Default for BucketScheme {
    fn default() -> Self {
        BucketScheme {
            boundaries: vec![1024, 2048, 4096, 8192],
            labels: ["xs", "s", "m", "l", "xl"].iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl BucketScheme {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if !self.boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(RolloutError::BadScheme(
                "boundaries must be strictly increasing".to_string(),
            ));
        }
        if self.labels.len() != self.boundaries.len() + 1 {
            return Err(RolloutError::BadScheme(format!(
                "{} boundaries need {} labels, got {}",
                self.boundaries.len(),
                self.boundaries.len() + 1,
                self.labels.len()
            )));
        }
        Ok(())
    }
}

/// Label of the half-open interval containing `count`: a count equal to a
/// boundary belongs to the next bucket.
pub fn assign_bucket(count: usize, scheme: &BucketScheme) -> &str {
    let position =
        scheme.boundaries.iter().position(|&b| count < b).unwrap_or(scheme.boundaries.len());
    &scheme.labels[position]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTurn {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub label: String,
    pub token_length: usize,
    pub token_bucket: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutEntry {
    pub uuid: String,
    pub conversation: Vec<RolloutTurn>,
    pub taxonomy: Taxonomy,
    pub tags: Vec<String>,
    pub model_annotations: Value,
}

impl RolloutEntry {
    /// Hash over content only (uuid excluded), used for dedup.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for turn in &self.conversation {
            hasher.update(turn.role.as_bytes());
            hasher.update([0]);
            hasher.update(turn.content.as_bytes());
            hasher.update([0]);
        }
        hex::encode(hasher.finalize())
    }
}

/// Build one two-turn entry. The uuid comes from the caller's rng so seeded
/// runs are reproducible.
pub fn assemble_entry(
    prompt: &str,
    response: &str,
    tokenizer: &dyn Tokenizer,
    scheme: &BucketScheme,
    tags: &[String],
    annotations: Value,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutEntry, RolloutError> {
    if prompt.trim().is_empty() {
        return Err(RolloutError::EmptySide("prompt"));
    }
    if response.trim().is_empty() {
        return Err(RolloutError::EmptySide("response"));
    }
    let mut bytes = [0u8; 16];
    rng.fill(&mut bytes);
    let uuid = uuid::Builder::from_random_bytes(bytes).into_uuid().to_string();
    let token_length = tokenizer.count(prompt)? + tokenizer.count(response)?;
    Ok(RolloutEntry {
        uuid,
        conversation: vec![
            RolloutTurn { role: "user".to_string(), content: prompt.to_string() },
            RolloutTurn { role: "assistant".to_string(), content: response.to_string() },
        ],
        taxonomy: Taxonomy {
            label: "Agentic".to_string(),
            token_length,
            token_bucket: assign_bucket(token_length, scheme).to_string(),
        },
        tags: tags.to_vec(),
        model_annotations: annotations,
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RolloutStats {
    pub histogram: BTreeMap<String, usize>,
    pub rejected_templates: usize,
    pub rejected_entries: usize,
    pub emitted: usize,
    pub metadata_coverage: BTreeMap<String, f64>,
}

fn entry_is_valid(entry: &RolloutEntry, scheme: &BucketScheme) -> bool {
    entry.conversation.len() == 2
        && entry.conversation.iter().all(|t| !t.content.trim().is_empty())
        && entry.taxonomy.token_bucket == assign_bucket(entry.taxonomy.token_length, scheme)
        && placeholder_pattern().captures(&entry.conversation[1].content).is_none()
}

/// Write one entry per line via a temp file and atomic rename. Invalid
/// entries are skipped and counted; emitted + rejected always equals input.
pub fn serialize_dataset(
    entries: &[RolloutEntry],
    scheme: &BucketScheme,
    path: &Path,
) -> Result<RolloutStats, RolloutError> {
    let mut stats = RolloutStats::default();
    let temp = path.with_extension("tmp");
    {
        let mut file = std::fs::File::create(&temp)?;
        let mut with_tags = 0usize;
        let mut with_annotations = 0usize;
        for entry in entries {
            if !entry_is_valid(entry, scheme) {
                stats.rejected_entries += 1;
                continue;
            }
            serde_json::to_writer(&mut file, entry).map_err(std::io::Error::other)?;
            file.write_all(b"\n")?;
            *stats.histogram.entry(entry.taxonomy.token_bucket.clone()).or_default() += 1;
            stats.emitted += 1;
            if !entry.tags.is_empty() {
                with_tags += 1;
            }
            if entry.model_annotations.as_object().is_some_and(|o| !o.is_empty()) {
                with_annotations += 1;
            }
        }
        if stats.emitted > 0 {
            stats
                .metadata_coverage
                .insert("tags".to_string(), with_tags as f64 / stats.emitted as f64);
            stats.metadata_coverage.insert(
                "model_annotations".to_string(),
                with_annotations as f64 / stats.emitted as f64,
            );
        }
        file.flush()?;
    }
    std::fs::rename(&temp, path)?;
    Ok(stats)
}

/// Drop entries whose conversation content repeats an earlier entry.
pub fn dedup_entries(entries: Vec<RolloutEntry>) -> Vec<RolloutEntry> {
    let mut seen = std::collections::BTreeSet::new();
    entries.into_iter().filter(|e| seen.insert(e.content_hash())).collect()
}

/// Placeholder values for a synthesized record.
pub fn record_bindings(record: &AgenticRecord, schema_text: &str) -> BTreeMap<String, String> {
    let mut bindings = BTreeMap::new();
    bindings.insert("policy".to_string(), record.pseudo_code.clone());
    bindings.insert("user_instruction".to_string(), record.scenario_pack.utterance.clone());
    bindings.insert(
        "tools_inputs".to_string(),
        serde_json::to_string(&record.function_specs).expect("serializable"),
    );
    bindings.insert(
        "tool_result_history".to_string(),
        serde_json::to_string(&record.scenario_pack.function_inputs_outputs)
            .expect("serializable"),
    );
    bindings.insert("output_schema_format".to_string(), schema_text.to_string());
    bindings
}

/// The assistant side for a record: trace summary plus the marked final
/// response.
pub fn record_response(record: &AgenticRecord) -> String {
    let trace = serde_json::to_string_pretty(&record.execution).expect("serializable");
    format!(
        "{trace}\n\n{BEGIN_MARKER}\n{}\n{END_MARKER}",
        record.scenario_pack.outcome
    )
}

/// Placeholder values for a finished conversation, with its source record
/// supplying policy and tools.
pub fn conversation_bindings(
    record: &AgenticRecord,
    conversation: &Conversation,
    schema_text: &str,
) -> BTreeMap<String, String> {
    let mut bindings = record_bindings(record, schema_text);
    let first_user = conversation
        .chat_history
        .iter()
        .find(|t| t["from"] == json!("user"))
        .and_then(|t| t["content"].as_str())
        .unwrap_or_default();
    bindings.insert("user_instruction".to_string(), first_user.to_string());
    bindings.insert(
        "tool_result_history".to_string(),
        serde_json::to_string(&conversation.scratchpad).expect("serializable"),
    );
    bindings
}

/// The assistant side for a conversation: the final assistant message,
/// marked.
pub fn conversation_response(conversation: &Conversation) -> String {
    let last_assistant = conversation
        .chat_history
        .iter()
        .rev()
        .find(|t| t["from"] == json!("agent"))
        .and_then(|t| t["content"].as_str())
        .unwrap_or_default();
    format!("{BEGIN_MARKER}\n{last_assistant}\n{END_MARKER}")
}
