//! Staged synthesis of complete agentic records: eight sequential generation
//! stages, each gated by a structural check, orchestrated by
//! [`synthesize_record`]. A stage that fails its gate is retried against the
//! backend up to the configured budget; bad output is never repaired
//! silently.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gateway::{self, ChatBackend, ChatMessage, GatewayError, Sampling};
use crate::model::{
    record_fingerprint, validate_record, AgenticRecord, ExecutionStep, FunctionIO,
    FunctionSignature, FunctionSpec, UserScenarioPack,
};
use crate::schemaval;
use crate::sigparse::{self, Shape};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("COUNT_MISMATCH: expected {expected} item(s), model returned {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("MULTI_PARAGRAPH: expected a single paragraph")]
    MultiParagraph,
    #[error("EMPTY_REPLY: reply is empty or whitespace")]
    EmptyReply,
    #[error("DUPLICATE_NAME: function '{0}' declared more than once")]
    DuplicateName(String),
    #[error("MALFORMED_SIGNATURE: {0}")]
    MalformedSignature(#[from] sigparse::ParseError),
    #[error("UNKNOWN_FUNCTION_IN_CODE: [{}]", .0.join(", "))]
    UnknownFunctionInCode(Vec<String>),
    #[error("MISSING_FIELD: {0}")]
    MissingField(String),
    #[error("UNKNOWN_FUNCTION: call names undeclared function '{0}'")]
    UnknownFunction(String),
    #[error("SPEC_NAME_MISMATCH: {0}")]
    SpecNameMismatch(String),
    #[error("BAD_SPEC: {0}")]
    BadSpec(String),
    #[error("invalid execution trace: [{}]", .0.join("; "))]
    ExecutionInvariant(Vec<String>),
    #[error("malformed payload: {0}")]
    BadPayload(String),
    #[error("stage {stage} failed: {source}")]
    StageFailed {
        stage: u8,
        #[source]
        source: Box<SynthError>,
    },
}

/// Per-stage log entry: how many backend calls the stage took and what the
/// rejected attempts were complaining about.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StageOutcome {
    pub stage: u8,
    pub attempts: usize,
    pub rejections: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RecordOptions {
    /// Alternative scenarios generated at stage 5.
    pub num_possible_scenarios: usize,
    /// Backend attempts per stage before giving up.
    pub retry_budget: usize,
    /// Drives possible-scenario selection (and nothing else).
    pub seed: u64,
}

impl Default for RecordOptions {
    fn default() -> Self {
        RecordOptions { num_possible_scenarios: 5, retry_budget: 3, seed: 0 }
    }
}

fn bindings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Retry loop shared by every stage: complete, extract (optional), gate.
/// Gateway transport errors abort immediately; gate rejections re-prompt.
fn staged<T>(
    backend: &dyn ChatBackend,
    messages: &[ChatMessage],
    sampling: &Sampling,
    budget: usize,
    gate: impl Fn(&str) -> Result<T, SynthError>,
) -> Result<(T, usize, Vec<String>), SynthError> {
    assert!(budget >= 1);
    let mut rejections = Vec::new();
    let mut last: Option<SynthError> = None;
    for attempt in 1..=budget {
        let reply = backend.complete(messages, sampling)?;
        match gate(&reply) {
            Ok(value) => return Ok((value, attempt, rejections)),
            Err(e) => {
                rejections.push(e.to_string());
                last = Some(e);
            }
        }
    }
    Err(last.expect("budget >= 1"))
}

fn extract_list_of_text(reply: &str) -> Result<Vec<String>, SynthError> {
    let extracted = sigparse::extract_structured(reply, Shape::ListOfText)
        .map_err(|e| SynthError::BadPayload(e.to_string()))?;
    Ok(extracted
        .value
        .as_array()
        .expect("ListOfText is an array")
        .iter()
        .map(|v| v.as_str().expect("ListOfText items are strings").to_string())
        .collect())
}

/// Stage 1: plausible use cases for a domain. `num == 0` short-circuits
/// without a backend call.
pub fn create_scenarios(
    backend: &dyn ChatBackend,
    domain: &str,
    num: usize,
    budget: usize,
) -> Result<(Vec<String>, usize, Vec<String>), SynthError> {
    if num == 0 {
        return Ok((Vec::new(), 0, Vec::new()));
    }
    let messages = gateway::render_template(
        "create_scenario",
        &bindings(&[("num", &num.to_string()), ("domain", domain)]),
    )?;
    staged(backend, &messages, &Sampling::generation(), budget, |reply| {
        let items = extract_list_of_text(reply)?;
        if items.len() != num {
            return Err(SynthError::CountMismatch { expected: num, found: items.len() });
        }
        if let Some(i) = items.iter().position(|s| s.trim().is_empty()) {
            return Err(SynthError::MissingField(format!("use case {i} is empty")));
        }
        Ok(items)
    })
}

/// Stage 2: one-paragraph agentic scenario.
pub fn create_agentic_scenario(
    backend: &dyn ChatBackend,
    domain: &str,
    use_case: &str,
    budget: usize,
) -> Result<(String, usize, Vec<String>), SynthError> {
    let messages = gateway::render_template(
        "create_agentic_scenario",
        &bindings(&[("domain", domain), ("use_case", use_case)]),
    )?;
    staged(backend, &messages, &Sampling::generation(), budget, |reply| {
        let text = reply.trim();
        if text.is_empty() {
            return Err(SynthError::EmptyReply);
        }
        if text.lines().any(|l| l.trim().is_empty()) {
            return Err(SynthError::MultiParagraph);
        }
        Ok(text.to_string())
    })
}

/// Stage 3: tool inventory as parsed signatures.
pub fn create_functions_list(
    backend: &dyn ChatBackend,
    domain: &str,
    use_case: &str,
    agentic_scenario: &str,
    budget: usize,
) -> Result<(Vec<FunctionSignature>, usize, Vec<String>), SynthError> {
    let messages = gateway::render_template(
        "create_functions_list",
        &bindings(&[
            ("domain", domain),
            ("use_case", use_case),
            ("agentic_scenario", agentic_scenario),
        ]),
    )?;
    staged(backend, &messages, &Sampling::generation(), budget, |reply| {
        let (functions, _warnings) = sigparse::parse_functions_list(reply)?;
        let mut seen = BTreeSet::new();
        for f in &functions {
            if !seen.insert(f.name.clone()) {
                return Err(SynthError::DuplicateName(f.name.clone()));
            }
        }
        Ok(functions)
    })
}

const CODE_KEYWORDS: &[&str] = &[
    "function", "def", "if", "elif", "else", "while", "for", "in", "not", "and", "or", "return",
    "print", "len", "range", "enumerate", "isinstance", "str", "int", "float", "bool", "list",
    "dict", "set", "tuple", "sorted", "min", "max", "sum", "abs", "zip", "any", "all", "format",
];

/// Lexical scan: every `name(` occurrence that is not a method call, a
/// definition, or a language builtin. Returns (unknown, total call count).
pub fn scan_calls(code: &str, declared: &BTreeSet<&str>) -> (Vec<String>, usize) {
    let pattern = regex::Regex::new(r"([A-Za-z_][A-Za-z0-9_]*)\s*\(").unwrap();
    let mut unknown = Vec::new();
    let mut calls = 0usize;
    for capture in pattern.captures_iter(code) {
        let whole = capture.get(0).unwrap();
        let name = &capture[1];
        // method call or partial identifier
        let before = code[..whole.start()].chars().next_back();
        if matches!(before, Some('.')) {
            continue;
        }
        if CODE_KEYWORDS.contains(&name) {
            continue;
        }
        // definition site: `def name(` / `function name(`
        let prefix = code[..whole.start()].trim_end();
        if prefix.ends_with("def") || prefix.ends_with("function") {
            continue;
        }
        calls += 1;
        if !declared.contains(name) && !unknown.iter().any(|u| u == name) {
            unknown.push(name.to_string());
        }
    }
    (unknown, calls)
}

/// Stage 4: policy pseudo code over the declared functions.
pub fn create_pseudo_code(
    backend: &dyn ChatBackend,
    domain: &str,
    use_case: &str,
    agentic_scenario: &str,
    functions: &[FunctionSignature],
    budget: usize,
) -> Result<(String, usize, Vec<String>), SynthError> {
    let function_list = sigparse::format_functions_list(functions);
    let messages = gateway::render_template(
        "create_pseudo_code",
        &bindings(&[
            ("domain", domain),
            ("use_case", use_case),
            ("agentic_scenario", agentic_scenario),
            ("function_list", &function_list),
        ]),
    )?;
    let declared: BTreeSet<&str> = functions.iter().map(|f| f.name.as_str()).collect();
    staged(backend, &messages, &Sampling::generation(), budget, |reply| {
        let code = reply.trim();
        if code.is_empty() {
            return Err(SynthError::EmptyReply);
        }
        let (unknown, _calls) = scan_calls(code, &declared);
        if !unknown.is_empty() {
            return Err(SynthError::UnknownFunctionInCode(unknown));
        }
        Ok(code.to_string())
    })
}

/// Stage 5: alternative scenario list. Case-insensitive duplicates are
/// removed after the cardinality gate.
pub fn create_possible_scenarios(
    backend: &dyn ChatBackend,
    agentic_scenario: &str,
    functions: &[FunctionSignature],
    pseudo_code: &str,
    num: usize,
    budget: usize,
) -> Result<(Vec<String>, usize, Vec<String>), SynthError> {
    if num == 0 {
        return Ok((Vec::new(), 0, Vec::new()));
    }
    let function_list = sigparse::format_functions_list(functions);
    let messages = gateway::render_template(
        "create_possible_scenarios",
        &bindings(&[
            ("num", &num.to_string()),
            ("agentic_scenario", agentic_scenario),
            ("function_list", &function_list),
            ("pseudo_code", pseudo_code),
        ]),
    )?;
    staged(backend, &messages, &Sampling::generation(), budget, |reply| {
        let items = extract_list_of_text(reply)?;
        if items.len() != num {
            return Err(SynthError::CountMismatch { expected: num, found: items.len() });
        }
        let mut seen = BTreeSet::new();
        let deduped: Vec<String> = items
            .into_iter()
            .filter(|s| seen.insert(s.to_lowercase()))
            .collect();
        Ok(deduped)
    })
}

/// Stage 6: utterance, grounded calls, flow summary, outcome.
pub fn create_user_scenario_pack(
    backend: &dyn ChatBackend,
    scenario: &str,
    policy: &str,
    functions: &[FunctionSignature],
    pseudo_code: &str,
    budget: usize,
) -> Result<(UserScenarioPack, usize, Vec<String>), SynthError> {
    let function_list = sigparse::format_functions_list(functions);
    let messages = gateway::render_template(
        "create_user_scenario",
        &bindings(&[
            ("scenario", scenario),
            ("policy", policy),
            ("function_list", &function_list),
            ("pseudo_code", pseudo_code),
        ]),
    )?;
    let declared: BTreeSet<&str> = functions.iter().map(|f| f.name.as_str()).collect();
    staged(backend, &messages, &Sampling::generation(), budget, |reply| {
        let extracted = sigparse::extract_structured(reply, Shape::Object)
            .map_err(|e| SynthError::BadPayload(e.to_string()))?;
        let object = extracted.value.as_object().expect("Object shape");
        for field in ["utterance", "function_inputs_outputs", "flow_summary", "outcome"] {
            if !object.contains_key(field) {
                return Err(SynthError::MissingField(field.to_string()));
            }
        }
        let io: Vec<FunctionIO> =
            serde_json::from_value(object["function_inputs_outputs"].clone())
                .map_err(|e| SynthError::BadPayload(e.to_string()))?;
        for entry in &io {
            let call = sigparse::parse_call(&entry.function_call)?;
            if !declared.contains(call.name.as_str()) {
                return Err(SynthError::UnknownFunction(call.name));
            }
        }
        let text = |key: &str| -> Result<String, SynthError> {
            object[key]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| SynthError::MissingField(format!("{key} must be text")))
        };
        Ok(UserScenarioPack {
            utterance: text("utterance")?,
            function_inputs_outputs: io,
            flow_summary: text("flow_summary")?,
            outcome: text("outcome")?,
        })
    })
}

/// Stage 7: typed function specs, one per signature.
pub fn create_function_descriptions(
    backend: &dyn ChatBackend,
    functions: &[FunctionSignature],
    pseudo_code: &str,
    pack: &UserScenarioPack,
    budget: usize,
) -> Result<(Vec<FunctionSpec>, usize, Vec<String>), SynthError> {
    let function_list = sigparse::format_functions_list(functions);
    let io_json = serde_json::to_string(&pack.function_inputs_outputs).expect("serializable");
    let messages = gateway::render_template(
        "create_function_descriptions",
        &bindings(&[
            ("function_list", &function_list),
            ("pseudo_code", pseudo_code),
            ("function_inputs_outputs", &io_json),
        ]),
    )?;
    let declared: BTreeSet<&str> = functions.iter().map(|f| f.name.as_str()).collect();
    staged(backend, &messages, &Sampling::generation(), budget, |reply| {
        let extracted = sigparse::extract_structured(reply, Shape::Array)
            .map_err(|e| SynthError::BadPayload(e.to_string()))?;
        let specs: Vec<FunctionSpec> = serde_json::from_value(extracted.value)
            .map_err(|e| SynthError::BadPayload(e.to_string()))?;
        let spec_names: BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        if spec_names != declared || specs.len() != functions.len() {
            let missing: Vec<&str> = declared.difference(&spec_names).copied().collect();
            let extra: Vec<&str> = spec_names.difference(&declared).copied().collect();
            return Err(SynthError::SpecNameMismatch(format!(
                "missing specs: [{}], unknown specs: [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        for spec in &specs {
            let violations = schemaval::validate_spec(spec);
            if !violations.is_empty() {
                return Err(SynthError::BadSpec(
                    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
                ));
            }
        }
        Ok(specs)
    })
}

/// Stage 8: ordered execution trace over the grounded calls.
pub fn create_agentic_execution(
    backend: &dyn ChatBackend,
    pack: &UserScenarioPack,
    policy: &str,
    functions: &[FunctionSignature],
    budget: usize,
) -> Result<(Vec<ExecutionStep>, usize, Vec<String>), SynthError> {
    let io_json = serde_json::to_string(&pack.function_inputs_outputs).expect("serializable");
    let messages = gateway::render_template(
        "create_agentic_execution",
        &bindings(&[
            ("utterance", &pack.utterance),
            ("policy", policy),
            ("function_inputs_outputs", &io_json),
            ("flow_summary", &pack.flow_summary),
            ("outcome", &pack.outcome),
        ]),
    )?;
    let declared: BTreeSet<&str> = functions.iter().map(|f| f.name.as_str()).collect();
    let pack_names: BTreeSet<String> = pack
        .function_inputs_outputs
        .iter()
        .filter_map(|io| sigparse::parse_call(&io.function_call).ok().map(|c| c.name))
        .collect();
    staged(backend, &messages, &Sampling::generation(), budget, |reply| {
        let extracted = sigparse::extract_structured(reply, Shape::Array)
            .map_err(|e| SynthError::BadPayload(e.to_string()))?;
        let steps: Vec<ExecutionStep> = serde_json::from_value(extracted.value)
            .map_err(|e| SynthError::BadPayload(e.to_string()))?;
        let mut problems = Vec::new();
        for (i, step) in steps.iter().enumerate() {
            let n = step.functions_executed.len();
            if step.step_number != (i as u32) + 1 {
                problems.push(format!("step {}: non-consecutive step_number", i + 1));
            }
            if step.is_parallel != (n > 1) {
                problems.push(format!("step {}: PARALLEL_FLAG_MISMATCH", i + 1));
            }
            if step.output.len() != n || (n > 1 && step.input.len() != n) {
                problems.push(format!("step {}: ALIGNMENT_MISMATCH", i + 1));
            }
            for call_text in &step.functions_executed {
                match sigparse::parse_call(call_text) {
                    Ok(call) => {
                        if !declared.contains(call.name.as_str()) {
                            problems.push(format!("step {}: UNKNOWN_FUNCTION '{}'", i + 1, call.name));
                        } else if !pack_names.contains(&call.name) {
                            problems.push(format!(
                                "step {}: call '{}' not grounded in function_inputs_outputs",
                                i + 1,
                                call.name
                            ));
                        }
                    }
                    Err(e) => problems.push(format!("step {}: unparseable call: {e}", i + 1)),
                }
            }
        }
        if steps.is_empty() {
            problems.push("empty execution trace".to_string());
        }
        if !problems.is_empty() {
            return Err(SynthError::ExecutionInvariant(problems));
        }
        Ok(steps)
    })
}

/// Result of a full synthesis run: the validated record plus the per-stage
/// attempt log.
#[derive(Debug)]
pub struct Synthesized {
    pub record: AgenticRecord,
    pub stages: Vec<StageOutcome>,
}

/// Run all eight stages for one (domain, use case). When `use_case` is None,
/// stage 1 generates one and it is consumed directly.
pub fn synthesize_record(
    backend: &dyn ChatBackend,
    domain: &str,
    use_case: Option<&str>,
    options: &RecordOptions,
) -> Result<Synthesized, SynthError> {
    let budget = options.retry_budget;
    let mut stages = Vec::new();
    let fail = |stage: u8| move |e: SynthError| SynthError::StageFailed { stage, source: Box::new(e) };
    let mut log = |stage: u8, attempts: usize, rejections: Vec<String>| {
        stages.push(StageOutcome { stage, attempts, rejections });
    };

    let use_case = match use_case {
        Some(u) => u.to_string(),
        None => {
            let (mut cases, attempts, rejections) =
                create_scenarios(backend, domain, 1, budget).map_err(fail(1))?;
            log(1, attempts, rejections);
            cases.remove(0)
        }
    };

    let (agentic_scenario, attempts, rejections) =
        create_agentic_scenario(backend, domain, &use_case, budget).map_err(fail(2))?;
    log(2, attempts, rejections);

    let (functions, attempts, rejections) =
        create_functions_list(backend, domain, &use_case, &agentic_scenario, budget)
            .map_err(fail(3))?;
    log(3, attempts, rejections);

    let (pseudo_code, attempts, rejections) =
        create_pseudo_code(backend, domain, &use_case, &agentic_scenario, &functions, budget)
            .map_err(fail(4))?;
    log(4, attempts, rejections);

    let (possible_scenarios, attempts, rejections) = create_possible_scenarios(
        backend,
        &agentic_scenario,
        &functions,
        &pseudo_code,
        options.num_possible_scenarios,
        budget,
    )
    .map_err(fail(5))?;
    log(5, attempts, rejections);

    // uniform selection under the run seed
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let selected = if possible_scenarios.is_empty() {
        use_case.clone()
    } else {
        possible_scenarios[rng.gen_range(0..possible_scenarios.len())].clone()
    };

    let (pack, attempts, rejections) = create_user_scenario_pack(
        backend,
        &selected,
        &agentic_scenario,
        &functions,
        &pseudo_code,
        budget,
    )
    .map_err(fail(6))?;
    log(6, attempts, rejections);

    let (function_specs, attempts, rejections) =
        create_function_descriptions(backend, &functions, &pseudo_code, &pack, budget)
            .map_err(fail(7))?;
    log(7, attempts, rejections);

    let (execution, attempts, rejections) =
        create_agentic_execution(backend, &pack, &agentic_scenario, &functions, budget)
            .map_err(fail(8))?;
    log(8, attempts, rejections);

    let mut record = AgenticRecord {
        domain: domain.to_string(),
        use_case,
        agentic_scenario,
        functions,
        function_specs,
        pseudo_code,
        possible_scenarios,
        selected_scenario: selected,
        scenario_pack: pack,
        execution,
        id: String::new(),
    };
    record.id = record_fingerprint(&record);

    // emission gate: a record never leaves this function invalid
    let report = validate_record(&record);
    if !report.is_empty() {
        return Err(SynthError::ExecutionInvariant(
            report.violations.iter().map(|v| format!("{}: {}", v.path, v.message)).collect(),
        ));
    }
    Ok(Synthesized { record, stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedBackend;

    #[test]
    fn zero_scenarios_makes_no_backend_call() {
        let backend = ScriptedBackend::from_replies(Vec::<String>::new());
        let (items, attempts, _) = create_scenarios(&backend, "ITSM", 0, 3).unwrap();
        assert!(items.is_empty());
        assert_eq!(attempts, 0);
        assert_eq!(backend.remaining(), 0);
    }

    #[test]
    fn count_mismatch_after_retries() {
        let four = r#"["a", "b", "c", "d"]"#;
        let backend = ScriptedBackend::from_replies(vec![four, four, four]);
        let err = create_scenarios(&backend, "ITSM", 5, 3).unwrap_err();
        assert!(matches!(err, SynthError::CountMismatch { expected: 5, found: 4 }));
    }

    #[test]
    fn scenario_gate_retries_then_succeeds() {
        let backend = ScriptedBackend::from_replies(vec![
            r#"["only one"]"#,
            r#"["a", "b"]"#,
        ]);
        let (items, attempts, rejections) = create_scenarios(&backend, "ITSM", 2, 3).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(attempts, 2);
        assert_eq!(rejections.len(), 1);
    }

    #[test]
    fn multi_paragraph_rejected() {
        let two = "First paragraph.\n\nSecond paragraph.";
        let backend = ScriptedBackend::from_replies(vec![two, two]);
        let err = create_agentic_scenario(&backend, "d", "u", 2).unwrap_err();
        assert!(matches!(err, SynthError::MultiParagraph));
    }

    #[test]
    fn whitespace_reply_is_empty() {
        let backend = ScriptedBackend::from_replies(vec!["   \n  "]);
        let err = create_agentic_scenario(&backend, "d", "u", 1).unwrap_err();
        assert!(matches!(err, SynthError::EmptyReply));
    }

    #[test]
    fn duplicate_function_names_rejected() {
        let reply = "functions_list = ['a() -> dict # x.', 'a(b) -> list # y.']";
        let backend = ScriptedBackend::from_replies(vec![reply, reply, reply]);
        let err = create_functions_list(&backend, "d", "u", "s", 3).unwrap_err();
        assert!(matches!(err, SynthError::DuplicateName(name) if name == "a"));
    }

    #[test]
    fn bad_return_kind_is_malformed() {
        let reply = "functions_list = ['a(x) -> float # x.']";
        let backend = ScriptedBackend::from_replies(vec![reply]);
        let err = create_functions_list(&backend, "d", "u", "s", 1).unwrap_err();
        assert!(matches!(err, SynthError::MalformedSignature(_)));
    }

    #[test]
    fn lexical_scan_finds_undeclared_calls() {
        let declared: BTreeSet<&str> = ["fetch_draft", "log_change"].into_iter().collect();
        let code = "function agent(id):\n    d = fetch_draft(id)\n    send_email(d.owner)\n    items.append(d)\n    log_change(id)";
        let (unknown, calls) = scan_calls(code, &declared);
        assert_eq!(unknown, vec!["send_email".to_string()]);
        assert_eq!(calls, 3); // fetch_draft, send_email, log_change; .append and def skipped
    }

    #[test]
    fn code_with_no_calls_is_accepted() {
        let declared: BTreeSet<&str> = BTreeSet::new();
        let (unknown, calls) = scan_calls("x = 1\ny = x + 2", &declared);
        assert!(unknown.is_empty());
        assert_eq!(calls, 0);
    }

    #[test]
    fn possible_scenarios_deduped_case_insensitively() {
        let reply = r#"["Approver busy", "approver BUSY", "Escalated"]"#;
        let backend = ScriptedBackend::from_replies(vec![reply]);
        let (items, _, _) =
            create_possible_scenarios(&backend, "s", &[], "code", 3, 1).unwrap();
        assert_eq!(items, vec!["Approver busy".to_string(), "Escalated".to_string()]);
    }

    #[test]
    fn pack_missing_field_rejected() {
        let reply = r#"{"utterance": "hi", "function_inputs_outputs": [], "flow_summary": "f"}"#;
        let backend = ScriptedBackend::from_replies(vec![reply, reply]);
        let err = create_user_scenario_pack(&backend, "s", "p", &[], "code", 2).unwrap_err();
        assert!(matches!(err, SynthError::MissingField(f) if f == "outcome"));
    }

    #[test]
    fn pack_call_must_name_declared_function() {
        let reply = r#"{"utterance": "hi", "function_inputs_outputs": [{"function_call": "ghost('x')", "output": 1}], "flow_summary": "f", "outcome": "o"}"#;
        let backend = ScriptedBackend::from_replies(vec![reply]);
        let err = create_user_scenario_pack(&backend, "s", "p", &[], "code", 1).unwrap_err();
        assert!(matches!(err, SynthError::UnknownFunction(name) if name == "ghost"));
    }

    fn two_functions() -> Vec<FunctionSignature> {
        sigparse::parse_functions_list(
            "functions_list = ['fetch(id) -> dict # Fetch.', 'log(id, change) -> bool # Log.']",
        )
        .unwrap()
        .0
    }

    #[test]
    fn spec_stage_requires_name_parity() {
        let reply = r#"[{"name": "fetch", "properties": {"id": {"type": "string"}}, "required": ["id"], "type": "object", "description": "Fetch.", "output": {"type": "object", "description": "r"}}]"#;
        let backend = ScriptedBackend::from_replies(vec![reply]);
        let pack = UserScenarioPack {
            utterance: "u".into(),
            function_inputs_outputs: vec![],
            flow_summary: "f".into(),
            outcome: "o".into(),
        };
        let err =
            create_function_descriptions(&backend, &two_functions(), "code", &pack, 1).unwrap_err();
        assert!(matches!(err, SynthError::SpecNameMismatch(_)));
    }

    #[test]
    fn execution_stage_checks_parallel_flag() {
        let reply = r#"[{"step_number": 1, "functions_executed": ["fetch('a')"], "is_parallel": true, "description": "d", "input": ["a"], "output": [{}]}]"#;
        let backend = ScriptedBackend::from_replies(vec![reply]);
        let pack = UserScenarioPack {
            utterance: "u".into(),
            function_inputs_outputs: vec![FunctionIO {
                function_call: "fetch('a')".into(),
                output: serde_json::json!({}),
            }],
            flow_summary: "f".into(),
            outcome: "o".into(),
        };
        let err = create_agentic_execution(&backend, &pack, "p", &two_functions(), 1).unwrap_err();
        assert!(matches!(err, SynthError::ExecutionInvariant(p) if p[0].contains("PARALLEL_FLAG_MISMATCH")));
    }
}
