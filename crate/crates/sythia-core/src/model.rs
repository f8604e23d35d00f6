//! Domain types shared across the four pipelines, plus the cross-consistency
//! validator for complete agentic records.
//!
//! All types here are immutable values and safe to share between workers.

use std::collections::BTreeSet;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::sigparse;

/// Return kind of a tool signature. These are data values, not Rust types:
/// the signature grammar only admits these five literals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReturnKind {
    #[serde(rename = "str")]
    Str,
    #[serde(rename = "bool")]
    Bool,
    #[serde(rename = "list")]
    List,
    #[serde(rename = "dict")]
    Dict,
    #[serde(rename = "None")]
    None,
}

impl ReturnKind {
    pub fn parse(s: &str) -> Option<ReturnKind> {
        match s {
            "str" => Some(ReturnKind::Str),
            "bool" => Some(ReturnKind::Bool),
            "list" => Some(ReturnKind::List),
            "dict" => Some(ReturnKind::Dict),
            "None" => Some(ReturnKind::None),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ReturnKind::Str => "str",
            ReturnKind::Bool => "bool",
            ReturnKind::List => "list",
            ReturnKind::Dict => "dict",
            ReturnKind::None => "None",
        }
    }
}

impl fmt::Display for ReturnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One parsed entry of a functions list:
/// `name(arg1, ...) -> return_kind # doc`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionSignature {
    pub name: String,
    pub params: Vec<String>,
    pub return_kind: ReturnKind,
    pub doc: String,
}

/// Structural type tag for one parameter or output, a small subset of JSON
/// Schema: `type`, optional `items`, `minimum`, `default`, `description`,
/// `additionalProperties`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeDescriptor {
    #[serde(rename = "type")]
    pub kind: TypeKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub items: Option<Box<TypeDescriptor>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minimum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(rename = "additionalProperties", skip_serializing_if = "Option::is_none")]
    pub additional_properties: Option<bool>,
}

impl TypeDescriptor {
    pub fn new(kind: TypeKind) -> Self {
        TypeDescriptor {
            kind,
            items: None,
            minimum: None,
            default: None,
            description: None,
            additional_properties: None,
        }
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = Some(description.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeKind {
    String,
    Number,
    Integer,
    Boolean,
    Array,
    Object,
    Null,
}

impl fmt::Display for TypeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TypeKind::String => "string",
            TypeKind::Number => "number",
            TypeKind::Integer => "integer",
            TypeKind::Boolean => "boolean",
            TypeKind::Array => "array",
            TypeKind::Object => "object",
            TypeKind::Null => "null",
        };
        f.write_str(s)
    }
}

/// Formal tool contract: typed properties, required set, output descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub name: String,
    pub properties: IndexMap<String, TypeDescriptor>,
    pub required: Vec<String>,
    /// Always the literal "object".
    #[serde(rename = "type")]
    pub kind: String,
    pub description: String,
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    #[serde(rename = "type")]
    pub kind: TypeKind,
    pub description: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub items: Option<Box<TypeDescriptor>>,
}

impl OutputSpec {
    pub fn descriptor(&self) -> TypeDescriptor {
        TypeDescriptor {
            kind: self.kind,
            items: self.items.clone(),
            minimum: None,
            default: None,
            description: Some(self.description.clone()),
            additional_properties: None,
        }
    }
}

/// One grounded call from the user scenario pack: the rendered call text and
/// the structured value it returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionIO {
    pub function_call: String,
    pub output: Value,
}

/// The user-facing trajectory: utterance, grounded I/O, flow summary, outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserScenarioPack {
    pub utterance: String,
    pub function_inputs_outputs: Vec<FunctionIO>,
    pub flow_summary: String,
    pub outcome: String,
}

/// One step of an execution trace. Multi-function steps are parallel; inputs
/// and outputs align positionally with `functions_executed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionStep {
    pub step_number: u32,
    pub functions_executed: Vec<String>,
    pub is_parallel: bool,
    pub description: String,
    pub input: Vec<Value>,
    pub output: Vec<Value>,
}

/// A complete agentic record: scenario, tool inventory, policy pseudo code,
/// scenario pack, and execution trace.
#[derive(Debug, Clone, PartialEq)]
pub struct AgenticRecord {
    pub domain: String,
    pub use_case: String,
    pub agentic_scenario: String,
    pub functions: Vec<FunctionSignature>,
    pub function_specs: Vec<FunctionSpec>,
    pub pseudo_code: String,
    pub possible_scenarios: Vec<String>,
    pub selected_scenario: String,
    pub scenario_pack: UserScenarioPack,
    pub execution: Vec<ExecutionStep>,
    pub id: String,
}

/// Machine-readable violation codes emitted by [`validate_record`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RecordViolationCode {
    UnknownFunction,
    ParallelFlagMismatch,
    AlignmentMismatch,
    SpecNameMismatch,
    EmptyField,
}

impl fmt::Display for RecordViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RecordViolationCode::UnknownFunction => "UNKNOWN_FUNCTION",
            RecordViolationCode::ParallelFlagMismatch => "PARALLEL_FLAG_MISMATCH",
            RecordViolationCode::AlignmentMismatch => "ALIGNMENT_MISMATCH",
            RecordViolationCode::SpecNameMismatch => "SPEC_NAME_MISMATCH",
            RecordViolationCode::EmptyField => "EMPTY_FIELD",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordViolation {
    pub code: RecordViolationCode,
    pub path: String,
    pub message: String,
}

/// Result of cross-consistency validation. Empty means the record satisfies
/// every structural invariant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<RecordViolation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, code: RecordViolationCode, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(RecordViolation {
            code,
            path: path.into(),
            message: message.into(),
        });
    }
}

/// Cross-consistency validation of a full record. Violations are report
/// entries, never failures.
///
/// Alignment convention, matching the trace format: `output` aligns 1:1 with
/// `functions_executed`; for multi-function (parallel) steps `input` also
/// aligns 1:1, while a single-function step's `input` is that call's argument
/// list and may have any length.
pub fn validate_record(record: &AgenticRecord) -> ValidationReport {
    let mut report = ValidationReport::default();

    let declared: BTreeSet<&str> = record.functions.iter().map(|f| f.name.as_str()).collect();
    let spec_names: BTreeSet<&str> = record.function_specs.iter().map(|s| s.name.as_str()).collect();

    if declared != spec_names {
        let missing: Vec<&str> = declared.difference(&spec_names).copied().collect();
        let extra: Vec<&str> = spec_names.difference(&declared).copied().collect();
        report.push(
            RecordViolationCode::SpecNameMismatch,
            "function_description",
            format!(
                "spec names differ from functions list (missing specs: [{}], unknown specs: [{}])",
                missing.join(", "),
                extra.join(", ")
            ),
        );
    }

    for (field, value) in [
        ("domain", &record.domain),
        ("agentic_scenario", &record.agentic_scenario),
        ("pseudo_code", &record.pseudo_code),
        ("user_utterance", &record.scenario_pack.utterance),
        ("flow_summary", &record.scenario_pack.flow_summary),
        ("outcome", &record.scenario_pack.outcome),
    ] {
        if value.trim().is_empty() {
            report.push(RecordViolationCode::EmptyField, field, "field is empty");
        }
    }

    for (i, io) in record.scenario_pack.function_inputs_outputs.iter().enumerate() {
        let path = format!("function_inputs_outputs[{i}]");
        match sigparse::parse_call(&io.function_call) {
            Ok(call) => {
                if !declared.contains(call.name.as_str()) {
                    report.push(
                        RecordViolationCode::UnknownFunction,
                        path,
                        format!("call names undeclared function '{}'", call.name),
                    );
                }
            }
            Err(e) => report.push(
                RecordViolationCode::AlignmentMismatch,
                path,
                format!("unparseable call text '{}': {e}", io.function_call),
            ),
        }
    }

    for (i, step) in record.execution.iter().enumerate() {
        let path = format!("agentic_execution[{i}]");
        let n = step.functions_executed.len();

        if step.step_number != (i as u32) + 1 {
            report.push(
                RecordViolationCode::AlignmentMismatch,
                format!("{path}.step_number"),
                format!("expected consecutive step_number {}, found {}", i + 1, step.step_number),
            );
        }
        if step.is_parallel != (n > 1) {
            report.push(
                RecordViolationCode::ParallelFlagMismatch,
                format!("{path}.is_parallel"),
                format!("is_parallel={} but step executes {n} function(s)", step.is_parallel),
            );
        }
        if step.output.len() != n {
            report.push(
                RecordViolationCode::AlignmentMismatch,
                format!("{path}.output"),
                format!("{} output value(s) for {n} function(s)", step.output.len()),
            );
        }
        if n > 1 && step.input.len() != n {
            report.push(
                RecordViolationCode::AlignmentMismatch,
                format!("{path}.input"),
                format!("{} input value(s) for {n} parallel function(s)", step.input.len()),
            );
        }
        for (j, call_text) in step.functions_executed.iter().enumerate() {
            let call_path = format!("{path}.functions_executed[{j}]");
            match sigparse::parse_call(call_text) {
                Ok(call) => {
                    if !declared.contains(call.name.as_str()) {
                        report.push(
                            RecordViolationCode::UnknownFunction,
                            call_path,
                            format!("call names undeclared function '{}'", call.name),
                        );
                    }
                }
                Err(e) => report.push(
                    RecordViolationCode::AlignmentMismatch,
                    call_path,
                    format!("unparseable call text '{call_text}': {e}"),
                ),
            }
        }
    }

    report
}

/// Deterministic content hash over every field except `id`. Equal content
/// yields equal fingerprints across runs and platforms.
pub fn record_fingerprint(record: &AgenticRecord) -> String {
    let mut hasher = Sha256::new();
    let mut canonical = record.clone();
    canonical.id = String::new();
    let wire = crate::wire::RecordWire::from(&canonical);
    let bytes = serde_json::to_vec(&wire).expect("record serializes");
    hasher.update(&bytes);
    hex::encode(hasher.finalize())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use serde_json::json;

    fn sig(name: &str, params: &[&str], kind: ReturnKind) -> FunctionSignature {
        FunctionSignature {
            name: name.to_string(),
            params: params.iter().map(|p| p.to_string()).collect(),
            return_kind: kind,
            doc: format!("{name} doc"),
        }
    }

    fn spec_for(sig: &FunctionSignature) -> FunctionSpec {
        let mut properties = IndexMap::new();
        for p in &sig.params {
            properties.insert(p.clone(), TypeDescriptor::new(TypeKind::String));
        }
        FunctionSpec {
            name: sig.name.clone(),
            required: sig.params.clone(),
            properties,
            kind: "object".to_string(),
            description: sig.doc.clone(),
            output: OutputSpec {
                kind: TypeKind::Object,
                description: "result".to_string(),
                items: None,
            },
        }
    }

    pub(crate) fn minimal_record() -> AgenticRecord {
        let functions = vec![
            sig("fetch_contract_draft", &["contract_id"], ReturnKind::Dict),
            sig("get_internal_policies", &[], ReturnKind::List),
        ];
        let function_specs = functions.iter().map(spec_for).collect();
        AgenticRecord {
            domain: "Contract Lifecycle Management (CLM)".to_string(),
            use_case: "Procurement-CLM Integration".to_string(),
            agentic_scenario: "An agent monitors contract drafts.".to_string(),
            functions,
            function_specs,
            pseudo_code: "function agent(contract_id):\n    draft = fetch_contract_draft(contract_id)".to_string(),
            possible_scenarios: vec!["Escalation after failed authority check".to_string()],
            selected_scenario: "Escalation after failed authority check".to_string(),
            scenario_pack: UserScenarioPack {
                utterance: "Why hasn't the contract been approved yet?".to_string(),
                function_inputs_outputs: vec![FunctionIO {
                    function_call: "fetch_contract_draft('CT-9876')".to_string(),
                    output: json!({"id": "CT-9876"}),
                }],
                flow_summary: "The agent fetched the draft.".to_string(),
                outcome: "Draft retrieved.".to_string(),
            },
            execution: vec![
                ExecutionStep {
                    step_number: 1,
                    functions_executed: vec!["fetch_contract_draft('CT-9876')".to_string()],
                    is_parallel: false,
                    description: "Fetch the draft".to_string(),
                    input: vec![json!("CT-9876")],
                    output: vec![json!({"id": "CT-9876"})],
                },
                ExecutionStep {
                    step_number: 2,
                    functions_executed: vec![
                        "get_internal_policies()".to_string(),
                        "fetch_contract_draft('CT-9876')".to_string(),
                    ],
                    is_parallel: true,
                    description: "Fetch policies and draft in parallel".to_string(),
                    input: vec![json!([]), json!(["CT-9876"])],
                    output: vec![json!(["policy"]), json!({"id": "CT-9876"})],
                },
            ],
            id: "rec-test".to_string(),
        }
    }

    #[test]
    fn valid_record_yields_empty_report() {
        assert!(validate_record(&minimal_record()).is_empty());
    }

    #[test]
    fn parallel_flag_mismatch_detected() {
        let mut record = minimal_record();
        record.execution[1].is_parallel = false;
        let report = validate_record(&record);
        assert!(report
            .violations
            .iter()
            .any(|v| v.code == RecordViolationCode::ParallelFlagMismatch));
    }

    #[test]
    fn unknown_function_detected_by_name() {
        let mut record = minimal_record();
        record.execution[0].functions_executed[0] = "send_email('x')".to_string();
        let report = validate_record(&record);
        let v = report
            .violations
            .iter()
            .find(|v| v.code == RecordViolationCode::UnknownFunction)
            .expect("violation present");
        assert!(v.message.contains("send_email"));
    }

    #[test]
    fn output_misalignment_detected() {
        let mut record = minimal_record();
        record.execution[1].output.pop();
        let report = validate_record(&record);
        assert!(report
            .violations
            .iter()
            .any(|v| v.code == RecordViolationCode::AlignmentMismatch && v.path.ends_with(".output")));
    }

    #[test]
    fn step_number_gap_is_a_violation() {
        let mut record = minimal_record();
        record.execution[1].step_number = 3;
        let report = validate_record(&record);
        assert!(report
            .violations
            .iter()
            .any(|v| v.path.ends_with(".step_number")));
    }

    #[test]
    fn single_function_step_allows_multi_arg_input() {
        // A lone call with two arguments lists both argument values in `input`.
        let mut record = minimal_record();
        record.execution[0].input = vec![json!("a"), json!("b")];
        assert!(validate_record(&record).is_empty());
    }

    #[test]
    fn fingerprint_is_deterministic_and_content_sensitive() {
        let record = minimal_record();
        let a = record_fingerprint(&record);
        let b = record_fingerprint(&record);
        assert_eq!(a, b);

        let mut changed = record.clone();
        changed.scenario_pack.utterance.push('!');
        assert_ne!(a, record_fingerprint(&changed));

        // id itself does not participate in the fingerprint
        let mut relabeled = record;
        relabeled.id = "other".to_string();
        assert_eq!(a, record_fingerprint(&relabeled));
    }
}
