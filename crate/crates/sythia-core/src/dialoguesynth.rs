//! Multi-turn conversation simulation: a user proxy and a tool-calling agent
//! alternate under a turn judge, with schema-checked arguments, seeded
//! failure-injecting mock tool responses, and a final conversation verdict.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::gateway::{self, ChatBackend, GatewayError, Sampling};
use crate::model::{
    validate_record, AgenticRecord, FunctionSpec, OutputSpec, TypeDescriptor, TypeKind,
};
use crate::schemaval::{self, conforms, ToolCall, Violation};
use crate::sigparse::{self, Shape};

#[derive(Debug, Error)]
pub enum DialogueError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("MULTI_KEY: user payload carries more than one intent key")]
    MultiKey,
    #[error("malformed payload: {0}")]
    BadPayload(String),
    #[error("MALFORMED_VERDICT: {0}")]
    MalformedVerdict(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy)]
pub struct DialogueLimits {
    pub max_turns: usize,
    pub max_revisions: usize,
    pub max_followups: usize,
}

impl Default for DialogueLimits {
    fn default() -> Self {
        DialogueLimits { max_turns: 12, max_revisions: 2, max_followups: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UserKind {
    Query,
    Clarification,
    Followup,
    End,
}

impl UserKind {
    fn key(self) -> &'static str {
        match self {
            UserKind::Query => "query",
            UserKind::Clarification => "clarification",
            UserKind::Followup => "followup",
            UserKind::End => "end",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserMessage {
    pub thoughts: String,
    pub kind: UserKind,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCall {
    pub name: String,
    pub arguments: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentAction {
    ToolCall(AgentCall),
    Finish { output_to_user: String },
}

impl AgentAction {
    pub fn as_call(&self) -> AgentCall {
        match self {
            AgentAction::ToolCall(call) => call.clone(),
            AgentAction::Finish { output_to_user } => AgentCall {
                name: "finish".to_string(),
                arguments: [("output_to_user".to_string(), json!(output_to_user))]
                    .into_iter()
                    .collect(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnDecision {
    Accept,
    Revise,
    Terminate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnJudgement {
    pub decision: TurnDecision,
    pub feedback: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationVerdict {
    pub reasoning: String,
    pub verdict: bool,
    pub failure_reasons: Vec<String>,
}

/// Reserved tool every session gets: it ends the agent's turn by answering
/// the user.
pub fn finish_spec() -> FunctionSpec {
    FunctionSpec {
        name: "finish".to_string(),
        properties: [(
            "output_to_user".to_string(),
            TypeDescriptor::new(TypeKind::String)
                .with_description("The complete answer delivered to the user."),
        )]
        .into_iter()
        .collect(),
        required: vec!["output_to_user".to_string()],
        kind: "object".to_string(),
        description: "Deliver the final answer to the user and end the turn.".to_string(),
        output: OutputSpec {
            kind: TypeKind::Null,
            description: "Ends the agent's turn.".to_string(),
            items: None,
        },
    }
}

/// One live conversation: instructions, the tool inventory (with `finish`
/// injected), and both transcripts.
#[derive(Debug, Clone)]
pub struct DialogueSession {
    pub built_scenario: String,
    pub user_metadata: Value,
    pub tools: Vec<FunctionSpec>,
    pub limits: DialogueLimits,
    pub chat_history: Vec<Value>,
    pub scratchpad: Vec<Value>,
    pub followups: usize,
}

impl DialogueSession {
    fn tools_json(&self) -> String {
        serde_json::to_string(&self.tools).expect("serializable")
    }

    fn tools_description(&self) -> String {
        self.tools
            .iter()
            .filter(|t| t.name != "finish")
            .map(|t| format!("- {}", t.description))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Build a session from a validated record and the scenario chosen for it.
pub fn init_session(
    record: &AgenticRecord,
    scenario: &str,
    user_metadata: Value,
    limits: DialogueLimits,
) -> Result<DialogueSession, DialogueError> {
    if record.functions.is_empty() {
        return Err(DialogueError::Precondition("record declares no functions".to_string()));
    }
    let report = validate_record(record);
    if !report.is_empty() {
        return Err(DialogueError::Precondition(format!(
            "record fails validation: {}",
            report.violations[0].message
        )));
    }
    let built_scenario = format!(
        "{}\n\nCurrent situation: {}\n\nOperating policy:\n{}",
        record.agentic_scenario, scenario, record.pseudo_code
    );
    let mut tools = record.function_specs.clone();
    tools.push(finish_spec());
    Ok(DialogueSession {
        built_scenario,
        user_metadata,
        tools,
        limits,
        chat_history: Vec::new(),
        scratchpad: Vec::new(),
        followups: 0,
    })
}

fn retry_loop<T>(
    backend: &dyn ChatBackend,
    template: &str,
    bindings: &BTreeMap<String, String>,
    sampling: &Sampling,
    budget: usize,
    gate: impl Fn(&str) -> Result<T, DialogueError>,
) -> Result<T, DialogueError> {
    assert!(budget >= 1);
    let messages = gateway::render_template(template, bindings)?;
    let mut last = None;
    for _ in 0..budget {
        let reply = backend.complete(&messages, sampling)?;
        match gate(&reply) {
            Ok(value) => return Ok(value),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("budget >= 1"))
}

/// Ask the user proxy for the next message. A followup past the budget is
/// coerced to `end` ("Finish"), mirroring the proxy prompt's own rule.
pub fn next_user_message(
    session: &DialogueSession,
    backend: &dyn ChatBackend,
    budget: usize,
) -> Result<UserMessage, DialogueError> {
    let mut bindings = BTreeMap::new();
    bindings.insert("built_scenario".to_string(), session.built_scenario.clone());
    bindings.insert(
        "user_metadata".to_string(),
        serde_json::to_string(&session.user_metadata).expect("serializable"),
    );
    bindings.insert("tools_description".to_string(), session.tools_description());
    bindings.insert(
        "chat_history".to_string(),
        serde_json::to_string(&session.chat_history).expect("serializable"),
    );
    let message = retry_loop(
        backend,
        "dialogue_user_proxy",
        &bindings,
        &Sampling::generation(),
        budget,
        |reply| {
            let extracted = sigparse::extract_structured(reply, Shape::Object)
                .map_err(|e| DialogueError::BadPayload(e.to_string()))?;
            let object = extracted.value.as_object().expect("Object shape");
            let thoughts = object
                .get("thoughts")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            let kinds =
                [UserKind::Query, UserKind::Clarification, UserKind::Followup, UserKind::End];
            let present: Vec<UserKind> =
                kinds.into_iter().filter(|k| object.contains_key(k.key())).collect();
            match present.as_slice() {
                [kind] => {
                    let content = object
                        .get(kind.key())
                        .and_then(Value::as_str)
                        .ok_or_else(|| {
                            DialogueError::BadPayload(format!("'{}' must be text", kind.key()))
                        })?
                        .to_string();
                    if *kind == UserKind::End && content != "Finish" {
                        return Err(DialogueError::BadPayload(
                            "end content must be exactly \"Finish\"".to_string(),
                        ));
                    }
                    Ok(UserMessage { thoughts, kind: *kind, content })
                }
                [] => Err(DialogueError::BadPayload("no intent key present".to_string())),
                _ => Err(DialogueError::MultiKey),
            }
        },
    )?;
    if message.kind == UserKind::Followup && session.followups >= session.limits.max_followups {
        return Ok(UserMessage {
            thoughts: message.thoughts,
            kind: UserKind::End,
            content: "Finish".to_string(),
        });
    }
    Ok(message)
}

/// Ask the agent for its next action.
pub fn next_agent_action(
    session: &DialogueSession,
    backend: &dyn ChatBackend,
    budget: usize,
) -> Result<AgentAction, DialogueError> {
    let mut bindings = BTreeMap::new();
    bindings.insert("built_scenario".to_string(), session.built_scenario.clone());
    bindings.insert("tools".to_string(), session.tools_json());
    bindings.insert(
        "scratchpad".to_string(),
        serde_json::to_string(&session.scratchpad).expect("serializable"),
    );
    retry_loop(backend, "dialogue_agent", &bindings, &Sampling::generation(), budget, |reply| {
        let extracted = sigparse::extract_structured(reply, Shape::Object)
            .map_err(|e| DialogueError::BadPayload(e.to_string()))?;
        let call: AgentCall = serde_json::from_value(extracted.value)
            .map_err(|e| DialogueError::BadPayload(e.to_string()))?;
        if call.name == "finish" {
            let output = call
                .arguments
                .get("output_to_user")
                .and_then(Value::as_str)
                .ok_or_else(|| {
                    DialogueError::BadPayload("finish requires output_to_user text".to_string())
                })?
                .to_string();
            return Ok(AgentAction::Finish { output_to_user: output });
        }
        Ok(AgentAction::ToolCall(call))
    })
}

/// Canned injected failures, sampled at `failure_rate`.
const INJECTED_FAILURES: &[&str] = &[
    "Service unavailable",
    "Request timed out",
    "No results found",
    "Partial result: some data missing",
];

/// Produce the tool's response: either an injected failure object (failures
/// are data, not faults) or a backend-generated value that must conform to
/// the tool's output contract.
pub fn mock_tool_response(
    session: &DialogueSession,
    backend: &dyn ChatBackend,
    call: &AgentCall,
    spec: &FunctionSpec,
    failure_rate: f64,
    rng: &mut ChaCha8Rng,
    budget: usize,
) -> Result<Value, DialogueError> {
    if rng.gen::<f64>() < failure_rate {
        let reason = INJECTED_FAILURES[rng.gen_range(0..INJECTED_FAILURES.len())];
        return Ok(json!({ "error": reason }));
    }
    let mut bindings = BTreeMap::new();
    bindings.insert("built_scenario".to_string(), session.built_scenario.clone());
    bindings.insert(
        "tools_w_output".to_string(),
        serde_json::to_string(spec).expect("serializable"),
    );
    bindings.insert("agent".to_string(), serde_json::to_string(call).expect("serializable"));
    let descriptor = spec.output.descriptor();
    retry_loop(
        backend,
        "dialogue_mock_response",
        &bindings,
        &Sampling::generation(),
        budget,
        |reply| {
            let trimmed = reply.trim();
            let value: Value = serde_json::from_str(trimmed)
                .or_else(|_| {
                    sigparse::extract_structured(reply, Shape::Object).map(|e| e.value)
                })
                .or_else(|_| sigparse::extract_structured(reply, Shape::Array).map(|e| e.value))
                .map_err(|e| DialogueError::BadPayload(e.to_string()))?;
            let is_error = value.as_object().is_some_and(|o| o.contains_key("error"));
            if !is_error && !conforms(&value, &descriptor) {
                return Err(DialogueError::BadPayload(format!(
                    "mock output does not conform to the declared {} output",
                    spec.output.kind
                )));
            }
            Ok(value)
        },
    )
}

/// Judge a single agent action.
pub fn judge_turn(
    session: &DialogueSession,
    backend: &dyn ChatBackend,
    action: &AgentAction,
    budget: usize,
) -> Result<TurnJudgement, DialogueError> {
    let mut bindings = BTreeMap::new();
    bindings.insert("built_scenario".to_string(), session.built_scenario.clone());
    bindings.insert("tools".to_string(), session.tools_json());
    bindings.insert(
        "scratchpad".to_string(),
        serde_json::to_string(&session.scratchpad).expect("serializable"),
    );
    bindings.insert(
        "agent_action".to_string(),
        serde_json::to_string(&action.as_call()).expect("serializable"),
    );
    retry_loop(backend, "dialogue_turn_judge", &bindings, &Sampling::judge(), budget, |reply| {
        let extracted = sigparse::extract_structured(reply, Shape::Object)
            .map_err(|e| DialogueError::MalformedVerdict(e.to_string()))?;
        let object = extracted.value.as_object().expect("Object shape");
        let decision = match object.get("decision").and_then(Value::as_str) {
            Some("accept") => TurnDecision::Accept,
            Some("revise") => TurnDecision::Revise,
            Some("terminate") => TurnDecision::Terminate,
            other => {
                return Err(DialogueError::MalformedVerdict(format!(
                    "decision must be accept/revise/terminate, got {other:?}"
                )))
            }
        };
        let feedback =
            object.get("feedback").and_then(Value::as_str).unwrap_or_default().to_string();
        Ok(TurnJudgement { decision, feedback })
    })
}

/// Judge the whole conversation.
pub fn final_verdict(
    session: &DialogueSession,
    backend: &dyn ChatBackend,
    budget: usize,
) -> Result<ConversationVerdict, DialogueError> {
    let mut bindings = BTreeMap::new();
    bindings.insert("built_scenario".to_string(), session.built_scenario.clone());
    bindings.insert("tools".to_string(), session.tools_json());
    bindings.insert(
        "chat_history".to_string(),
        serde_json::to_string(&session.chat_history).expect("serializable"),
    );
    bindings.insert(
        "scratchpad".to_string(),
        serde_json::to_string(&session.scratchpad).expect("serializable"),
    );
    retry_loop(
        backend,
        "dialogue_final_verdict",
        &bindings,
        &Sampling::judge(),
        budget,
        |reply| {
            let extracted = sigparse::extract_structured(reply, Shape::Object)
                .map_err(|e| DialogueError::MalformedVerdict(e.to_string()))?;
            let verdict: ConversationVerdict = serde_json::from_value(extracted.value)
                .map_err(|e| DialogueError::MalformedVerdict(e.to_string()))?;
            if !verdict.verdict && verdict.failure_reasons.is_empty() {
                return Err(DialogueError::MalformedVerdict(
                    "false verdict requires failure_reasons".to_string(),
                ));
            }
            Ok(verdict)
        },
    )
}

/// A persisted conversation in the wire shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conversation {
    pub chat_history: Vec<Value>,
    pub scratchpad: Vec<Value>,
    pub verdict: Option<ConversationVerdict>,
    pub failed: bool,
    pub error_logging: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DialogueOptions {
    pub limits: DialogueLimits,
    pub failure_rate: f64,
    pub retry_budget: usize,
    pub seed: u64,
}

impl Default for DialogueOptions {
    fn default() -> Self {
        DialogueOptions {
            limits: DialogueLimits::default(),
            failure_rate: 0.15,
            retry_budget: 3,
            seed: 0,
        }
    }
}

/// Validate an agent tool call against the session inventory. Violations are
/// judge-style feedback, not crashes.
fn call_violations(session: &DialogueSession, call: &AgentCall) -> Vec<Violation> {
    match session.tools.iter().find(|t| t.name == call.name) {
        Some(spec) => schemaval::validate_call(
            &ToolCall::Named { name: call.name.clone(), arguments: call.arguments.clone() },
            spec,
        ),
        None => vec![Violation {
            code: schemaval::ViolationCode::UnknownFunction,
            path: "name".to_string(),
            message: format!("'{}' is not a declared tool", call.name),
        }],
    }
}

/// Run one full conversation: user/agent alternation, per-action judging
/// with a bounded revision loop, mock tool responses, and a final verdict.
pub fn run_conversation(
    record: &AgenticRecord,
    scenario: &str,
    user_metadata: Value,
    backend: &dyn ChatBackend,
    options: &DialogueOptions,
) -> Result<Conversation, DialogueError> {
    let session = init_session(record, scenario, user_metadata, options.limits)?;
    Ok(run_session(session, backend, options))
}

/// Drive an already-initialized session to completion.
pub fn run_session(
    mut session: DialogueSession,
    backend: &dyn ChatBackend,
    options: &DialogueOptions,
) -> Conversation {
    let budget = options.retry_budget;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut errors: Vec<String> = Vec::new();

    let outcome = (|| -> Result<(), DialogueError> {
        'outer: for _ in 0..session.limits.max_turns {
            let user = next_user_message(&session, backend, budget)?;
            session.chat_history.push(json!({
                "from": "user",
                "user_thoughts": user.thoughts,
                "content": user.content,
            }));
            session.scratchpad.push(json!({
                "from": "user",
                "type": user.kind.key(),
                "content": user.content,
            }));
            if user.kind == UserKind::End {
                return Ok(());
            }
            if user.kind == UserKind::Followup {
                session.followups += 1;
            }

            // the agent acts until an accepted finish answers this message
            let mut revisions = 0usize;
            for _ in 0..session.limits.max_turns {
                let action = next_agent_action(&session, backend, budget)?;
                if let AgentAction::ToolCall(call) = &action {
                    let violations = call_violations(&session, call);
                    if !violations.is_empty() {
                        // schema violations take the revise path directly
                        revisions += 1;
                        if revisions > session.limits.max_revisions {
                            errors.push("REVISION_BUDGET: terminated after repeated invalid actions".to_string());
                            return Ok(());
                        }
                        errors.push(format!(
                            "revise: [{}]",
                            violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
                        ));
                        continue;
                    }
                }
                let judgement = judge_turn(&session, backend, &action, budget)?;
                match judgement.decision {
                    TurnDecision::Accept => {
                        revisions = 0;
                        session
                            .scratchpad
                            .push(json!({ "from": "agent", "content": action.as_call() }));
                        match &action {
                            AgentAction::Finish { output_to_user } => {
                                session.chat_history.push(json!({
                                    "from": "agent",
                                    "content": output_to_user,
                                }));
                                continue 'outer;
                            }
                            AgentAction::ToolCall(call) => {
                                let spec = session
                                    .tools
                                    .iter()
                                    .find(|t| t.name == call.name)
                                    .expect("validated above")
                                    .clone();
                                let response = mock_tool_response(
                                    &session,
                                    backend,
                                    call,
                                    &spec,
                                    options.failure_rate,
                                    &mut rng,
                                    budget,
                                )?;
                                session
                                    .scratchpad
                                    .push(json!({ "from": "tool_response", "content": response }));
                            }
                        }
                    }
                    TurnDecision::Revise => {
                        revisions += 1;
                        if revisions > session.limits.max_revisions {
                            errors.push("REVISION_BUDGET: terminated after exhausting revisions".to_string());
                            return Ok(());
                        }
                        errors.push(format!("revise: {}", judgement.feedback));
                    }
                    TurnDecision::Terminate => {
                        errors.push(format!("terminated by judge: {}", judgement.feedback));
                        return Ok(());
                    }
                }
            }
            errors.push("action budget reached within one user turn".to_string());
            return Ok(());
        }
        errors.push("max_turns reached".to_string());
        Ok(())
    })();

    let verdict = match outcome {
        Ok(()) => match final_verdict(&session, backend, budget) {
            Ok(verdict) => Some(verdict),
            Err(e) => {
                errors.push(e.to_string());
                None
            }
        },
        Err(e) => {
            errors.push(e.to_string());
            None
        }
    };
    let failed = verdict.is_none();
    Conversation {
        chat_history: session.chat_history,
        scratchpad: session.scratchpad,
        verdict,
        failed,
        error_logging: errors,
    }
}
