//! Workflow-DAG pipeline: five workflow archetypes, instantiation over a
//! concrete tool inventory, mutation, input-availability analysis,
//! decomposition into atomic (utterance, tool call, expected output) triples,
//! utterance generation with a judge/repair loop, think-trace generation, and
//! 1–5 scoring with threshold filtering.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{self, ChatBackend, ChatMessage, GatewayError, Sampling};
use crate::model::FunctionSpec;
use crate::schemaval::{self, ToolCall, Violation};
use crate::sigparse::{self, Shape};

#[derive(Debug, Error)]
pub enum DagError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("wiring rejected: [{}]", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Wiring(Vec<DagViolation>),
    #[error("malformed payload: {0}")]
    BadPayload(String),
    #[error("INSUFFICIENT_POOL: no signature-compatible substitute exists")]
    InsufficientPool,
    #[error("UNSATISFIED_INPUT: node '{node}' param '{param}' is bound to nothing reachable")]
    UnsatisfiedInput { node: String, param: String },
    #[error("TRACE_GAP: no ground-truth entry for node '{0}'")]
    TraceGap(String),
    #[error("SCOPE_VIOLATION: node '{node}': {message}")]
    ScopeViolation { node: String, message: String },
    #[error("EMPTY_REPLY: model returned an empty utterance")]
    EmptyReply,
    #[error("LITERAL_MISSING: direct-style utterance omits user literal '{0}'")]
    LiteralMissing(String),
    #[error("MALFORMED_VERDICT: {0}")]
    MalformedVerdict(String),
    #[error("REPAIR_EXHAUSTED: utterance still not executable after {0} repair(s)")]
    RepairExhausted(usize),
    #[error("verdict is already executable; nothing to repair")]
    NothingToRepair,
    #[error("BANNED_PHRASE: trace contains '{0}'")]
    BannedPhrase(String),
    #[error("GT_MISMATCH: trace tool calls diverge from ground truth")]
    GtMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DagViolationCode {
    #[serde(rename = "EMPTY_DAG")]
    EmptyDag,
    #[serde(rename = "UNKNOWN_TOOL")]
    UnknownTool,
    #[serde(rename = "UNKNOWN_SOURCE")]
    UnknownSource,
    #[serde(rename = "CYCLE")]
    Cycle,
    #[serde(rename = "DANGLING_REF")]
    DanglingRef,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DagViolation {
    pub code: DagViolationCode,
    pub node: String,
    pub message: String,
}

impl std::fmt::Display for DagViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?} at '{}': {}", self.code, self.node, self.message)
    }
}

/// The five workflow shapes. LoopLike is a bounded unroll (two iterations)
/// so every shape stays acyclic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Archetype {
    FanOutFanIn,
    LinearChain,
    LoopLike,
    Diamond,
    OptionalEnrichment,
}

impl Archetype {
    pub fn name(self) -> &'static str {
        match self {
            Archetype::FanOutFanIn => "FanOutFanIn",
            Archetype::LinearChain => "LinearChain",
            Archetype::LoopLike => "LoopLike",
            Archetype::Diamond => "Diamond",
            Archetype::OptionalEnrichment => "OptionalEnrichment",
        }
    }
}

/// Abstract workflow shape: k nodes T1..Tk plus an acyclic edge set over
/// their indices.
#[derive(Debug, Clone)]
pub struct DagTemplate {
    pub archetype: Archetype,
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
    /// Node indices that may be skipped at decomposition time.
    pub optional: Vec<usize>,
    pub description: &'static str,
    pub structure: &'static str,
}

/// The five built-in shapes.
pub fn builtin_templates() -> Vec<DagTemplate> {
    vec![
        DagTemplate {
            archetype: Archetype::FanOutFanIn,
            node_count: 5,
            edges: vec![(0, 1), (0, 2), (0, 3), (1, 4), (2, 4), (3, 4)],
            optional: vec![],
            description: "A single task branches into parallel tasks whose results merge back into one aggregation step.",
            structure: "T1 -> {T2, T3, T4} -> T5",
        },
        DagTemplate {
            archetype: Archetype::LinearChain,
            node_count: 3,
            edges: vec![(0, 1), (1, 2)],
            optional: vec![],
            description: "Strictly sequential dependencies: each task consumes the previous task's output.",
            structure: "T1 -> T2 -> T3",
        },
        DagTemplate {
            archetype: Archetype::LoopLike,
            node_count: 3,
            edges: vec![(0, 1), (1, 2)],
            optional: vec![],
            description: "Iterative refinement unrolled into two bounded passes; the same tool may appear in both passes.",
            structure: "T1 -> T2 -> T2' (second iteration)",
        },
        DagTemplate {
            archetype: Archetype::Diamond,
            node_count: 4,
            edges: vec![(0, 1), (0, 2), (1, 3), (2, 3)],
            optional: vec![],
            description: "One task feeds two independent branches whose results are combined by a final task.",
            structure: "T1 -> {T2, T3} -> T4",
        },
        DagTemplate {
            archetype: Archetype::OptionalEnrichment,
            node_count: 3,
            edges: vec![(0, 1), (0, 2), (1, 2)],
            optional: vec![1],
            description: "A core path with an enrichment task that may or may not be executed before the final step.",
            structure: "T1 -> [T2 optional] -> T3, with T1 -> T3",
        },
    ]
}

/// One concrete workflow node in wire form: the tool, its sources ("user" or
/// upstream tool names), and per-parameter bindings (literal or
/// "tool.field" reference).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagNode {
    pub tool: String,
    pub from: Vec<String>,
    pub inputs: indexmap::IndexMap<String, Value>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub optional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagWorkflow {
    pub nodes: Vec<DagNode>,
    pub template: String,
}

impl DagWorkflow {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.nodes).expect("serializable")
    }

    /// Short content id over the wiring.
    pub fn id(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.template.as_bytes());
        hasher.update(self.to_json().as_bytes());
        hex::encode(hasher.finalize())[..12].to_string()
    }
}

/// Resolve a source name to the nearest preceding node with that tool.
/// Returns Err(true) when the name only exists downstream (a forward
/// dependency, i.e. a cycle under list order) and Err(false) when unknown.
fn resolve_source(nodes: &[DagNode], at: usize, name: &str) -> Result<usize, bool> {
    if let Some(j) = (0..at).rev().find(|&j| nodes[j].tool == name) {
        return Ok(j);
    }
    if nodes.iter().any(|n| n.tool == name) {
        return Err(true);
    }
    Err(false)
}

/// A string of the form "tool.field" where tool names a workflow node.
fn reference_target<'a>(nodes: &[DagNode], value: &'a Value) -> Option<(&'a str, &'a str)> {
    let text = value.as_str()?;
    let (head, field) = text.split_once('.')?;
    if field.is_empty() || !head.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return None;
    }
    if nodes.iter().any(|n| n.tool == head) {
        Some((head, field))
    } else {
        None
    }
}

/// Structural wiring checks: non-empty, known tools, resolvable sources, no
/// forward (cyclic) dependencies, no dangling "tool.field" input references.
pub fn validate_dag(dag: &DagWorkflow, tools: &[FunctionSpec]) -> Vec<DagViolation> {
    let mut violations = Vec::new();
    if dag.nodes.is_empty() {
        violations.push(DagViolation {
            code: DagViolationCode::EmptyDag,
            node: String::new(),
            message: "workflow has no nodes".to_string(),
        });
        return violations;
    }
    let known: BTreeSet<&str> = tools.iter().map(|t| t.name.as_str()).collect();
    for (i, node) in dag.nodes.iter().enumerate() {
        if !known.contains(node.tool.as_str()) {
            violations.push(DagViolation {
                code: DagViolationCode::UnknownTool,
                node: node.tool.clone(),
                message: format!("tool '{}' is not in the inventory", node.tool),
            });
        }
        for source in &node.from {
            if source == "user" {
                continue;
            }
            match resolve_source(&dag.nodes, i, source) {
                Ok(_) => {}
                Err(true) => violations.push(DagViolation {
                    code: DagViolationCode::Cycle,
                    node: node.tool.clone(),
                    message: format!("source '{source}' only appears downstream"),
                }),
                Err(false) => violations.push(DagViolation {
                    code: DagViolationCode::UnknownSource,
                    node: node.tool.clone(),
                    message: format!("source '{source}' names no node"),
                }),
            }
        }
        for (param, binding) in &node.inputs {
            if let Some(text) = binding.as_str() {
                if let Some((head, _field)) = text.split_once('.') {
                    let looks_like_ref = !head.is_empty()
                        && head.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                        && head.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_');
                    // a reference-shaped binding must resolve to an upstream node
                    if looks_like_ref
                        && node.from.iter().any(|s| s == head)
                        && resolve_source(&dag.nodes, i, head).is_err()
                    {
                        violations.push(DagViolation {
                            code: DagViolationCode::DanglingRef,
                            node: node.tool.clone(),
                            message: format!("input '{param}' references '{text}' which resolves to no upstream node"),
                        });
                    } else if looks_like_ref
                        && known.contains(head)
                        && !dag.nodes.iter().any(|n| n.tool == head)
                    {
                        violations.push(DagViolation {
                            code: DagViolationCode::DanglingRef,
                            node: node.tool.clone(),
                            message: format!("input '{param}' references '{text}' but '{head}' is not a workflow node"),
                        });
                    }
                }
            }
        }
    }
    violations
}

/// Resolved parent indices for each node.
fn parents(dag: &DagWorkflow) -> Vec<Vec<usize>> {
    dag.nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            node.from
                .iter()
                .filter(|s| s.as_str() != "user")
                .filter_map(|s| resolve_source(&dag.nodes, i, s).ok())
                .collect()
        })
        .collect()
}

/// Everything a node can see before it runs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeAvailability {
    /// Parameters bound to user-supplied literals.
    pub from_user: BTreeSet<String>,
    /// Tools of ancestor nodes; each contributes its whole output ("tool.*").
    pub from_upstream: BTreeSet<String>,
}

/// Per-node availability, computed by topological traversal: a node sees the
/// outputs of exactly its ancestors plus its own user literals.
pub fn input_availability(dag: &DagWorkflow) -> Result<Vec<NodeAvailability>, DagError> {
    let parent_sets = parents(dag);
    let mut ancestors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); dag.nodes.len()];
    for i in 0..dag.nodes.len() {
        for &p in &parent_sets[i] {
            // parents resolve strictly backwards, so p's set is final
            ancestors[i].insert(p);
            let inherited: Vec<usize> = ancestors[p].iter().copied().collect();
            ancestors[i].extend(inherited);
        }
    }
    let mut map = Vec::with_capacity(dag.nodes.len());
    for (i, node) in dag.nodes.iter().enumerate() {
        let upstream: BTreeSet<String> =
            ancestors[i].iter().map(|&a| dag.nodes[a].tool.clone()).collect();
        let mut from_user = BTreeSet::new();
        for (param, binding) in &node.inputs {
            match reference_target(&dag.nodes, binding) {
                Some((head, _)) => {
                    if !upstream.contains(head) {
                        return Err(DagError::UnsatisfiedInput {
                            node: node.tool.clone(),
                            param: param.clone(),
                        });
                    }
                }
                None => {
                    from_user.insert(param.clone());
                }
            }
        }
        map.push(NodeAvailability { from_user, from_upstream: upstream });
    }
    Ok(map)
}

/// Ground truth for one node: bound named arguments and the produced output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTrace {
    pub arguments: Map<String, Value>,
    pub output: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Direct,
    Indirect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCall {
    pub name: String,
    pub arguments: Map<String, Value>,
}

/// One supervision unit derived from one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicTriple {
    pub utterance: String,
    pub tool_call: NamedCall,
    pub expected_output: Value,
    pub node: String,
    pub style: Style,
}

/// Split a workflow into one triple per node (optional nodes only when the
/// trace exercised them). Arguments must stay inside the node's availability
/// scope.
pub fn decompose(
    dag: &DagWorkflow,
    trace: &BTreeMap<String, NodeTrace>,
    style: Style,
) -> Result<Vec<AtomicTriple>, DagError> {
    let availability = input_availability(dag)?;
    let mut triples = Vec::new();
    for (node, avail) in dag.nodes.iter().zip(&availability) {
        let entry = match trace.get(&node.tool) {
            Some(entry) => entry,
            None if node.optional => continue,
            None => return Err(DagError::TraceGap(node.tool.clone())),
        };
        for (arg, value) in &entry.arguments {
            if !node.inputs.contains_key(arg) {
                return Err(DagError::ScopeViolation {
                    node: node.tool.clone(),
                    message: format!("argument '{arg}' is not a declared input"),
                });
            }
            if let Some((head, _)) = reference_target(&dag.nodes, value) {
                if !avail.from_upstream.contains(head) {
                    return Err(DagError::ScopeViolation {
                        node: node.tool.clone(),
                        message: format!("argument '{arg}' references non-ancestor '{head}'"),
                    });
                }
            }
        }
        triples.push(AtomicTriple {
            utterance: String::new(),
            tool_call: NamedCall { name: node.tool.clone(), arguments: entry.arguments.clone() },
            expected_output: entry.output.clone(),
            node: node.tool.clone(),
            style,
        });
    }
    Ok(triples)
}

/// Canonical workflow examples shown to the model (one per common shape).
pub const DAG_EXAMPLES: [&str; 4] = [
    r#"[
  {"tool": "fetch_weather_forecast", "from": ["user"], "inputs": {"city": "Austin", "days": 5}},
  {"tool": "recommend_clothing", "from": ["fetch_weather_forecast"], "inputs": {"forecast": "fetch_weather_forecast.forecast"}},
  {"tool": "notify_user", "from": ["recommend_clothing"], "inputs": {"message": "recommend_clothing.recommendation"}}
]"#,
    r#"[
  {"tool": "fetch_article", "from": ["user"], "inputs": {"url": "https://example.com/news_article.pdf"}},
  {"tool": "summarize_text", "from": ["fetch_article"], "inputs": {"text": "fetch_article.content"}},
  {"tool": "analyze_sentiment", "from": ["fetch_article"], "inputs": {"text": "fetch_article.content"}},
  {"tool": "compile_report", "from": ["summarize_text", "analyze_sentiment"], "inputs": {"summary": "summarize_text.summary", "sentiment": "analyze_sentiment.sentiment"}}
]"#,
    r#"[
  {"tool": "fetch_stock_price", "from": ["user"], "inputs": {"ticker": "AAPL"}},
  {"tool": "fetch_news_headlines", "from": ["user"], "inputs": {"topic": "Apple"}},
  {"tool": "investment_recommendation", "from": ["fetch_stock_price", "fetch_news_headlines"], "inputs": {"price": "fetch_stock_price.price", "headlines": "fetch_news_headlines.headlines"}}
]"#,
    r#"[
  {"tool": "get_current_time", "from": ["user"], "inputs": {"timezone": "Europe/Paris"}}
]"#,
];

fn example_bindings(extra: &[(&str, &str)]) -> BTreeMap<String, String> {
    let mut bindings: BTreeMap<String, String> = DAG_EXAMPLES
        .iter()
        .enumerate()
        .map(|(i, example)| (format!("dag_example_{}", i + 1), example.to_string()))
        .collect();
    for (k, v) in extra {
        bindings.insert(k.to_string(), v.to_string());
    }
    bindings
}

fn retry_loop<T>(
    backend: &dyn ChatBackend,
    messages: &[ChatMessage],
    sampling: &Sampling,
    budget: usize,
    gate: impl Fn(&str) -> Result<T, DagError>,
) -> Result<T, DagError> {
    assert!(budget >= 1);
    let mut last = None;
    for _ in 0..budget {
        let reply = backend.complete(messages, sampling)?;
        match gate(&reply) {
            Ok(value) => return Ok(value),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("budget >= 1"))
}

/// Render the tool inventory the wiring prompt sees: name, parameters,
/// output kind.
fn function_sequence(tools: &[FunctionSpec]) -> String {
    let entries: Vec<Value> = tools
        .iter()
        .map(|t| {
            serde_json::json!({
                "name": t.name,
                "inputs": t.properties.keys().collect::<Vec<_>>(),
                "output": t.output.kind.to_string(),
            })
        })
        .collect();
    serde_json::to_string_pretty(&entries).expect("serializable")
}

/// Ask the backend to replace the template's abstract nodes with concrete
/// tools. The reply is accepted only when the wiring validates and its
/// parent relation matches the template's edge set.
pub fn instantiate_dag(
    backend: &dyn ChatBackend,
    template: &DagTemplate,
    tools: &[FunctionSpec],
    budget: usize,
) -> Result<DagWorkflow, DagError> {
    let messages = gateway::render_template(
        "dag_from_template",
        &example_bindings(&[
            ("dag_type", template.archetype.name()),
            ("dag_type_description", template.description),
            ("dag_type_structure", template.structure),
            ("function_sequence", &function_sequence(tools)),
        ]),
    )?;
    retry_loop(backend, &messages, &Sampling::generation(), budget, |reply| {
        let extracted = sigparse::extract_structured(reply, Shape::Array)
            .map_err(|e| DagError::BadPayload(e.to_string()))?;
        let nodes: Vec<DagNode> = serde_json::from_value(extracted.value)
            .map_err(|e| DagError::BadPayload(e.to_string()))?;
        let mut dag = DagWorkflow { nodes, template: template.archetype.name().to_string() };
        for &i in &template.optional {
            if let Some(node) = dag.nodes.get_mut(i) {
                node.optional = true;
            }
        }
        let violations = validate_dag(&dag, tools);
        if !violations.is_empty() {
            return Err(DagError::Wiring(violations));
        }
        if dag.nodes.len() != template.node_count {
            return Err(DagError::BadPayload(format!(
                "expected {} nodes, model wired {}",
                template.node_count,
                dag.nodes.len()
            )));
        }
        let parent_sets = parents(&dag);
        for (i, got) in parent_sets.iter().enumerate() {
            let want: BTreeSet<usize> =
                template.edges.iter().filter(|(_, to)| *to == i).map(|(from, _)| *from).collect();
            let got: BTreeSet<usize> = got.iter().copied().collect();
            if got != want {
                return Err(DagError::BadPayload(format!(
                    "node {} parents {:?} do not match the template edge relation {:?}",
                    i, got, want
                )));
            }
        }
        Ok(dag)
    })
}

/// Signature-shape compatibility: same parameter names and output kind.
fn shape_compatible(a: &FunctionSpec, b: &FunctionSpec) -> bool {
    let pa: BTreeSet<&str> = a.properties.keys().map(String::as_str).collect();
    let pb: BTreeSet<&str> = b.properties.keys().map(String::as_str).collect();
    pa == pb && a.output.kind == b.output.kind
}

/// Produce `n` seeded variants by substituting a node's tool with a
/// shape-compatible unused tool from the pool, rewriting downstream sources
/// and references.
pub fn mutate_dag(
    dag: &DagWorkflow,
    n: usize,
    seed: u64,
    pool: &[FunctionSpec],
) -> Result<Vec<DagWorkflow>, DagError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let used: BTreeSet<&str> = dag.nodes.iter().map(|node| node.tool.as_str()).collect();
    let mut substitutions = Vec::new();
    for (i, node) in dag.nodes.iter().enumerate() {
        let Some(spec) = pool.iter().find(|t| t.name == node.tool) else { continue };
        for candidate in pool {
            if !used.contains(candidate.name.as_str()) && shape_compatible(spec, candidate) {
                substitutions.push((i, candidate.name.clone()));
            }
        }
    }
    if substitutions.is_empty() {
        return Err(DagError::InsufficientPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut variants = Vec::with_capacity(n);
    for _ in 0..n {
        let (at, replacement) = substitutions[rng.gen_range(0..substitutions.len())].clone();
        let old = dag.nodes[at].tool.clone();
        let mut variant = dag.clone();
        variant.nodes[at].tool = replacement.clone();
        for node in &mut variant.nodes {
            for source in &mut node.from {
                if *source == old {
                    *source = replacement.clone();
                }
            }
            for binding in node.inputs.values_mut() {
                if let Some(text) = binding.as_str() {
                    if let Some(field) = text.strip_prefix(&format!("{old}.")) {
                        *binding = Value::String(format!("{replacement}.{field}"));
                    }
                }
            }
        }
        variants.push(variant);
    }
    Ok(variants)
}

/// User-supplied literal values across all nodes, rendered for the
/// direct-style coverage gate.
fn user_literals(dag: &DagWorkflow) -> Vec<String> {
    let mut literals = Vec::new();
    for node in &dag.nodes {
        for binding in node.inputs.values() {
            if reference_target(&dag.nodes, binding).is_some() {
                continue;
            }
            match binding {
                Value::String(s) if !s.trim().is_empty() => literals.push(s.clone()),
                Value::Number(n) => literals.push(n.to_string()),
                _ => {}
            }
        }
    }
    literals
}

/// Generate the triggering utterance. Direct style must surface every
/// user literal verbatim (case-insensitive).
pub fn generate_utterance(
    backend: &dyn ChatBackend,
    dag: &DagWorkflow,
    style: Style,
    budget: usize,
) -> Result<String, DagError> {
    let mut messages = gateway::render_template(
        "dag_utterance",
        &example_bindings(&[("dag", &dag.to_json())]),
    )?;
    let style_hint = match style {
        Style::Direct => {
            "Style requirement: state every user-supplied argument value explicitly and verbatim in the utterance."
        }
        Style::Indirect => {
            "Style requirement: imply the user-supplied argument values through context or common sense instead of stating each one verbatim."
        }
    };
    messages.push(ChatMessage::user(style_hint));
    let literals = user_literals(dag);
    retry_loop(backend, &messages, &Sampling::generation(), budget, |reply| {
        let utterance = reply.trim().trim_matches('"').to_string();
        if utterance.is_empty() {
            return Err(DagError::EmptyReply);
        }
        if style == Style::Direct {
            let lowered = utterance.to_lowercase();
            for literal in &literals {
                if !lowered.contains(&literal.to_lowercase()) {
                    return Err(DagError::LiteralMissing(literal.clone()));
                }
            }
        }
        Ok(utterance)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutabilityVerdict {
    pub executable: bool,
    pub description: String,
}

/// Ask the judge whether the utterance supplies every input the workflow
/// needs.
pub fn judge_executability(
    backend: &dyn ChatBackend,
    utterance: &str,
    dag: &DagWorkflow,
    budget: usize,
) -> Result<ExecutabilityVerdict, DagError> {
    let mut bindings = BTreeMap::new();
    bindings.insert("user_utterance".to_string(), utterance.to_string());
    bindings.insert("dag".to_string(), dag.to_json());
    let messages = gateway::render_template("dag_judge", &bindings)?;
    retry_loop(backend, &messages, &Sampling::judge(), budget, |reply| {
        let extracted = sigparse::extract_structured(reply, Shape::Object)
            .map_err(|e| DagError::MalformedVerdict(e.to_string()))?;
        let object = extracted.value.as_object().expect("Object shape");
        let executable = object
            .get("DAG_Executable")
            .and_then(Value::as_bool)
            .ok_or_else(|| DagError::MalformedVerdict("DAG_Executable missing".to_string()))?;
        let description = object
            .get("DAG_Executable_Description")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        if !executable && description.trim().is_empty() {
            return Err(DagError::MalformedVerdict(
                "non-executable verdict without a description".to_string(),
            ));
        }
        Ok(ExecutabilityVerdict { executable, description })
    })
}

/// Rewrite a rejected utterance so it fixes the judge's complaint.
pub fn repair_utterance(
    backend: &dyn ChatBackend,
    utterance: &str,
    verdict: &ExecutabilityVerdict,
    dag: &DagWorkflow,
    budget: usize,
) -> Result<String, DagError> {
    if verdict.executable {
        return Err(DagError::NothingToRepair);
    }
    let messages = gateway::render_template(
        "dag_utterance_repair",
        &example_bindings(&[
            ("user_utterance", utterance),
            ("DAG_Executable_Description", &verdict.description),
            ("dag", &dag.to_json()),
        ]),
    )?;
    retry_loop(backend, &messages, &Sampling::generation(), budget, |reply| {
        let repaired = reply.trim().trim_matches('"').to_string();
        if repaired.is_empty() {
            return Err(DagError::EmptyReply);
        }
        Ok(repaired)
    })
}

/// Full generate → judge → repair loop: at most `1 + max_repairs` judge
/// calls.
pub fn utterance_with_repairs(
    backend: &dyn ChatBackend,
    dag: &DagWorkflow,
    style: Style,
    max_repairs: usize,
    budget: usize,
) -> Result<String, DagError> {
    let mut utterance = generate_utterance(backend, dag, style, budget)?;
    let mut verdict = judge_executability(backend, &utterance, dag, budget)?;
    let mut repairs = 0;
    while !verdict.executable {
        if repairs == max_repairs {
            return Err(DagError::RepairExhausted(max_repairs));
        }
        utterance = repair_utterance(backend, &utterance, &verdict, dag, budget)?;
        verdict = judge_executability(backend, &utterance, dag, budget)?;
        repairs += 1;
    }
    Ok(utterance)
}

/// Phrases that leak internal structure into a think trace.
pub const DEFAULT_BANNED_PHRASES: &[&str] = &[
    "looking at the dag",
    "according to the dag",
    "based on the dag",
    "the dag structure",
    "according to the ground truth",
    "based on the ground truth",
    "this is the first step",
    "based on the available tools",
    "the next tool is",
    "eligible tool",
    "current level",
    "at this step",
];

pub const TOOL_CALLING_EXAMPLE: &str = r#"{
  "think": "<your step-by-step reasoning, grounded only in the user's words and prior outputs>",
  "tool_calls": [{"name": "<tool>", "arguments": {"<param>": <value>}}]
}"#;

#[derive(Debug, Clone, PartialEq)]
pub struct ThinkTrace {
    pub trace: String,
    pub calls: Vec<NamedCall>,
}

/// Generate the reasoning trace for one workflow level. The parsed calls
/// must equal the ground truth and the trace must not mention internal
/// structure.
pub fn generate_think_trace(
    backend: &dyn ChatBackend,
    utterance: &str,
    tools: &[FunctionSpec],
    history: &[NamedCall],
    dag: &DagWorkflow,
    gt_calls: &[NamedCall],
    banned: &[&str],
    budget: usize,
) -> Result<ThinkTrace, DagError> {
    let mut bindings = BTreeMap::new();
    bindings.insert("user_utterance".to_string(), utterance.to_string());
    bindings.insert(
        "raw_functions".to_string(),
        serde_json::to_string(tools).expect("serializable"),
    );
    bindings.insert(
        "tool_call_history".to_string(),
        serde_json::to_string(history).expect("serializable"),
    );
    bindings.insert("dag".to_string(), dag.to_json());
    bindings.insert(
        "gt_tool_calls_this_level".to_string(),
        serde_json::to_string(gt_calls).expect("serializable"),
    );
    bindings.insert("tool_calling_example".to_string(), TOOL_CALLING_EXAMPLE.to_string());
    let messages = gateway::render_template("think_trace", &bindings)?;
    retry_loop(backend, &messages, &Sampling::generation(), budget, |reply| {
        let extracted = sigparse::extract_structured(reply, Shape::Object)
            .map_err(|e| DagError::BadPayload(e.to_string()))?;
        let object = extracted.value.as_object().expect("Object shape");
        let trace = object
            .get("think")
            .and_then(Value::as_str)
            .ok_or_else(|| DagError::BadPayload("missing 'think' text".to_string()))?
            .to_string();
        let lowered = trace.to_lowercase();
        for phrase in banned {
            if lowered.contains(&phrase.to_lowercase()) {
                return Err(DagError::BannedPhrase(phrase.to_string()));
            }
        }
        let calls: Vec<NamedCall> = serde_json::from_value(
            object.get("tool_calls").cloned().unwrap_or(Value::Null),
        )
        .map_err(|e| DagError::BadPayload(e.to_string()))?;
        if calls != gt_calls {
            return Err(DagError::GtMismatch);
        }
        Ok(ThinkTrace { trace, calls })
    })
}

/// Schema validation plus node-name equality for one emitted call.
pub fn verify_tool_call(call: &NamedCall, node: &DagNode, spec: &FunctionSpec) -> Vec<Violation> {
    let mut violations = Vec::new();
    if call.name != node.tool {
        violations.push(Violation {
            code: schemaval::ViolationCode::UnknownFunction,
            path: "name".to_string(),
            message: format!("call '{}' does not match node '{}'", call.name, node.tool),
        });
    }
    let wrapped = ToolCall::Named { name: call.name.clone(), arguments: call.arguments.clone() };
    violations.extend(schemaval::validate_call(&wrapped, spec));
    violations.sort_by(|a, b| a.path.cmp(&b.path).then_with(|| a.code.cmp(&b.code)));
    violations
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub rating: u8,
    pub feedback: String,
}

/// Rate utterance clarity/specificity 1–5.
pub fn score_sample(
    backend: &dyn ChatBackend,
    utterance: &str,
    tools: &[FunctionSpec],
    budget: usize,
) -> Result<JudgeScore, DagError> {
    let mut bindings = BTreeMap::new();
    bindings.insert("functions".to_string(), serde_json::to_string(tools).expect("serializable"));
    bindings.insert("user_utterance".to_string(), utterance.to_string());
    let messages = gateway::render_template("utterance_judge", &bindings)?;
    retry_loop(backend, &messages, &Sampling::judge(), budget, |reply| {
        let extracted = sigparse::extract_structured(reply, Shape::Object)
            .map_err(|e| DagError::MalformedVerdict(e.to_string()))?;
        let object = extracted.value.as_object().expect("Object shape");
        let rating = object
            .get("rating")
            .and_then(Value::as_u64)
            .ok_or_else(|| DagError::MalformedVerdict("rating missing".to_string()))?;
        if !(1..=5).contains(&rating) {
            return Err(DagError::MalformedVerdict(format!("rating {rating} outside 1..5")));
        }
        let feedback =
            object.get("feedback").and_then(Value::as_str).unwrap_or_default().to_string();
        Ok(JudgeScore { rating: rating as u8, feedback })
    })
}

/// One emitted dataset row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleRow {
    pub utterance: String,
    pub tool_call: NamedCall,
    pub expected_output: Value,
    pub style: Style,
    pub dag_id: String,
    pub node: String,
    pub rating: u8,
}

#[derive(Debug, Clone)]
pub struct DagOptions {
    pub styles: Vec<Style>,
    pub threshold: u8,
    pub max_repairs: usize,
    pub retry_budget: usize,
    pub seed: u64,
}

impl Default for DagOptions {
    fn default() -> Self {
        DagOptions {
            styles: vec![Style::Direct, Style::Indirect],
            threshold: 4,
            max_repairs: 2,
            retry_budget: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Default)]
pub struct DagRunStats {
    pub attempted: usize,
    pub retained: usize,
    pub filtered: usize,
    pub errors: Vec<String>,
}

/// Bind a rendered positional call to its spec's property order.
pub fn bind_positional(call: &sigparse::CallExpr, spec: &FunctionSpec) -> NamedCall {
    let arguments: Map<String, Value> = spec
        .properties
        .keys()
        .zip(call.args.iter())
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    NamedCall { name: call.name.clone(), arguments }
}

/// Ground-truth trace from a record's grounded call list.
pub fn trace_from_io(
    io: &[crate::model::FunctionIO],
    specs: &[FunctionSpec],
) -> BTreeMap<String, NodeTrace> {
    let mut trace = BTreeMap::new();
    for entry in io {
        let Ok(call) = sigparse::parse_call(&entry.function_call) else { continue };
        let Some(spec) = specs.iter().find(|s| s.name == call.name) else { continue };
        let bound = bind_positional(&call, spec);
        trace.insert(
            call.name.clone(),
            NodeTrace { arguments: bound.arguments, output: entry.output.clone() },
        );
    }
    trace
}

/// Drive the whole pipeline for one tool inventory + ground-truth trace:
/// instantiate a seeded archetype, generate/judge/repair an utterance per
/// style, decompose, score, filter, and gate every emitted call.
pub fn run_dag_pipeline(
    backend: &dyn ChatBackend,
    template: &DagTemplate,
    tools: &[FunctionSpec],
    trace: &BTreeMap<String, NodeTrace>,
    options: &DagOptions,
) -> Result<(Vec<TripleRow>, DagRunStats), DagError> {
    let mut stats = DagRunStats::default();
    let dag = instantiate_dag(backend, template, tools, options.retry_budget)?;
    let dag_id = dag.id();
    let mut rows = Vec::new();
    for &style in &options.styles {
        stats.attempted += 1;
        let utterance =
            match utterance_with_repairs(backend, &dag, style, options.max_repairs, options.retry_budget) {
                Ok(u) => u,
                Err(e) => {
                    stats.errors.push(format!("{style:?}: {e}"));
                    continue;
                }
            };
        let score = score_sample(backend, &utterance, tools, options.retry_budget)?;
        if score.rating < options.threshold {
            stats.filtered += 1;
            continue;
        }
        let triples = decompose(&dag, trace, style)?;
        for mut triple in triples {
            let node = dag
                .nodes
                .iter()
                .find(|n| n.tool == triple.node)
                .expect("triple node comes from the dag");
            let spec = tools.iter().find(|s| s.name == triple.node).expect("validated wiring");
            // emission gate: a triple never leaves with a violating call
            let violations = verify_tool_call(&triple.tool_call, node, spec);
            if !violations.is_empty() {
                stats.errors.push(format!(
                    "node '{}': [{}]",
                    triple.node,
                    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
                ));
                continue;
            }
            triple.utterance = utterance.clone();
            rows.push(TripleRow {
                utterance: triple.utterance,
                tool_call: triple.tool_call,
                expected_output: triple.expected_output,
                style,
                dag_id: dag_id.clone(),
                node: triple.node,
                rating: score.rating,
            });
        }
        stats.retained += 1;
    }
    Ok((rows, stats))
}

/// Uniform seeded template choice for record-driven runs.
pub fn pick_template(templates: &[DagTemplate], max_nodes: usize, seed: u64) -> Option<&DagTemplate> {
    let eligible: Vec<&DagTemplate> =
        templates.iter().filter(|t| t.node_count <= max_nodes).collect();
    if eligible.is_empty() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Some(eligible[rng.gen_range(0..eligible.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedBackend;
    use crate::model::{OutputSpec, TypeDescriptor, TypeKind};

    fn spec(name: &str, params: &[&str], output: TypeKind) -> FunctionSpec {
        FunctionSpec {
            name: name.to_string(),
            properties: params
                .iter()
                .map(|p| (p.to_string(), TypeDescriptor::new(TypeKind::String)))
                .collect(),
            required: params.iter().map(|p| p.to_string()).collect(),
            kind: "object".to_string(),
            description: format!("{name}."),
            output: OutputSpec { kind: output, description: "r".to_string(), items: None },
        }
    }

    fn chain_tools() -> Vec<FunctionSpec> {
        vec![
            spec("fetch_weather_forecast", &["city", "days"], TypeKind::Object),
            spec("recommend_clothing", &["forecast"], TypeKind::String),
            spec("notify_user", &["message"], TypeKind::Boolean),
        ]
    }

    fn chain_dag() -> DagWorkflow {
        DagWorkflow {
            nodes: serde_json::from_str(DAG_EXAMPLES[0]).unwrap(),
            template: "LinearChain".to_string(),
        }
    }

    #[test]
    fn five_builtin_templates_with_expected_edges() {
        let templates = builtin_templates();
        assert_eq!(templates.len(), 5);
        let chain = templates.iter().find(|t| t.archetype == Archetype::LinearChain).unwrap();
        assert_eq!(chain.edges, vec![(0, 1), (1, 2)]);
        let diamond = templates.iter().find(|t| t.archetype == Archetype::Diamond).unwrap();
        assert_eq!(diamond.edges, vec![(0, 1), (0, 2), (1, 3), (2, 3)]);
        for t in &templates {
            // acyclicity: every edge goes strictly forward in index order
            assert!(t.edges.iter().all(|(a, b)| a < b));
        }
    }

    #[test]
    fn valid_diamond_has_no_violations() {
        let tools = vec![
            spec("fetch_article", &["url"], TypeKind::Object),
            spec("summarize_text", &["text"], TypeKind::String),
            spec("analyze_sentiment", &["text"], TypeKind::String),
            spec("compile_report", &["summary", "sentiment"], TypeKind::Object),
        ];
        let dag = DagWorkflow {
            nodes: serde_json::from_str(DAG_EXAMPLES[1]).unwrap(),
            template: "Diamond".to_string(),
        };
        assert!(validate_dag(&dag, &tools).is_empty());
    }

    #[test]
    fn forward_source_is_a_cycle_violation() {
        let tools = chain_tools();
        let mut dag = chain_dag();
        dag.nodes[0].from = vec!["notify_user".to_string()];
        let violations = validate_dag(&dag, &tools);
        assert!(violations.iter().any(|v| v.code == DagViolationCode::Cycle));
    }

    #[test]
    fn dangling_reference_reported() {
        let tools = chain_tools();
        let mut dag = chain_dag();
        dag.nodes[1].from = vec!["missing_tool".to_string()];
        let violations = validate_dag(&dag, &tools);
        assert!(violations.iter().any(|v| v.code == DagViolationCode::UnknownSource));
    }

    #[test]
    fn chain_availability_matches_ancestors() {
        let dag = chain_dag();
        let map = input_availability(&dag).unwrap();
        assert!(map[0].from_upstream.is_empty());
        assert_eq!(map[0].from_user.len(), 2); // city, days
        assert_eq!(
            map[2].from_upstream,
            ["fetch_weather_forecast", "recommend_clothing"]
                .iter()
                .map(|s| s.to_string())
                .collect()
        );
    }

    #[test]
    fn diamond_merge_sees_both_branches() {
        let dag = DagWorkflow {
            nodes: serde_json::from_str(DAG_EXAMPLES[1]).unwrap(),
            template: "Diamond".to_string(),
        };
        let map = input_availability(&dag).unwrap();
        assert_eq!(map[3].from_upstream.len(), 3); // fetch, summarize, sentiment
    }

    fn chain_trace() -> BTreeMap<String, NodeTrace> {
        let mut trace = BTreeMap::new();
        trace.insert(
            "fetch_weather_forecast".to_string(),
            NodeTrace {
                arguments: serde_json::from_str(r#"{"city": "Austin", "days": "5"}"#).unwrap(),
                output: serde_json::json!({"forecast": "sunny"}),
            },
        );
        trace.insert(
            "recommend_clothing".to_string(),
            NodeTrace {
                arguments: serde_json::from_str(r#"{"forecast": "fetch_weather_forecast.forecast"}"#)
                    .unwrap(),
                output: serde_json::json!("t-shirt"),
            },
        );
        trace.insert(
            "notify_user".to_string(),
            NodeTrace {
                arguments: serde_json::from_str(r#"{"message": "recommend_clothing.recommendation"}"#)
                    .unwrap(),
                output: serde_json::json!(true),
            },
        );
        trace
    }

    #[test]
    fn decompose_yields_one_triple_per_node() {
        let triples = decompose(&chain_dag(), &chain_trace(), Style::Direct).unwrap();
        assert_eq!(triples.len(), 3);
        assert_eq!(triples[1].tool_call.name, "recommend_clothing");
    }

    #[test]
    fn decompose_reports_trace_gap() {
        let mut trace = chain_trace();
        trace.remove("notify_user");
        let err = decompose(&chain_dag(), &trace, Style::Direct).unwrap_err();
        assert!(matches!(err, DagError::TraceGap(node) if node == "notify_user"));
    }

    #[test]
    fn optional_node_skipped_when_unexercised() {
        let mut dag = chain_dag();
        dag.nodes[1].optional = true;
        // rewire the tail around the optional node so its scope stays valid
        dag.nodes[2].from = vec!["fetch_weather_forecast".to_string()];
        dag.nodes[2].inputs =
            serde_json::from_str(r#"{"message": "fetch_weather_forecast.forecast"}"#).unwrap();
        let mut trace = chain_trace();
        trace.remove("recommend_clothing");
        trace.insert(
            "notify_user".to_string(),
            NodeTrace {
                arguments: serde_json::from_str(r#"{"message": "fetch_weather_forecast.forecast"}"#)
                    .unwrap(),
                output: serde_json::json!(true),
            },
        );
        let triples = decompose(&dag, &trace, Style::Indirect).unwrap();
        assert_eq!(triples.len(), 2);
    }

    #[test]
    fn instantiate_accepts_scripted_chain() {
        let template = builtin_templates().remove(1);
        let backend = ScriptedBackend::from_replies(vec![DAG_EXAMPLES[0]]);
        let dag = instantiate_dag(&backend, &template, &chain_tools(), 3).unwrap();
        assert_eq!(dag.nodes.len(), 3);
        assert_eq!(dag.nodes[1].from, vec!["fetch_weather_forecast".to_string()]);
    }

    #[test]
    fn instantiate_rejects_bare_object_then_errors() {
        let template = builtin_templates().remove(1);
        let bare = r#"{"tool": "notify_user", "from": ["user"], "inputs": {}}"#;
        let backend = ScriptedBackend::from_replies(vec![bare, bare]);
        let err = instantiate_dag(&backend, &template, &chain_tools(), 2).unwrap_err();
        assert!(matches!(err, DagError::BadPayload(_)));
    }

    #[test]
    fn mutation_swaps_exactly_one_node() {
        let mut pool = chain_tools();
        pool.push(spec("send_sms", &["message"], TypeKind::Boolean)); // shape-equal to notify_user
        let variants = mutate_dag(&chain_dag(), 2, 7, &pool).unwrap();
        assert_eq!(variants.len(), 2);
        for variant in &variants {
            let differing = variant
                .nodes
                .iter()
                .zip(&chain_dag().nodes)
                .filter(|(a, b)| a.tool != b.tool)
                .count();
            assert_eq!(differing, 1);
            assert!(validate_dag(variant, &pool).is_empty());
        }
        assert_eq!(mutate_dag(&chain_dag(), 2, 7, &pool).unwrap(), variants); // deterministic
    }

    #[test]
    fn mutation_without_candidates_is_insufficient_pool() {
        let err = mutate_dag(&chain_dag(), 1, 0, &chain_tools()).unwrap_err();
        assert!(matches!(err, DagError::InsufficientPool));
        assert!(mutate_dag(&chain_dag(), 0, 0, &chain_tools()).unwrap().is_empty());
    }

    #[test]
    fn direct_utterance_enforces_literal_coverage() {
        let missing = "Send me clothing advice for the forecast.";
        let covered = "For the next 5 days in Austin, send me a clothing recommendation.";
        let backend = ScriptedBackend::from_replies(vec![missing, covered]);
        let utterance = generate_utterance(&backend, &chain_dag(), Style::Direct, 3).unwrap();
        assert_eq!(utterance, covered);
    }

    #[test]
    fn executability_verdict_parses_fenced_reply() {
        let fenced = "```json\n{\"DAG_Executable\": true, \"DAG_Executable_Description\": \"all inputs present\"}\n```";
        let backend = ScriptedBackend::from_replies(vec![fenced]);
        let verdict = judge_executability(&backend, "u", &chain_dag(), 1).unwrap();
        assert!(verdict.executable);
    }

    #[test]
    fn repair_loop_bounded_by_max_repairs() {
        let reject = r#"{"DAG_Executable": false, "DAG_Executable_Description": "days missing"}"#;
        let backend = ScriptedBackend::from_replies(vec![
            "For 5 days in Austin, recommend clothing.", // generate
            reject,                                      // judge 1
            "For the next 5 days in Austin, recommend and notify.", // repair 1
            reject,                                      // judge 2
            "Second repair attempt.",                    // repair 2
            reject,                                      // judge 3 (1 + max_repairs judges)
        ]);
        let err =
            utterance_with_repairs(&backend, &chain_dag(), Style::Indirect, 2, 1).unwrap_err();
        assert!(matches!(err, DagError::RepairExhausted(2)));
        assert_eq!(backend.remaining(), 0);
    }

    #[test]
    fn repair_requires_failed_verdict() {
        let backend = ScriptedBackend::from_replies(Vec::<String>::new());
        let verdict = ExecutabilityVerdict { executable: true, description: String::new() };
        let err = repair_utterance(&backend, "u", &verdict, &chain_dag(), 1).unwrap_err();
        assert!(matches!(err, DagError::NothingToRepair));
    }

    #[test]
    fn think_trace_rejects_banned_phrase_and_gt_drift() {
        let gt = vec![NamedCall {
            name: "fetch_weather_forecast".to_string(),
            arguments: serde_json::from_str(r#"{"city": "Austin", "days": 5}"#).unwrap(),
        }];
        let banned_reply = r#"{"think": "Looking at the DAG, I start with weather.", "tool_calls": [{"name": "fetch_weather_forecast", "arguments": {"city": "Austin", "days": 5}}]}"#;
        let drift_reply = r#"{"think": "The user asked for Austin weather over 5 days.", "tool_calls": [{"name": "fetch_weather_forecast", "arguments": {"city": "Dallas", "days": 5}}]}"#;
        let good_reply = r#"{"think": "The user asked for Austin weather over 5 days, so I pass those values directly.", "tool_calls": [{"name": "fetch_weather_forecast", "arguments": {"city": "Austin", "days": 5}}]}"#;
        let backend = ScriptedBackend::from_replies(vec![banned_reply, drift_reply, good_reply]);
        let result = generate_think_trace(
            &backend,
            "u",
            &chain_tools(),
            &[],
            &chain_dag(),
            &gt,
            DEFAULT_BANNED_PHRASES,
            3,
        )
        .unwrap();
        assert_eq!(result.calls, gt);
    }

    #[test]
    fn verify_tool_call_flags_wrong_node_and_extra_arg() {
        let dag = chain_dag();
        let specs = chain_tools();
        let good = NamedCall {
            name: "fetch_weather_forecast".to_string(),
            arguments: serde_json::from_str(r#"{"city": "Austin", "days": "5"}"#).unwrap(),
        };
        assert!(verify_tool_call(&good, &dag.nodes[0], &specs[0]).is_empty());
        let wrong_node = verify_tool_call(&good, &dag.nodes[1], &specs[0]);
        assert!(wrong_node
            .iter()
            .any(|v| v.code == schemaval::ViolationCode::UnknownFunction));
        let mut extra = good.clone();
        extra.arguments.insert("ghost".to_string(), Value::Null);
        let violations = verify_tool_call(&extra, &dag.nodes[0], &specs[0]);
        assert!(violations
            .iter()
            .any(|v| v.code == schemaval::ViolationCode::ExtraneousField));
    }

    #[test]
    fn score_gate_retries_out_of_range_rating() {
        let backend = ScriptedBackend::from_replies(vec![
            r#"{"rating": 0, "feedback": "?"}"#,
            r#"{"rating": 5, "feedback": "clear"}"#,
        ]);
        let score = score_sample(&backend, "u", &chain_tools(), 3).unwrap();
        assert_eq!(score.rating, 5);
    }

    #[test]
    fn pipeline_filters_below_threshold() {
        let accept = r#"{"DAG_Executable": true, "DAG_Executable_Description": "ok"}"#;
        let covered = "For the next 5 days in Austin, send a clothing recommendation and notify me.";
        let backend = ScriptedBackend::from_replies(vec![
            DAG_EXAMPLES[0],                     // instantiate
            covered,                             // direct utterance
            accept,                              // judge
            r#"{"rating": 5, "feedback": "x"}"#, // score (retained)
            covered,                             // indirect utterance
            accept,                              // judge
            r#"{"rating": 3, "feedback": "y"}"#, // score (filtered)
        ]);
        let template = builtin_templates().remove(1);
        let (rows, stats) = run_dag_pipeline(
            &backend,
            &template,
            &chain_tools(),
            &chain_trace(),
            &DagOptions::default(),
        )
        .unwrap();
        assert_eq!(stats.retained, 1);
        assert_eq!(stats.filtered, 1);
        assert_eq!(rows.len(), 3); // one triple per node, retained style only
        assert!(rows.iter().all(|r| r.rating == 5 && r.style == Style::Direct));
    }
}
