//! Four pipelines for fully synthetic, schema-validated agentic tool-use
//! training data:
//!
//! - record synthesis: staged generation of complete agentic records,
//! - DAG-first generation: atomic (utterance, tool call, expected output)
//!   triples decomposed from tool-dependency graphs,
//! - multi-turn dialogue synthesis: simulated user/agent conversations with
//!   mock tool execution and turn-level judging,
//! - record rollout: prompt/completion dataset assembly with token-count
//!   bucketing.
//!
//! Every generated tool call is validated against its declared contract; bad
//! model output is rejected and retried, never repaired silently.

pub mod batch;
pub mod config;
pub mod dagengine;
pub mod dialoguesynth;
pub mod driver;
pub mod fixtures;
pub mod gateway;
pub mod model;
pub mod recordsynth;
pub mod rollout;
pub mod schemaval;
pub mod sigparse;
pub mod wire;
