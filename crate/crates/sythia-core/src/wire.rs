//! Canonical on-disk form of agentic records: one record per JSONL line with
//! the dataset's field names (`domain`, `scenario`, `agentic_scenario`,
//! `function_list`, `function_description`, `pseudo_code`,
//! `possible_scenario`, `user_utterance`, `function_inputs_outputs`,
//! `flow_summary`, `outcome`, `agentic_execution`, `id`).
//!
//! `function_list` is the rendered `functions_list = [...]` text block; the
//! full alternative-scenario list rides along as `possible_scenarios` next to
//! the selected `possible_scenario`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgenticRecord, ExecutionStep, FunctionIO, FunctionSpec};
use crate::sigparse;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: function_list block: {source}")]
    FunctionList {
        line: usize,
        #[source]
        source: sigparse::ParseError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordWire {
    pub domain: String,
    pub scenario: String,
    pub agentic_scenario: String,
    pub function_list: String,
    pub function_description: Vec<FunctionSpec>,
    pub pseudo_code: String,
    pub possible_scenario: String,
    #[serde(default)]
    pub possible_scenarios: Vec<String>,
    pub user_utterance: String,
    pub function_inputs_outputs: Vec<FunctionIO>,
    pub flow_summary: String,
    pub outcome: String,
    pub agentic_execution: Vec<ExecutionStep>,
    pub id: serde_json::Value,
}

impl From<&AgenticRecord> for RecordWire {
    fn from(record: &AgenticRecord) -> Self {
        RecordWire {
            domain: record.domain.clone(),
            scenario: record.use_case.clone(),
            agentic_scenario: record.agentic_scenario.clone(),
            function_list: sigparse::format_functions_list(&record.functions),
            function_description: record.function_specs.clone(),
            pseudo_code: record.pseudo_code.clone(),
            possible_scenario: record.selected_scenario.clone(),
            possible_scenarios: record.possible_scenarios.clone(),
            user_utterance: record.scenario_pack.utterance.clone(),
            function_inputs_outputs: record.scenario_pack.function_inputs_outputs.clone(),
            flow_summary: record.scenario_pack.flow_summary.clone(),
            outcome: record.scenario_pack.outcome.clone(),
            agentic_execution: record.execution.clone(),
            id: serde_json::Value::String(record.id.clone()),
        }
    }
}

impl RecordWire {
    pub fn into_record(self) -> Result<AgenticRecord, sigparse::ParseError> {
        let (functions, _warnings) = sigparse::parse_functions_list(&self.function_list)?;
        let id = match self.id {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        let possible_scenarios = if self.possible_scenarios.is_empty() {
            vec![self.possible_scenario.clone()]
        } else {
            self.possible_scenarios
        };
        Ok(AgenticRecord {
            domain: self.domain,
            use_case: self.scenario,
            agentic_scenario: self.agentic_scenario,
            functions,
            function_specs: self.function_description,
            pseudo_code: self.pseudo_code,
            possible_scenarios,
            selected_scenario: self.possible_scenario,
            scenario_pack: crate::model::UserScenarioPack {
                utterance: self.user_utterance,
                function_inputs_outputs: self.function_inputs_outputs,
                flow_summary: self.flow_summary,
                outcome: self.outcome,
            },
            execution: self.agentic_execution,
            id,
        })
    }
}

pub fn record_to_json(record: &AgenticRecord) -> String {
    serde_json::to_string(&RecordWire::from(record)).expect("record serializes")
}

pub fn record_from_json(line: &str) -> Result<AgenticRecord, WireError> {
    let wire: RecordWire = serde_json::from_str(line).map_err(|source| WireError::Json { line: 0, source })?;
    wire.into_record()
        .map_err(|source| WireError::FunctionList { line: 0, source })
}

/// Read a JSONL stream of records.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<AgenticRecord>, WireError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: RecordWire =
            serde_json::from_str(&line).map_err(|source| WireError::Json { line: i + 1, source })?;
        records.push(
            wire.into_record()
                .map_err(|source| WireError::FunctionList { line: i + 1, source })?,
        );
    }
    Ok(records)
}

/// Write records as JSONL, one per line.
pub fn write_records<W: Write>(mut writer: W, records: &[AgenticRecord]) -> Result<(), WireError> {
    for record in records {
        writeln!(writer, "{}", record_to_json(record))?;
    }
    Ok(())
}
