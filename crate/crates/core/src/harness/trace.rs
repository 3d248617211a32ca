//! Per-question trace documents (`chemau-trace/1`).

use serde::{Deserialize, Serialize};

use crate::chain::Answer;
use crate::controller::{ControllerConfig, IterationTrace, QuestionFailure, QuestionOutcome};

pub const TRACE_SCHEMA: &str = "chemau-trace/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDocument {
    pub schema: String,
    pub question_id: String,
    pub config: ControllerConfig,
    pub templates_version: String,
    pub iterations: Vec<IterationTrace>,
    pub iterations_used: u32,
    pub final_answer: Answer,
    pub gold: char,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Backend failure that ended the question early.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TraceDocument {
    pub fn from_outcome(
        question_id: &str,
        gold: char,
        config: &ControllerConfig,
        templates_version: &str,
        outcome: &QuestionOutcome,
    ) -> Self {
        Self {
            schema: TRACE_SCHEMA.to_string(),
            question_id: question_id.to_string(),
            config: config.clone(),
            templates_version: templates_version.to_string(),
            iterations: outcome.per_iteration_traces.clone(),
            iterations_used: outcome.iterations_used,
            final_answer: outcome.final_answer,
            gold,
            correct: outcome.final_answer == Answer::Letter(gold),
            warnings: outcome.warnings.clone(),
            error: None,
        }
    }

    pub fn from_failure(
        question_id: &str,
        gold: char,
        config: &ControllerConfig,
        templates_version: &str,
        failure: &QuestionFailure,
    ) -> Self {
        Self {
            schema: TRACE_SCHEMA.to_string(),
            question_id: question_id.to_string(),
            config: config.clone(),
            templates_version: templates_version.to_string(),
            iterations: failure.partial.clone(),
            iterations_used: failure.partial.len() as u32,
            final_answer: Answer::Unparsed,
            gold,
            correct: false,
            warnings: Vec::new(),
            error: Some(failure.error.to_string()),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, TraceError> {
        let doc: Self = serde_json::from_str(text).map_err(|e| TraceError::Parse(e.to_string()))?;
        if doc.schema != TRACE_SCHEMA {
            return Err(TraceError::Schema(doc.schema));
        }
        Ok(doc)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("malformed trace: {0}")]
    Parse(String),
    #[error("unsupported trace schema {0:?}")]
    Schema(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// Every `*.json` trace in `dir`, sorted by file name.
pub fn load_traces(dir: &std::path::Path) -> Result<Vec<TraceDocument>, TraceError> {
    let io = |e: std::io::Error| TraceError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| TraceError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            TraceDocument::from_json(&text)
        })
        .collect()
}
