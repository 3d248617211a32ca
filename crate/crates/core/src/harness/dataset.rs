//! Line-delimited question records (`chemau-dataset/1`): one JSON object per
//! line with `id`, `question`, `options` (letter to text), `answer` and an
//! optional `subject`. Blank lines are skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DATASET_SCHEMA: &str = "chemau-dataset/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    pub id: String,
    pub question: String,
    pub options: BTreeMap<char, String>,
    pub answer: char,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

impl QuestionRecord {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        options: &[(char, &str)],
        answer: char,
    ) -> Self {
        Self {
            schema: None,
            id: id.into(),
            question: question.into(),
            options: options.iter().map(|&(k, v)| (k, v.to_string())).collect(),
            answer,
            subject: None,
        }
    }

    pub fn letters(&self) -> Vec<char> {
        self.options.keys().copied().collect()
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(schema) = &self.schema {
            if schema != DATASET_SCHEMA {
                out.push(format!("unsupported schema {schema:?}"));
            }
        }
        if self.id.trim().is_empty() {
            out.push("empty id".into());
        }
        if self.options.len() < 2 {
            out.push(format!("{} option(s), need at least 2", self.options.len()));
        }
        if let Some(bad) = self.options.keys().find(|k| !k.is_ascii_uppercase()) {
            out.push(format!("option label {bad:?} is not an uppercase letter"));
        }
        if !self.options.contains_key(&self.answer) {
            out.push(format!("answer {:?} is not an option", self.answer));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("invalid records: {}", .0.iter().map(|(id, why)| format!("{id} ({why})")).collect::<Vec<_>>().join("; "))]
    Validation(Vec<(String, String)>),
    #[error("dataset is empty")]
    Empty,
}

pub fn parse_dataset(text: &str) -> Result<Vec<QuestionRecord>, DatasetError> {
    let mut records: Vec<QuestionRecord> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
            line: n + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    validate(&records)?;
    Ok(records)
}

pub fn validate(records: &[QuestionRecord]) -> Result<(), DatasetError> {
    let mut bad = Vec::new();
    let mut seen = BTreeSet::new();
    for r in records {
        for p in r.problems() {
            bad.push((r.id.clone(), p));
        }
        if !seen.insert(r.id.as_str()) {
            bad.push((r.id.clone(), "duplicate id".into()));
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(DatasetError::Validation(bad))
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QuestionRecord>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_dataset(&text)
}
