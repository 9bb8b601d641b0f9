// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sample records and JSONL reading/writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFormat {
    YesNo,
    Mcq,
    Caption,
    Open,
}

impl TaskFormat {
    pub fn is_short_answer(self) -> bool {
        matches!(self, TaskFormat::YesNo | TaskFormat::Mcq)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub tokens: Vec<u32>,
}

/// An object lexeme the sample talks about, with its ground-truth status.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMention {
    pub name: String,
    pub span: Vec<u32>,
    pub present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
}

/// One line of a sequence dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub format: TaskFormat,
    /// Rendered prompt text, for reading; the model sees `tokens`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(flatten)]
    pub sequence: TokenSequence,
    /// Answer options of a short-answer question.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<AnswerOption>,
    /// Index into `options` of the correct answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objects: Vec<ObjectMention>,
    /// Expected continuation for open-ended tasks, compared slot by slot.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reference: Vec<u32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, format: TaskFormat, sequence: TokenSequence) -> Self {
        Sample {
            id: id.into(),
            image_id: None,
            format,
            question: None,
            sequence,
            options: vec![],
            answer: None,
            objects: vec![],
            reference: vec![],
        }
    }

    /// The prompt: everything before the first OutputText token.
    pub fn prompt(&self) -> TokenSequence {
        let end = self.sequence.output_start();
        let mut s = self.sequence.clone();
        s.tokens.truncate(end);
        s.segments.truncate(end);
        s.annotations.retain(|a| a.position < end);
        s
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text).map_err(|(line, e)| Error::Parse {
        path: path.to_path_buf(),
        reason: format!("line {line}: {e}"),
    })
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> std::result::Result<Vec<T>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e.to_string())))
        .collect()
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}
