//! Dialog sample schema and JSON-lines IO.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::TextError;

/// Written into every preprocessed record.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Knowledge,
    Recommendation,
    Persona,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Knowledge, Task::Recommendation, Task::Persona];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Knowledge => "knowledge",
            Task::Recommendation => "recommendation",
            Task::Persona => "persona",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = TextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "knowledge" => Ok(Task::Knowledge),
            "recommendation" => Ok(Task::Recommendation),
            "persona" => Ok(Task::Persona),
            other => Err(TextError::UnknownTask(other.to_string())),
        }
    }
}

/// A knowledge entry: a `[subject, predicate, object]` triple or a free sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KnowledgeItem {
    Triple(Vec<String>),
    Sentence(String),
}

/// One recorded original/placeholder substitution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placeholder {
    pub placeholder: String,
    pub original: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlaceholderMap(pub Vec<Placeholder>);

impl PlaceholderMap {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entries(&self) -> &[Placeholder] {
        &self.0
    }

    pub fn original(&self, placeholder: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|p| p.placeholder == placeholder)
            .map(|p| p.original.as_str())
    }
}

/// A raw training or evaluation record.
///
/// For recommendation samples `goal` is the goal plan; its final entry is
/// the goal pursued by `response`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogSample {
    pub task: Task,
    pub history: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub knowledge: Vec<KnowledgeItem>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub goal: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub user_profile: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub situation: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub persona: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "PlaceholderMap::is_empty")]
    pub placeholder_map: PlaceholderMap,
}

impl DialogSample {
    pub fn new(task: Task, history: Vec<String>) -> Self {
        Self {
            task,
            history,
            knowledge: Vec::new(),
            goal: Vec::new(),
            user_profile: BTreeMap::new(),
            situation: String::new(),
            persona: Vec::new(),
            response: None,
            placeholder_map: PlaceholderMap::default(),
        }
    }

    /// The user's name from the profile, if one is recorded.
    pub fn user_name(&self) -> Option<&str> {
        ["姓名", "name"]
            .iter()
            .find_map(|k| self.user_profile.get(*k))
            .map(String::as_str)
            .filter(|s| !s.is_empty())
    }
}

/// Encoder-ready record produced by preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessedSample {
    pub schema_version: u32,
    pub task: Task,
    /// Turns after placeholder substitution, oldest first.
    pub history: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona: Option<String>,
    /// Training target (goal-prefixed for recommendation).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "PlaceholderMap::is_empty")]
    pub placeholder_map: PlaceholderMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_name: Option<String>,
}

/// A multi-turn dialog used for pre-training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub turns: Vec<String>,
}

/// A history/response pair cut from a dialog.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryResponse {
    pub history: Vec<String>,
    pub response: String,
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>, TextError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| TextError::Json {
            line: n + 1,
            source: e,
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, items: &[T]) -> Result<(), TextError> {
    for item in items {
        serde_json::to_writer(&mut writer, item).map_err(|e| TextError::Json { line: 0, source: e })?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_mixed_knowledge() {
        let line = r#"{"task":"knowledge","history":["你好"],"knowledge":[["碟中谍","类型","动作"],"一部电影"],"response":"好"}"#;
        let s: DialogSample = serde_json::from_str(line).unwrap();
        assert_eq!(s.knowledge.len(), 2);
        assert!(matches!(&s.knowledge[0], KnowledgeItem::Triple(t) if t.len() == 3));
        assert!(matches!(&s.knowledge[1], KnowledgeItem::Sentence(_)));
    }

    #[test]
    fn jsonl_round_trip() {
        let mut s = DialogSample::new(Task::Persona, vec!["hi".into()]);
        s.persona = vec!["我喜欢猫".into()];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[s.clone(), s.clone()]).unwrap();
        let back: Vec<DialogSample> = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, vec![s.clone(), s]);
    }

    #[test]
    fn bad_line_reports_line_number() {
        let data = "{\"turns\":[\"a\"]}\n\nnot json\n";
        let err = read_jsonl::<Dialog, _>(data.as_bytes()).unwrap_err();
        assert!(matches!(err, TextError::Json { line: 3, .. }));
    }

    #[test]
    fn task_parse() {
        assert_eq!("persona".parse::<Task>().unwrap(), Task::Persona);
        assert!("chitchat".parse::<Task>().is_err());
    }
}
