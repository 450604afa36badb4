//! JSON Lines datasets, the CANARD converter and artifact writers.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use iur_core::Dialogue;
use serde::{Deserialize, Serialize};

/// One dataset line: `{"id"?, "context": [..], "incomplete", "rewrite"?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub context: Vec<String>,
    pub incomplete: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<String>,
}

impl From<&Dialogue> for DialogueRecord {
    fn from(d: &Dialogue) -> Self {
        DialogueRecord {
            id: Some(d.id.clone()),
            context: d.context.iter().map(|u| u.text.clone()).collect(),
            incomplete: d.incomplete.text.clone(),
            rewrite: d.rewrite.as_ref().map(|u| u.text.clone()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{origin}:{line}: {message}")]
    Line { origin: String, line: usize, message: String },
    #[error("{origin}: {message}")]
    Format { origin: String, message: String },
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Dialogues in file order. Blank lines are skipped; records without an id
/// get `line-<n>`.
pub fn load_jsonl(path: &Path) -> Result<Vec<Dialogue>, DataError> {
    parse_jsonl(&read(path)?, &path.display().to_string())
}

pub fn parse_jsonl(text: &str, origin: &str) -> Result<Vec<Dialogue>, DataError> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let n = k + 1;
        let err = |message: String| DataError::Line { origin: origin.to_string(), line: n, message };
        let rec: DialogueRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let id = rec.id.unwrap_or_else(|| format!("line-{n}"));
        let d = Dialogue::new(&id, &rec.context, &rec.incomplete, rec.rewrite.as_deref()).map_err(|e| err(e.to_string()))?;
        out.push(d);
    }
    Ok(out)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn save_dialogues(path: &Path, dialogues: &[Dialogue]) -> Result<(), DataError> {
    write_jsonl(path, dialogues.iter().map(DialogueRecord::from))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

#[derive(Debug, Deserialize)]
struct CanardRecord {
    #[serde(rename = "History")]
    history: Vec<String>,
    #[serde(rename = "Question")]
    question: String,
    #[serde(rename = "Rewrite")]
    rewrite: Option<String>,
    #[serde(rename = "QuAC_dialog_id")]
    dialog_id: Option<String>,
    #[serde(rename = "Question_no")]
    question_no: Option<u64>,
}

/// CANARD-style JSON array: question history becomes the context (blank
/// entries dropped), the question the incomplete utterance and the rewrite
/// the gold rewrite. Ids are `<dialog id>_q#<question no>` when present.
pub fn convert_canard(text: &str, origin: &str) -> Result<Vec<Dialogue>, DataError> {
    let records: Vec<CanardRecord> =
        serde_json::from_str(text).map_err(|e| DataError::Format { origin: origin.to_string(), message: e.to_string() })?;
    records
        .into_iter()
        .enumerate()
        .map(|(k, r)| {
            let id = match (&r.dialog_id, r.question_no) {
                (Some(d), Some(q)) => format!("{d}_q#{q}"),
                _ => format!("record-{k}"),
            };
            let history: Vec<&String> = r.history.iter().filter(|h| !h.trim().is_empty()).collect();
            Dialogue::new(&id, &history, &r.question, r.rewrite.as_deref())
                .map_err(|e| DataError::Line { origin: origin.to_string(), line: k, message: e.to_string() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_records() {
        let text = "{\"context\":[\"a b\"],\"incomplete\":\"c\",\"rewrite\":\"a c\"}\n\n{\"id\":\"x\",\"context\":[\"p\",\"q r\"],\"incomplete\":\"s\"}\n";
        let ds = parse_jsonl(text, "mem").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].id, "line-1");
        assert_eq!(ds[0].context.len(), 1);
        assert_eq!(ds[0].context[0].tokens, ["a", "b"]);
        assert_eq!(ds[0].rewrite.as_ref().unwrap().tokens, ["a", "c"]);
        assert_eq!(ds[1].id, "x");
        assert!(ds[1].rewrite.is_none());
        assert!(parse_jsonl("", "mem").unwrap().is_empty());
    }

    #[test]
    fn errors_name_the_line() {
        let text = "{\"context\":[\"a\"],\"incomplete\":\"c\"}\n{\"context\":[\"a\"]}\n";
        let e = parse_jsonl(text, "data.jsonl").unwrap_err().to_string();
        assert!(e.starts_with("data.jsonl:2:"), "{e}");
        let e = parse_jsonl("{\"id\":\"q\",\"context\":[],\"incomplete\":\"c\"}", "d").unwrap_err().to_string();
        assert!(e.contains("d:1") && e.contains('q'), "{e}");
        assert!(parse_jsonl("not json", "d").is_err());
    }

    #[test]
    fn canard_conversion() {
        let text = r#"[{"History":["Frank Zappa","Disbandment","What group disbanded?","Zappa and the Mothers."],
            "Question":"When did they disband?","Rewrite":"When did Zappa and the Mothers disband?",
            "QuAC_dialog_id":"C_1","Question_no":2}]"#;
        let ds = convert_canard(text, "canard").unwrap();
        assert_eq!(ds[0].id, "C_1_q#2");
        assert_eq!(ds[0].context.len(), 4);
        assert_eq!(ds[0].incomplete.tokens, ["when", "did", "they", "disband", "?"]);
        assert!(convert_canard("{}", "c").is_err());
    }
}
