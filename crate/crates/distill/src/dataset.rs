//! JSON-Lines datasets: one `{"id"?, "input", "output"}` object per line.

use std::collections::BTreeSet;
use std::path::Path;

use distill_core::{Dataset, Example, TaskKind, TaskSpec};
use serde::{Deserialize, Serialize};

pub use distill_core::sampling::{freeze_eval_subset, sample_examples};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: output {value:?} is not in the task label set")]
    LabelOutsideTaskSet { line: usize, value: String },
    #[error("{path} contains no examples")]
    EmptyDataset { path: String },
}

#[derive(Deserialize)]
struct Record {
    #[serde(default)]
    id: Option<String>,
    input: String,
    output: String,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    input: &'a str,
    output: &'a str,
}

pub fn load_dataset(path: &Path, task: &TaskSpec) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, task, &path.display().to_string())
}

/// Parses JSON-Lines text. Blank lines are skipped; a record without an id
/// is named `line-<n>` after its 1-based line number.
pub fn parse_dataset(text: &str, task: &TaskSpec, source_path: &str) -> Result<Dataset, DataError> {
    let labels: BTreeSet<&str> = task.labels.iter().map(String::as_str).collect();
    let mut seen = BTreeSet::new();
    let mut examples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| DataError::MalformedRecord {
            line,
            reason: e.to_string(),
        })?;
        if rec.input.trim().is_empty() {
            return Err(DataError::MalformedRecord {
                line,
                reason: "input is empty".into(),
            });
        }
        if task.kind == TaskKind::Classification && !labels.contains(rec.output.as_str()) {
            return Err(DataError::LabelOutsideTaskSet {
                line,
                value: rec.output,
            });
        }
        let id = rec.id.unwrap_or_else(|| format!("line-{line}"));
        if !seen.insert(id.clone()) {
            return Err(DataError::MalformedRecord {
                line,
                reason: format!("duplicate id {id:?}"),
            });
        }
        examples.push(Example {
            id,
            input: rec.input,
            output: rec.output,
        });
    }
    if examples.is_empty() {
        return Err(DataError::EmptyDataset {
            path: source_path.to_string(),
        });
    }
    Ok(Dataset {
        task_name: task.name.clone(),
        examples,
        source_path: source_path.to_string(),
    })
}

/// One line per example, ids always written.
pub fn to_jsonl(examples: &[Example]) -> String {
    let mut out = String::new();
    for e in examples {
        let rec = RecordOut {
            id: &e.id,
            input: &e.input,
            output: &e.output,
        };
        out.push_str(&serde_json::to_string(&rec).expect("strings always serialize"));
        out.push('\n');
    }
    out
}
