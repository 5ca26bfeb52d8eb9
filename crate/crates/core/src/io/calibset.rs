//! Calibration and evaluation sets, one JSON object per line:
//! `{"task": "copy", "prompt": [1, 4, 9, 2], "answer": [9]}`.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Result, TaqError};
use crate::model::{Item, TaskKind};

fn ids(v: &Value, key: &str, line: usize) -> Result<Vec<u32>> {
    let arr = v
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| TaqError::Format(format!("line {line}: missing array \"{key}\"")))?;
    arr.iter()
        .map(|x| {
            x.as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .ok_or_else(|| {
                    TaqError::Format(format!("line {line}: bad token id {x} in \"{key}\""))
                })
        })
        .collect()
}

/// Parses a JSONL set. Blank lines are skipped; a set with no items is an error.
pub fn decode_items(text: &str) -> Result<Vec<Item>> {
    let mut items = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let v: Value =
            serde_json::from_str(raw).map_err(|e| TaqError::Format(format!("line {line}: {e}")))?;
        let task = v
            .get("task")
            .and_then(Value::as_str)
            .ok_or_else(|| TaqError::Format(format!("line {line}: missing string \"task\"")))?;
        let task: TaskKind = task
            .parse()
            .map_err(|e| TaqError::Format(format!("line {line}: {e}")))?;
        let prompt = ids(&v, "prompt", line)?;
        if prompt.is_empty() {
            return Err(TaqError::Format(format!("line {line}: empty prompt")));
        }
        items.push(Item {
            task,
            prompt,
            answer: ids(&v, "answer", line)?,
        });
    }
    if items.is_empty() {
        return Err(TaqError::InsufficientData(
            "calibration set has no items".into(),
        ));
    }
    Ok(items)
}

pub fn encode_items(items: &[Item]) -> String {
    let mut out = String::new();
    for it in items {
        let v = json!({ "task": it.task.id(), "prompt": it.prompt, "answer": it.answer });
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

pub fn read_items(path: &Path) -> Result<Vec<Item>> {
    decode_items(&fs::read_to_string(path).map_err(super::at_path(path))?)
}

pub fn write_items(path: &Path, items: &[Item]) -> Result<()> {
    fs::write(path, encode_items(items)).map_err(super::at_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gen_task;

    #[test]
    fn round_trip() {
        let items = gen_task(TaskKind::SortSeq, 5, 64, 3);
        let text = encode_items(&items);
        assert_eq!(text.lines().count(), 5);
        assert_eq!(decode_items(&text).unwrap(), items);
    }

    #[test]
    fn empty_set() {
        assert!(matches!(
            decode_items(""),
            Err(TaqError::InsufficientData(_))
        ));
        assert!(matches!(
            decode_items("\n  \n"),
            Err(TaqError::InsufficientData(_))
        ));
    }

    #[test]
    fn malformed_lines() {
        let bad = [
            r#"{"task":"copy","prompt":[1,2]"#,
            r#"{"task":"nope","prompt":[1],"answer":[]}"#,
            r#"{"task":"copy","prompt":[-1],"answer":[]}"#,
            r#"{"task":"copy","prompt":[],"answer":[]}"#,
            r#"{"task":"copy","answer":[]}"#,
        ];
        for b in bad {
            assert!(matches!(decode_items(b), Err(TaqError::Format(_))), "{b}");
        }
    }
}
