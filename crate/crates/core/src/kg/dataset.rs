use super::{KnowledgeGraph, Triple};
use crate::error::{Error, Result};
use serde_json::Value;

/// One graph/text training pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub graph: KnowledgeGraph,
    pub text: String,
}

/// Outcome of reading a line-delimited dataset: the valid pairs in file order
/// plus per-line errors for the malformed ones.
#[derive(Debug, Default)]
pub struct DatasetParse {
    pub examples: Vec<Example>,
    pub errors: Vec<Error>,
}

fn str_field<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> std::result::Result<&'a str, String> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(format!("field {key:?} must be a string")),
        None => Err(format!("missing field {key:?}")),
    }
}

fn record(v: &Value) -> std::result::Result<Example, String> {
    let obj = v.as_object().ok_or("record must be an object")?;
    let text = str_field(obj, "text")?.to_string();
    let triples = if let Some(list) = obj.get("triples") {
        let list = list.as_array().ok_or("field \"triples\" must be an array")?;
        if list.is_empty() {
            return Err("field \"triples\" is empty".into());
        }
        list.iter()
            .map(|t| match t.as_array().map(Vec::as_slice) {
                Some([Value::String(h), Value::String(r), Value::String(t)]) => {
                    Triple::new(h.as_str(), r.as_str(), t.as_str()).map_err(|e| e.to_string())
                }
                _ => Err("each triple must be an array of three strings".to_string()),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?
    } else {
        let h = str_field(obj, "subject")?;
        let r = str_field(obj, "predicate")?;
        let t = str_field(obj, "object")?;
        vec![Triple::new(h, r, t).map_err(|e| e.to_string())?]
    };
    Ok(Example { graph: KnowledgeGraph::new(triples), text })
}

/// Parses a single JSON record (either `triples` or `subject`/`predicate`/`object`, plus `text`).
pub fn parse_record(line: &str, line_no: usize) -> Result<Example> {
    let v: Value = serde_json::from_str(line).map_err(|e| Error::Record { line: line_no, msg: e.to_string() })?;
    record(&v).map_err(|msg| Error::Record { line: line_no, msg })
}

/// Reads UTF-8 line-delimited records. Blank lines are skipped; line numbers are 1-based.
pub fn parse_dataset(input: &str) -> DatasetParse {
    let mut out = DatasetParse::default();
    for (i, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(line, i + 1) {
            Ok(ex) => out.examples.push(ex),
            Err(e) => out.errors.push(e),
        }
    }
    if out.examples.is_empty() && out.errors.is_empty() {
        log::warn!("dataset is empty");
    }
    out
}
