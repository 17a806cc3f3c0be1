//! JSONL metrics: one flat, key-sorted object per line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

pub const MANDATORY_KEYS: [&str; 4] = ["stage", "step", "seed", "wall_ms"];

/// Flat key → number/string record. Keys iterate in sorted order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record(BTreeMap<String, Value>);

impl Record {
    pub fn new(stage: &str, step: usize, seed: u64, wall_ms: u64) -> Self {
        let mut r = Self::default();
        r.0.insert("stage".into(), stage.into());
        r.0.insert("step".into(), step.into());
        r.0.insert("seed".into(), seed.into());
        r.0.insert("wall_ms".into(), wall_ms.into());
        r
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.0.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn from_map(map: BTreeMap<String, Value>) -> Self {
        Self(map)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = MANDATORY_KEYS.iter().find(|k| !self.0.contains_key(**k)) {
            return Err(Error::InvalidArgument(format!(
                "metrics record lacks mandatory key {k}"
            )));
        }
        for (k, v) in &self.0 {
            match v {
                Value::String(_) => {}
                Value::Number(n) if n.as_f64().is_some_and(f64::is_finite) => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "metrics value for {k} must be a finite number or a string"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Compact JSON with sorted keys, no trailing newline.
    pub fn to_line(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string(&self.0)?)
    }

    /// Line with `wall_ms` removed, for reproducibility comparisons.
    pub fn deterministic_line(&self) -> Result<String> {
        let mut m = self.0.clone();
        m.remove("wall_ms");
        Ok(serde_json::to_string(&m)?)
    }
}

/// Append-only JSONL sink; each record is emitted with one `write_all`
/// on a file opened in append mode.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file })
    }

    pub fn log(&mut self, record: &Record) -> Result<()> {
        let mut line = record.to_line()?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }
}

/// Parses a JSONL stream back into records.
pub fn read_records(text: &str) -> Result<Vec<Record>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(Record(serde_json::from_str(l)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_sorted_and_lines_repeat() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let r = Record::new("align", 3, 7, 12)
            .with("loss", 0.5)
            .with("accuracy", 0.25);
        let mut log = MetricsLog::append(&path).unwrap();
        log.log(&r).unwrap();
        log.log(&r).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], lines[1]);
        assert_eq!(
            lines[0],
            r#"{"accuracy":0.25,"loss":0.5,"seed":7,"stage":"align","step":3,"wall_ms":12}"#
        );
        assert_eq!(read_records(&text).unwrap(), vec![r.clone(), r]);
    }

    #[test]
    fn schema_is_enforced() {
        let mut m = BTreeMap::new();
        m.insert("stage".to_string(), Value::from("x"));
        m.insert("step".to_string(), Value::from(0));
        m.insert("seed".to_string(), Value::from(0));
        assert!(Record::from_map(m).to_line().is_err());
        let nested = Record::new("x", 0, 0, 0).with("bad", serde_json::json!({"a": 1}));
        assert!(nested.to_line().is_err());
        assert!(!Record::new("x", 0, 0, 5)
            .deterministic_line()
            .unwrap()
            .contains("wall_ms"));
    }
}
