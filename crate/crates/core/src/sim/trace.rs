//! Line-delimited JSON event trace.

use serde_json::{Map, Value};

use crate::radio::TimeMs;

/// Collects one JSON object per event with a monotonic `seq`. Keys are
/// emitted in sorted order so equal runs produce equal bytes.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    enabled: bool,
    point: Option<String>,
    seq: u64,
    lines: Vec<String>,
}

impl Trace {
    pub fn new(enabled: bool, point: Option<String>) -> Self {
        Trace {
            enabled,
            point,
            seq: 0,
            lines: Vec::new(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// `detail` must be a JSON object; its keys are merged into the record.
    pub fn record(&mut self, time: TimeMs, event: &str, detail: Value) {
        if !self.enabled {
            return;
        }
        let mut obj = match detail {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => {
                let mut m = Map::new();
                m.insert("detail".into(), other);
                m
            }
        };
        obj.insert("seq".into(), self.seq.into());
        obj.insert("t".into(), time.into());
        obj.insert("event".into(), event.into());
        if let Some(p) = &self.point {
            obj.insert("point".into(), p.clone().into());
        }
        self.seq += 1;
        self.lines.push(Value::Object(obj).to_string());
    }

    pub fn into_lines(self) -> Vec<String> {
        self.lines
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sequence_and_sorted_keys() {
        let mut t = Trace::new(true, Some("p".into()));
        t.record(5, "radio_tx", json!({"z": 1, "a": 2}));
        t.record(7, "alert", Value::Null);
        let lines = t.into_lines();
        assert_eq!(
            lines[0],
            r#"{"a":2,"event":"radio_tx","point":"p","seq":0,"t":5,"z":1}"#
        );
        assert!(lines[1].contains(r#""seq":1"#));
    }

    #[test]
    fn disabled_records_nothing() {
        let mut t = Trace::new(false, None);
        t.record(0, "x", Value::Null);
        assert!(t.lines().is_empty());
    }
}
