use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::executor::{ToolError, ToolExecutor};
use crate::symstate::Value;

/// One scripted tool response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockOutcome {
    ReturnValue(Value),
    /// `value` with the field at `path` (dot-separated, relative to the
    /// result) removed.
    ReturnMissingField {
        value: Value,
        path: String,
    },
    /// A record whose field at `path` is an empty list.
    ReturnEmptyList(String),
    ReturnNull,
    TransportError,
}

impl MockOutcome {
    pub fn produce(&self) -> Result<Value, ToolError> {
        match self {
            MockOutcome::ReturnValue(v) => Ok(v.clone()),
            MockOutcome::ReturnMissingField { value, path } => {
                let mut v = value.clone();
                remove_path(&mut v, path);
                Ok(v)
            }
            MockOutcome::ReturnEmptyList(path) => Ok(path
                .rsplit('.')
                .fold(Value::List(Vec::new()), |inner, key| {
                    Value::record([(key, inner)])
                })),
            MockOutcome::ReturnNull => Ok(Value::Null),
            MockOutcome::TransportError => {
                Err(ToolError::Transport("scripted transport failure".into()))
            }
        }
    }
}

fn remove_path(value: &mut Value, path: &str) {
    let (parent, last) = match path.rsplit_once('.') {
        Some((p, l)) => (Some(p), l),
        None => (None, path),
    };
    let mut target = value;
    for seg in parent.into_iter().flat_map(|p| p.split('.')) {
        let next = match target {
            Value::Record(fields) => fields.get_mut(seg),
            Value::List(items) => seg.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        };
        match next {
            Some(n) => target = n,
            None => return,
        }
    }
    match target {
        Value::Record(fields) => {
            fields.shift_remove(last);
        }
        Value::List(items) => {
            if let Some(i) = last.parse::<usize>().ok().filter(|i| *i < items.len()) {
                items.remove(i);
            }
        }
        _ => {}
    }
}

/// A tool's script and how far it has been consumed. Calls past the end
/// repeat the last outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct MockToolBehavior {
    pub tool_id: String,
    pub script: Vec<MockOutcome>,
    pub cursor: usize,
}

/// Scripted tool environment. One instance per trajectory.
#[derive(Debug, Clone, Default)]
pub struct MockTools {
    behaviors: IndexMap<String, MockToolBehavior>,
    calls: Vec<(String, Value)>,
}

impl MockTools {
    pub fn new(scripts: &IndexMap<String, Vec<MockOutcome>>) -> Self {
        let behaviors = scripts
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(id, script)| {
                (
                    id.clone(),
                    MockToolBehavior {
                        tool_id: id.clone(),
                        script: script.clone(),
                        cursor: 0,
                    },
                )
            })
            .collect();
        MockTools {
            behaviors,
            calls: Vec::new(),
        }
    }

    pub fn behavior(&self, tool_id: &str) -> Option<&MockToolBehavior> {
        self.behaviors.get(tool_id)
    }

    /// Every `(tool_id, params)` received, in order.
    pub fn calls(&self) -> &[(String, Value)] {
        &self.calls
    }
}

impl ToolExecutor for MockTools {
    fn execute(&mut self, tool_id: &str, params: &Value) -> Result<Value, ToolError> {
        let b = self
            .behaviors
            .get_mut(tool_id)
            .ok_or_else(|| ToolError::UnknownTool(tool_id.to_string()))?;
        let outcome = &b.script[b.cursor.min(b.script.len() - 1)];
        b.cursor += 1;
        self.calls.push((tool_id.to_string(), params.clone()));
        outcome.produce()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &str) -> Value {
        Value::from_json(s).unwrap()
    }

    #[test]
    fn weather_tool_one_drops_humidity() {
        let o = MockOutcome::ReturnMissingField {
            value: v(r#"{"temperature":72,"condition":"sunny","humidity":65}"#),
            path: "humidity".into(),
        };
        assert_eq!(
            o.produce().unwrap(),
            v(r#"{"temperature":72,"condition":"sunny"}"#)
        );
        let nested = MockOutcome::ReturnMissingField {
            value: v(r#"{"a":{"b":1,"c":2}}"#),
            path: "a.b".into(),
        };
        assert_eq!(nested.produce().unwrap(), v(r#"{"a":{"c":2}}"#));
    }

    #[test]
    fn empty_list_and_null() {
        assert_eq!(
            MockOutcome::ReturnEmptyList("results".into())
                .produce()
                .unwrap(),
            v(r#"{"results":[]}"#)
        );
        assert_eq!(
            MockOutcome::ReturnEmptyList("data.items".into())
                .produce()
                .unwrap(),
            v(r#"{"data":{"items":[]}}"#)
        );
        assert_eq!(MockOutcome::ReturnNull.produce().unwrap(), Value::Null);
        assert!(MockOutcome::TransportError.produce().is_err());
    }

    #[test]
    fn cursor_advances_and_repeats_last() {
        let scripts: IndexMap<String, Vec<MockOutcome>> = [(
            "t".to_string(),
            vec![
                MockOutcome::ReturnNull,
                MockOutcome::ReturnValue(Value::Bool(true)),
            ],
        )]
        .into_iter()
        .collect();
        let mut tools = MockTools::new(&scripts);
        let p = Value::record::<&str, _>([]);
        assert_eq!(tools.execute("t", &p).unwrap(), Value::Null);
        assert_eq!(tools.execute("t", &p).unwrap(), Value::Bool(true));
        assert_eq!(tools.execute("t", &p).unwrap(), Value::Bool(true));
        assert_eq!(tools.behavior("t").unwrap().cursor, 3);
        assert_eq!(
            tools.execute("u", &p),
            Err(ToolError::UnknownTool("u".into()))
        );
        assert_eq!(tools.calls().len(), 3);
    }
}
