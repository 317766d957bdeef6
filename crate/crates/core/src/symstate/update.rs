use serde::{Deserialize, Serialize};

use super::path::{Path, PathContext, PathRoot};
use super::state::{check_entry, Provenance, StateEntry, SymbolicState};
use super::value::{TypeTag, Value};
use super::StateError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateSource {
    ResultPath(Path),
    Literal(Value),
    WholeResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    #[default]
    Set,
    Append,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assignment {
    #[serde(rename = "target")]
    pub target_key: String,
    pub source: UpdateSource,
    #[serde(rename = "type")]
    pub type_tag: TypeTag,
    #[serde(default)]
    pub mode: UpdateMode,
}

/// Ordered assignments describing how an accepted result enters the state.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UpdateSpec {
    pub assignments: Vec<Assignment>,
}

impl UpdateSpec {
    pub fn new(assignments: Vec<Assignment>) -> Self {
        UpdateSpec { assignments }
    }

    pub fn validate(&self) -> Result<(), StateError> {
        for a in &self.assignments {
            if a.target_key.is_empty() {
                return Err(StateError::EmptyKey);
            }
            if let UpdateSource::ResultPath(path) = &a.source {
                if path.root != PathRoot::Result {
                    return Err(StateError::InvalidUpdateSource(path.to_string()));
                }
            }
        }
        Ok(())
    }
}

impl Assignment {
    pub fn set(target: &str, source: UpdateSource, type_tag: TypeTag) -> Self {
        Assignment {
            target_key: target.to_string(),
            source,
            type_tag,
            mode: UpdateMode::Set,
        }
    }

    pub fn append(target: &str, source: UpdateSource, type_tag: TypeTag) -> Self {
        Assignment {
            target_key: target.to_string(),
            source,
            type_tag,
            mode: UpdateMode::Append,
        }
    }
}

/// Applies `spec` to a copy of `state`. The caller is responsible for having
/// accepted `result` first; the input state is left untouched.
///
/// `Append` checks the extracted element against the assignment's tag and
/// stores the target as a `ListType` entry.
pub fn apply_update(
    state: &SymbolicState,
    spec: &UpdateSpec,
    result: &Value,
    tool_id: &str,
    step_index: usize,
) -> Result<SymbolicState, StateError> {
    let mut next = state.clone();
    let ctx = PathContext::new(state, Some(result));
    let provenance = Provenance::ToolCommit {
        tool_id: tool_id.to_string(),
        step_index,
    };

    for a in &spec.assignments {
        if a.target_key.is_empty() {
            return Err(StateError::EmptyKey);
        }
        let value = match &a.source {
            UpdateSource::ResultPath(path) => {
                path.resolve(&ctx)
                    .cloned()
                    .ok_or_else(|| StateError::ResultPathAbsent {
                        target: a.target_key.clone(),
                        path: path.to_string(),
                    })?
            }
            UpdateSource::Literal(v) => v.clone(),
            UpdateSource::WholeResult => result.clone(),
        };
        if value.tag() != a.type_tag {
            return Err(StateError::TypeMismatch {
                key: a.target_key.clone(),
                expected: a.type_tag,
                found: value.tag(),
            });
        }
        let (value, type_tag) = match a.mode {
            UpdateMode::Set => (value, a.type_tag),
            UpdateMode::Append => {
                let mut items = match next.entries.get(&a.target_key) {
                    None => Vec::new(),
                    Some(StateEntry {
                        value: Value::List(items),
                        ..
                    }) => items.clone(),
                    Some(_) => {
                        return Err(StateError::AppendToNonList {
                            key: a.target_key.clone(),
                        })
                    }
                };
                items.push(value);
                (Value::List(items), TypeTag::ListType)
            }
        };
        check_entry(&a.target_key, &value, type_tag, next.max_depth)?;
        let entry = StateEntry {
            key: a.target_key.clone(),
            value,
            type_tag,
            provenance: provenance.clone(),
        };
        next.entries.insert(a.target_key.clone(), entry);
    }
    next.version += 1;
    Ok(next)
}
