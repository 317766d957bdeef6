use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::path::{MalformedPath, Path, PathContext, PathRoot};
use super::value::{TypeTag, Value, DEFAULT_MAX_DEPTH};
use super::StateError;

/// Where a state entry came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    InitialContext,
    ToolCommit { tool_id: String, step_index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateEntry {
    pub key: String,
    pub value: Value,
    pub type_tag: TypeTag,
    pub provenance: Provenance,
}

impl StateEntry {
    pub fn conforms(&self) -> bool {
        !self.key.is_empty() && self.value.tag() == self.type_tag
    }
}

/// The trusted typed key-value state. Immutable: every mutation returns a
/// new state with a higher version.
#[derive(Debug, Clone)]
pub struct SymbolicState {
    pub(super) entries: IndexMap<String, StateEntry>,
    pub(super) version: u64,
    pub(super) max_depth: usize,
}

impl PartialEq for SymbolicState {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version && self.entries == other.entries
    }
}

impl Default for SymbolicState {
    fn default() -> Self {
        SymbolicState {
            entries: IndexMap::new(),
            version: 0,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

pub(super) fn check_entry(
    key: &str,
    value: &Value,
    tag: TypeTag,
    max_depth: usize,
) -> Result<(), StateError> {
    if key.is_empty() {
        return Err(StateError::EmptyKey);
    }
    if value.tag() != tag {
        return Err(StateError::TypeMismatch {
            key: key.to_string(),
            expected: tag,
            found: value.tag(),
        });
    }
    if !value.is_finite() {
        return Err(StateError::NonFinite {
            key: key.to_string(),
        });
    }
    let depth = value.depth();
    if depth > max_depth {
        return Err(StateError::DepthExceeded {
            key: key.to_string(),
            depth,
            limit: max_depth,
        });
    }
    Ok(())
}

/// Builds the initial state `S_0` from seed entries.
pub fn init_state(
    seed: impl IntoIterator<Item = (String, Value, TypeTag)>,
) -> Result<SymbolicState, StateError> {
    init_state_with_depth(seed, DEFAULT_MAX_DEPTH)
}

pub fn init_state_with_depth(
    seed: impl IntoIterator<Item = (String, Value, TypeTag)>,
    max_depth: usize,
) -> Result<SymbolicState, StateError> {
    let mut entries = IndexMap::new();
    for (key, value, type_tag) in seed {
        check_entry(&key, &value, type_tag, max_depth)?;
        if entries.contains_key(&key) {
            return Err(StateError::DuplicateKey(key));
        }
        let entry = StateEntry {
            key: key.clone(),
            value,
            type_tag,
            provenance: Provenance::InitialContext,
        };
        entries.insert(key, entry);
    }
    Ok(SymbolicState {
        entries,
        version: 0,
        max_depth,
    })
}

/// Looks up a `state.`-rooted path. Absent paths yield `Ok(None)`.
pub fn get_path<'a>(
    state: &'a SymbolicState,
    path: &str,
) -> Result<Option<&'a Value>, MalformedPath> {
    let parsed = Path::parse(path)?;
    if parsed.root != PathRoot::State {
        return Err(MalformedPath {
            offset: 0,
            message: "state lookups must start with `state.`".into(),
        });
    }
    Ok(parsed.resolve(&PathContext::new(state, None)))
}

/// Renders `key: value` lines in insertion order, truncated to `max_chars`
/// characters with a trailing ellipsis.
pub fn summarize(state: &SymbolicState, max_chars: usize) -> String {
    let mut out = String::new();
    for (i, entry) in state.entries.values().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = write!(out, "{}: {}", entry.key, entry.value.display_inline());
    }
    if out.chars().count() <= max_chars {
        return out;
    }
    if max_chars == 0 {
        return String::new();
    }
    let mut truncated: String = out.chars().take(max_chars - 1).collect();
    truncated.push('…');
    truncated
}

impl SymbolicState {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&StateEntry> {
        self.entries.get(key)
    }

    pub fn value(&self, key: &str) -> Option<&Value> {
        self.entries.get(key).map(|e| &e.value)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = &StateEntry> {
        self.entries.values()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Key uniqueness holds by construction; this checks tag/value
    /// agreement and value well-formedness for every entry.
    pub fn conformance_check(&self) -> Result<(), StateError> {
        for (key, entry) in &self.entries {
            if key != &entry.key {
                return Err(StateError::DuplicateKey(entry.key.clone()));
            }
            check_entry(key, &entry.value, entry.type_tag, self.max_depth)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> StateSnapshot {
        let mut entries: Vec<SnapshotEntry> = self
            .entries
            .values()
            .map(|e| {
                let (provenance, step) = match &e.provenance {
                    Provenance::InitialContext => (INITIAL_CONTEXT.to_string(), None),
                    Provenance::ToolCommit {
                        tool_id,
                        step_index,
                    } => (format!("{TOOL_COMMIT_PREFIX}{tool_id}"), Some(*step_index)),
                };
                SnapshotEntry {
                    key: e.key.clone(),
                    type_tag: e.type_tag,
                    value: e.value.clone(),
                    provenance,
                    step,
                }
            })
            .collect();
        entries.sort_by(|a, b| a.key.cmp(&b.key));
        StateSnapshot {
            version: self.version,
            entries,
        }
    }

    /// Canonical snapshot document: pretty JSON, entries sorted by key,
    /// newline-terminated.
    pub fn to_canonical(&self) -> String {
        self.snapshot().to_canonical()
    }

    pub fn from_canonical(text: &str) -> Result<SymbolicState, StateError> {
        let snapshot: StateSnapshot =
            serde_json::from_str(text).map_err(|e| StateError::Snapshot(e.to_string()))?;
        snapshot.to_state()
    }

    /// Hex SHA-256 of the canonical snapshot.
    pub fn digest(&self) -> String {
        self.snapshot().digest()
    }
}

const INITIAL_CONTEXT: &str = "initial_context";
const TOOL_COMMIT_PREFIX: &str = "tool_commit:";

/// Serialized form of a state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSnapshot {
    pub version: u64,
    pub entries: Vec<SnapshotEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotEntry {
    pub key: String,
    #[serde(rename = "type")]
    pub type_tag: TypeTag,
    pub value: Value,
    pub provenance: String,
    pub step: Option<usize>,
}

impl StateSnapshot {
    pub fn to_canonical(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("snapshot values are finite");
        out.push('\n');
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical().as_bytes()))
    }

    pub fn to_state(&self) -> Result<SymbolicState, StateError> {
        let mut entries = IndexMap::new();
        for e in &self.entries {
            check_entry(&e.key, &e.value, e.type_tag, DEFAULT_MAX_DEPTH)?;
            let provenance = match (e.provenance.as_str(), e.step) {
                (INITIAL_CONTEXT, None) => Provenance::InitialContext,
                (p, Some(step_index)) if p.starts_with(TOOL_COMMIT_PREFIX) => {
                    Provenance::ToolCommit {
                        tool_id: p[TOOL_COMMIT_PREFIX.len()..].to_string(),
                        step_index,
                    }
                }
                _ => {
                    return Err(StateError::Snapshot(format!(
                        "entry `{}` has inconsistent provenance `{}` / step {:?}",
                        e.key, e.provenance, e.step
                    )))
                }
            };
            let entry = StateEntry {
                key: e.key.clone(),
                value: e.value.clone(),
                type_tag: e.type_tag,
                provenance,
            };
            if entries.insert(e.key.clone(), entry).is_some() {
                return Err(StateError::DuplicateKey(e.key.clone()));
            }
        }
        Ok(SymbolicState {
            entries,
            version: self.version,
            max_depth: DEFAULT_MAX_DEPTH,
        })
    }
}
