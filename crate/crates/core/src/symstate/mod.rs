//! Typed symbolic state: values, path lookup, guarded functional updates,
//! summaries, and the canonical snapshot format.

mod path;
mod state;
mod update;
mod value;

use thiserror::Error;

pub(crate) use path::{is_ident_char, is_ident_start};
pub use path::{is_plain_key, MalformedPath, Path, PathContext, PathRoot, Segment};
pub use state::{
    get_path, init_state, init_state_with_depth, summarize, Provenance, SnapshotEntry, StateEntry,
    StateSnapshot, SymbolicState,
};
pub use update::{apply_update, Assignment, UpdateMode, UpdateSource, UpdateSpec};
pub use value::{TypeTag, Value, DEFAULT_MAX_DEPTH};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error("duplicate state key `{0}`")]
    DuplicateKey(String),
    #[error("state keys must be non-empty")]
    EmptyKey,
    #[error("type mismatch for `{key}`: expected {expected}, found {found}")]
    TypeMismatch {
        key: String,
        expected: TypeTag,
        found: TypeTag,
    },
    #[error("value for `{key}` is nested {depth} deep (limit {limit})")]
    DepthExceeded {
        key: String,
        depth: usize,
        limit: usize,
    },
    #[error("value for `{key}` contains a non-finite number")]
    NonFinite { key: String },
    #[error("result path `{path}` for `{target}` is absent")]
    ResultPathAbsent { target: String, path: String },
    #[error("cannot append to non-list entry `{key}`")]
    AppendToNonList { key: String },
    #[error("update source `{0}` must be rooted at `result`")]
    InvalidUpdateSource(String),
    #[error("bad snapshot: {0}")]
    Snapshot(String),
}
