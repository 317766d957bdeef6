//! Trajectory records and their line-delimited log format.
//!
//! A log is one JSON object per line: a `header`, one `step` per reasoning
//! iteration, and a `footer`. Records carry no timestamps, so identical runs
//! produce identical bytes.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contracts::{AcceptanceEvent, ContractSet, Predicate, RejectionCategory};
use crate::llmclient::Message;
use crate::policy::{Requirement, SelectionMode};
use crate::symstate::{StateSnapshot, Value};

pub const LOG_FORMAT: &str = "toolcontract-trajectory/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Answer { text: String },
    CallTool { description: String },
    Malformed { raw: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub tool_id: String,
    pub similarity: f64,
    pub rank_prob: f64,
    pub policy_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolOutcome {
    Ok(Value),
    Error(String),
}

impl ToolOutcome {
    pub fn value(&self) -> Option<&Value> {
        match self {
            ToolOutcome::Ok(v) => Some(v),
            ToolOutcome::Error(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    /// Rejected before execution.
    PreRejected {
        category: RejectionCategory,
        #[serde(
            default,
            with = "crate::contracts::predicate_text",
            skip_serializing_if = "Option::is_none"
        )]
        failing_atom: Option<Predicate>,
        detail: String,
    },
    Executed {
        acceptance: AcceptanceEvent,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub tool_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ToolOutcome>,
    pub verdict: Verdict,
}

impl Attempt {
    pub fn passed(&self) -> bool {
        matches!(&self.verdict, Verdict::Executed { acceptance } if acceptance.passed)
    }

    pub fn executed(&self) -> bool {
        matches!(self.verdict, Verdict::Executed { .. })
    }

    /// The rejection category, if this attempt was rejected.
    pub fn rejection(&self) -> Option<RejectionCategory> {
        match &self.verdict {
            Verdict::PreRejected { category, .. } => Some(*category),
            Verdict::Executed { acceptance } if !acceptance.passed => acceptance.category,
            Verdict::Executed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub pre_state_digest: String,
    pub reasoning_text: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requirement: Option<Requirement>,
    #[serde(default)]
    pub candidates: Vec<CandidateRecord>,
    #[serde(default)]
    pub admissible_mask: IndexMap<String, bool>,
    #[serde(default)]
    pub attempts: Vec<Attempt>,
    pub committed_tool: Option<String>,
    pub post_state_digest: String,
    pub post_state: StateSnapshot,
    /// `-inf` when the committed tool was tried with zero policy mass.
    #[serde(with = "log_prob::optional")]
    pub policy_log_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Answer { text: String },
    Fail { reason: String },
    Timeout,
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::Answer { .. } => "answer",
            Outcome::Fail { .. } => "fail",
            Outcome::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub query: String,
    pub history: Vec<Message>,
    pub seed: u64,
    pub mode: SelectionMode,
    pub initial_state: StateSnapshot,
    pub contracts: ContractSet,
    pub steps: Vec<Step>,
    pub outcome: Outcome,
    pub total_log_prob: f64,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        format: String,
        query: String,
        history: Vec<Message>,
        seed: u64,
        mode: SelectionMode,
        initial_state: StateSnapshot,
        contracts: ContractSet,
    },
    Step(Box<Step>),
    Footer {
        outcome: Outcome,
        steps: usize,
        #[serde(with = "log_prob")]
        total_log_prob: f64,
        config_fingerprint: String,
    },
}

/// JSON has no infinities, so a log probability of zero mass is written as
/// the string `"-inf"`.
mod log_prob {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Finite(f64),
        Text(String),
    }

    fn to_repr(x: f64) -> Repr {
        if x.is_finite() {
            Repr::Finite(x)
        } else {
            Repr::Text(x.to_string())
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Finite(x) => Ok(x),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(E::custom(format!("invalid log probability `{t}`"))),
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod optional {
        use super::*;

        pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            x.map(to_repr).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("corrupt trajectory log at line {line}: {message}")]
pub struct LogCorrupt {
    pub line: usize,
    pub message: String,
}

impl Trajectory {
    pub fn final_state(&self) -> &StateSnapshot {
        self.steps
            .last()
            .map_or(&self.initial_state, |s| &s.post_state)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: &Record| {
            out.push_str(&serde_json::to_string(r).expect("trajectory records serialize"));
            out.push('\n');
        };
        push(&Record::Header {
            format: LOG_FORMAT.to_string(),
            query: self.query.clone(),
            history: self.history.clone(),
            seed: self.seed,
            mode: self.mode,
            initial_state: self.initial_state.clone(),
            contracts: self.contracts.clone(),
        });
        for step in &self.steps {
            push(&Record::Step(Box::new(step.clone())));
        }
        push(&Record::Footer {
            outcome: self.outcome.clone(),
            steps: self.steps.len(),
            total_log_prob: self.total_log_prob,
            config_fingerprint: self.config_fingerprint.clone(),
        });
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Trajectory, LogCorrupt> {
        let corrupt = |line: usize, message: String| LogCorrupt { line, message };
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: Record =
                serde_json::from_str(line).map_err(|e| corrupt(i + 1, e.to_string()))?;
            records.push((i + 1, r));
        }
        let mut iter = records.into_iter();
        let Some((
            _,
            Record::Header {
                format,
                query,
                history,
                seed,
                mode,
                initial_state,
                contracts,
            },
        )) = iter.next()
        else {
            return Err(corrupt(1, "missing header record".into()));
        };
        if format != LOG_FORMAT {
            return Err(corrupt(1, format!("unsupported format `{format}`")));
        }
        let mut steps = Vec::new();
        let mut footer = None;
        for (line, r) in iter {
            match r {
                _ if footer.is_some() => return Err(corrupt(line, "record after footer".into())),
                Record::Step(s) => {
                    if s.index != steps.len() {
                        return Err(corrupt(
                            line,
                            format!("step index {} out of sequence", s.index),
                        ));
                    }
                    steps.push(*s);
                }
                Record::Footer {
                    outcome,
                    steps: count,
                    total_log_prob,
                    config_fingerprint,
                } => {
                    if count != steps.len() {
                        return Err(corrupt(
                            line,
                            format!("footer counts {count} steps, log has {}", steps.len()),
                        ));
                    }
                    footer = Some((outcome, total_log_prob, config_fingerprint));
                }
                Record::Header { .. } => return Err(corrupt(line, "second header".into())),
            }
        }
        let Some((outcome, total_log_prob, config_fingerprint)) = footer else {
            return Err(corrupt(
                text.lines().count(),
                "missing footer record".into(),
            ));
        };
        Ok(Trajectory {
            query,
            history,
            seed,
            mode,
            initial_state,
            contracts,
            steps,
            outcome,
            total_log_prob,
            config_fingerprint,
        })
    }
}
