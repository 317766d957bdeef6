//! Tool contracts `{P} t {Q}`: predicate language, well-formedness rules,
//! precondition and acceptance checks, and rejection categories.

mod parser;
mod predicate;

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use parser::{
    check_namespace, parse_precondition, parse_predicate, parse_predicate_with, ParseError,
    ParseOptions,
};
pub use predicate::{
    eval_predicate, first_failure, CompareOp, FailingAtom, Operand, Predicate,
    DEFAULT_MAX_PREDICATE_DEPTH,
};

use crate::symstate::{apply_update, StateError, SymbolicState, TypeTag, UpdateSpec, Value};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContractError {
    #[error("contract `{tool_id}`: {source}")]
    Parse { tool_id: String, source: ParseError },
    #[error("contract `{tool_id}`: invalid update: {source}")]
    Update { tool_id: String, source: StateError },
    #[error("contract `{tool_id}`: {message}")]
    InvalidRule { tool_id: String, message: String },
    #[error("duplicate contract for `{0}`")]
    DuplicateContract(String),
    #[error("contract references unknown tool `{0}`")]
    DanglingReference(String),
    #[error("malformed contract document: {0}")]
    Document(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WellFormednessRule {
    /// The result is a record or a list.
    ParsesAsStructuredValue,
    /// Compact JSON encoding is at most this many bytes.
    MaxBytes(usize),
    RequiredOutermostTag(TypeTag),
}

impl WellFormednessRule {
    pub fn holds(&self, result: &Value) -> bool {
        match self {
            WellFormednessRule::ParsesAsStructuredValue => {
                matches!(result, Value::Record(_) | Value::List(_))
            }
            WellFormednessRule::MaxBytes(limit) => serde_json::to_string(result)
                .map(|s| s.len() <= *limit)
                .unwrap_or(false),
            WellFormednessRule::RequiredOutermostTag(tag) => result.tag() == *tag,
        }
    }
}

impl fmt::Display for WellFormednessRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WellFormednessRule::ParsesAsStructuredValue => {
                f.write_str("parses_as_structured_value")
            }
            WellFormednessRule::MaxBytes(n) => write!(f, "max_bytes({n})"),
            WellFormednessRule::RequiredOutermostTag(t) => write!(f, "required_outermost_tag({t})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectionCategory {
    ValueEntityHallucination,
    SchemaFormatViolation,
    StateDependencyMissing,
    EmptyNull,
    SemanticConstraintMismatch,
    StateUpdateInconsistency,
}

impl RejectionCategory {
    pub const ALL: [RejectionCategory; 6] = [
        RejectionCategory::ValueEntityHallucination,
        RejectionCategory::SchemaFormatViolation,
        RejectionCategory::StateDependencyMissing,
        RejectionCategory::EmptyNull,
        RejectionCategory::SemanticConstraintMismatch,
        RejectionCategory::StateUpdateInconsistency,
    ];

    pub fn side(self) -> Side {
        match self {
            RejectionCategory::ValueEntityHallucination
            | RejectionCategory::SchemaFormatViolation
            | RejectionCategory::StateDependencyMissing => Side::Pre,
            _ => Side::Post,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RejectionCategory::ValueEntityHallucination => "Value/Entity Hallucination",
            RejectionCategory::SchemaFormatViolation => "Schema & Format Violation",
            RejectionCategory::StateDependencyMissing => "State Dependency Missing",
            RejectionCategory::EmptyNull => "Empty/Null",
            RejectionCategory::SemanticConstraintMismatch => "Semantic Constraint Mismatch",
            RejectionCategory::StateUpdateInconsistency => "State Update Inconsistency",
        }
    }
}

impl fmt::Display for RejectionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Maps a failed check to its rejection category.
///
/// | side | failing atom                                   | category                    |
/// |------|------------------------------------------------|-----------------------------|
/// | Pre  | comparison                                     | ValueEntityHallucination    |
/// | Pre  | `is_list` / `is_numeric` / `is_text` / `is_record` | SchemaFormatViolation   |
/// | Pre  | anything else                                  | StateDependencyMissing      |
/// | Post | null or empty result, `non_empty`, null at the atom's path | EmptyNull       |
/// | Post | anything else                                  | SemanticConstraintMismatch  |
///
/// `StateUpdateInconsistency` is never produced here; it is assigned when an
/// update fails after the postcondition passed.
pub fn categorize_failure(
    side: Side,
    failing_atom: &Predicate,
    result: Option<&Value>,
) -> RejectionCategory {
    match side {
        Side::Pre => match failing_atom {
            Predicate::Compare { .. } => RejectionCategory::ValueEntityHallucination,
            Predicate::IsList(_)
            | Predicate::IsNumeric(_)
            | Predicate::IsText(_)
            | Predicate::IsRecord(_) => RejectionCategory::SchemaFormatViolation,
            _ => RejectionCategory::StateDependencyMissing,
        },
        Side::Post => {
            let empty_result = result.is_none_or(Value::is_empty_like);
            let null_at_atom = result.is_some_and(|r| {
                failing_atom
                    .paths()
                    .first()
                    .and_then(|p| p.resolve_in_value(r))
                    .is_some_and(|v| *v == Value::Null)
            });
            if empty_result || null_at_atom || matches!(failing_atom, Predicate::NonEmpty(_)) {
                RejectionCategory::EmptyNull
            } else {
                RejectionCategory::SemanticConstraintMismatch
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contract {
    pub tool_id: String,
    pub precondition: Predicate,
    pub postcondition: Predicate,
    pub wf_rules: Vec<WellFormednessRule>,
    pub update: UpdateSpec,
}

/// On-disk form of a contract: predicates are DSL strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractDocument {
    pub tool_id: String,
    pub precondition: String,
    pub postcondition: String,
    #[serde(default)]
    pub wf: Vec<WellFormednessRule>,
    #[serde(default)]
    pub update: UpdateSpec,
}

impl Contract {
    pub fn new(
        tool_id: &str,
        precondition: &str,
        postcondition: &str,
        wf_rules: Vec<WellFormednessRule>,
        update: UpdateSpec,
    ) -> Result<Contract, ContractError> {
        Contract::from_document(ContractDocument {
            tool_id: tool_id.to_string(),
            precondition: precondition.to_string(),
            postcondition: postcondition.to_string(),
            wf: wf_rules,
            update,
        })
    }

    pub fn from_document(doc: ContractDocument) -> Result<Contract, ContractError> {
        let tool_id = doc.tool_id;
        let err = |source| ContractError::Parse {
            tool_id: tool_id.clone(),
            source,
        };
        let precondition = parse_precondition(&doc.precondition).map_err(err)?;
        let postcondition = parse_predicate(&doc.postcondition).map_err(err)?;
        doc.update
            .validate()
            .map_err(|source| ContractError::Update {
                tool_id: tool_id.clone(),
                source,
            })?;
        if let Some(rule) = doc
            .wf
            .iter()
            .find(|r| matches!(r, WellFormednessRule::MaxBytes(0)))
        {
            return Err(ContractError::InvalidRule {
                tool_id,
                message: format!("{rule} must be positive"),
            });
        }
        Ok(Contract {
            tool_id,
            precondition,
            postcondition,
            wf_rules: doc.wf,
            update: doc.update,
        })
    }

    pub fn to_document(&self) -> ContractDocument {
        ContractDocument {
            tool_id: self.tool_id.clone(),
            precondition: self.precondition.to_string(),
            postcondition: self.postcondition.to_string(),
            wf: self.wf_rules.clone(),
            update: self.update.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Contract, ContractError> {
        let doc: ContractDocument =
            serde_json::from_str(text).map_err(|e| ContractError::Document(e.to_string()))?;
        Contract::from_document(doc)
    }
}

impl Serialize for Contract {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_document().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Contract {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = ContractDocument::deserialize(d)?;
        Contract::from_document(doc).map_err(serde::de::Error::custom)
    }
}

/// Contracts keyed by tool id, in load order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContractSet {
    contracts: IndexMap<String, Contract>,
}

impl ContractSet {
    pub fn new(
        contracts: impl IntoIterator<Item = Contract>,
    ) -> Result<ContractSet, ContractError> {
        let mut set = ContractSet::default();
        for c in contracts {
            set.insert(c)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, contract: Contract) -> Result<(), ContractError> {
        if self.contracts.contains_key(&contract.tool_id) {
            return Err(ContractError::DuplicateContract(contract.tool_id));
        }
        self.contracts.insert(contract.tool_id.clone(), contract);
        Ok(())
    }

    pub fn get(&self, tool_id: &str) -> Option<&Contract> {
        self.contracts.get(tool_id)
    }

    pub fn len(&self) -> usize {
        self.contracts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contracts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Contract> {
        self.contracts.values()
    }

    /// Fails on the first contract whose tool is not in `known_tools`.
    pub fn check_references<'a>(
        &self,
        known_tools: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), ContractError> {
        let known: Vec<&str> = known_tools.into_iter().collect();
        match self
            .contracts
            .keys()
            .find(|id| !known.contains(&id.as_str()))
        {
            Some(id) => Err(ContractError::DanglingReference(id.clone())),
            None => Ok(()),
        }
    }
}

impl Serialize for ContractSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.contracts.values())
    }
}

impl<'de> Deserialize<'de> for ContractSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let list = Vec::<Contract>::deserialize(d)?;
        ContractSet::new(list).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreconditionCheck {
    pub holds: bool,
    pub failing_atom: Option<Predicate>,
}

pub fn check_precondition(contract: &Contract, state: &SymbolicState) -> PreconditionCheck {
    match first_failure(&contract.precondition, state, None) {
        None => PreconditionCheck {
            holds: true,
            failing_atom: None,
        },
        Some(f) => PreconditionCheck {
            holds: false,
            failing_atom: Some(f.atom),
        },
    }
}

/// The binary acceptance verdict for one executed attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceEvent {
    pub tool_id: String,
    pub passed: bool,
    #[serde(
        default,
        with = "predicate_text",
        skip_serializing_if = "Option::is_none"
    )]
    pub failing_atom: Option<Predicate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failing_rule: Option<WellFormednessRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<RejectionCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl AcceptanceEvent {
    pub fn accepted(tool_id: &str) -> Self {
        AcceptanceEvent {
            tool_id: tool_id.to_string(),
            passed: true,
            failing_atom: None,
            failing_rule: None,
            category: None,
            detail: None,
        }
    }

    /// An event for a result that passed the postcondition but could not be
    /// applied to the state.
    pub fn update_inconsistent(tool_id: &str, error: &StateError) -> Self {
        AcceptanceEvent {
            tool_id: tool_id.to_string(),
            passed: false,
            failing_atom: None,
            failing_rule: None,
            category: Some(RejectionCategory::StateUpdateInconsistency),
            detail: Some(error.to_string()),
        }
    }
}

/// Checks well-formedness, then the postcondition. Never touches the state.
pub fn check_acceptance(
    contract: &Contract,
    state: &SymbolicState,
    result: &Value,
) -> AcceptanceEvent {
    if let Some(rule) = contract.wf_rules.iter().find(|r| !r.holds(result)) {
        let category = if result.is_empty_like() {
            RejectionCategory::EmptyNull
        } else {
            RejectionCategory::SemanticConstraintMismatch
        };
        return AcceptanceEvent {
            tool_id: contract.tool_id.clone(),
            passed: false,
            failing_atom: None,
            failing_rule: Some(*rule),
            category: Some(category),
            detail: Some(format!("result violates {rule}")),
        };
    }
    match first_failure(&contract.postcondition, state, Some(result)) {
        None => AcceptanceEvent::accepted(&contract.tool_id),
        Some(f) => {
            let category = categorize_failure(Side::Post, &f.atom, Some(result));
            AcceptanceEvent {
                tool_id: contract.tool_id.clone(),
                passed: false,
                failing_atom: Some(f.atom),
                failing_rule: None,
                category: Some(category),
                detail: Some(f.detail),
            }
        }
    }
}

/// Acceptance followed by the guarded update. Returns the event and, when it
/// passed, the committed state. An update failure turns a passed
/// postcondition into a `StateUpdateInconsistency` rejection.
pub fn accept_and_update(
    contract: &Contract,
    state: &SymbolicState,
    result: &Value,
    step_index: usize,
) -> (AcceptanceEvent, Option<SymbolicState>) {
    let event = check_acceptance(contract, state, result);
    if !event.passed {
        return (event, None);
    }
    match apply_update(
        state,
        &contract.update,
        result,
        &contract.tool_id,
        step_index,
    ) {
        Ok(next) => (event, Some(next)),
        Err(e) => (
            AcceptanceEvent::update_inconsistent(&contract.tool_id, &e),
            None,
        ),
    }
}

pub(crate) mod predicate_text {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::{parse_predicate_with, ParseOptions, Predicate};

    pub fn serialize<S: Serializer>(p: &Option<Predicate>, s: S) -> Result<S::Ok, S::Error> {
        match p {
            Some(p) => s.serialize_str(&p.to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Predicate>, D::Error> {
        let text = Option::<String>::deserialize(d)?;
        let options = ParseOptions {
            allow_free_binders: true,
            ..Default::default()
        };
        text.map(|t| parse_predicate_with(&t, options).map_err(serde::de::Error::custom))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symstate::{init_state, Assignment, Path, UpdateSource};

    fn weather_state() -> SymbolicState {
        init_state([
            (
                "query".to_string(),
                Value::text("What's the weather like in New York today?"),
                TypeTag::TextType,
            ),
            (
                "location".to_string(),
                Value::text("New York"),
                TypeTag::TextType,
            ),
        ])
        .unwrap()
    }

    fn weather_contract(tool_id: &str) -> Contract {
        Contract::new(
            tool_id,
            "exists(state.location)",
            "has_field(result.temperature) and has_field(result.condition) and has_field(result.humidity)",
            vec![WellFormednessRule::RequiredOutermostTag(TypeTag::RecordType)],
            UpdateSpec::default(),
        )
        .unwrap()
    }

    fn listfiles() -> Contract {
        Contract::new(
            "ListFiles",
            "is_text(state.cwd) and has_field(state.fs[state.cwd])",
            "is_list(result) and result = state.fs[state.cwd]",
            vec![],
            UpdateSpec::new(vec![Assignment::set(
                "last_ls",
                UpdateSource::WholeResult,
                TypeTag::ListType,
            )]),
        )
        .unwrap()
    }

    #[test]
    fn precondition_examples() {
        let s = weather_state();
        assert!(eval_predicate(
            &parse_predicate("exists(state.location)").unwrap(),
            &s,
            None,
            &[]
        ));
        assert!(!eval_predicate(
            &Predicate::Exists("anything".into()),
            &SymbolicState::default(),
            None,
            &[]
        ));
        assert!(check_precondition(&weather_contract("w"), &s).holds);

        let fs = Value::from_json(r#"{"src":["main.rs","lib.rs"],"docs":[]}"#).unwrap();
        let with_cwd = init_state([
            ("cwd".to_string(), Value::text("src"), TypeTag::TextType),
            ("fs".to_string(), fs.clone(), TypeTag::RecordType),
        ])
        .unwrap();
        assert!(check_precondition(&listfiles(), &with_cwd).holds);
        let without = init_state([("fs".to_string(), fs, TypeTag::RecordType)]).unwrap();
        let check = check_precondition(&listfiles(), &without);
        assert!(!check.holds);
        assert_eq!(
            check.failing_atom,
            Some(Predicate::IsText(Path::state("cwd")))
        );
    }

    #[test]
    fn missing_humidity_is_a_semantic_post_rejection() {
        let s = weather_state();
        let r = Value::from_json(r#"{"temperature":72,"condition":"sunny"}"#).unwrap();
        let ev = check_acceptance(&weather_contract("w1"), &s, &r);
        assert!(!ev.passed);
        assert_eq!(
            ev.failing_atom,
            Some(parse_predicate("has_field(result.humidity)").unwrap())
        );
        assert_eq!(
            ev.category,
            Some(RejectionCategory::SemanticConstraintMismatch)
        );

        let full = Value::from_json(
            r#"{"temperature":72,"condition":"sunny","humidity":65,"wind_speed":10,"pressure":1013}"#,
        )
        .unwrap();
        let ok = check_acceptance(&weather_contract("w2"), &s, &full);
        assert_eq!(ok, AcceptanceEvent::accepted("w2"));
    }

    #[test]
    fn wf_violation_dominates() {
        let c = Contract::new(
            "t",
            "true",
            "true",
            vec![WellFormednessRule::RequiredOutermostTag(
                TypeTag::RecordType,
            )],
            UpdateSpec::default(),
        )
        .unwrap();
        let ev = check_acceptance(&c, &SymbolicState::default(), &Value::Number(5.0));
        assert!(!ev.passed);
        assert_eq!(
            ev.failing_rule,
            Some(WellFormednessRule::RequiredOutermostTag(
                TypeTag::RecordType
            ))
        );
        assert!(WellFormednessRule::ParsesAsStructuredValue.holds(&Value::List(vec![])));
        assert!(!WellFormednessRule::MaxBytes(3).holds(&Value::text("long")));
    }

    #[test]
    fn category_table() {
        let empty = Value::from_json(r#"{"results":[]}"#).unwrap();
        let p = |s: &str| parse_predicate(s).unwrap();
        assert_eq!(
            categorize_failure(Side::Post, &p("non_empty(result.results)"), Some(&empty)),
            RejectionCategory::EmptyNull
        );
        assert_eq!(
            categorize_failure(Side::Pre, &p("exists(state.file_handle)"), None),
            RejectionCategory::StateDependencyMissing
        );
        assert_eq!(
            categorize_failure(Side::Pre, &p(r#"state.id = "f-991""#), None),
            RejectionCategory::ValueEntityHallucination
        );
        assert_eq!(
            categorize_failure(Side::Pre, &p("is_list(state.xs)"), None),
            RejectionCategory::SchemaFormatViolation
        );
        assert_eq!(
            categorize_failure(Side::Post, &p("has_field(result.a)"), Some(&Value::Null)),
            RejectionCategory::EmptyNull
        );
        let with_null = Value::from_json(r#"{"a":null,"b":1}"#).unwrap();
        assert_eq!(
            categorize_failure(Side::Post, &p("is_text(result.a)"), Some(&with_null)),
            RejectionCategory::EmptyNull
        );
        assert_eq!(
            categorize_failure(Side::Post, &p("result.b > 3"), Some(&with_null)),
            RejectionCategory::SemanticConstraintMismatch
        );
        for c in RejectionCategory::ALL {
            assert_eq!(
                c.side() == Side::Pre,
                RejectionCategory::ALL[..3].contains(&c)
            );
        }
    }

    #[test]
    fn listfiles_acceptance_and_update() {
        let fs = Value::from_json(r#"{"src":["main.rs","lib.rs"]}"#).unwrap();
        let s = init_state([
            ("cwd".to_string(), Value::text("src"), TypeTag::TextType),
            ("fs".to_string(), fs, TypeTag::RecordType),
        ])
        .unwrap();
        let r = Value::from_json(r#"["main.rs","lib.rs"]"#).unwrap();
        let (ev, next) = accept_and_update(&listfiles(), &s, &r, 0);
        assert!(ev.passed);
        let next = next.unwrap();
        assert_eq!(next.value("last_ls"), Some(&r));
        let wrong = Value::from_json(r#"["main.rs"]"#).unwrap();
        assert!(!check_acceptance(&listfiles(), &s, &wrong).passed);
    }

    #[test]
    fn update_failure_becomes_state_update_inconsistency() {
        let c = Contract::new(
            "t",
            "true",
            "true",
            vec![],
            UpdateSpec::new(vec![Assignment::set(
                "x",
                UpdateSource::ResultPath(Path::parse("result.missing").unwrap()),
                TypeTag::NumberType,
            )]),
        )
        .unwrap();
        let (ev, next) = accept_and_update(
            &c,
            &SymbolicState::default(),
            &Value::record([("a", Value::Number(1.0))]),
            0,
        );
        assert!(!ev.passed && next.is_none());
        assert_eq!(
            ev.category,
            Some(RejectionCategory::StateUpdateInconsistency)
        );
    }

    #[test]
    fn contract_documents_round_trip() {
        let c = listfiles();
        let text = serde_json::to_string(&c).unwrap();
        let back: Contract = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(matches!(
            Contract::new(
                "bad",
                "has_field(result.x)",
                "true",
                vec![],
                UpdateSpec::default()
            ),
            Err(ContractError::Parse {
                source: ParseError::NamespaceViolation { .. },
                ..
            })
        ));
        assert!(matches!(
            ContractSet::new([c.clone(), c.clone()]),
            Err(ContractError::DuplicateContract(_))
        ));
        let set = ContractSet::new([c]).unwrap();
        assert!(matches!(
            set.check_references(["Other"]),
            Err(ContractError::DanglingReference(_))
        ));
        assert!(set.check_references(["ListFiles"]).is_ok());
    }

    #[test]
    fn acceptance_events_serialize_failing_atoms_as_text() {
        let ev = AcceptanceEvent {
            tool_id: "t".into(),
            passed: false,
            failing_atom: Some(
                parse_predicate_with(
                    "has_field(v.url)",
                    ParseOptions {
                        allow_free_binders: true,
                        ..Default::default()
                    },
                )
                .unwrap(),
            ),
            failing_rule: None,
            category: Some(RejectionCategory::SemanticConstraintMismatch),
            detail: None,
        };
        let json = serde_json::to_string(&ev).unwrap();
        assert!(
            json.contains(r#""failing_atom":"has_field(v.url)""#),
            "{json}"
        );
        let back: AcceptanceEvent = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ev);
    }
}
