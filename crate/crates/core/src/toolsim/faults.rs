//! Generated fault-injection scenarios.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::mock::MockOutcome;
use super::scenario::{Expectations, ScenarioDocument, StateSeed};
use crate::contracts::{ContractDocument, RejectionCategory};
use crate::executor::EngineConfig;
use crate::policy::SelectionMode;
use crate::symstate::{Assignment, Path, TypeTag, UpdateSource, UpdateSpec, Value};

/// Rejections per category in [`fault_suite`], in `RejectionCategory::ALL` order.
pub const SUITE_REJECTIONS: [usize; 6] = [6, 4, 3, 5, 3, 1];
/// Tool-calling requests across the whole suite.
pub const SUITE_REQUESTS: usize = 75;

fn val(v: serde_json::Value) -> Value {
    serde_json::from_value(v).expect("literal values are valid")
}

fn tool_doc(id: &str, description: &str) -> serde_json::Value {
    json!({
        "tool_id": id,
        "tool_name": id,
        "api_name": "call",
        "category": "Synthetic",
        "description": description,
        "tool_input": {"location": {"type": "text", "required": true}},
    })
}

fn contract(id: &str, pre: &str, post: &str, update: UpdateSpec) -> ContractDocument {
    ContractDocument {
        tool_id: id.to_string(),
        precondition: pre.to_string(),
        postcondition: post.to_string(),
        wf: Vec::new(),
        update,
    }
}

fn items_update(target: &str) -> UpdateSpec {
    UpdateSpec::new(vec![Assignment::set(
        target,
        UpdateSource::ResultPath(Path::parse("result.items").expect("valid path")),
        TypeTag::ListType,
    )])
}

fn base_state() -> Vec<StateSeed> {
    vec![
        StateSeed {
            key: "location".into(),
            type_tag: TypeTag::TextType,
            value: Value::text("New York"),
        },
        StateSeed {
            key: "topic".into(),
            type_tag: TypeTag::TextType,
            value: Value::text("weather"),
        },
        StateSeed {
            key: "count".into(),
            type_tag: TypeTag::NumberType,
            value: Value::Number(3.0),
        },
    ]
}

const CALL_TURN: &str = "I need data for this.\n<start_call_tool>\nLook up information about the location\n<end_call_tool>";
const ANSWER_TURN: &str = "Here is what I found.";

fn good_result() -> Value {
    val(json!({"items": ["ok"], "status": "ok"}))
}

/// A faulty tool producing exactly one rejection of `category`.
fn faulty_tool(category: RejectionCategory) -> (ContractDocument, MockOutcome) {
    use RejectionCategory::*;
    let id = "faulty";
    let ok = MockOutcome::ReturnValue(good_result());
    let items = "non_empty(result.items)";
    match category {
        ValueEntityHallucination => (
            contract(id, "state.location = \"Paris\"", items, items_update("a")),
            ok,
        ),
        SchemaFormatViolation => (
            contract(id, "is_numeric(state.location)", items, items_update("a")),
            ok,
        ),
        StateDependencyMissing => (
            contract(id, "exists(state.user_id)", items, items_update("a")),
            ok,
        ),
        EmptyNull => (
            contract(id, "exists(state.location)", items, items_update("a")),
            MockOutcome::ReturnEmptyList("items".into()),
        ),
        SemanticConstraintMismatch => (
            contract(
                id,
                "exists(state.location)",
                "has_field(result.items) and result.status = \"ok\"",
                items_update("a"),
            ),
            MockOutcome::ReturnValue(val(json!({"items": ["x"], "status": "partial"}))),
        ),
        StateUpdateInconsistency => {
            let update = UpdateSpec::new(vec![Assignment::set(
                "a",
                UpdateSource::ResultPath(Path::parse("result.meta.total").expect("valid path")),
                TypeTag::NumberType,
            )]);
            (contract(id, "exists(state.location)", items, update), ok)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn scenario_doc(
    name: String,
    tools: Vec<serde_json::Value>,
    contracts: Vec<ContractDocument>,
    behaviors: IndexMap<String, Vec<MockOutcome>>,
    reasoner: Vec<String>,
    reranker: IndexMap<String, f64>,
    config: EngineConfig,
    expected: Expectations,
) -> ScenarioDocument {
    ScenarioDocument {
        name,
        query: "What is the weather in New York?".into(),
        history: Vec::new(),
        initial_state: base_state(),
        tools,
        contracts,
        behaviors,
        reasoner,
        aliases: IndexMap::new(),
        reranker: Some(reranker),
        config: Some(config),
        expected,
    }
}

/// The constructed rejection-accounting suite: one two-tool scenario per
/// designed rejection (a faulty tool, then a good fallback that commits)
/// and single-tool clean scenarios filling the rest of the request budget.
pub fn fault_suite() -> Vec<ScenarioDocument> {
    let mut out = Vec::new();
    for (category, count) in RejectionCategory::ALL.into_iter().zip(SUITE_REJECTIONS) {
        for n in 0..count {
            let (faulty, outcome) = faulty_tool(category);
            let good = contract(
                "good",
                "exists(state.location)",
                "non_empty(result.items)",
                items_update("b"),
            );
            let behaviors = [
                ("faulty".to_string(), vec![outcome]),
                (
                    "good".to_string(),
                    vec![MockOutcome::ReturnValue(good_result())],
                ),
            ];
            out.push(scenario_doc(
                format!("fault_{}_{n}", format!("{category:?}").to_lowercase()),
                vec![
                    tool_doc("faulty", "weather lookup primary"),
                    tool_doc("good", "weather lookup fallback"),
                ],
                vec![faulty, good],
                behaviors.into_iter().collect(),
                vec![CALL_TURN.into(), ANSWER_TURN.into()],
                [("faulty".to_string(), 0.9), ("good".to_string(), 0.1)]
                    .into_iter()
                    .collect(),
                EngineConfig::default(),
                Expectations {
                    outcome: Some("answer".into()),
                    committed_tools: Some(vec!["good".into()]),
                    rejections: Some([(category, 1)].into_iter().collect()),
                    ..Expectations::default()
                },
            ));
        }
    }
    let designed: usize = SUITE_REJECTIONS.iter().sum();
    for n in 0..SUITE_REQUESTS - 2 * designed {
        out.push(scenario_doc(
            format!("clean_{n}"),
            vec![tool_doc("good", "weather lookup")],
            vec![contract(
                "good",
                "exists(state.location)",
                "non_empty(result.items)",
                items_update("b"),
            )],
            [(
                "good".to_string(),
                vec![MockOutcome::ReturnValue(good_result())],
            )]
            .into_iter()
            .collect(),
            vec![CALL_TURN.into(), ANSWER_TURN.into()],
            [("good".to_string(), 1.0)].into_iter().collect(),
            EngineConfig::default(),
            Expectations {
                outcome: Some("answer".into()),
                ..Expectations::default()
            },
        ));
    }
    out
}

const PRECONDITIONS: [&str; 6] = [
    "true",
    "exists(state.location)",
    "state.location = \"Paris\"",
    "is_numeric(state.count) and state.count >= 2",
    "exists(state.user_id)",
    "is_list(state.topic)",
];

/// A random scenario over 3 to 50 tools with random preconditions, fault
/// scripts, reranker scores, turn scripts, and engine settings.
pub fn random_fault_scenario(seed: u64) -> ScenarioDocument {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=50usize);
    let mut tools = Vec::new();
    let mut contracts = Vec::new();
    let mut behaviors = IndexMap::new();
    let mut reranker = IndexMap::new();
    for i in 0..n {
        let id = format!("tool_{i:02}");
        tools.push(tool_doc(
            &id,
            &format!("synthetic lookup number {i} for location data"),
        ));
        let pre = PRECONDITIONS[rng.random_range(0..PRECONDITIONS.len())];
        let post = if rng.random_bool(0.5) {
            "non_empty(result.items)"
        } else {
            "has_field(result.items) and result.status = \"ok\""
        };
        let mut assignments = vec![Assignment::set(
            &format!("items_{i:02}"),
            UpdateSource::ResultPath(Path::parse("result.items").expect("valid path")),
            TypeTag::ListType,
        )];
        if rng.random_bool(0.2) {
            assignments.push(Assignment::append(
                "history",
                UpdateSource::ResultPath(Path::parse("result.meta").expect("valid path")),
                TypeTag::RecordType,
            ));
        }
        contracts.push(contract(&id, pre, post, UpdateSpec::new(assignments)));
        let script_len = rng.random_range(1..=4);
        let script = (0..script_len)
            .map(|_| match rng.random_range(0..7) {
                0 | 1 => MockOutcome::ReturnValue(val(
                    json!({"items": [i], "status": "ok", "meta": {"tool": i}}),
                )),
                2 => MockOutcome::ReturnValue(val(json!({"items": [i], "status": "ok"}))),
                3 => MockOutcome::ReturnMissingField {
                    value: val(json!({"items": [i], "status": "ok"})),
                    path: "items".into(),
                },
                4 => MockOutcome::ReturnEmptyList("items".into()),
                5 => MockOutcome::ReturnNull,
                _ => MockOutcome::TransportError,
            })
            .collect();
        behaviors.insert(id.clone(), script);
        reranker.insert(id, (rng.random_range(-100..=100) as f64) / 100.0);
    }
    let turns = rng.random_range(0..=6);
    let mut reasoner: Vec<String> = (0..turns)
        .map(|_| match rng.random_range(0..10) {
            0 => "<start_tool_result>{\"items\":[1]}<end_tool_result>".to_string(),
            _ => CALL_TURN.to_string(),
        })
        .collect();
    let config = EngineConfig {
        kmax: rng.random_range(1..=8),
        top_k: rng.random_range(1..=n),
        mode: if rng.random_bool(0.5) {
            SelectionMode::Greedy
        } else {
            SelectionMode::Sample
        },
        ..EngineConfig::default()
    };
    // Enough turns that the script never runs dry before the loop bound.
    reasoner.extend(std::iter::repeat_n(ANSWER_TURN.to_string(), config.kmax));
    scenario_doc(
        format!("random_{seed}"),
        tools,
        contracts,
        behaviors,
        reasoner,
        reranker,
        config,
        Expectations::default(),
    )
}
