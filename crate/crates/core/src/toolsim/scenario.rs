use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::mock::{MockOutcome, MockTools};
use crate::contracts::{Contract, ContractDocument, ContractSet, RejectionCategory};
use crate::executor::{Aliases, Engine, EngineConfig, ExecError, Trajectory};
use crate::llmclient::{Message, ScriptedReasoner};
use crate::policy::{CosineReranker, FixedReranker, Reranker};
use crate::registry::{
    build_index, specs_from_values, HashingEmbedder, ToolIndex, ToolSpec, HASHING_DIMENSION,
};
use crate::symstate::{init_state, StateSnapshot, SymbolicState, TypeTag, Value};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("scenario references unknown tool `{0}`")]
    DanglingReference(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSeed {
    pub key: String,
    #[serde(rename = "type")]
    pub type_tag: TypeTag,
    pub value: Value,
}

/// What a scenario run must produce. Every field is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expectations {
    /// `answer`, `fail`, or `timeout`.
    pub outcome: Option<String>,
    pub committed_tools: Option<Vec<String>>,
    pub final_state: Option<StateSnapshot>,
    /// Keys whose values are not compared against `final_state`.
    pub ignore_values: Vec<String>,
    pub rejections: Option<IndexMap<RejectionCategory, usize>>,
}

/// The file form of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    pub name: String,
    pub query: String,
    #[serde(default)]
    pub history: Vec<Message>,
    pub initial_state: Vec<StateSeed>,
    pub tools: Vec<serde_json::Value>,
    pub contracts: Vec<ContractDocument>,
    pub behaviors: IndexMap<String, Vec<MockOutcome>>,
    pub reasoner: Vec<String>,
    #[serde(default)]
    pub aliases: Aliases,
    /// Fixed reranker scores. Without them retrieval similarity is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reranker: Option<IndexMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<EngineConfig>,
    #[serde(default)]
    pub expected: Expectations,
}

/// A fully linked scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub query: String,
    pub history: Vec<Message>,
    pub initial_state: SymbolicState,
    pub tools: Vec<ToolSpec>,
    pub contracts: ContractSet,
    pub behaviors: IndexMap<String, Vec<MockOutcome>>,
    pub reasoner: Vec<String>,
    pub aliases: Aliases,
    pub reranker: Option<FixedReranker>,
    pub config: EngineConfig,
    pub expected: Expectations,
}

pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let doc: ScenarioDocument =
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    Scenario::from_document(doc)
}

impl Scenario {
    pub fn from_document(doc: ScenarioDocument) -> Result<Scenario, ScenarioError> {
        let parse = |e: &dyn std::fmt::Display| ScenarioError::Parse(e.to_string());
        let initial_state = init_state(
            doc.initial_state
                .into_iter()
                .map(|s| (s.key, s.value, s.type_tag)),
        )
        .map_err(|e| parse(&e))?;
        let tools = specs_from_values(doc.tools).map_err(|e| parse(&e))?;
        let contracts = ContractSet::new(
            doc.contracts
                .into_iter()
                .map(Contract::from_document)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| parse(&e))?,
        )
        .map_err(|e| parse(&e))?;

        let known = |id: &str| tools.iter().any(|t| t.tool_id == id);
        let dangling = contracts
            .iter()
            .map(|c| c.tool_id.as_str())
            .chain(doc.behaviors.keys().map(String::as_str))
            .chain(doc.aliases.keys().map(String::as_str))
            .chain(
                doc.reranker
                    .iter()
                    .flat_map(|r| r.keys().map(String::as_str)),
            )
            .find(|id| !known(id));
        if let Some(id) = dangling {
            return Err(ScenarioError::DanglingReference(id.to_string()));
        }
        if let Some(t) = tools.iter().find(|t| contracts.get(&t.tool_id).is_none()) {
            return Err(ScenarioError::DanglingReference(format!(
                "{} (no contract)",
                t.tool_id
            )));
        }
        if let Some((id, _)) = doc.behaviors.iter().find(|(_, s)| s.is_empty()) {
            return Err(ScenarioError::Parse(format!(
                "behavior script for `{id}` is empty"
            )));
        }
        let config = doc.config.unwrap_or_default();
        config.validate().map_err(|e| parse(&e))?;
        Ok(Scenario {
            name: doc.name,
            query: doc.query,
            history: doc.history,
            initial_state,
            tools,
            contracts,
            behaviors: doc.behaviors,
            reasoner: doc.reasoner,
            aliases: doc.aliases,
            reranker: doc.reranker.map(|scores| FixedReranker { scores }),
            config,
            expected: doc.expected,
        })
    }

    /// The hashing-embedder index over the scenario's tools.
    pub fn index(&self) -> ToolIndex {
        build_index(self.tools.clone(), &HashingEmbedder::new(HASHING_DIMENSION))
            .expect("hashing embedder is infallible")
    }

    /// Runs the scenario with its own configuration.
    pub fn run(&self, seed: u64) -> Result<Trajectory, ExecError> {
        self.run_with(&self.config, seed)
    }

    pub fn run_with(&self, config: &EngineConfig, seed: u64) -> Result<Trajectory, ExecError> {
        let embedder = HashingEmbedder::new(HASHING_DIMENSION);
        let index = build_index(self.tools.clone(), &embedder)?;
        let reranker: &dyn Reranker = match &self.reranker {
            Some(r) => r,
            None => &CosineReranker,
        };
        let engine = Engine::new(
            config.clone(),
            &index,
            &self.contracts,
            &embedder,
            reranker,
            &self.aliases,
        )?;
        let mut reasoner = ScriptedReasoner::new(self.reasoner.iter().cloned());
        let mut tools = MockTools::new(&self.behaviors);
        engine.run(
            &self.query,
            &self.history,
            self.initial_state.clone(),
            &mut reasoner,
            &mut tools,
            seed,
        )
    }

    /// Mismatches between `trajectory` and the scenario's expectations.
    pub fn check(&self, trajectory: &Trajectory) -> Vec<String> {
        let e = &self.expected;
        let mut problems = Vec::new();
        if let Some(o) = &e.outcome {
            if trajectory.outcome.name() != o {
                problems.push(format!(
                    "outcome {} (expected {o})",
                    trajectory.outcome.name()
                ));
            }
        }
        if let Some(tools) = &e.committed_tools {
            let got: Vec<String> = trajectory
                .steps
                .iter()
                .filter_map(|s| s.committed_tool.clone())
                .collect();
            if got != *tools {
                problems.push(format!("committed {got:?} (expected {tools:?})"));
            }
        }
        if let Some(expected) = &e.final_state {
            let mask = |s: &StateSnapshot| {
                let mut s = s.clone();
                for entry in &mut s.entries {
                    if e.ignore_values.contains(&entry.key) {
                        entry.value = Value::Null;
                    }
                }
                s
            };
            if mask(trajectory.final_state()) != mask(expected) {
                problems.push("final state differs from the expected snapshot".into());
            }
        }
        if let Some(expected) = &e.rejections {
            let report = crate::verify::build_rejection_report(std::slice::from_ref(trajectory));
            for c in RejectionCategory::ALL {
                let want = expected.get(&c).copied().unwrap_or(0);
                if report.totals[&c] != want {
                    problems.push(format!(
                        "{} rejections: {} (expected {want})",
                        c.label(),
                        report.totals[&c]
                    ));
                }
            }
        }
        problems
    }
}
