//! The forward-execution loop: reason, retrieve, gate, execute, verify,
//! commit.

mod trajectory;

use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use trajectory::{
    Action, Attempt, CandidateRecord, LogCorrupt, Outcome, Step, ToolOutcome, Trajectory, Verdict,
    LOG_FORMAT,
};

use crate::contracts::{
    accept_and_update, categorize_failure, check_precondition, AcceptanceEvent, ContractSet,
    RejectionCategory, Side,
};
use crate::http::Endpoint;
use crate::llmclient::{
    build_messages, result_message, Message, Reasoner, ReasonerError, ReasonerRequest,
    DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE, RESULT_CLOSE, RESULT_OPEN, SYSTEM_PROMPT,
};
use crate::policy::{
    attempt_order, build_requirement, filter_renormalize, rerank, AdmissibleSet, Candidate,
    PolicyError, Reranker, SelectionMode, CALL_CLOSE, CALL_OPEN,
};
use crate::registry::{retrieve_topk, Embedder, RegistryError, ToolIndex, ToolSpec};
use crate::symstate::{summarize, SymbolicState, Value};

/// Forged result tags that make a reasoner turn malformed.
const FORGED_TAGS: [&str; 3] = [RESULT_OPEN, RESULT_CLOSE, "</end_tool_result>"];

const CORRECTION: &str =
    "Your previous reply contained a tool-result tag. Tool results are supplied only by the \
                          runtime. Reply with an answer, or request a tool with <start_call_tool>.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("tool `{tool_id}`: required parameter `{param}` could not be resolved")]
    UnresolvedRequiredParam { tool_id: String, param: String },
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
}

pub trait ToolExecutor {
    fn execute(&mut self, tool_id: &str, params: &Value) -> Result<Value, ToolError>;
}

/// Executes tools through a gateway that accepts `{"tool_id", "params"}` and
/// answers with the raw tool result.
#[derive(Debug, Clone)]
pub struct HttpToolExecutor {
    pub endpoint: Endpoint,
}

impl ToolExecutor for HttpToolExecutor {
    fn execute(&mut self, tool_id: &str, params: &Value) -> Result<Value, ToolError> {
        let body = serde_json::json!({"tool_id": tool_id, "params": params});
        let raw = self
            .endpoint
            .post_json(&body)
            .map_err(|e| ToolError::Transport(e.to_string()))?;
        serde_json::from_value(raw)
            .map_err(|e| ToolError::Transport(format!("undecodable result: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub kmax: usize,
    pub top_k: usize,
    pub mode: SelectionMode,
    pub temperature: f64,
    /// Defaults to `top_k` when unset.
    pub max_attempts: Option<usize>,
    pub max_tokens: u32,
    pub summary_chars: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            kmax: 10,
            top_k: 10,
            mode: SelectionMode::Greedy,
            temperature: DEFAULT_TEMPERATURE,
            max_attempts: None,
            max_tokens: DEFAULT_MAX_TOKENS,
            summary_chars: 4000,
        }
    }
}

impl EngineConfig {
    pub fn max_attempts(&self) -> usize {
        self.max_attempts.unwrap_or(self.top_k)
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        let bad = |m: &str| Err(ExecError::Configuration(m.to_string()));
        if self.kmax == 0 || self.top_k == 0 || self.max_attempts() == 0 || self.summary_chars == 0
        {
            return bad("kmax, top_k, max_attempts, and summary_chars must be at least 1");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be finite and non-negative");
        }
        Ok(())
    }
}

/// Classifies a reasoner turn.
pub fn parse_action(output: &str) -> Action {
    if FORGED_TAGS.iter().any(|t| output.contains(t)) {
        return Action::Malformed {
            raw: output.to_string(),
        };
    }
    match output.find(CALL_OPEN) {
        Some(i) => {
            let body = &output[i + CALL_OPEN.len()..];
            let end = body.find(CALL_CLOSE).unwrap_or(body.len());
            Action::CallTool {
                description: body[..end].trim().to_string(),
            }
        }
        None => Action::Answer {
            text: output.to_string(),
        },
    }
}

/// Where a parameter's value comes from when it is not a same-named state key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamAlias {
    StateKey(String),
    /// Text with `{key}` placeholders filled from the state.
    Template(String),
}

/// Per-tool parameter aliases.
pub type Aliases = IndexMap<String, IndexMap<String, ParamAlias>>;

fn fill_template(template: &str, state: &SymbolicState) -> Option<String> {
    let mut out = String::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..].find('}')? + open;
        out.push_str(&state.value(&rest[open + 1..close])?.display_inline());
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Some(out)
}

fn resolve_param(name: &str, alias: Option<&ParamAlias>, state: &SymbolicState) -> Option<Value> {
    match alias {
        Some(ParamAlias::StateKey(key)) => state.value(key).cloned(),
        Some(ParamAlias::Template(t)) => fill_template(t, state).map(Value::Text),
        None => state.value(name).cloned(),
    }
}

/// Builds the parameter record for `tool`. Parameters come from aliases, then
/// same-named state keys, then (for required ones still missing) a single
/// reasoner request for a JSON object. Values must match the declared type.
/// Unresolved optional parameters are omitted.
pub fn gen_params(
    tool: &ToolSpec,
    state: &SymbolicState,
    aliases: Option<&IndexMap<String, ParamAlias>>,
    reasoner: Option<&mut dyn Reasoner>,
) -> Result<Value, ExecError> {
    let mut fields = IndexMap::new();
    let mut missing = Vec::new();
    for p in &tool.parameters {
        match resolve_param(&p.name, aliases.and_then(|a| a.get(&p.name)), state) {
            Some(v) if v.tag() == p.type_tag => {
                fields.insert(p.name.clone(), v);
            }
            _ if p.required => missing.push(p),
            _ => {}
        }
    }
    if let (Some(first), Some(reasoner)) = (missing.first(), reasoner) {
        let wanted: Vec<String> = missing
            .iter()
            .map(|p| format!("{} ({})", p.name, p.type_tag))
            .collect();
        let prompt = format!(
            "Provide arguments for the tool `{}` ({}).\nCurrent state:\n{}\n\nReply with only a JSON object with these fields: {}",
            tool.tool_id,
            tool.description,
            summarize(state, 4000),
            wanted.join(", ")
        );
        let request =
            ReasonerRequest::new(vec![Message::system(SYSTEM_PROMPT), Message::user(prompt)]);
        let reply = reasoner.complete(&request)?;
        let object = extract_json_object(&reply.text);
        let mut still = Vec::new();
        for p in &missing {
            match object
                .as_ref()
                .and_then(|o| o.as_record())
                .and_then(|r| r.get(&p.name))
            {
                Some(v) if v.tag() == p.type_tag => {
                    fields.insert(p.name.clone(), v.clone());
                }
                _ => still.push(p.name.clone()),
            }
        }
        if let Some(param) = still.into_iter().next() {
            return Err(ExecError::UnresolvedRequiredParam {
                tool_id: tool.tool_id.clone(),
                param,
            });
        }
        let _ = first;
    } else if let Some(p) = missing.first() {
        return Err(ExecError::UnresolvedRequiredParam {
            tool_id: tool.tool_id.clone(),
            param: p.name.clone(),
        });
    }
    let ordered = tool
        .parameters
        .iter()
        .filter_map(|p| fields.swap_remove(&p.name).map(|v| (p.name.clone(), v)));
    Ok(Value::Record(ordered.collect()))
}

fn extract_json_object(text: &str) -> Option<Value> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    Value::from_json(text.get(start..=end)?).ok()
}

pub struct Engine<'a> {
    pub config: EngineConfig,
    pub index: &'a ToolIndex,
    pub contracts: &'a ContractSet,
    pub embedder: &'a dyn Embedder,
    pub reranker: &'a dyn Reranker,
    pub aliases: &'a Aliases,
}

impl<'a> Engine<'a> {
    pub fn new(
        config: EngineConfig,
        index: &'a ToolIndex,
        contracts: &'a ContractSet,
        embedder: &'a dyn Embedder,
        reranker: &'a dyn Reranker,
        aliases: &'a Aliases,
    ) -> Result<Self, ExecError> {
        config.validate()?;
        if let Some(id) = index.tool_ids().find(|id| contracts.get(id).is_none()) {
            return Err(ExecError::Configuration(format!(
                "tool `{id}` has no contract"
            )));
        }
        Ok(Engine {
            config,
            index,
            contracts,
            embedder,
            reranker,
            aliases,
        })
    }

    /// Digest of the configuration and every component that influences a run.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.embedder.fingerprint().as_bytes());
        h.update(self.reranker.id().as_bytes());
        h.update(self.index.digest().as_bytes());
        h.update(serde_json::to_vec(self.contracts).expect("contracts serialize"));
        h.update(serde_json::to_vec(self.aliases).expect("aliases serialize"));
        hex::encode(h.finalize())
    }

    /// Runs one trajectory from `initial_state`.
    pub fn run(
        &self,
        query: &str,
        history: &[Message],
        initial_state: SymbolicState,
        reasoner: &mut dyn Reasoner,
        tools: &mut dyn ToolExecutor,
        seed: u64,
    ) -> Result<Trajectory, ExecError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = initial_state;
        let initial_snapshot = state.snapshot();
        let mut failed: BTreeSet<String> = BTreeSet::new();
        let mut turns: Vec<Message> = Vec::new();
        let mut reasoning: Vec<String> = Vec::new();
        let mut pending: Option<Value> = None;
        let mut steps = Vec::new();
        let mut outcome = None;
        let mut total_log_prob = 0.0;

        for k in 0..self.config.kmax {
            let summary = summarize(&state, self.config.summary_chars);
            let messages = build_messages(query, history, &summary, pending.as_ref(), &turns);
            if let Some(r) = pending.take() {
                turns.push(result_message(&r));
            }
            let request = ReasonerRequest {
                messages,
                temperature: self.config.temperature,
                max_tokens: self.config.max_tokens,
            };
            let text = reasoner.complete(&request)?.text;
            turns.push(Message::assistant(text.clone()));
            reasoning.push(text.clone());

            let pre_digest = state.digest();
            let mut step = Step {
                index: k,
                pre_state_digest: pre_digest.clone(),
                reasoning_text: text.clone(),
                action: parse_action(&text),
                requirement: None,
                candidates: Vec::new(),
                admissible_mask: IndexMap::new(),
                attempts: Vec::new(),
                committed_tool: None,
                post_state_digest: pre_digest,
                post_state: state.snapshot(),
                policy_log_prob: None,
            };

            match step.action.clone() {
                Action::Answer { text } => {
                    steps.push(step);
                    outcome = Some(Outcome::Answer { text });
                    break;
                }
                Action::Malformed { .. } => {
                    turns.push(Message::user(CORRECTION));
                    steps.push(step);
                    continue;
                }
                Action::CallTool { .. } => {}
            }

            let committed = self.tool_phase(
                k,
                query,
                &state,
                &reasoning,
                &mut failed,
                reasoner,
                tools,
                &mut rng,
                &mut step,
            )?;
            match committed {
                Some((next, result, log_p)) => {
                    state = next;
                    step.post_state_digest = state.digest();
                    step.post_state = state.snapshot();
                    step.policy_log_prob = Some(log_p);
                    total_log_prob += log_p;
                    pending = Some(result);
                    steps.push(step);
                }
                None => {
                    let reason = if step.attempts.iter().any(Attempt::executed) {
                        "no candidate produced an acceptable result"
                    } else {
                        "no admissible candidate tool"
                    };
                    steps.push(step);
                    outcome = Some(Outcome::Fail {
                        reason: reason.to_string(),
                    });
                    break;
                }
            }
        }

        Ok(Trajectory {
            query: query.to_string(),
            history: history.to_vec(),
            seed,
            mode: self.config.mode,
            initial_state: initial_snapshot,
            contracts: self.contracts.clone(),
            steps,
            outcome: outcome.unwrap_or(Outcome::Timeout),
            total_log_prob,
            config_fingerprint: self.fingerprint(),
        })
    }

    /// Retrieval, gating, and attempts for one `CallTool` step. Returns the
    /// committed state, the accepted result, and `ln p*` of the committed tool.
    #[allow(clippy::too_many_arguments)]
    fn tool_phase(
        &self,
        k: usize,
        query: &str,
        state: &SymbolicState,
        reasoning: &[String],
        failed: &mut BTreeSet<String>,
        reasoner: &mut dyn Reasoner,
        tools: &mut dyn ToolExecutor,
        rng: &mut ChaCha8Rng,
        step: &mut Step,
    ) -> Result<Option<(SymbolicState, Value, f64)>, ExecError> {
        let requirement = build_requirement(query, state, reasoning);
        let retrieved = retrieve_topk(
            self.index,
            &requirement.text,
            self.config.top_k,
            self.embedder,
        )?;
        let candidates: Vec<Candidate> = retrieved
            .iter()
            .map(|r| Candidate {
                retrieved: r,
                spec: self.index.spec(&r.tool_id).expect("retrieved from index"),
            })
            .collect();
        let dist = rerank(&candidates, &requirement, self.reranker)?;

        let mut admissible = AdmissibleSet::default();
        for c in &candidates {
            let id = &c.spec.tool_id;
            if failed.contains(id) {
                admissible.mask.insert(id.clone(), false);
                continue;
            }
            let contract = self
                .contracts
                .get(id)
                .expect("engine checked contract coverage");
            let check = check_precondition(contract, state);
            if !check.holds {
                let atom = check.failing_atom.clone();
                let category = atom
                    .as_ref()
                    .map_or(RejectionCategory::StateDependencyMissing, |a| {
                        categorize_failure(Side::Pre, a, None)
                    });
                let detail = match &atom {
                    Some(a) => format!("precondition atom `{a}` does not hold"),
                    None => "precondition does not hold".to_string(),
                };
                step.attempts.push(Attempt {
                    tool_id: id.clone(),
                    params: None,
                    result: None,
                    verdict: Verdict::PreRejected {
                        category,
                        failing_atom: atom,
                        detail,
                    },
                });
            }
            admissible.mask.insert(id.clone(), check.holds);
        }

        let filtered = match filter_renormalize(&dist, &admissible) {
            Ok(f) => Some(f),
            Err(PolicyError::NoAdmissibleTool) => None,
            Err(e) => return Err(e.into()),
        };
        step.candidates = retrieved
            .iter()
            .zip(&dist.probs)
            .enumerate()
            .map(|(i, (r, p))| CandidateRecord {
                tool_id: r.tool_id.clone(),
                similarity: r.similarity,
                rank_prob: *p,
                policy_prob: filtered.as_ref().map_or(0.0, |f| f.probs[i]),
            })
            .collect();
        step.admissible_mask = admissible.mask.clone();
        step.requirement = Some(requirement);
        let Some(filtered) = filtered else {
            return Ok(None);
        };

        let order = attempt_order(
            &filtered,
            &|t| admissible.is_admissible(t),
            self.config.mode,
            rng,
        );
        for tool_id in order.into_iter().take(self.config.max_attempts()) {
            let spec = self.index.spec(&tool_id).expect("candidate from index");
            let contract = self
                .contracts
                .get(&tool_id)
                .expect("engine checked contract coverage");
            let params = match gen_params(
                spec,
                state,
                self.aliases.get(&tool_id),
                Some(&mut *reasoner),
            ) {
                Ok(p) => p,
                Err(ExecError::UnresolvedRequiredParam { param, .. }) => {
                    step.attempts.push(Attempt {
                        tool_id,
                        params: None,
                        result: None,
                        verdict: Verdict::PreRejected {
                            category: RejectionCategory::SchemaFormatViolation,
                            failing_atom: None,
                            detail: format!("required parameter `{param}` could not be resolved"),
                        },
                    });
                    continue;
                }
                Err(e) => return Err(e),
            };
            let (outcome, acceptance, next) = match tools.execute(&tool_id, &params) {
                Ok(result) => {
                    let (event, next) = accept_and_update(contract, state, &result, k);
                    (ToolOutcome::Ok(result), event, next)
                }
                Err(e) => {
                    let event = AcceptanceEvent {
                        tool_id: tool_id.clone(),
                        passed: false,
                        failing_atom: None,
                        failing_rule: None,
                        category: Some(RejectionCategory::EmptyNull),
                        detail: Some(e.to_string()),
                    };
                    (ToolOutcome::Error(e.to_string()), event, None)
                }
            };
            let passed = acceptance.passed;
            step.attempts.push(Attempt {
                tool_id: tool_id.clone(),
                params: Some(params),
                result: Some(outcome.clone()),
                verdict: Verdict::Executed { acceptance },
            });
            match (passed, next, outcome) {
                (true, Some(next), ToolOutcome::Ok(result)) => {
                    step.committed_tool = Some(tool_id.clone());
                    let p = filtered.prob(&tool_id).unwrap_or(0.0);
                    return Ok(Some((next, result, p.ln())));
                }
                _ => {
                    failed.insert(tool_id);
                }
            }
        }
        Ok(None)
    }
}
