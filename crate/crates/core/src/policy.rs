//! Requirement text, reranking, admissibility filtering, and tool selection.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::Endpoint;
use crate::registry::{Retrieved, ToolSpec};
use crate::symstate::SymbolicState;

pub const CALL_OPEN: &str = "<start_call_tool>";
pub const CALL_CLOSE: &str = "<end_call_tool>";

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("reranker failure: {0}")]
    RerankerFailure(String),
    #[error("no candidate tool is admissible")]
    NoAdmissibleTool,
    #[error("distribution has no positive mass")]
    EmptyDistribution,
    #[error("admissibility mask does not match the distribution's support")]
    MaskMismatch,
    #[error("no candidates to rank")]
    NoCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementOrigin {
    pub query_digest: String,
    pub state_keys: Vec<String>,
    pub last_reasoning_excerpt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requirement {
    pub text: String,
    pub origin: RequirementOrigin,
}

/// The description inside the latest `<start_call_tool>` block, if any.
pub fn latest_call_description(turns: &[String]) -> Option<String> {
    turns.iter().rev().find_map(|t| {
        let start = t.rfind(CALL_OPEN)? + CALL_OPEN.len();
        let body = &t[start..];
        let end = body.find(CALL_CLOSE).unwrap_or(body.len());
        Some(body[..end].trim().to_string())
    })
}

/// Renders the requirement:
///
/// ```text
/// <query>
/// state keys: <sorted keys, comma separated>
/// <latest call description>        (only when present)
/// ```
pub fn build_requirement(
    query: &str,
    state: &SymbolicState,
    reasoning_turns: &[String],
) -> Requirement {
    let mut keys: Vec<String> = state.keys().map(str::to_string).collect();
    keys.sort();
    let excerpt = latest_call_description(reasoning_turns);
    let mut text = format!("{query}\nstate keys: {}", keys.join(", "));
    if let Some(desc) = &excerpt {
        text.push('\n');
        text.push_str(desc);
    }
    Requirement {
        text,
        origin: RequirementOrigin {
            query_digest: hex::encode(Sha256::digest(query.as_bytes())),
            state_keys: keys,
            last_reasoning_excerpt: excerpt,
        },
    }
}

/// A candidate handed to a reranker.
pub struct Candidate<'a> {
    pub retrieved: &'a Retrieved,
    pub spec: &'a ToolSpec,
}

pub trait Reranker {
    /// One raw score per candidate, in candidate order.
    fn score(
        &self,
        requirement: &Requirement,
        candidates: &[Candidate<'_>],
    ) -> Result<Vec<f64>, PolicyError>;
    fn id(&self) -> String;
}

/// Passes retrieval similarities through unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct CosineReranker;

impl Reranker for CosineReranker {
    fn score(
        &self,
        _: &Requirement,
        candidates: &[Candidate<'_>],
    ) -> Result<Vec<f64>, PolicyError> {
        Ok(candidates.iter().map(|c| c.retrieved.similarity).collect())
    }

    fn id(&self) -> String {
        "cosine".into()
    }
}

/// Fixed per-tool scores; tools without an entry score 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixedReranker {
    pub scores: IndexMap<String, f64>,
}

impl Reranker for FixedReranker {
    fn score(
        &self,
        _: &Requirement,
        candidates: &[Candidate<'_>],
    ) -> Result<Vec<f64>, PolicyError> {
        Ok(candidates
            .iter()
            .map(|c| self.scores.get(&c.spec.tool_id).copied().unwrap_or(0.0))
            .collect())
    }

    fn id(&self) -> String {
        let body = serde_json::to_string(&self.scores).unwrap_or_default();
        format!(
            "fixed:{}",
            &hex::encode(Sha256::digest(body.as_bytes()))[..16]
        )
    }
}

/// Client for a rerank endpoint. Request `{model, query, documents}`;
/// response either `{scores: [f64]}` or `{results: [{index, relevance_score}]}`.
#[derive(Debug, Clone)]
pub struct HttpReranker {
    pub endpoint: Endpoint,
    pub model: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RerankResponse {
    Scores { scores: Vec<f64> },
    Results { results: Vec<RerankItem> },
}

#[derive(Deserialize)]
struct RerankItem {
    index: usize,
    relevance_score: f64,
}

impl Reranker for HttpReranker {
    fn score(
        &self,
        requirement: &Requirement,
        candidates: &[Candidate<'_>],
    ) -> Result<Vec<f64>, PolicyError> {
        let documents: Vec<String> = candidates.iter().map(|c| c.spec.index_text()).collect();
        let body = serde_json::json!({ "model": self.model, "query": requirement.text, "documents": documents });
        let raw = self
            .endpoint
            .post_json(&body)
            .map_err(|e| PolicyError::RerankerFailure(e.to_string()))?;
        let parsed: RerankResponse =
            serde_json::from_value(raw).map_err(|e| PolicyError::RerankerFailure(e.to_string()))?;
        let scores = match parsed {
            RerankResponse::Scores { scores } => scores,
            RerankResponse::Results { results } => {
                let mut scores = vec![None; candidates.len()];
                for r in results {
                    *scores.get_mut(r.index).ok_or_else(|| {
                        PolicyError::RerankerFailure(format!(
                            "result index {} out of range",
                            r.index
                        ))
                    })? = Some(r.relevance_score);
                }
                scores
                    .into_iter()
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| {
                        PolicyError::RerankerFailure(
                            "response does not score every document".into(),
                        )
                    })?
            }
        };
        if scores.len() != candidates.len() {
            return Err(PolicyError::RerankerFailure(format!(
                "expected {} scores, got {}",
                candidates.len(),
                scores.len()
            )));
        }
        Ok(scores)
    }

    fn id(&self) -> String {
        format!("http:{}", self.model)
    }
}

/// A probability distribution over tool ids; order is the candidate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDistribution {
    pub support: Vec<String>,
    pub probs: Vec<f64>,
}

impl RankDistribution {
    pub fn prob(&self, tool_id: &str) -> Option<f64> {
        self.support
            .iter()
            .position(|t| t == tool_id)
            .map(|i| self.probs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.support
            .iter()
            .map(String::as_str)
            .zip(self.probs.iter().copied())
    }

    pub fn is_normalized(&self) -> bool {
        self.support.len() == self.probs.len()
            && self.probs.iter().all(|p| *p >= 0.0 && p.is_finite())
            && (self.probs.iter().sum::<f64>() - 1.0).abs() <= NORMALIZATION_TOLERANCE
    }
}

/// Turns raw scores into a distribution. Scores are shifted up only when the
/// minimum is negative; an all-zero vector becomes uniform.
pub fn normalize_scores(
    support: Vec<String>,
    raw: &[f64],
) -> Result<RankDistribution, PolicyError> {
    if support.is_empty() {
        return Err(PolicyError::NoCandidates);
    }
    if raw.len() != support.len() || raw.iter().any(|s| !s.is_finite()) {
        return Err(PolicyError::RerankerFailure(
            "scores must be finite, one per candidate".into(),
        ));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = if min < 0.0 { -min } else { 0.0 };
    let shifted: Vec<f64> = raw.iter().map(|s| s + shift).collect();
    let total: f64 = shifted.iter().sum();
    let probs = if total > 0.0 {
        shifted.iter().map(|s| s / total).collect()
    } else {
        vec![1.0 / support.len() as f64; support.len()]
    };
    Ok(RankDistribution { support, probs })
}

pub fn rerank(
    candidates: &[Candidate<'_>],
    requirement: &Requirement,
    reranker: &dyn Reranker,
) -> Result<RankDistribution, PolicyError> {
    if candidates.is_empty() {
        return Err(PolicyError::NoCandidates);
    }
    let raw = reranker.score(requirement, candidates)?;
    normalize_scores(
        candidates.iter().map(|c| c.spec.tool_id.clone()).collect(),
        &raw,
    )
}

/// Precondition verdicts over the candidate set.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdmissibleSet {
    pub mask: IndexMap<String, bool>,
}

impl AdmissibleSet {
    pub fn is_admissible(&self, tool_id: &str) -> bool {
        self.mask.get(tool_id).copied().unwrap_or(false)
    }
}

/// `p*(t) = p_rank(t) * 1[t admissible] / sum over admissible t' of p_rank(t')`.
///
/// Masked tools get exactly 0. If every admissible tool has zero rank mass
/// the admissible tools share the mass uniformly.
pub fn filter_renormalize(
    dist: &RankDistribution,
    admissible: &AdmissibleSet,
) -> Result<RankDistribution, PolicyError> {
    if admissible.mask.len() != dist.support.len()
        || dist
            .support
            .iter()
            .any(|t| !admissible.mask.contains_key(t))
    {
        return Err(PolicyError::MaskMismatch);
    }
    let keep: Vec<bool> = dist
        .support
        .iter()
        .map(|t| admissible.is_admissible(t))
        .collect();
    let count = keep.iter().filter(|k| **k).count();
    if count == 0 {
        return Err(PolicyError::NoAdmissibleTool);
    }
    let total: f64 = dist
        .probs
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(p, _)| p)
        .sum();
    let probs = dist
        .probs
        .iter()
        .zip(&keep)
        .map(|(p, k)| match (*k, total > 0.0) {
            (false, _) => 0.0,
            (true, true) => p / total,
            (true, false) => 1.0 / count as f64,
        })
        .collect();
    Ok(RankDistribution {
        support: dist.support.clone(),
        probs,
    })
}

/// Highest mass, ties broken by ascending tool id.
pub fn argmax(dist: &RankDistribution) -> Result<&str, PolicyError> {
    dist.iter()
        .filter(|(_, p)| *p > 0.0)
        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(t, _)| t)
        .ok_or(PolicyError::EmptyDistribution)
}

/// One draw from the positive-mass part of `dist`.
pub fn sample_tool<'d>(
    dist: &'d RankDistribution,
    rng: &mut ChaCha8Rng,
) -> Result<&'d str, PolicyError> {
    let total: f64 = dist.probs.iter().filter(|p| **p > 0.0).sum();
    if total <= 0.0 {
        return Err(PolicyError::EmptyDistribution);
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (t, p) in dist.iter().filter(|(_, p)| *p > 0.0) {
        acc += p;
        last = Some(t);
        if u < acc {
            return Ok(t);
        }
    }
    last.ok_or(PolicyError::EmptyDistribution)
}

pub fn select_tool<'d>(
    dist: &'d RankDistribution,
    mode: SelectionMode,
    rng: &mut ChaCha8Rng,
) -> Result<&'d str, PolicyError> {
    match mode {
        SelectionMode::Greedy => argmax(dist),
        SelectionMode::Sample => sample_tool(dist, rng),
    }
}

/// The order in which admissible tools are tried: repeated selection without
/// replacement over positive mass, then zero-mass tools by ascending id.
/// Tools absent from `eligible` are dropped.
pub fn attempt_order(
    dist: &RankDistribution,
    eligible: &dyn Fn(&str) -> bool,
    mode: SelectionMode,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut remaining = RankDistribution {
        support: dist.support.clone(),
        probs: dist
            .iter()
            .map(|(t, p)| if eligible(t) { p } else { 0.0 })
            .collect(),
    };
    let mut order = Vec::new();
    while let Ok(t) = select_tool(&remaining, mode, rng) {
        let t = t.to_string();
        let i = remaining
            .support
            .iter()
            .position(|s| *s == t)
            .expect("selected from support");
        remaining.probs[i] = 0.0;
        order.push(t);
    }
    let mut zero: Vec<String> = dist
        .iter()
        .filter(|(t, p)| *p <= 0.0 && eligible(t))
        .map(|(t, _)| t.to_string())
        .collect();
    zero.sort();
    order.extend(zero);
    order
}
