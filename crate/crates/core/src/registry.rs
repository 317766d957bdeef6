//! Tool specifications, embedding index, and Top-K retrieval.

use std::collections::HashSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{Endpoint, HttpError};
use crate::symstate::TypeTag;

/// Retrieval depth used when none is given.
pub const DEFAULT_TOP_K: usize = 10;
pub const HASHING_DIMENSION: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistryError {
    #[error("tool document {index}: {message}")]
    Parse { index: usize, message: String },
    #[error("duplicate tool id `{0}`")]
    DuplicateToolId(String),
    #[error("tool `{tool_id}` declares parameter `{name}` twice")]
    DuplicateParameter { tool_id: String, name: String },
    #[error("embedder failure: {0}")]
    EmbedderFailure(String),
    #[error("the tool index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    #[serde(rename = "type")]
    pub type_tag: TypeTag,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub tool_id: String,
    pub name: String,
    pub category: String,
    pub description: String,
    pub parameters: Vec<Parameter>,
    pub docs: String,
}

impl ToolSpec {
    /// The text embedded for retrieval.
    pub fn index_text(&self) -> String {
        let params: Vec<&str> = self.parameters.iter().map(|p| p.name.as_str()).collect();
        format!(
            "{}\n{}\n{}\n{}",
            self.name,
            self.description,
            self.docs,
            params.join(" ")
        )
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamDoc {
    #[serde(rename = "type")]
    type_tag: TypeTag,
    #[serde(default)]
    required: bool,
}

/// File form of a tool, shaped after ToolBench tool configs.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToolDocument {
    #[serde(default)]
    tool_id: Option<String>,
    tool_name: String,
    api_name: String,
    #[serde(default)]
    category: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    docs: String,
    #[serde(default)]
    tool_input: IndexMap<String, ParamDoc>,
}

/// Default id: the tool name with spaces replaced by `_`, then `_` and the API name.
pub fn default_tool_id(tool_name: &str, api_name: &str) -> String {
    format!("{}_{}", tool_name.trim().replace(' ', "_"), api_name.trim())
}

pub fn parse_tool_document(
    value: serde_json::Value,
    index: usize,
) -> Result<ToolSpec, RegistryError> {
    let doc: ToolDocument = serde_json::from_value(value).map_err(|e| RegistryError::Parse {
        index,
        message: e.to_string(),
    })?;
    let tool_id = doc
        .tool_id
        .unwrap_or_else(|| default_tool_id(&doc.tool_name, &doc.api_name));
    let parameters = doc
        .tool_input
        .into_iter()
        .map(|(name, p)| Parameter {
            name,
            type_tag: p.type_tag,
            required: p.required,
        })
        .collect();
    Ok(ToolSpec {
        tool_id,
        name: format!("{} {}", doc.tool_name, doc.api_name),
        category: doc.category,
        description: doc.description,
        parameters,
        docs: doc.docs,
    })
}

/// Parses tool documents (JSON text). Rejects duplicate ids and duplicate
/// parameter names.
pub fn load_tool_specs<S: AsRef<str>>(documents: &[S]) -> Result<Vec<ToolSpec>, RegistryError> {
    let values = documents
        .iter()
        .enumerate()
        .map(|(index, d)| {
            serde_json::from_str(d.as_ref()).map_err(|e| RegistryError::Parse {
                index,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<serde_json::Value>, _>>()?;
    specs_from_values(values)
}

pub fn specs_from_values(values: Vec<serde_json::Value>) -> Result<Vec<ToolSpec>, RegistryError> {
    let mut seen = HashSet::new();
    let mut specs = Vec::with_capacity(values.len());
    for (index, value) in values.into_iter().enumerate() {
        let spec = parse_tool_document(value, index)?;
        if !seen.insert(spec.tool_id.clone()) {
            return Err(RegistryError::DuplicateToolId(spec.tool_id));
        }
        validate_spec(&spec)?;
        specs.push(spec);
    }
    Ok(specs)
}

fn validate_spec(spec: &ToolSpec) -> Result<(), RegistryError> {
    let mut names = HashSet::new();
    for p in &spec.parameters {
        if !names.insert(p.name.as_str()) {
            return Err(RegistryError::DuplicateParameter {
                tool_id: spec.tool_id.clone(),
                name: p.name.clone(),
            });
        }
    }
    Ok(())
}

pub trait Embedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RegistryError>;
    fn dimension(&self) -> usize;
    /// Stable identifier recorded in indexes and trajectory fingerprints.
    fn fingerprint(&self) -> String;
}

/// Feature-hashed token counts, L2-normalized.
///
/// Tokens are maximal runs of alphanumeric characters, lowercased, hashed
/// with 64-bit FNV-1a into `dimension` buckets.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder {
            dimension: HASHING_DIMENSION,
        }
    }
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashingEmbedder { dimension }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        for token in tokens(text) {
            v[(fnv1a(token.as_bytes()) % self.dimension as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RegistryError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn fingerprint(&self) -> String {
        format!("hashing-fnv1a-{}", self.dimension)
    }
}

/// Client for an OpenAI-compatible embeddings endpoint:
/// request `{model, input: [text]}`, response `{data: [{embedding: [f64]}]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    pub endpoint: Endpoint,
    pub model: String,
    pub dimension: usize,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RegistryError> {
        let fail = |e: HttpError| RegistryError::EmbedderFailure(e.to_string());
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let raw = self.endpoint.post_json(&body).map_err(fail)?;
        let parsed: EmbeddingResponse = serde_json::from_value(raw)
            .map_err(|e| RegistryError::EmbedderFailure(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(RegistryError::EmbedderFailure(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        let vectors: Vec<Vec<f64>> = parsed.data.into_iter().map(|d| d.embedding).collect();
        if let Some(bad) = vectors
            .iter()
            .find(|v| v.len() != self.dimension || v.iter().any(|x| !x.is_finite()))
        {
            return Err(RegistryError::EmbedderFailure(format!(
                "embedding of dimension {} (expected {}) or with non-finite components",
                bad.len(),
                self.dimension
            )));
        }
        Ok(vectors)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn fingerprint(&self) -> String {
        format!("http:{}:{}", self.model, self.dimension)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolIndex {
    specs: IndexMap<String, ToolSpec>,
    vectors: IndexMap<String, Vec<f64>>,
    embedder_fingerprint: String,
}

impl ToolIndex {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn spec(&self, tool_id: &str) -> Option<&ToolSpec> {
        self.specs.get(tool_id)
    }

    pub fn vector(&self, tool_id: &str) -> Option<&[f64]> {
        self.vectors.get(tool_id).map(Vec::as_slice)
    }

    pub fn specs(&self) -> impl Iterator<Item = &ToolSpec> {
        self.specs.values()
    }

    pub fn tool_ids(&self) -> impl Iterator<Item = &str> {
        self.specs.keys().map(String::as_str)
    }

    pub fn embedder_fingerprint(&self) -> &str {
        &self.embedder_fingerprint
    }

    /// Digest of every tool's id, text, and vector.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.embedder_fingerprint.as_bytes());
        for (id, spec) in &self.specs {
            h.update(id.as_bytes());
            h.update(spec.index_text().as_bytes());
            for x in &self.vectors[id] {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn build_index(
    specs: Vec<ToolSpec>,
    embedder: &dyn Embedder,
) -> Result<ToolIndex, RegistryError> {
    let texts: Vec<String> = specs.iter().map(ToolSpec::index_text).collect();
    let vectors = if texts.is_empty() {
        Vec::new()
    } else {
        embedder.embed(&texts)?
    };
    let mut index = ToolIndex {
        specs: IndexMap::new(),
        vectors: IndexMap::new(),
        embedder_fingerprint: embedder.fingerprint(),
    };
    for (spec, vector) in specs.into_iter().zip(vectors) {
        if index.specs.contains_key(&spec.tool_id) {
            return Err(RegistryError::DuplicateToolId(spec.tool_id));
        }
        index.vectors.insert(spec.tool_id.clone(), vector);
        index.specs.insert(spec.tool_id.clone(), spec);
    }
    Ok(index)
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub tool_id: String,
    pub similarity: f64,
}

/// Exhaustive cosine scan, best first, ties broken by ascending tool id.
pub fn retrieve_topk(
    index: &ToolIndex,
    requirement: &str,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<Retrieved>, RegistryError> {
    if index.is_empty() {
        return Err(RegistryError::EmptyIndex);
    }
    let query = embedder
        .embed(&[requirement.to_string()])?
        .pop()
        .unwrap_or_default();
    retrieve_with_vector(index, &query, k)
}

pub fn retrieve_with_vector(
    index: &ToolIndex,
    query: &[f64],
    k: usize,
) -> Result<Vec<Retrieved>, RegistryError> {
    if k == 0 {
        return Err(RegistryError::InvalidK);
    }
    if index.is_empty() {
        return Err(RegistryError::EmptyIndex);
    }
    let mut scored: Vec<Retrieved> = index
        .vectors
        .iter()
        .map(|(id, v)| Retrieved {
            tool_id: id.clone(),
            similarity: cosine(query, v),
        })
        .collect();
    scored.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.tool_id.cmp(&b.tool_id))
    });
    scored.truncate(k);
    Ok(scored)
}
