//! Layered configuration: built-in defaults, then a TOML file, then
//! environment variables, then command-line flags.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use toolcontract::executor::EngineConfig;
use toolcontract::policy::SelectionMode;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub engine: EngineSection,
    pub reasoner: EndpointSection,
    pub embedder: EndpointSection,
    pub reranker: EndpointSection,
    pub tools: ToolsSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub kmax: Option<usize>,
    pub top_k: Option<usize>,
    pub mode: Option<SelectionMode>,
    pub temperature: Option<f64>,
    pub max_attempts: Option<usize>,
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointSection {
    pub url: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    /// Embedding width; embedder only.
    pub dimension: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolsSection {
    pub url: Option<String>,
    pub specs_dir: Option<PathBuf>,
    pub contracts_dir: Option<PathBuf>,
    pub aliases: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}

/// Engine-related flags. `None` means not given.
#[derive(Debug, Clone, Default)]
pub struct EngineFlags {
    pub mode: Option<SelectionMode>,
    pub top_k: Option<usize>,
    pub kmax: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Endpoint {
    pub url: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub dimension: Option<usize>,
}

/// The fully resolved configuration for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub engine: EngineConfig,
    pub reasoner: Endpoint,
    pub embedder: Endpoint,
    pub reranker: Endpoint,
    pub tools_url: Option<String>,
    pub specs_dir: Option<PathBuf>,
    pub contracts_dir: Option<PathBuf>,
    pub aliases: Option<PathBuf>,
}

fn endpoint(
    section: &EndpointSection,
    env: &dyn Fn(&str) -> Option<String>,
    prefix: &str,
) -> Endpoint {
    let var = |name: &str| env(&format!("TOOLCONTRACT_{prefix}_{name}")).filter(|v| !v.is_empty());
    Endpoint {
        url: var("URL").or_else(|| section.url.clone()),
        model: var("MODEL").or_else(|| section.model.clone()),
        api_key: var("API_KEY").or_else(|| section.api_key.clone()),
        dimension: section.dimension,
    }
}

/// Merges `base` (scenario or built-in defaults), the file, the
/// environment, and flags, later layers winning.
pub fn resolve(
    base: EngineConfig,
    file: &FileConfig,
    env: &dyn Fn(&str) -> Option<String>,
    flags: &EngineFlags,
) -> Result<CliConfig, String> {
    let f = &file.engine;
    let engine = EngineConfig {
        kmax: flags.kmax.or(f.kmax).unwrap_or(base.kmax),
        top_k: flags.top_k.or(f.top_k).unwrap_or(base.top_k),
        mode: flags.mode.or(f.mode).unwrap_or(base.mode),
        temperature: f.temperature.unwrap_or(base.temperature),
        max_attempts: f.max_attempts.or(base.max_attempts),
        max_tokens: f.max_tokens.unwrap_or(base.max_tokens),
        summary_chars: base.summary_chars,
    };
    engine.validate().map_err(|e| e.to_string())?;
    Ok(CliConfig {
        engine,
        reasoner: endpoint(&file.reasoner, env, "LLM"),
        embedder: endpoint(&file.embedder, env, "EMBED"),
        reranker: endpoint(&file.reranker, env, "RERANK"),
        tools_url: env("TOOLCONTRACT_TOOL_URL")
            .filter(|v| !v.is_empty())
            .or_else(|| file.tools.url.clone()),
        specs_dir: file.tools.specs_dir.clone(),
        contracts_dir: file.tools.contracts_dir.clone(),
        aliases: file.tools.aliases.clone(),
    })
}
