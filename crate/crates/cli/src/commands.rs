use std::fs;
use std::path::{Path, PathBuf};

use toolcontract::contracts::{Contract, ContractDocument, ContractError, ContractSet};
use toolcontract::executor::{
    gen_params, Aliases, Engine, EngineConfig, HttpToolExecutor, Outcome, ToolExecutor, Trajectory,
};
use toolcontract::http;
use toolcontract::llmclient::HttpReasoner;
use toolcontract::policy::{CosineReranker, HttpReranker, Reranker};
use toolcontract::registry::{
    build_index, specs_from_values, Embedder, HashingEmbedder, HttpEmbedder, ToolIndex,
    HASHING_DIMENSION,
};
use toolcontract::symstate::{init_state, SymbolicState, TypeTag, Value};
use toolcontract::toolsim::{
    fault_suite, load_scenario, shipped_scenario, MockTools, Scenario, StateSeed,
};
use toolcontract::verify::{build_rejection_report, check_admissible, verify_trajectory, Probe};

use crate::config::{self, EngineFlags, FileConfig};
use crate::{ReplayArgs, ReportArgs, RunArgs, ValidateArgs};

type CmdResult = Result<u8, String>;

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

/// Every JSON document in `dir` (sorted by file name), flattening top-level
/// arrays. Each item carries its file for diagnostics.
fn json_documents(dir: &Path) -> Result<Vec<(PathBuf, serde_json::Value)>, String> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| format!("cannot read directory {}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for file in files {
        let value: serde_json::Value =
            serde_json::from_str(&read(&file)?).map_err(|e| format!("{}: {e}", file.display()))?;
        match value {
            serde_json::Value::Array(items) => {
                out.extend(items.into_iter().map(|v| (file.clone(), v)))
            }
            v => out.push((file, v)),
        }
    }
    Ok(out)
}

fn load_contracts(dir: &Path) -> Result<ContractSet, String> {
    let mut set = ContractSet::default();
    for (file, value) in json_documents(dir)? {
        let doc: ContractDocument =
            serde_json::from_value(value).map_err(|e| format!("{}: {e}", file.display()))?;
        let contract =
            Contract::from_document(doc).map_err(|e| format!("{}: {e}", file.display()))?;
        set.insert(contract)
            .map_err(|e| format!("{}: {e}", file.display()))?;
    }
    Ok(set)
}

fn outcome_code(outcome: &Outcome) -> u8 {
    match outcome {
        Outcome::Answer { .. } => 0,
        Outcome::Fail { .. } => 2,
        Outcome::Timeout => 3,
    }
}

fn resolve_scenario(name: &str) -> Result<Scenario, String> {
    let path = Path::new(name);
    let text = if path.is_file() {
        read(path)?
    } else if let Some(text) = shipped_scenario(name) {
        text.to_string()
    } else {
        return Err(format!(
            "scenario `{name}` is neither a file nor a shipped scenario"
        ));
    };
    load_scenario(&text).map_err(|e| e.to_string())
}

fn finish_run(trajectory: &Trajectory, out: &Path) -> CmdResult {
    write(out, &trajectory.to_jsonl())?;
    match &trajectory.outcome {
        Outcome::Answer { text } => println!("{text}"),
        Outcome::Fail { reason } => eprintln!("run failed: {reason}"),
        Outcome::Timeout => eprintln!("run timed out after {} steps", trajectory.steps.len()),
    }
    eprintln!("trajectory written to {}", out.display());
    Ok(outcome_code(&trajectory.outcome))
}

/// Prints static and probed admissibility of every tool on `state`.
fn dry_run_wp(
    index: &ToolIndex,
    contracts: &ContractSet,
    aliases: &Aliases,
    state: &SymbolicState,
    tools_for: &mut dyn FnMut() -> Box<dyn ToolExecutor>,
) -> CmdResult {
    println!("{:<40} {:>6} {:>6}", "tool", "pre", "wp");
    for spec in index.specs() {
        let id = &spec.tool_id;
        let pre = check_admissible(id, contracts, state, None);
        let wp = match gen_params(spec, state, aliases.get(id), None) {
            Ok(params) => {
                let mut tools = tools_for();
                check_admissible(
                    id,
                    contracts,
                    state,
                    Some(Probe {
                        tools: tools.as_mut(),
                        params,
                    }),
                )
            }
            Err(_) => false,
        };
        println!("{id:<40} {pre:>6} {wp:>6}");
    }
    Ok(0)
}

pub fn run(args: RunArgs) -> CmdResult {
    let file = match &args.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let flags = EngineFlags {
        mode: args.mode.map(Into::into),
        top_k: args.k,
        kmax: args.kmax,
    };
    let env = |k: &str| std::env::var(k).ok();

    if let Some(name) = &args.scenario {
        let scenario = resolve_scenario(name)?;
        let cfg = config::resolve(scenario.config.clone(), &file, &env, &flags)?;
        if args.dry_run_wp {
            let behaviors = scenario.behaviors.clone();
            return dry_run_wp(
                &scenario.index(),
                &scenario.contracts,
                &scenario.aliases,
                &scenario.initial_state,
                &mut || Box::new(MockTools::new(&behaviors)),
            );
        }
        let trajectory = scenario
            .run_with(&cfg.engine, args.seed)
            .map_err(|e| e.to_string())?;
        for problem in scenario.check(&trajectory) {
            eprintln!("expectation not met: {problem}");
        }
        let out = args
            .out
            .unwrap_or_else(|| PathBuf::from(format!("{}.trajectory.jsonl", scenario.name)));
        return finish_run(&trajectory, &out);
    }

    let query = args
        .query
        .expect("clap requires --query without --scenario");
    let cfg = config::resolve(EngineConfig::default(), &file, &env, &flags)?;
    let specs_dir = args
        .tools_dir
        .or(cfg.specs_dir.clone())
        .ok_or("live runs need --tools-dir")?;
    let contracts_dir = args
        .contracts_dir
        .or(cfg.contracts_dir.clone())
        .ok_or("live runs need --contracts-dir")?;
    let specs = specs_from_values(
        json_documents(&specs_dir)?
            .into_iter()
            .map(|(_, v)| v)
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    let contracts = load_contracts(&contracts_dir)?;
    let aliases: Aliases = match &cfg.aliases {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?,
        None => Aliases::new(),
    };
    let state = match &args.state {
        Some(p) => {
            let seeds: Vec<StateSeed> =
                serde_json::from_str(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?;
            init_state(seeds.into_iter().map(|s| (s.key, s.value, s.type_tag)))
        }
        None => init_state([(
            "query".to_string(),
            Value::text(query.as_str()),
            TypeTag::TextType,
        )]),
    }
    .map_err(|e| e.to_string())?;

    let endpoint = |e: &config::Endpoint, what: &str| -> Result<http::Endpoint, String> {
        let url = e
            .url
            .clone()
            .ok_or_else(|| format!("no {what} URL configured"))?;
        Ok(http::Endpoint::new(url).with_api_key(e.api_key.clone()))
    };
    let embedder: Box<dyn Embedder> = match &cfg.embedder.url {
        Some(_) => Box::new(HttpEmbedder {
            endpoint: endpoint(&cfg.embedder, "embedder")?,
            model: cfg.embedder.model.clone().unwrap_or_default(),
            dimension: cfg
                .embedder
                .dimension
                .ok_or("embedder.dimension must be set for an HTTP embedder")?,
        }),
        None => Box::new(HashingEmbedder::new(HASHING_DIMENSION)),
    };
    let reranker: Box<dyn Reranker> = match &cfg.reranker.url {
        Some(_) => Box::new(HttpReranker {
            endpoint: endpoint(&cfg.reranker, "reranker")?,
            model: cfg.reranker.model.clone().unwrap_or_default(),
        }),
        None => Box::new(CosineReranker),
    };
    let tool_endpoint = http::Endpoint::new(
        cfg.tools_url
            .clone()
            .ok_or("no tool gateway URL configured")?,
    );
    let index = build_index(specs, embedder.as_ref()).map_err(|e| e.to_string())?;
    if args.dry_run_wp {
        return dry_run_wp(&index, &contracts, &aliases, &state, &mut || {
            Box::new(HttpToolExecutor {
                endpoint: tool_endpoint.clone(),
            })
        });
    }
    let mut reasoner = HttpReasoner {
        endpoint: endpoint(&cfg.reasoner, "reasoner")?,
        model: cfg
            .reasoner
            .model
            .clone()
            .ok_or("no reasoner model configured")?,
    };
    let engine = Engine::new(
        cfg.engine.clone(),
        &index,
        &contracts,
        embedder.as_ref(),
        reranker.as_ref(),
        &aliases,
    )
    .map_err(|e| e.to_string())?;
    let mut tools = HttpToolExecutor {
        endpoint: tool_endpoint,
    };
    let trajectory = engine
        .run(&query, &[], state, &mut reasoner, &mut tools, args.seed)
        .map_err(|e| e.to_string())?;
    finish_run(
        &trajectory,
        &args
            .out
            .unwrap_or_else(|| PathBuf::from("trajectory.jsonl")),
    )
}

pub fn validate(args: ValidateArgs) -> CmdResult {
    let specs = specs_from_values(
        json_documents(&args.tools)?
            .into_iter()
            .map(|(_, v)| v)
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    let known: Vec<&str> = specs.iter().map(|s| s.tool_id.as_str()).collect();
    let mut problems = Vec::new();
    let mut seen = Vec::new();
    for (file, value) in json_documents(&args.contracts)? {
        let where_ = file.display();
        let contract = serde_json::from_value::<ContractDocument>(value)
            .map_err(|e| ContractError::Document(e.to_string()))
            .and_then(Contract::from_document);
        match contract {
            Err(e) => problems.push(format!("{where_}: {e}")),
            Ok(c) => {
                if !known.contains(&c.tool_id.as_str()) {
                    problems.push(format!(
                        "{where_}: {}",
                        ContractError::DanglingReference(c.tool_id.clone())
                    ));
                }
                if seen.contains(&c.tool_id) {
                    problems.push(format!(
                        "{where_}: {}",
                        ContractError::DuplicateContract(c.tool_id.clone())
                    ));
                }
                seen.push(c.tool_id);
            }
        }
    }
    for id in known.iter().filter(|id| !seen.iter().any(|s| s == *id)) {
        problems.push(format!("tool `{id}` has no contract"));
    }
    for p in &problems {
        eprintln!("{p}");
    }
    if problems.is_empty() {
        println!("{} contracts valid for {} tools", seen.len(), known.len());
        Ok(0)
    } else {
        Ok(1)
    }
}

fn load_log(path: &Path) -> Result<Trajectory, String> {
    Trajectory::from_jsonl(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn replay(args: ReplayArgs) -> CmdResult {
    let trajectory = load_log(&args.log)?;
    let contracts = match &args.contracts {
        Some(dir) => load_contracts(dir)?,
        None => trajectory.contracts.clone(),
    };
    let verdict = verify_trajectory(&trajectory, &contracts)
        .map_err(|e| format!("{}: {e}", args.log.display()))?;
    if verdict.safe {
        println!("safe: {} steps verified", trajectory.steps.len());
        return Ok(0);
    }
    for v in &verdict.violations {
        println!("step {}: {:?}: {}", v.step_index, v.clause, v.detail);
    }
    Ok(2)
}

pub fn report(args: ReportArgs) -> CmdResult {
    let paths: Vec<PathBuf> = glob::glob(&args.pattern)
        .map_err(|e| format!("bad pattern: {e}"))?
        .filter_map(Result::ok)
        .collect();
    if paths.is_empty() {
        return Err(format!("no logs match `{}`", args.pattern));
    }
    let logs = paths
        .iter()
        .map(|p| load_log(p))
        .collect::<Result<Vec<_>, _>>()?;
    let report = build_rejection_report(&logs);
    print!("{}", report.render_table());
    let json = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
    write(&args.out, &format!("{json}\n"))?;
    Ok(0)
}

pub fn export_suite(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let suite = fault_suite();
    for doc in &suite {
        let text = serde_json::to_string_pretty(doc).map_err(|e| e.to_string())?;
        write(
            &dir.join(format!("{}.json", doc.name)),
            &format!("{text}\n"),
        )?;
    }
    println!("wrote {} scenarios to {}", suite.len(), dir.display());
    Ok(0)
}
