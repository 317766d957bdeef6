//! Acceptance checks. Each criterion prints one PASS or FAIL line; the
//! process exits non-zero if any criterion fails. Tolerances and frozen
//! expectations live in the constants and literals below.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toolcontract::contracts::{RejectionCategory, Side};
use toolcontract::executor::{Outcome, ToolOutcome, Trajectory, Verdict};
use toolcontract::policy::{
    filter_renormalize, normalize_scores, sample_tool, AdmissibleSet, PolicyError, RankDistribution,
};
use toolcontract::registry::{
    build_index, retrieve_topk, specs_from_values, Embedder, HashingEmbedder, HASHING_DIMENSION,
};
use toolcontract::symstate::{init_state, StateSnapshot, TypeTag, Value};
use toolcontract::toolsim::{
    fault_suite, load_scenario, random_fault_scenario, shipped_scenario, Scenario,
    SHIPPED_SCENARIOS,
};
use toolcontract::verify::{build_rejection_report, verify_trajectory, ViolationClause};

const GOLDEN_BUDGET: Duration = Duration::from_secs(1);
const FILTER_CASES: usize = 1000;
const FILTER_TOLERANCE: f64 = 1e-9;
const FILTER_BUDGET: Duration = Duration::from_secs(5);
const SAMPLING_DISTRIBUTIONS: usize = 50;
const DRAWS_PER_DISTRIBUTION: usize = 100_000;
const SAMPLING_TOLERANCE: f64 = 0.02;
const SAFETY_SEEDS: u64 = 500;
const SAFETY_BUDGET: Duration = Duration::from_secs(30);
const RETRIEVAL_BUDGET: Duration = Duration::from_secs(10);

type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Check {
    ensure(elapsed < budget, || {
        format!("took {elapsed:?}, budget {budget:?}")
    })
}

fn shipped(name: &str) -> Scenario {
    load_scenario(shipped_scenario(name).unwrap()).unwrap()
}

const EXAMPLE_ONE_FINAL: &str = r#"{"version": 1, "entries": [
 {"key": "content_type", "type": "TextType", "value": "tutorial video", "provenance": "initial_context", "step": null},
 {"key": "platform", "type": "TextType", "value": "YouTube", "provenance": "initial_context", "step": null},
 {"key": "query", "type": "TextType", "value": "Find me a tutorial video about machine learning on YouTube", "provenance": "initial_context", "step": null},
 {"key": "result_count", "type": "NumberType", "value": null, "provenance": "tool_commit:Simple_YouTube_Search_Search", "step": 0},
 {"key": "topic", "type": "TextType", "value": "machine learning", "provenance": "initial_context", "step": null},
 {"key": "youtube_results", "type": "ListType", "value": [
   {"title": "Machine Learning Tutorial for Beginners", "url": "https://youtube.com/watch?v=abc123", "channel": {"name": "ML Course", "id": "UC123"}, "views": 1500000, "duration_formatted": "45:30"},
   {"title": "Complete ML Course - Full Tutorial", "url": "https://youtube.com/watch?v=def456", "channel": {"name": "AI Academy", "id": "UC456"}, "views": 800000, "duration_formatted": "12:30:00"}],
  "provenance": "tool_commit:Simple_YouTube_Search_Search", "step": 0}]}"#;

fn golden_example_one() -> Check {
    let s = shipped("example_1_youtube");
    let start = Instant::now();
    let t = s.run(0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(matches!(t.outcome, Outcome::Answer { .. }), || {
        format!("outcome {:?}", t.outcome)
    })?;
    ensure(t.steps.len() <= 2, || {
        format!("{} iterations", t.steps.len())
    })?;
    let committed: Vec<_> = t
        .steps
        .iter()
        .filter_map(|s| s.committed_tool.clone())
        .collect();
    ensure(committed == ["Simple_YouTube_Search_Search"], || {
        format!("committed {committed:?}")
    })?;
    let mut got = t.final_state().clone();
    let keys: Vec<&str> = got.entries.iter().map(|e| e.key.as_str()).collect();
    ensure(keys.len() == 6, || format!("keys {keys:?}"))?;
    for e in &mut got.entries {
        if e.key == "result_count" {
            ensure(e.value.tag() == TypeTag::NumberType, || {
                "result_count is not a number".into()
            })?;
            e.value = Value::Null;
        }
    }
    let expected: StateSnapshot = serde_json::from_str(EXAMPLE_ONE_FINAL).unwrap();
    ensure(got.to_canonical() == expected.to_canonical(), || {
        format!("final state differs:\n{}", got.to_canonical())
    })?;
    within(elapsed, GOLDEN_BUDGET)
}

fn golden_example_two() -> Check {
    let s = shipped("example_2_weather_fallback");
    let start = Instant::now();
    let t = s.run(0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let tool_steps: Vec<_> = t.steps.iter().filter(|s| !s.attempts.is_empty()).collect();
    ensure(tool_steps.len() == 1, || {
        format!("{} tool steps", tool_steps.len())
    })?;
    let attempts = &tool_steps[0].attempts;
    ensure(attempts.len() == 2, || {
        format!("{} attempts", attempts.len())
    })?;
    let Verdict::Executed { acceptance } = &attempts[0].verdict else {
        return Err("first attempt was not executed".into());
    };
    ensure(!acceptance.passed, || "first attempt passed".into())?;
    ensure(
        acceptance.category.map(|c| c.side()) == Some(Side::Post),
        || "first rejection is not post-side".into(),
    )?;
    let atom = acceptance.failing_atom.as_ref().map(ToString::to_string);
    ensure(
        atom.as_deref() == Some("has_field(result.humidity)"),
        || format!("failing atom {atom:?}"),
    )?;
    ensure(
        attempts[1].passed()
            && tool_steps[0].committed_tool.as_deref() == Some(attempts[1].tool_id.as_str()),
        || "second attempt not committed".into(),
    )?;
    let state = t.final_state();
    for (key, want) in [
        ("temperature", Value::Number(72.0)),
        ("condition", Value::Text("sunny".into())),
        ("humidity", Value::Number(65.0)),
        ("wind_speed", Value::Number(10.0)),
        ("pressure", Value::Number(1013.0)),
    ] {
        let got = state
            .entries
            .iter()
            .find(|e| e.key == key)
            .map(|e| &e.value);
        ensure(got == Some(&want), || format!("{key} = {got:?}"))?;
    }
    within(elapsed, GOLDEN_BUDGET)
}

fn golden_listfiles() -> Check {
    let s = shipped("listfiles_g6");
    let t = s.run(0).map_err(|e| e.to_string())?;
    let step = t
        .steps
        .iter()
        .find(|s| s.committed_tool.is_some())
        .ok_or("nothing committed")?;
    ensure(step.committed_tool.as_deref() == Some("ListFiles"), || {
        format!("committed {:?}", step.committed_tool)
    })?;
    let pre = t.initial_state.clone();
    let listing = Value::List(vec![
        Value::Text("lib.rs".into()),
        Value::Text("main.rs".into()),
    ]);
    let mut expected = serde_json::to_value(&pre).unwrap();
    expected["version"] = serde_json::json!(pre.version + 1);
    let entries = expected["entries"].as_array_mut().unwrap();
    entries.push(serde_json::json!({
        "key": "last_ls", "type": "ListType", "value": serde_json::to_value(&listing).unwrap(),
        "provenance": "tool_commit:ListFiles", "step": step.index,
    }));
    entries.sort_by(|a, b| a["key"].as_str().cmp(&b["key"].as_str()));
    let expected: StateSnapshot = serde_json::from_value(expected).unwrap();
    ensure(
        step.post_state.to_canonical() == expected.to_canonical(),
        || format!("post-state differs:\n{}", step.post_state.to_canonical()),
    )
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> RankDistribution {
    let support: Vec<String> = (0..n).map(|i| format!("t{i:02}")).collect();
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random_bool(0.15) {
                0.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect();
    normalize_scores(support, &raw).unwrap()
}

fn mask(dist: &RankDistribution, keep: &[bool]) -> AdmissibleSet {
    AdmissibleSet {
        mask: dist
            .support
            .iter()
            .cloned()
            .zip(keep.iter().copied())
            .collect::<IndexMap<_, _>>(),
    }
}

#[allow(clippy::needless_range_loop)]
fn filter_property_suite() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..FILTER_CASES {
        let n = rng.random_range(1..=30);
        let dist = random_distribution(&mut rng, n);
        let mut keep: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        if case % 10 == 0 {
            keep.iter_mut().for_each(|k| *k = false);
        }
        let result = filter_renormalize(&dist, &mask(&dist, &keep));
        if keep.iter().all(|k| !k) {
            ensure(matches!(result, Err(PolicyError::NoAdmissibleTool)), || {
                format!("case {case}: {result:?}")
            })?;
            continue;
        }
        let out = result.map_err(|e| format!("case {case}: {e}"))?;
        let sum: f64 = out.probs.iter().sum();
        ensure((sum - 1.0).abs() <= FILTER_TOLERANCE, || {
            format!("case {case}: sum {sum}")
        })?;
        let admitted_mass: f64 = dist
            .probs
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(p, _)| p)
            .sum();
        for i in 0..n {
            if !keep[i] {
                ensure(out.probs[i] == 0.0, || {
                    format!("case {case}: masked tool has mass {}", out.probs[i])
                })?;
            } else if admitted_mass > 0.0 {
                let oracle = dist.probs[i] / admitted_mass;
                ensure((out.probs[i] - oracle).abs() <= FILTER_TOLERANCE, || {
                    format!("case {case}: {} vs {oracle}", out.probs[i])
                })?;
                for j in 0..n {
                    if keep[j] && dist.probs[j] > 0.0 {
                        let before = dist.probs[i] / dist.probs[j];
                        let after = out.probs[i] / out.probs[j];
                        ensure(
                            (before - after).abs() <= FILTER_TOLERANCE * before.max(1.0),
                            || format!("case {case}: ratio {before} became {after}"),
                        )?;
                    }
                }
            }
        }
    }
    within(start.elapsed(), FILTER_BUDGET)
}

#[allow(clippy::needless_range_loop)]
fn sampling_soundness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for d in 0..SAMPLING_DISTRIBUTIONS {
        let n = rng.random_range(2..=12);
        let dist = random_distribution(&mut rng, n);
        let mut keep: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        keep[0] = true;
        let filtered = filter_renormalize(&dist, &mask(&dist, &keep)).map_err(|e| e.to_string())?;
        let mut draws = ChaCha8Rng::seed_from_u64(1000 + d as u64);
        let mut counts = vec![0usize; n];
        for _ in 0..DRAWS_PER_DISTRIBUTION {
            let t = sample_tool(&filtered, &mut draws).map_err(|e| e.to_string())?;
            counts[filtered.support.iter().position(|s| s == t).unwrap()] += 1;
        }
        for i in 0..n {
            let freq = counts[i] as f64 / DRAWS_PER_DISTRIBUTION as f64;
            if filtered.probs[i] == 0.0 {
                ensure(counts[i] == 0, || {
                    format!("distribution {d}: zero-mass tool drawn {} times", counts[i])
                })?;
            }
            ensure(
                (freq - filtered.probs[i]).abs() <= SAMPLING_TOLERANCE,
                || {
                    format!(
                        "distribution {d}: frequency {freq} vs mass {}",
                        filtered.probs[i]
                    )
                },
            )?;
        }
    }
    Ok(())
}

fn random_runs() -> Result<Vec<(Scenario, Trajectory)>, String> {
    (0..SAFETY_SEEDS)
        .map(|seed| {
            let s = Scenario::from_document(random_fault_scenario(seed))
                .map_err(|e| format!("seed {seed}: {e}"))?;
            let t = s.run(seed).map_err(|e| format!("seed {seed}: {e}"))?;
            Ok((s, t))
        })
        .collect()
}

fn clauses_after(name: &str, edit: impl FnOnce(&mut Trajectory)) -> Vec<ViolationClause> {
    let s = shipped(name);
    let mut t = s.run(0).unwrap();
    edit(&mut t);
    for step in &mut t.steps {
        step.post_state_digest = step.post_state.digest();
    }
    match verify_trajectory(&t, &s.contracts) {
        Ok(v) => v.violations.into_iter().map(|v| v.clause).collect(),
        Err(_) => Vec::new(),
    }
}

fn tamper_fixtures() -> Vec<(ViolationClause, Vec<ViolationClause>)> {
    let phantom = clauses_after("all_tools_faulty", |t| {
        let post = &mut t.steps[0].post_state;
        post.entries.extend(
            init_state([("injected".into(), Value::Bool(true), TypeTag::BoolType)])
                .unwrap()
                .snapshot()
                .entries,
        );
        post.version += 1;
    });
    let mismatch = clauses_after("example_2_weather_fallback", |t| {
        let post = &mut t.steps[0].post_state;
        post.entries
            .iter_mut()
            .find(|e| e.key == "humidity")
            .unwrap()
            .value = Value::Number(99.0);
        let carried = post.clone();
        t.steps[1].pre_state_digest = carried.digest();
        t.steps[1].post_state = carried;
    });
    let post_violated = clauses_after("example_2_weather_fallback", |t| {
        let a = t.steps[0].attempts.iter_mut().find(|a| a.passed()).unwrap();
        a.result = Some(ToolOutcome::Ok(
            Value::from_json(r#"{"temperature":72,"condition":"sunny"}"#).unwrap(),
        ));
    });
    let pre_violated = clauses_after("listfiles_g6", |t| {
        t.initial_state.entries.retain(|e| e.key != "cwd");
        t.steps[0].pre_state_digest = t.initial_state.digest();
    });
    vec![
        (ViolationClause::PhantomStateChange, phantom),
        (ViolationClause::UpdateMismatch, mismatch),
        (ViolationClause::PostViolated, post_violated),
        (ViolationClause::PreViolated, pre_violated),
    ]
}

fn safety_soundness(runs: &[(Scenario, Trajectory)], elapsed: Duration) -> Check {
    for (s, t) in runs {
        let v = verify_trajectory(t, &s.contracts).map_err(|e| format!("{}: {e}", s.name))?;
        ensure(v.safe, || format!("{}: {:?}", s.name, v.violations))?;
    }
    for (want, got) in tamper_fixtures() {
        ensure(got.contains(&want), || {
            format!("tamper for {want:?} produced {got:?}")
        })?;
    }
    within(elapsed, SAFETY_BUDGET)
}

/// Reads only the serialized logs: the state version moves exactly when one
/// attempt in the step passed acceptance, and then by exactly one.
fn guarded_commit(runs: &[(Scenario, Trajectory)]) -> Check {
    let mut commits = 0;
    for (s, t) in runs {
        let log = Trajectory::from_jsonl(&t.to_jsonl()).map_err(|e| format!("{}: {e}", s.name))?;
        let mut version = log.initial_state.version;
        for step in &log.steps {
            let passed = step.attempts.iter().filter(|a| a.passed()).count();
            let next = step.post_state.version;
            let ok = match passed {
                0 => next == version,
                1 => next == version + 1,
                _ => false,
            };
            ensure(ok, || {
                format!(
                    "{} step {}: {passed} passed, version {version} -> {next}",
                    s.name, step.index
                )
            })?;
            commits += passed;
            version = next;
        }
    }
    ensure(commits > 0, || "no commits observed".into())
}

const WORDS: [&str; 24] = [
    "weather",
    "forecast",
    "video",
    "search",
    "music",
    "stock",
    "price",
    "news",
    "translate",
    "image",
    "recipe",
    "flight",
    "hotel",
    "map",
    "route",
    "email",
    "calendar",
    "file",
    "list",
    "read",
    "crypto",
    "sports",
    "score",
    "movie",
];

fn phrase(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

fn retrieval_oracle() -> Check {
    let start = Instant::now();
    let embedder = HashingEmbedder::new(HASHING_DIMENSION);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [10usize, 100, 1000] {
        let docs: Vec<serde_json::Value> = (0..n)
            .map(|i| {
                let len = rng.random_range(2..6);
                serde_json::json!({
                    "tool_id": format!("tool_{i:04}"),
                    "tool_name": phrase(&mut rng, 2),
                    "api_name": "call",
                    "description": phrase(&mut rng, len),
                    "tool_input": {"q": {"type": "text", "required": true}},
                })
            })
            .collect();
        let specs = specs_from_values(docs).map_err(|e| e.to_string())?;
        let texts: Vec<String> = specs.iter().map(|s| s.index_text()).collect();
        let ids: Vec<String> = specs.iter().map(|s| s.tool_id.clone()).collect();
        let vectors = embedder.embed(&texts).map_err(|e| e.to_string())?;
        let index = build_index(specs, &embedder).map_err(|e| e.to_string())?;
        for q in 0..20 {
            let query = phrase(&mut rng, 3);
            let qv = embedder
                .embed(std::slice::from_ref(&query))
                .unwrap()
                .pop()
                .unwrap();
            let mut scan: Vec<(String, f64)> = ids
                .iter()
                .cloned()
                .zip(vectors.iter().map(|v| oracle_cosine(&qv, v)))
                .collect();
            scan.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for k in [1, 10, n] {
                let got = retrieve_topk(&index, &query, k, &embedder).map_err(|e| e.to_string())?;
                let same = got.len() == k.min(n)
                    && got.iter().zip(&scan).all(|(g, (id, sim))| {
                        &g.tool_id == id && g.similarity.to_bits() == sim.to_bits()
                    });
                ensure(same, || {
                    format!("n={n} query {q} k={k} differs from the exhaustive scan")
                })?;
            }
        }
    }
    within(start.elapsed(), RETRIEVAL_BUDGET)
}

const SUITE_TABLE: &str = "\
Category                        Count     Rate
----------------------------------------------
Pre-execution (precondition)       13    17.3%
  Value/Entity Hallucination        6     8.0%
  Schema & Format Violation         4     5.3%
  State Dependency Missing          3     4.0%
Post-execution (postcondition)      9    12.0%
  Empty/Null                        5     6.7%
  Semantic Constraint Mismatch      3     4.0%
  State Update Inconsistency        1     1.3%
Combined rejection rate            22    29.3%
Total tool-calling requests: 75
";

fn rejection_accounting() -> Check {
    let mut logs = Vec::new();
    for doc in fault_suite() {
        let s = Scenario::from_document(doc).map_err(|e| e.to_string())?;
        logs.push(s.run(0).map_err(|e| e.to_string())?);
    }
    let r = build_rejection_report(&logs);
    let counts: Vec<usize> = RejectionCategory::ALL.iter().map(|c| r.totals[c]).collect();
    ensure(counts == [6, 4, 3, 5, 3, 1], || {
        format!("category counts {counts:?}")
    })?;
    ensure(
        (
            r.total_requests,
            r.subtotal_pre,
            r.subtotal_post,
            r.rejections,
        ) == (75, 13, 9, 22),
        || {
            format!(
                "totals ({}, {}, {}, {})",
                r.total_requests, r.subtotal_pre, r.subtotal_post, r.rejections
            )
        },
    )?;
    ensure(r.combined_rate == 22.0 / 75.0, || {
        format!("combined rate {}", r.combined_rate)
    })?;
    let table = r.render_table();
    ensure(table == SUITE_TABLE, || format!("table layout:\n{table}"))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str, out: &Path| {
        Command::new(env!("CARGO_BIN_EXE_toolcontract"))
            .args([
                "run",
                "--scenario",
                name,
                "--seed",
                "7",
                "--mode",
                "greedy",
                "--out",
            ])
            .arg(out)
            .env_remove("TOOLCONTRACT_LLM_URL")
            .output()
            .map_err(|e| e.to_string())
    };
    for (name, _) in SHIPPED_SCENARIOS {
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        run(name, &a)?;
        run(name, &b)?;
        let (a, b) = (
            fs::read(&a).map_err(|e| e.to_string())?,
            fs::read(&b).map_err(|e| e.to_string())?,
        );
        ensure(!a.is_empty() && a == b, || format!("{name}: logs differ"))?;
    }
    Ok(())
}

fn main() {
    // Harness flags such as --nocapture or a test filter are accepted and ignored.
    let mut failures = 0;
    let mut report = |name: &str, start: Instant, result: Check| {
        let ms = start.elapsed().as_millis();
        match result {
            Ok(()) => println!("PASS  {name} ({ms} ms)"),
            Err(why) => {
                failures += 1;
                println!("FAIL  {name} ({ms} ms): {why}");
            }
        }
    };

    let t = Instant::now();
    report(
        "golden trace: YouTube tutorial search",
        t,
        golden_example_one(),
    );
    let t = Instant::now();
    report(
        "golden trace: weather fallback after postcondition failure",
        t,
        golden_example_two(),
    );
    let t = Instant::now();
    report("golden trace: ListFiles post-state", t, golden_listfiles());
    let t = Instant::now();
    report(
        "filter and renormalize properties (1000 cases)",
        t,
        filter_property_suite(),
    );
    let t = Instant::now();
    report(
        "sampling soundness (50 distributions)",
        t,
        sampling_soundness(),
    );

    let t = Instant::now();
    let runs = random_runs();
    let elapsed = t.elapsed();
    match runs {
        Ok(runs) => {
            report(
                "safety soundness (500 random runs, 4 tamper fixtures)",
                t,
                safety_soundness(&runs, elapsed),
            );
            let t = Instant::now();
            report("guarded commit from logs", t, guarded_commit(&runs));
            let distinct: BTreeSet<usize> = runs.iter().map(|(s, _)| s.tools.len()).collect();
            println!(
                "      random tool counts span {:?}..={:?}",
                distinct.first(),
                distinct.last()
            );
        }
        Err(e) => {
            report(
                "safety soundness (500 random runs, 4 tamper fixtures)",
                t,
                Err(e.clone()),
            );
            report("guarded commit from logs", t, Err(e));
        }
    }

    let t = Instant::now();
    report(
        "retrieval equals exhaustive cosine scan",
        t,
        retrieval_oracle(),
    );
    let t = Instant::now();
    report(
        "rejection accounting over the fault suite",
        t,
        rejection_accounting(),
    );
    let t = Instant::now();
    report("byte-identical runs for a fixed seed", t, determinism());

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
