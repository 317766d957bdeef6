use std::collections::BTreeSet;

use toolcontract::executor::gen_params;
use toolcontract::executor::{Action, Trajectory};
use toolcontract::registry::{build_index, HashingEmbedder, HASHING_DIMENSION};
use toolcontract::symstate::{init_state, TypeTag, Value};
use toolcontract::toolsim::{
    load_scenario, random_fault_scenario, shipped_scenario, MockTools, Scenario,
};
use toolcontract::verify::{check_admissible, verify_trajectory, Probe, ViolationClause};

fn random_runs(count: u64) -> Vec<(Scenario, Trajectory)> {
    (0..count)
        .map(|seed| {
            let s = Scenario::from_document(random_fault_scenario(seed)).unwrap();
            let t = s.run(seed).unwrap();
            (s, t)
        })
        .collect()
}

#[test]
fn random_trajectories_are_safe_and_respect_engine_invariants() {
    for (s, t) in random_runs(120) {
        let v = verify_trajectory(&t, &s.contracts).unwrap();
        assert!(v.safe, "{}: {:?}", s.name, v.violations);

        let mut failed = BTreeSet::new();
        let mut executions = 0;
        for step in &t.steps {
            for a in &step.attempts {
                if a.executed() {
                    executions += 1;
                    assert!(
                        !failed.contains(&a.tool_id),
                        "{}: retried failed tool {}",
                        s.name,
                        a.tool_id
                    );
                    if !a.passed() {
                        failed.insert(a.tool_id.clone());
                    }
                }
            }
            let passed = step.attempts.iter().filter(|a| a.passed()).count();
            assert_eq!(step.committed_tool.is_some(), passed == 1, "{}", s.name);
            assert_eq!(
                step.post_state_digest != step.pre_state_digest,
                step.committed_tool.is_some()
            );
        }
        assert!(executions <= s.config.kmax * s.config.max_attempts());
    }
}

fn tampered(name: &str, edit: impl FnOnce(&mut Trajectory)) -> Vec<ViolationClause> {
    let s = load_scenario(shipped_scenario(name).unwrap()).unwrap();
    let mut t = s.run(0).unwrap();
    edit(&mut t);
    for step in &mut t.steps {
        step.post_state_digest = step.post_state.digest();
    }
    verify_trajectory(&t, &s.contracts)
        .unwrap()
        .violations
        .into_iter()
        .map(|v| v.clause)
        .collect()
}

fn with_extra_entry(t: &mut Trajectory, step: usize) {
    let mut state = t.steps[step].post_state.to_state().unwrap().snapshot();
    let mut extra = init_state([("injected".to_string(), Value::Bool(true), TypeTag::BoolType)])
        .unwrap()
        .snapshot();
    state.entries.append(&mut extra.entries);
    state.entries.sort_by(|a, b| a.key.cmp(&b.key));
    state.version += 1;
    t.steps[step].post_state = state;
}

#[test]
fn tamper_phantom_state_change() {
    let clauses = tampered("all_tools_faulty", |t| with_extra_entry(t, 0));
    assert!(
        clauses.contains(&ViolationClause::PhantomStateChange),
        "{clauses:?}"
    );
}

#[test]
fn tamper_update_mismatch() {
    let clauses = tampered("example_2_weather_fallback", |t| {
        let post = &mut t.steps[0].post_state;
        let e = post
            .entries
            .iter_mut()
            .find(|e| e.key == "humidity")
            .unwrap();
        e.value = Value::Number(99.0);
        let pre = t.steps[0].post_state.clone();
        t.steps[1].pre_state_digest = pre.digest();
        t.steps[1].post_state = pre;
    });
    assert_eq!(clauses, vec![ViolationClause::UpdateMismatch]);
}

#[test]
fn tamper_post_violated() {
    let clauses = tampered("example_2_weather_fallback", |t| {
        let a = t.steps[0].attempts.iter_mut().find(|a| a.passed()).unwrap();
        a.result = Some(toolcontract::executor::ToolOutcome::Ok(
            Value::from_json(
                r#"{"temperature":72,"condition":"sunny","wind_speed":10,"pressure":1013}"#,
            )
            .unwrap(),
        ));
    });
    assert!(
        clauses.contains(&ViolationClause::PostViolated),
        "{clauses:?}"
    );
}

#[test]
fn tamper_pre_violated() {
    let s = load_scenario(shipped_scenario("listfiles_g6").unwrap()).unwrap();
    let mut t = s.run(0).unwrap();
    let mut initial = t.initial_state.clone();
    initial.entries.retain(|e| e.key != "cwd");
    let digest = initial.digest();
    t.initial_state = initial;
    t.steps[0].pre_state_digest = digest;
    let clauses: Vec<_> = verify_trajectory(&t, &s.contracts)
        .unwrap()
        .violations
        .into_iter()
        .map(|v| v.clause)
        .collect();
    assert!(
        clauses.contains(&ViolationClause::PreViolated),
        "{clauses:?}"
    );
}

#[test]
fn corrupt_digest_is_reported() {
    let s = load_scenario(shipped_scenario("listfiles_g6").unwrap()).unwrap();
    let mut t = s.run(0).unwrap();
    t.steps[0].post_state_digest = "0".repeat(64);
    assert!(verify_trajectory(&t, &s.contracts).is_err());
}

#[test]
fn admissibility_static_and_probed() {
    let g6 = load_scenario(shipped_scenario("listfiles_g6").unwrap()).unwrap();
    assert!(check_admissible(
        "ListFiles",
        &g6.contracts,
        &g6.initial_state,
        None
    ));
    let no_cwd = init_state([(
        "fs".to_string(),
        Value::from_json(r#"{"src":["a"]}"#).unwrap(),
        TypeTag::RecordType,
    )])
    .unwrap();
    assert!(!check_admissible("ListFiles", &g6.contracts, &no_cwd, None));
    assert!(!check_admissible(
        "Unknown",
        &g6.contracts,
        &g6.initial_state,
        None
    ));

    let weather = load_scenario(shipped_scenario("example_2_weather_fallback").unwrap()).unwrap();
    let index = build_index(
        weather.tools.clone(),
        &HashingEmbedder::new(HASHING_DIMENSION),
    )
    .unwrap();
    for (tool, expected) in [
        ("Weather_API_GetCurrentWeather", false),
        ("OpenWeatherMap_CurrentWeather", true),
    ] {
        assert!(check_admissible(
            tool,
            &weather.contracts,
            &weather.initial_state,
            None
        ));
        let params = gen_params(
            index.spec(tool).unwrap(),
            &weather.initial_state,
            None,
            None,
        )
        .unwrap();
        let mut tools = MockTools::new(&weather.behaviors);
        let probe = Probe {
            tools: &mut tools,
            params,
        };
        assert_eq!(
            check_admissible(
                tool,
                &weather.contracts,
                &weather.initial_state,
                Some(probe)
            ),
            expected
        );
    }
}

#[test]
fn malformed_turns_are_recorded_and_corrected() {
    let mut s = load_scenario(shipped_scenario("listfiles_g6").unwrap()).unwrap();
    s.reasoner
        .insert(0, "<start_tool_result>[\"fake\"]<end_tool_result>".into());
    let t = s.run(0).unwrap();
    assert!(matches!(t.steps[0].action, Action::Malformed { .. }));
    assert_eq!(t.steps[0].post_state_digest, t.steps[0].pre_state_digest);
    assert_eq!(t.steps[1].committed_tool.as_deref(), Some("ListFiles"));
}
