//! Deterministic simulated tools, scenario files, and fault injection.

mod faults;
mod mock;
mod scenario;

pub use faults::{fault_suite, random_fault_scenario, SUITE_REJECTIONS, SUITE_REQUESTS};
pub use mock::{MockOutcome, MockToolBehavior, MockTools};
pub use scenario::{
    load_scenario, Expectations, Scenario, ScenarioDocument, ScenarioError, StateSeed,
};

/// Scenario documents bundled with the library, by name.
pub const SHIPPED_SCENARIOS: [(&str, &str); 4] = [
    (
        "example_1_youtube",
        include_str!("../../scenarios/example_1_youtube.json"),
    ),
    (
        "example_2_weather_fallback",
        include_str!("../../scenarios/example_2_weather_fallback.json"),
    ),
    (
        "listfiles_g6",
        include_str!("../../scenarios/listfiles_g6.json"),
    ),
    (
        "all_tools_faulty",
        include_str!("../../scenarios/all_tools_faulty.json"),
    ),
];

pub fn shipped_scenario(name: &str) -> Option<&'static str> {
    SHIPPED_SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}
