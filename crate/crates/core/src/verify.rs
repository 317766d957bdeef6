//! Offline checks over recorded trajectories.
//!
//! [`verify_trajectory`] re-derives every commit from the log alone: the
//! precondition on the pre-state, acceptance of the recorded result, and the
//! update recomputed against the recorded post-state. Steps without a commit
//! must leave the state untouched.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::contracts::{
    check_acceptance, check_precondition, ContractSet, RejectionCategory, Side,
};
use crate::executor::{LogCorrupt, ToolExecutor, ToolOutcome, Trajectory, Verdict};
use crate::symstate::{apply_update, StateSnapshot, SymbolicState, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationClause {
    PreViolated,
    PostViolated,
    UpdateMismatch,
    PhantomStateChange,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub step_index: usize,
    pub clause: ViolationClause,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub safe: bool,
    pub violations: Vec<Violation>,
}

fn load(snapshot: &StateSnapshot, line: usize) -> Result<SymbolicState, LogCorrupt> {
    snapshot.to_state().map_err(|e| LogCorrupt {
        line,
        message: format!("unloadable state snapshot: {e}"),
    })
}

/// Checks every step of `trajectory` against `contracts`.
///
/// Line numbers in [`LogCorrupt`] refer to the JSONL form: the header is
/// line 1 and step `k` is line `k + 2`.
pub fn verify_trajectory(
    trajectory: &Trajectory,
    contracts: &ContractSet,
) -> Result<SafetyVerdict, LogCorrupt> {
    let mut violations = Vec::new();
    let mut pre_snapshot = &trajectory.initial_state;
    let mut pre = load(pre_snapshot, 1)?;

    for (i, step) in trajectory.steps.iter().enumerate() {
        let line = i + 2;
        let k = step.index;
        let mut flag = |clause, detail: String| {
            violations.push(Violation {
                step_index: k,
                clause,
                detail,
            })
        };

        if step.pre_state_digest != pre_snapshot.digest() {
            flag(
                ViolationClause::PhantomStateChange,
                "state changed between steps".into(),
            );
        }
        if step.post_state_digest != step.post_state.digest() {
            return Err(LogCorrupt {
                line,
                message: "post-state digest does not match its snapshot".into(),
            });
        }
        let post = load(&step.post_state, line)?;

        for a in step.attempts.iter().filter(|a| a.executed()) {
            let Some(contract) = contracts.get(&a.tool_id) else {
                flag(
                    ViolationClause::PreViolated,
                    format!("`{}` executed without a contract", a.tool_id),
                );
                continue;
            };
            if let Some(atom) = check_precondition(contract, &pre).failing_atom {
                flag(
                    ViolationClause::PreViolated,
                    format!("`{}` executed although `{atom}` does not hold", a.tool_id),
                );
            }
        }

        let passed: Vec<_> = step.attempts.iter().filter(|a| a.passed()).collect();
        let changed = step.post_state != *pre_snapshot;
        let committed = match (&step.committed_tool, passed.as_slice()) {
            (Some(tool), [a]) if a.tool_id == *tool => Some(*a),
            (None, _) => None,
            (Some(tool), _) => {
                flag(
                    ViolationClause::PhantomStateChange,
                    format!("commit of `{tool}` is not backed by exactly one accepted attempt ({} found)", passed.len()),
                );
                None
            }
        };

        match committed {
            None if changed => flag(
                ViolationClause::PhantomStateChange,
                "state changed without an accepted commit".into(),
            ),
            None => {}
            Some(attempt) => {
                let contract = contracts.get(&attempt.tool_id);
                let result = attempt.result.as_ref().and_then(ToolOutcome::value);
                match (contract, result) {
                    (Some(contract), Some(result)) => {
                        let event = check_acceptance(contract, &pre, result);
                        if !event.passed {
                            let why = event
                                .failing_atom
                                .map(|a| a.to_string())
                                .or(event.detail)
                                .unwrap_or_default();
                            flag(
                                ViolationClause::PostViolated,
                                format!("`{}` result not acceptable: {why}", attempt.tool_id),
                            );
                        }
                        match apply_update(&pre, &contract.update, result, &contract.tool_id, k) {
                            Ok(expected) if expected.snapshot() == step.post_state => {}
                            Ok(_) => flag(
                                ViolationClause::UpdateMismatch,
                                "recorded post-state differs from the update".into(),
                            ),
                            Err(e) => flag(
                                ViolationClause::UpdateMismatch,
                                format!("update cannot be applied: {e}"),
                            ),
                        }
                    }
                    (None, _) => flag(
                        ViolationClause::PostViolated,
                        format!("`{}` has no contract", attempt.tool_id),
                    ),
                    (_, None) => flag(
                        ViolationClause::PostViolated,
                        "committed attempt has no result value".into(),
                    ),
                }
            }
        }
        pre_snapshot = &step.post_state;
        pre = post;
    }
    Ok(SafetyVerdict {
        safe: violations.is_empty(),
        violations,
    })
}

/// A dry-run probe for [`check_admissible`].
pub struct Probe<'a> {
    pub tools: &'a mut dyn ToolExecutor,
    pub params: Value,
}

/// Statically, the precondition. With a probe, the tool is also executed and
/// its result must pass well-formedness and the postcondition.
pub fn check_admissible(
    tool_id: &str,
    contracts: &ContractSet,
    state: &SymbolicState,
    probe: Option<Probe<'_>>,
) -> bool {
    let Some(contract) = contracts.get(tool_id) else {
        return false;
    };
    if !check_precondition(contract, state).holds {
        return false;
    }
    match probe {
        None => true,
        Some(p) => match p.tools.execute(tool_id, &p.params) {
            Ok(result) => check_acceptance(contract, state, &result).passed,
            Err(_) => false,
        },
    }
}

/// Rejection counts over a set of trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub trajectories: usize,
    /// Every considered tool call: pre-rejections plus executions.
    pub total_requests: usize,
    pub totals: IndexMap<RejectionCategory, usize>,
    pub subtotal_pre: usize,
    pub subtotal_post: usize,
    pub rejections: usize,
    pub pre_rate: f64,
    pub post_rate: f64,
    pub combined_rate: f64,
}

fn rate(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

pub fn build_rejection_report(trajectories: &[Trajectory]) -> RejectionReport {
    let mut totals: IndexMap<RejectionCategory, usize> =
        RejectionCategory::ALL.iter().map(|c| (*c, 0)).collect();
    let mut total_requests = 0;
    for attempt in trajectories
        .iter()
        .flat_map(|t| &t.steps)
        .flat_map(|s| &s.attempts)
    {
        total_requests += 1;
        if let Some(c) = attempt.rejection() {
            *totals.get_mut(&c).expect("all categories present") += 1;
        } else if let Verdict::Executed { acceptance } = &attempt.verdict {
            debug_assert!(acceptance.passed);
        }
    }
    let side_total = |side| {
        totals
            .iter()
            .filter(|(c, _)| c.side() == side)
            .map(|(_, n)| n)
            .sum::<usize>()
    };
    let subtotal_pre = side_total(Side::Pre);
    let subtotal_post = side_total(Side::Post);
    let rejections = subtotal_pre + subtotal_post;
    RejectionReport {
        trajectories: trajectories.len(),
        total_requests,
        subtotal_pre,
        subtotal_post,
        rejections,
        pre_rate: rate(subtotal_pre, total_requests),
        post_rate: rate(subtotal_post, total_requests),
        combined_rate: rate(rejections, total_requests),
        totals,
    }
}

impl RejectionReport {
    /// Plain-text table: one block per phase, one row per category.
    pub fn render_table(&self) -> String {
        let pct = |n: usize| format!("{:.1}%", 100.0 * rate(n, self.total_requests));
        let mut rows: Vec<(String, String, String)> = Vec::new();
        for (side, title, subtotal) in [
            (Side::Pre, "Pre-execution (precondition)", self.subtotal_pre),
            (
                Side::Post,
                "Post-execution (postcondition)",
                self.subtotal_post,
            ),
        ] {
            rows.push((title.to_string(), subtotal.to_string(), pct(subtotal)));
            for (c, n) in self.totals.iter().filter(|(c, _)| c.side() == side) {
                rows.push((format!("  {}", c.label()), n.to_string(), pct(*n)));
            }
        }
        rows.push((
            "Combined rejection rate".into(),
            self.rejections.to_string(),
            pct(self.rejections),
        ));
        let w0 = rows
            .iter()
            .map(|r| r.0.len())
            .max()
            .unwrap_or(0)
            .max("Category".len());
        let w1 = rows
            .iter()
            .map(|r| r.1.len())
            .max()
            .unwrap_or(0)
            .max("Count".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<w0$}  {:>w1$}  {:>7}", "Category", "Count", "Rate");
        let _ = writeln!(out, "{}", "-".repeat(w0 + w1 + 11));
        for (label, n, p) in rows {
            let _ = writeln!(out, "{label:<w0$}  {n:>w1$}  {p:>7}");
        }
        let _ = writeln!(out, "Total tool-calling requests: {}", self.total_requests);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_all_zero() {
        let r = build_rejection_report(&[]);
        assert_eq!(
            (r.total_requests, r.rejections, r.combined_rate),
            (0, 0, 0.0)
        );
        assert_eq!(r.totals.len(), 6);
        let table = r.render_table();
        assert!(table.contains("Pre-execution"));
        assert!(table.contains("State Update Inconsistency"));
        assert!(table.contains("Combined rejection rate"));
    }
}
