//! Turning consent answers into rules, and keeping the rule set small.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::lattice::{lift_candidates, Boundary};
use crate::policy::{Action, Origin, Policy, PolicyError, Rule, RuleId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentOption {
    pub label: String,
    /// `None` only for the once-options offered when abstraction failed.
    pub boundary: Option<Boundary>,
    pub durable: bool,
    pub action: Action,
}

impl fmt::Display for ConsentOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl ConsentOption {
    fn new(label: String, boundary: &Boundary, durable: bool, action: Action) -> Self {
        ConsentOption { label, boundary: Some(boundary.clone()), durable, action }
    }
}

/// Upper bound on the number of allow options for one prompt.
pub const MAX_ALLOW_OPTIONS: usize = 8;

/// Prompt options for `phi`, narrowest first: allow once, always allow the
/// exact boundary, always allow each single-step lift, then deny once and
/// deny always.
pub fn generate_options(phi: &Boundary) -> Vec<ConsentOption> {
    let exact = phi.to_rule_boundary();
    let mut out = vec![
        ConsentOption::new("Allow once".into(), &exact, false, Action::Allow),
        ConsentOption::new(format!("Always allow {exact}"), &exact, true, Action::Allow),
    ];
    for lift in lift_candidates(phi).into_iter().take(MAX_ALLOW_OPTIONS - 2) {
        out.push(ConsentOption::new(format!("Always allow {lift}"), &lift, true, Action::Allow));
    }
    out.push(ConsentOption::new("Deny once".into(), &exact, false, Action::Deny));
    out.push(ConsentOption::new(format!("Always deny {exact}"), &exact, true, Action::Deny));
    out
}

/// The only choices when a call could not be abstracted.
pub fn degraded_options() -> Vec<ConsentOption> {
    vec![
        ConsentOption { label: "Allow once".into(), boundary: None, durable: false, action: Action::Allow },
        ConsentOption { label: "Deny once".into(), boundary: None, durable: false, action: Action::Deny },
    ]
}

/// One step of generalization: two rules replaced by one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Merge {
    pub removed: Vec<RuleId>,
    pub kept: RuleId,
    pub boundary: Boundary,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refinement {
    /// The rule now carrying the durable answer (after generalization).
    pub rule: Option<RuleId>,
    pub merges: Vec<Merge>,
}

/// Applies a consent answer. Durable answers insert a user rule and then
/// generalize; once answers leave the policy unchanged.
pub fn refine(policy: &mut Policy, choice: &ConsentOption, now: u64) -> Result<Refinement, PolicyError> {
    let (true, Some(boundary)) = (choice.durable, &choice.boundary) else {
        return Ok(Refinement::default());
    };
    let boundary = boundary.to_rule_boundary();
    let mut id = policy.insert(choice.action, boundary, Origin::User, now)?;
    let merges = generalize(policy);
    for m in &merges {
        if m.removed.contains(&id) {
            id = m.kept;
        }
    }
    Ok(Refinement { rule: Some(id), merges })
}

/// Candidate boundaries that cover both rules, narrowest first.
fn common_covers(a: &Rule, b: &Rule) -> Vec<Boundary> {
    let mut out: Vec<Boundary> = Vec::new();
    let mut push = |c: Boundary| {
        if !out.contains(&c) {
            out.push(c);
        }
    };
    if a.boundary.leq(&b.boundary) {
        push(b.boundary.clone());
    }
    if b.boundary.leq(&a.boundary) {
        push(a.boundary.clone());
    }
    for c in lift_candidates(&a.boundary) {
        if b.boundary.leq(&c) {
            push(c);
        }
    }
    for c in lift_candidates(&b.boundary) {
        if a.boundary.leq(&c) {
            push(c);
        }
    }
    out
}

/// Greedily merges pairs of same-action user rules into a shared cover.
///
/// A merge is taken only when no user rule of the opposite action overlaps
/// the cover and every boundary in the history keeps its current decision.
/// Invariants are never touched. Runs to a fixpoint and returns what merged.
pub fn generalize(policy: &mut Policy) -> Vec<Merge> {
    let mut log = Vec::new();
    while let Some(m) = find_merge(policy) {
        log.push(m);
    }
    log
}

fn find_merge(policy: &mut Policy) -> Option<Merge> {
    let users: Vec<Rule> = policy.user_rules().cloned().collect();
    for (i, a) in users.iter().enumerate() {
        for b in &users[i + 1..] {
            if a.action != b.action {
                continue;
            }
            for cover in common_covers(a, b) {
                let conflict = users
                    .iter()
                    .any(|r| r.action == a.action.opposite() && r.boundary.overlaps(&cover));
                if conflict {
                    continue;
                }
                let mut trial = policy.clone();
                trial.remove_unchecked(a.id);
                trial.remove_unchecked(b.id);
                let created_at = a.created_at.max(b.created_at);
                let kept = if cover == a.boundary {
                    trial.add_rule(a.clone()).ok()?
                } else if cover == b.boundary {
                    trial.add_rule(b.clone()).ok()?
                } else {
                    trial.insert(a.action, cover.clone(), Origin::User, created_at).ok()?
                };
                let preserved = policy
                    .history()
                    .iter()
                    .all(|h| trial.evaluate(&h.boundary).verdict == policy.evaluate(&h.boundary).verdict);
                if preserved {
                    *policy = trial;
                    let removed = [a.id, b.id].into_iter().filter(|id| *id != kept).collect();
                    return Some(Merge { removed, kept, boundary: cover });
                }
            }
        }
    }
    None
}
