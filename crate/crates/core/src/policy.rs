//! Rules, tagged upper sets, frontiers and the three-valued decision.
//!
//! A decision first checks invariants: any invariant whose boundary covers
//! the query denies it outright, whatever the user rules say. Otherwise the
//! user rules covering the query are collected (the tagged upper set), reduced
//! to their minimal elements (the frontier), and the call is decided by the
//! frontier's consensus action. An empty frontier or a split frontier is
//! `ASK`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::Boundary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RuleId(pub u64);

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl FromStr for RuleId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('r')
            .and_then(|n| n.parse().ok())
            .map(RuleId)
            .ok_or_else(|| format!("rule id must look like `r<number>`, got {s:?}"))
    }
}

impl Serialize for RuleId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RuleId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Action {
    Allow,
    Deny,
}

impl Action {
    pub fn opposite(self) -> Action {
        match self {
            Action::Allow => Action::Deny,
            Action::Deny => Action::Allow,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Allow => "ALLOW",
            Action::Deny => "DENY",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    /// Non-overridable; always `DENY`.
    Invariant,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: RuleId,
    pub action: Action,
    pub boundary: Boundary,
    pub origin: Origin,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl Rule {
    fn same_content(&self, other: &Rule) -> bool {
        self.action == other.action && self.origin == other.origin && self.boundary == other.boundary
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Allow,
    Deny,
    Ask,
}

impl From<Action> for Verdict {
    fn from(a: Action) -> Self {
        match a {
            Action::Allow => Verdict::Allow,
            Action::Deny => Verdict::Deny,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Allow => "ALLOW",
            Verdict::Deny => "DENY",
            Verdict::Ask => "ASK",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    /// The violated invariants, the agreeing frontier, or the conflicting frontier.
    pub matched: Vec<RuleId>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub boundary: Boundary,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("rule id {0} is already in use")]
    DuplicateId(RuleId),
    #[error("invariant {0} must be a DENY rule")]
    InvariantMustDeny(RuleId),
    #[error("rule {0} carries a concrete resource; rules hold guards only")]
    ConcreteResource(RuleId),
    #[error("no rule with id {0}")]
    NoSuchRule(RuleId),
    #[error("rule {0} is an invariant and cannot be revoked")]
    InvariantRevocation(RuleId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Policy {
    rules: BTreeMap<RuleId, Rule>,
    history: Vec<HistoryEntry>,
    next_id: u64,
}

fn ids(rules: &[&Rule]) -> String {
    rules.iter().map(|r| r.id.to_string()).collect::<Vec<_>>().join(", ")
}

/// Minimal elements under the strict boundary order.
fn minimal<'a>(set: &[&'a Rule]) -> Vec<&'a Rule> {
    set.iter()
        .filter(|r| !set.iter().any(|s| s.boundary.strictly_below(&r.boundary)))
        .copied()
        .collect()
}

impl Policy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.values()
    }

    pub fn invariants(&self) -> impl Iterator<Item = &Rule> {
        self.rules.values().filter(|r| r.origin == Origin::Invariant)
    }

    pub fn user_rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.values().filter(|r| r.origin == Origin::User)
    }

    pub fn get(&self, id: RuleId) -> Option<&Rule> {
        self.rules.get(&id)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn next_id(&self) -> RuleId {
        RuleId(self.next_id)
    }

    fn validate(rule: &Rule) -> Result<(), PolicyError> {
        if rule.origin == Origin::Invariant && rule.action != Action::Deny {
            return Err(PolicyError::InvariantMustDeny(rule.id));
        }
        if rule.boundary.input.concrete.is_some() || rule.boundary.output.concrete.is_some() {
            return Err(PolicyError::ConcreteResource(rule.id));
        }
        Ok(())
    }

    /// Inserts `rule`. Re-adding a rule with the same action, boundary and
    /// origin is a no-op that returns the id already holding it.
    pub fn add_rule(&mut self, rule: Rule) -> Result<RuleId, PolicyError> {
        Self::validate(&rule)?;
        if let Some(existing) = self.rules.values().find(|r| r.same_content(&rule)) {
            return Ok(existing.id);
        }
        if self.rules.contains_key(&rule.id) {
            return Err(PolicyError::DuplicateId(rule.id));
        }
        self.next_id = self.next_id.max(rule.id.0 + 1);
        let id = rule.id;
        self.rules.insert(id, rule);
        Ok(id)
    }

    /// Inserts a rule under a fresh id.
    pub fn insert(
        &mut self,
        action: Action,
        boundary: Boundary,
        origin: Origin,
        created_at: u64,
    ) -> Result<RuleId, PolicyError> {
        let rule = Rule { id: self.next_id(), action, boundary, origin, created_at };
        self.add_rule(rule)
    }

    /// Removes a user rule. Invariants cannot be revoked.
    pub fn revoke(&mut self, id: RuleId) -> Result<Rule, PolicyError> {
        match self.rules.get(&id) {
            None => Err(PolicyError::NoSuchRule(id)),
            Some(r) if r.origin == Origin::Invariant => Err(PolicyError::InvariantRevocation(id)),
            Some(_) => Ok(self.rules.remove(&id).expect("present")),
        }
    }

    pub(crate) fn remove_unchecked(&mut self, id: RuleId) -> Option<Rule> {
        self.rules.remove(&id)
    }

    /// All rules whose boundary covers `phi`, in id order.
    pub fn tagged_upper_set(&self, phi: &Boundary) -> Vec<&Rule> {
        self.rules.values().filter(|r| phi.leq(&r.boundary)).collect()
    }

    /// Minimal elements of the tagged upper set.
    pub fn frontier(&self, phi: &Boundary) -> Vec<&Rule> {
        minimal(&self.tagged_upper_set(phi))
    }

    /// The decision for `phi` without recording it.
    pub fn evaluate(&self, phi: &Boundary) -> Decision {
        let violated: Vec<&Rule> = self.invariants().filter(|r| phi.leq(&r.boundary)).collect();
        if !violated.is_empty() {
            return Decision {
                verdict: Verdict::Deny,
                matched: violated.iter().map(|r| r.id).collect(),
                reason: format!("violates invariant {}", ids(&violated)),
            };
        }
        let tagged: Vec<&Rule> = self.user_rules().filter(|r| phi.leq(&r.boundary)).collect();
        let front = minimal(&tagged);
        let Some(first) = front.first() else {
            return Decision {
                verdict: Verdict::Ask,
                matched: Vec::new(),
                reason: "no rule covers this boundary".to_string(),
            };
        };
        let action = first.action;
        if front.iter().all(|r| r.action == action) {
            // Rules with equivalent boundaries and the same action count once.
            let mut distinct: Vec<&Rule> = Vec::new();
            for r in &front {
                if !distinct.iter().any(|d| d.boundary.equivalent(&r.boundary)) {
                    distinct.push(r);
                }
            }
            Decision {
                verdict: action.into(),
                matched: distinct.iter().map(|r| r.id).collect(),
                reason: format!("covered by {}", ids(&distinct)),
            }
        } else {
            Decision {
                verdict: Verdict::Ask,
                matched: front.iter().map(|r| r.id).collect(),
                reason: format!("closest rules disagree: {}", {
                    front
                        .iter()
                        .map(|r| format!("{} ({})", r.id, r.action))
                        .collect::<Vec<_>>()
                        .join(", ")
                }),
            }
        }
    }

    /// Decides `phi` and appends the query to the history.
    pub fn decide(&mut self, phi: &Boundary) -> Decision {
        let decision = self.evaluate(phi);
        self.record(phi, decision.verdict);
        decision
    }

    pub fn record(&mut self, phi: &Boundary, verdict: Verdict) {
        self.history.push(HistoryEntry { boundary: phi.to_rule_boundary(), verdict });
    }
}

pub fn tagged_upper_set<'a>(policy: &'a Policy, phi: &Boundary) -> Vec<&'a Rule> {
    policy.tagged_upper_set(phi)
}

pub fn frontier<'a>(policy: &'a Policy, phi: &Boundary) -> Vec<&'a Rule> {
    policy.frontier(phi)
}

pub fn decide(policy: &mut Policy, phi: &Boundary) -> Decision {
    policy.decide(phi)
}

// ── policy file ──────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum PolicyFileError {
    #[error("policy file line {line}, column {column}, at `{path}`: {message}")]
    Schema { path: String, line: usize, column: usize, message: String },
    #[error("policy file rule #{index} under `{section}`: {source}")]
    Invalid {
        section: &'static str,
        index: usize,
        #[source]
        source: PolicyError,
    },
    #[error("policy file rule #{index} under `{section}`: origin must be `{expected}`")]
    OriginMismatch { section: &'static str, index: usize, expected: &'static str },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDocument {
    #[serde(default)]
    invariants: Vec<RuleRecord>,
    #[serde(default)]
    rules: Vec<RuleRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<RuleId>,
    action: Action,
    boundary: Boundary,
    origin: Origin,
    #[serde(default)]
    created_at: u64,
}

/// Parses a policy document. Empty input is the empty policy. Rules without
/// an `id` are numbered after the largest explicit id, in file order.
pub fn load_policy(bytes: &[u8]) -> Result<Policy, PolicyFileError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(Policy::new());
    }
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let doc: PolicyDocument = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        PolicyFileError::Schema {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    let mut next = doc
        .invariants
        .iter()
        .chain(&doc.rules)
        .filter_map(|r| r.id.map(|id| id.0 + 1))
        .max()
        .unwrap_or(0);
    let mut policy = Policy::new();
    for (section, expected, records) in [
        ("invariants", Origin::Invariant, doc.invariants),
        ("rules", Origin::User, doc.rules),
    ] {
        for (index, rec) in records.into_iter().enumerate() {
            if rec.origin != expected {
                return Err(PolicyFileError::OriginMismatch {
                    section,
                    index,
                    expected: if expected == Origin::Invariant { "invariant" } else { "user" },
                });
            }
            let id = rec.id.unwrap_or_else(|| {
                next += 1;
                RuleId(next - 1)
            });
            let rule = Rule {
                id,
                action: rec.action,
                boundary: rec.boundary,
                origin: rec.origin,
                created_at: rec.created_at,
            };
            policy
                .add_rule(rule)
                .map_err(|source| PolicyFileError::Invalid { section, index, source })?;
        }
    }
    Ok(policy)
}

/// Serializes the rules of `policy` (history is per-session and not saved).
pub fn save_policy(policy: &Policy) -> Vec<u8> {
    let record = |r: &Rule| RuleRecord {
        id: Some(r.id),
        action: r.action,
        boundary: r.boundary.clone(),
        origin: r.origin,
        created_at: r.created_at,
    };
    let doc = PolicyDocument {
        invariants: policy.invariants().map(record).collect(),
        rules: policy.user_rules().map(record).collect(),
    };
    let mut out = serde_json::to_vec_pretty(&doc).expect("policy serializes");
    out.push(b'\n');
    out
}
