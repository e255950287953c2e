//! Trace replay with a scripted user, and accuracy metrics.
//!
//! A trace is one JSON document per line: a session context plus a sequence
//! of annotated tool calls. Each step is decided either from its recorded
//! `capability` or by abstracting the call again with tool profiles. When the
//! engine asks, the scripted user answers with the step's `consent_bound`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::abstraction::{AbstractCall, Profiles, RawCall, SessionContext};
use crate::authorizer::{AuditRecord, FixedClock, Outcome, Session, SessionError};
use crate::dsl::{parse_rule, DslError};
use crate::lattice::{Boundary, EffectSet, LocationBound, LocationClass, ResourceGuard, TaintLabel, TaintSet};
use crate::policy::{Action, Policy, Verdict};
use crate::refinement::ConsentOption;
use crate::taint::CTXT_KEY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Allow,
    Ask,
    Deny,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self != Label::Allow
    }
}

impl From<Verdict> for Label {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Allow => Label::Allow,
            Verdict::Ask => Label::Ask,
            Verdict::Deny => Label::Deny,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    UseCapability,
    ReAbstract,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "use-capability" => Ok(Mode::UseCapability),
            "re-abstract" => Ok(Mode::ReAbstract),
            _ => Err(format!("unknown mode {s:?}; expected use-capability or re-abstract")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaintField {
    One(TaintLabel),
    Many(Vec<TaintLabel>),
}

impl TaintField {
    pub fn to_set(&self) -> TaintSet {
        match self {
            TaintField::One(l) => TaintSet::from(*l),
            TaintField::Many(ls) => ls.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Capability {
    pub l_i: LocationClass,
    pub l_o: LocationClass,
    pub tau: TaintField,
    #[serde(rename = "E")]
    pub effects: EffectSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_i_resource: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_o_resource: Option<String>,
}

impl Capability {
    pub fn boundary(&self) -> Boundary {
        let bound = |class, resource: &Option<String>| match resource {
            Some(r) => LocationBound::concrete(class, r.clone()),
            None => LocationBound::class(class),
        };
        Boundary::new(bound(self.l_i, &self.l_i_resource), bound(self.l_o, &self.l_o_resource), self.tau.to_set(), self.effects)
    }

    fn keys(&self) -> (String, String) {
        let key = |class: LocationClass, resource: &Option<String>| match (class, resource) {
            (LocationClass::Ctxt, _) => CTXT_KEY.to_string(),
            (_, Some(r)) => r.clone(),
            (c, None) => c.to_string(),
        };
        (key(self.l_i, &self.l_i_resource), key(self.l_o, &self.l_o_resource))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeBound {
    pub l_i: LocationClass,
    pub l_o: LocationClass,
    pub tau: TaintField,
    #[serde(rename = "E")]
    pub effects: EffectSet,
}

/// The scripted answer to an ask: "always" at the stated granularity unless
/// `durable` is false.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsentBound {
    /// Lattice point of the grant. Defaults to the step's own classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<LatticeBound>,
    /// Input resource pattern of the grant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<String>,
    #[serde(default = "yes")]
    pub durable: bool,
    #[serde(default = "allow")]
    pub action: Action,
}

fn yes() -> bool {
    true
}

fn allow() -> Action {
    Action::Allow
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceContext {
    pub workdir: String,
    #[serde(default)]
    pub user_intent: String,
    #[serde(default)]
    pub invariants: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub anchors: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub internal_hosts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitive: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub step: u64,
    pub tool_ref: String,
    #[serde(default)]
    pub params: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability: Option<Capability>,
    pub expected_decision: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consent_bound: Option<ConsentBound>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trace {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub category: String,
    pub session_context: TraceContext,
    pub sequence: Vec<Step>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{location}: {message}")]
    Parse { location: String, message: String },
    #[error("trace {id}: step {step} is not after step {prev}")]
    StepOrder { id: String, step: u64, prev: u64 },
    #[error("trace {id}: step {step} expects Ask but has no consent_bound")]
    MissingConsent { id: String, step: u64 },
    #[error("trace {id}: step {step} has no capability")]
    MissingCapability { id: String, step: u64 },
    #[error("trace {id}: invariant {index}: {error}")]
    Invariant { id: String, index: usize, error: DslError },
    #[error("trace {id}: invariant {index} must be a deny rule")]
    InvariantNotDeny { id: String, index: usize },
    #[error("trace {id}: session context: {message}")]
    Context { id: String, message: String },
    #[error("trace {id}: step {step}: consent bound {message}")]
    BadConsent { id: String, step: u64, message: String },
    #[error("trace {id}: step {step}: {error}")]
    Session { id: String, step: u64, error: SessionError },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Trace {
    pub fn validate(&self, mode: Mode) -> Result<(), TraceError> {
        let id = || self.id.clone();
        let mut prev: Option<u64> = None;
        for s in &self.sequence {
            if let Some(p) = prev {
                if s.step <= p {
                    return Err(TraceError::StepOrder { id: id(), step: s.step, prev: p });
                }
            }
            prev = Some(s.step);
            if s.expected_decision == Label::Ask && s.consent_bound.is_none() {
                return Err(TraceError::MissingConsent { id: id(), step: s.step });
            }
            if mode == Mode::UseCapability && s.capability.is_none() {
                return Err(TraceError::MissingCapability { id: id(), step: s.step });
            }
        }
        for (index, text) in self.session_context.invariants.iter().enumerate() {
            let rule = parse_rule(text).map_err(|error| TraceError::Invariant { id: id(), index, error })?;
            if rule.action != Action::Deny {
                return Err(TraceError::InvariantNotDeny { id: id(), index });
            }
        }
        Ok(())
    }

    pub fn session_context(&self) -> Result<SessionContext, TraceError> {
        let c = &self.session_context;
        let mut ctx = SessionContext::new(c.workdir.clone());
        ctx.anchors = c.anchors.iter().cloned().collect();
        ctx.internal_hosts = c.internal_hosts.clone();
        if let Some(s) = &c.sensitive {
            ctx.sensitive = s.clone();
        }
        ctx.normalized().map_err(|e| TraceError::Context { id: self.id.clone(), message: e.to_string() })
    }
}

/// Parses one corpus file. Traces without an `id` are named `<stem>:<line>`.
pub fn parse_traces(text: &str, origin: &str) -> Result<Vec<Trace>, TraceError> {
    let stem = Path::new(origin).file_stem().and_then(|s| s.to_str()).unwrap_or(origin);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut trace: Trace = serde_json::from_str(line).map_err(|e| TraceError::Parse {
            location: format!("{origin}:{}", i + 1),
            message: e.to_string(),
        })?;
        if trace.id.is_empty() {
            trace.id = format!("{stem}:{}", i + 1);
        }
        out.push(trace);
    }
    Ok(out)
}

/// Every `*.jsonl` file directly under `dir`, in name order.
pub fn load_corpus(dir: &Path) -> Result<Vec<Trace>, TraceError> {
    let io = |source| TraceError::Io { path: dir.to_path_buf(), source };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|source| TraceError::Io { path: f.clone(), source })?;
        out.extend(parse_traces(&text, &f.display().to_string())?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub step: u64,
    pub tool_ref: String,
    pub expected: Label,
    pub predicted: Label,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceResult {
    pub id: String,
    pub category: String,
    pub steps: Vec<StepResult>,
    pub audit: Vec<AuditRecord>,
}

impl TraceResult {
    pub fn predicted(&self) -> Vec<Label> {
        self.steps.iter().map(|s| s.predicted).collect()
    }
}

fn consent_option(step: &Step, held: Option<&Boundary>) -> Result<ConsentOption, String> {
    let Some(bound) = &step.consent_bound else {
        // No script for an unexpected ask: let the call through once.
        return Ok(ConsentOption { label: "Allow once".into(), boundary: held.cloned(), durable: false, action: Action::Allow });
    };
    let Some(held) = held else {
        return Ok(ConsentOption { label: "once".into(), boundary: None, durable: false, action: bound.action });
    };
    let mut boundary = match &bound.lattice {
        Some(l) => Boundary::abstract_point(l.l_i, l.l_o, l.tau.to_set(), l.effects),
        None => held.without_guards(),
    };
    if let Some(pattern) = &bound.refinement {
        boundary.input.guard = ResourceGuard::parse(pattern).map_err(|e| format!("refinement {pattern:?}: {e}"))?;
    }
    if !bound.durable {
        boundary = held.to_rule_boundary();
    }
    let label = format!("scripted {}", crate::dsl::render(bound.action, &boundary));
    Ok(ConsentOption { label, boundary: Some(boundary), durable: bound.durable, action: bound.action })
}

/// Replays one trace from an empty user policy.
pub fn replay(trace: &Trace, mode: Mode, profiles: &Profiles) -> Result<TraceResult, TraceError> {
    trace.validate(mode)?;
    let ctx = trace.session_context()?;
    let mut session = Session::new(ctx, profiles.clone(), Policy::new()).with_clock(FixedClock(0));
    for text in &trace.session_context.invariants {
        let rule = parse_rule(text).expect("validated");
        session
            .add_invariant(rule)
            .map_err(|e| TraceError::Context { id: trace.id.clone(), message: e.to_string() })?;
    }
    let mut steps = Vec::new();
    for s in &trace.sequence {
        let session_err = |error| TraceError::Session { id: trace.id.clone(), step: s.step, error };
        let call = RawCall { tool_ref: s.tool_ref.clone(), params: s.params.clone(), step: s.step };
        let outcome = match mode {
            Mode::ReAbstract => session.process_call(call),
            Mode::UseCapability => {
                let cap = s.capability.as_ref().expect("validated");
                let (source_key, sink_key) = cap.keys();
                session.process_boundary(call, AbstractCall { boundary: cap.boundary(), source_key, sink_key })
            }
        }
        .map_err(session_err)?;
        let record = session.audit().last().expect("every call is audited");
        let predicted = Label::from(record.verdict);
        let latency_ms = record.latency_ms;
        if let Outcome::AwaitConsent(p) = outcome {
            let option = consent_option(s, p.boundary.as_ref())
                .map_err(|message| TraceError::BadConsent { id: trace.id.clone(), step: s.step, message })?;
            session.resolve_scripted(option).map_err(session_err)?;
        }
        steps.push(StepResult { step: s.step, tool_ref: s.tool_ref.clone(), expected: s.expected_decision, predicted, latency_ms });
    }
    Ok(TraceResult { id: trace.id.clone(), category: trace.category.clone(), steps, audit: session.audit().to_vec() })
}

// ── metrics ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(&mut self, expected: Label, predicted: Label) {
        match (expected.is_positive(), predicted.is_positive()) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// 1 when nothing was flagged.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// 1 when nothing needed flagging.
    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub traces: u64,
    pub steps: u64,
    pub correct_steps: u64,
    pub step_accuracy: f64,
    pub trace_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl LatencySummary {
    /// Nearest-rank percentiles.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |p: f64| v[((p / 100.0 * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        LatencySummary { p50: rank(50.0), p90: rank(90.0), p99: rank(99.0), max: v[v.len() - 1] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub traces: u64,
    pub steps: u64,
    pub correct_steps: u64,
    pub correct_traces: u64,
    pub step_accuracy: f64,
    pub trace_accuracy: f64,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub decide_latency_ms: LatencySummary,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mismatches: Vec<String>,
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        1.0
    } else {
        n as f64 / d as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace {id}: {predicted} predictions for {steps} steps")]
pub struct ScoreError {
    pub id: String,
    pub predicted: usize,
    pub steps: usize,
}

/// Scores predicted labels for one trace.
pub fn score_trace(predicted: &[Label], trace: &Trace) -> Result<MetricsReport, ScoreError> {
    if predicted.len() != trace.sequence.len() {
        return Err(ScoreError { id: trace.id.clone(), predicted: predicted.len(), steps: trace.sequence.len() });
    }
    let result = TraceResult {
        id: trace.id.clone(),
        category: trace.category.clone(),
        steps: trace
            .sequence
            .iter()
            .zip(predicted)
            .map(|(s, p)| StepResult {
                step: s.step,
                tool_ref: s.tool_ref.clone(),
                expected: s.expected_decision,
                predicted: *p,
                latency_ms: 0.0,
            })
            .collect(),
        audit: Vec::new(),
    };
    Ok(score(&[result]))
}

pub fn score(results: &[TraceResult]) -> MetricsReport {
    let mut r = MetricsReport::default();
    let mut latencies = Vec::new();
    for t in results {
        let cat = r.per_category.entry(if t.category.is_empty() { "uncategorized".into() } else { t.category.clone() }).or_default();
        let mut all = true;
        for s in &t.steps {
            r.confusion.add(s.expected, s.predicted);
            latencies.push(s.latency_ms);
            cat.steps += 1;
            r.steps += 1;
            if s.expected == s.predicted {
                cat.correct_steps += 1;
                r.correct_steps += 1;
            } else {
                all = false;
                r.mismatches.push(format!("{} step {}: expected {:?}, got {:?}", t.id, s.step, s.expected, s.predicted));
            }
        }
        cat.traces += 1;
        r.traces += 1;
        if all {
            cat.trace_accuracy += 1.0;
            r.correct_traces += 1;
        }
    }
    for cat in r.per_category.values_mut() {
        cat.step_accuracy = ratio(cat.correct_steps, cat.steps);
        cat.trace_accuracy = if cat.traces == 0 { 1.0 } else { cat.trace_accuracy / cat.traces as f64 };
    }
    r.step_accuracy = ratio(r.correct_steps, r.steps);
    r.trace_accuracy = ratio(r.correct_traces, r.traces);
    r.precision = r.confusion.precision();
    r.recall = r.confusion.recall();
    r.f1 = r.confusion.f1();
    r.decide_latency_ms = LatencySummary::from_samples(&latencies);
    r
}

/// Replays every trace and scores the lot.
pub fn replay_corpus(traces: &[Trace], mode: Mode, profiles: &Profiles) -> Result<(Vec<TraceResult>, MetricsReport), TraceError> {
    let results = traces.iter().map(|t| replay(t, mode, profiles)).collect::<Result<Vec<_>, _>>()?;
    let report = score(&results);
    Ok((results, report))
}
