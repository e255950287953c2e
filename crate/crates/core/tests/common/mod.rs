//! Reference implementations used as test oracles.
//!
//! These are written straight from the definitions, favouring obviousness
//! over speed, and share no decision logic with the library.
#![allow(dead_code)]

use std::collections::HashMap;

use leash_core::lattice::{lift_candidates, Boundary, EffectSet, LocationBound, LocationClass, ResourceGuard, TaintSet};
use leash_core::policy::{Action, Verdict};
use serde_json::Value;

pub const CLASS_NAMES: [&str; 6] = ["exact", "parent", "local", "ctxt", "intnet", "extnet"];
/// Immediate covers, by index into `CLASS_NAMES`.
const CLASS_COVERS: [&[usize]; 6] = [&[1], &[2], &[], &[], &[5], &[]];
const CLASS_HEIGHT: [usize; 6] = [0, 1, 2, 0, 0, 1];
pub const TAINT_NAMES: [&str; 2] = ["tainted", "untainted"];
pub const EFFECT_NAMES: [&str; 5] = ["read", "write", "del", "exec", "spawn"];
pub const POINTS: usize = 6 * 6 * 4 * 32;

fn decode(i: usize) -> (usize, usize, usize, usize) {
    (i / (6 * 4 * 32), (i / (4 * 32)) % 6, (i / 32) % 4, i % 32)
}

fn encode(li: usize, lo: usize, t: usize, e: usize) -> usize {
    ((li * 6 + lo) * 4 + t) * 32 + e
}

fn names<'a>(bits: usize, all: &[&'a str]) -> Vec<&'a str> {
    all.iter().enumerate().filter(|(k, _)| bits & (1 << k) != 0).map(|(_, n)| *n).collect()
}

/// The library boundary for oracle point `i`, built from names.
pub fn point(i: usize) -> Boundary {
    let (li, lo, t, e) = decode(i);
    let class = |k: usize| CLASS_NAMES[k].parse::<LocationClass>().unwrap();
    let taint: TaintSet = names(t, &TAINT_NAMES).iter().map(|n| n.parse().unwrap()).collect();
    let effects: EffectSet = names(e, &EFFECT_NAMES).iter().map(|n| n.parse().unwrap()).collect();
    Boundary::abstract_point(class(li), class(lo), taint, effects)
}

pub fn index_of(b: &Boundary) -> usize {
    let class = |c: LocationClass| CLASS_NAMES.iter().position(|n| *n == c.to_string()).unwrap();
    let bits = |items: Vec<String>, all: &[&str]| {
        items.iter().map(|s| 1 << all.iter().position(|n| n == s).unwrap()).sum::<usize>()
    };
    encode(
        class(b.input.class),
        class(b.output.class),
        bits(b.taint.iter().map(|x| x.to_string()).collect(), &TAINT_NAMES),
        bits(b.effects.iter().map(|x| x.to_string()).collect(), &EFFECT_NAMES),
    )
}

/// Reflexive-transitive closure of the hand-written cover relation.
pub struct Closure {
    words: usize,
    reach: Vec<u64>,
}

impl Closure {
    pub fn build() -> Closure {
        let words = POINTS.div_ceil(64);
        let succ = |i: usize| {
            let (li, lo, t, e) = decode(i);
            let mut out = Vec::new();
            for &c in CLASS_COVERS[li] {
                out.push(encode(c, lo, t, e));
            }
            for &c in CLASS_COVERS[lo] {
                out.push(encode(li, c, t, e));
            }
            for k in 0..2 {
                if t & (1 << k) == 0 {
                    out.push(encode(li, lo, t | (1 << k), e));
                }
            }
            for k in 0..5 {
                if e & (1 << k) == 0 {
                    out.push(encode(li, lo, t, e | (1 << k)));
                }
            }
            out
        };
        let height = |i: usize| {
            let (li, lo, t, e) = decode(i);
            CLASS_HEIGHT[li] + CLASS_HEIGHT[lo] + t.count_ones() as usize + e.count_ones() as usize
        };
        let mut order: Vec<usize> = (0..POINTS).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(height(i)));
        let mut reach = vec![0u64; POINTS * words];
        for v in order {
            reach[v * words + v / 64] |= 1 << (v % 64);
            for s in succ(v) {
                for w in 0..words {
                    let bit = reach[s * words + w];
                    reach[v * words + w] |= bit;
                }
            }
        }
        Closure { words, reach }
    }

    pub fn leq(&self, i: usize, j: usize) -> bool {
        self.reach[i * self.words + j / 64] & (1 << (j % 64)) != 0
    }
}

#[derive(Debug, Clone)]
pub struct OracleRule {
    pub action: Action,
    pub boundary: Boundary,
    pub invariant: bool,
}

/// Invariant pre-emption, then consensus over the minimal covering user rules.
pub fn psi(rules: &[OracleRule], phi: &Boundary, leq: &dyn Fn(&Boundary, &Boundary) -> bool) -> Verdict {
    if rules.iter().any(|r| r.invariant && leq(phi, &r.boundary)) {
        return Verdict::Deny;
    }
    let tagged: Vec<&OracleRule> = rules.iter().filter(|r| !r.invariant && leq(phi, &r.boundary)).collect();
    let frontier: Vec<&OracleRule> = tagged
        .iter()
        .filter(|r| {
            !tagged
                .iter()
                .any(|s| leq(&s.boundary, &r.boundary) && !leq(&r.boundary, &s.boundary))
        })
        .copied()
        .collect();
    if frontier.is_empty() {
        return Verdict::Ask;
    }
    if frontier.iter().all(|r| r.action == Action::Allow) {
        Verdict::Allow
    } else if frontier.iter().all(|r| r.action == Action::Deny) {
        Verdict::Deny
    } else {
        Verdict::Ask
    }
}

/// Sequential application of the deletion, kill and read/write rules.
#[derive(Debug, Clone, Default)]
pub struct NaiveTaint {
    pub map: HashMap<String, bool>,
    pub seeded: Vec<String>,
}

impl NaiveTaint {
    pub fn lookup(&self, key: &str) -> bool {
        match self.map.get(key) {
            Some(t) => *t,
            None => self.seeded.iter().any(|s| s == key),
        }
    }

    pub fn step(&mut self, effects: &[&str], tainted: bool, sink: &str, source: &str) {
        if effects.contains(&"del") {
            self.map.remove(source);
        }
        if effects.contains(&"exec") || effects.contains(&"spawn") {
            self.map.insert(sink.to_string(), true);
        }
        if effects.contains(&"read") || effects.contains(&"write") {
            let now = self.lookup(sink) || tainted;
            self.map.insert(sink.to_string(), now);
        }
    }
}

fn capability_boundary(cap: &Value) -> Boundary {
    let class = |k: &str| cap[k].as_str().unwrap().parse::<LocationClass>().unwrap();
    let bound = |k: &str, res: &str| match cap.get(res).and_then(Value::as_str) {
        Some(r) => LocationBound::concrete(class(k), r),
        None => LocationBound::class(class(k)),
    };
    let taint: TaintSet = match &cap["tau"] {
        Value::String(s) => [s.parse().unwrap()].into_iter().collect(),
        Value::Array(a) => a.iter().map(|x| x.as_str().unwrap().parse().unwrap()).collect(),
        other => panic!("bad tau {other}"),
    };
    let effects: EffectSet = cap["E"].as_array().unwrap().iter().map(|x| x.as_str().unwrap().parse().unwrap()).collect();
    Boundary::new(bound("l_i", "l_i_resource"), bound("l_o", "l_o_resource"), taint, effects)
}

fn lifts_in_common(a: &Boundary, b: &Boundary) -> Vec<Boundary> {
    let lb = lift_candidates(b);
    lift_candidates(a).into_iter().filter(|c| lb.iter().any(|d| d.leq(c) && c.leq(d))).collect()
}

fn generalize(rules: &mut Vec<OracleRule>, history: &[Boundary]) {
    let leq = |a: &Boundary, b: &Boundary| a.leq(b);
    'again: loop {
        for i in 0..rules.len() {
            for j in i + 1..rules.len() {
                let (a, b) = (&rules[i], &rules[j]);
                if a.invariant || b.invariant || a.action != b.action {
                    continue;
                }
                for c in lifts_in_common(&a.boundary, &b.boundary) {
                    let mut trial: Vec<OracleRule> =
                        rules.iter().enumerate().filter(|(k, _)| *k != i && *k != j).map(|(_, r)| r.clone()).collect();
                    trial.push(OracleRule { action: a.action, boundary: c, invariant: false });
                    if history.iter().all(|h| psi(&trial, h, &leq) == psi(rules, h, &leq)) {
                        *rules = trial;
                        continue 'again;
                    }
                }
            }
        }
        return;
    }
}

/// Labels for a trace replayed from its recorded capabilities.
pub fn interpret_trace(trace: &Value) -> Vec<&'static str> {
    let leq = |a: &Boundary, b: &Boundary| a.leq(b);
    let mut rules: Vec<OracleRule> = Vec::new();
    for text in trace["session_context"]["invariants"].as_array().unwrap() {
        let rule = leash_core::dsl::parse_rule(text.as_str().unwrap()).unwrap();
        rules.push(OracleRule { action: Action::Deny, boundary: rule.boundary, invariant: true });
    }
    let mut history = Vec::new();
    let mut labels = Vec::new();
    for step in trace["sequence"].as_array().unwrap() {
        let phi = capability_boundary(&step["capability"]);
        let verdict = psi(&rules, &phi, &leq);
        history.push(phi.to_rule_boundary());
        labels.push(match verdict {
            Verdict::Allow => "Allow",
            Verdict::Ask => "Ask",
            Verdict::Deny => "Deny",
        });
        if verdict != Verdict::Ask {
            continue;
        }
        let cb = &step["consent_bound"];
        let durable = cb.get("durable").and_then(Value::as_bool).unwrap_or(true);
        if !durable {
            continue;
        }
        let action = match cb.get("action").and_then(Value::as_str) {
            Some("DENY") => Action::Deny,
            _ => Action::Allow,
        };
        let mut bound = match cb.get("lattice") {
            Some(l) => {
                let mut b = capability_boundary(l);
                b.input.guard = ResourceGuard::Any;
                b.output.guard = ResourceGuard::Any;
                b.to_rule_boundary()
            }
            None => phi.without_guards(),
        };
        if let Some(p) = cb.get("refinement").and_then(Value::as_str) {
            bound.input.guard = ResourceGuard::parse(p).unwrap();
        }
        rules.push(OracleRule { action, boundary: bound, invariant: false });
        generalize(&mut rules, &history);
    }
    labels
}

pub fn corpus_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

/// Every trace in the bundled corpus as raw JSON.
pub fn corpus_json() -> Vec<Value> {
    let mut files: Vec<_> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    files
        .iter()
        .flat_map(|f| {
            std::fs::read_to_string(f)
                .unwrap()
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).unwrap())
                .collect::<Vec<Value>>()
        })
        .collect()
}
