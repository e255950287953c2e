mod common;

use common::{corpus_dir, corpus_json, interpret_trace};
use leash_core::abstraction::bundled_profiles;
use leash_core::authorizer::AuditRecord;
use leash_core::lattice::{LocationClass, ResourceGuard, TaintLabel};
use leash_core::policy::Verdict;
use leash_core::replay::{load_corpus, replay, replay_corpus, Label, MetricsReport, Mode};

#[test]
fn corpus_covers_every_category() {
    let traces = load_corpus(&corpus_dir()).unwrap();
    assert!((25..=40).contains(&traces.len()), "{}", traces.len());
    for cat in [
        "benign",
        "escalation-input",
        "escalation-output",
        "escalation-taint",
        "escalation-effect",
        "refined",
        "invariant",
        "multi-server",
    ] {
        assert!(traces.iter().any(|t| t.category == cat), "{cat}");
    }
}

#[test]
fn expected_labels_agree_with_independent_interpreter() {
    for t in corpus_json() {
        let expected: Vec<&str> = t["sequence"].as_array().unwrap().iter().map(|s| s["expected_decision"].as_str().unwrap()).collect();
        assert_eq!(interpret_trace(&t), expected, "trace {}", t["id"]);
    }
}

fn run(mode: Mode) -> MetricsReport {
    let traces = load_corpus(&corpus_dir()).unwrap();
    let (_, report) = replay_corpus(&traces, mode, &bundled_profiles()).unwrap();
    report
}

#[test]
fn use_capability_mode_is_exact() {
    let r = run(Mode::UseCapability);
    assert!(r.mismatches.is_empty(), "{:#?}", r.mismatches);
    assert_eq!((r.step_accuracy, r.trace_accuracy, r.f1), (1.0, 1.0, 1.0));
}

#[test]
fn re_abstract_mode_is_exact() {
    let r = run(Mode::ReAbstract);
    assert!(r.mismatches.is_empty(), "{:#?}", r.mismatches);
    assert_eq!((r.step_accuracy, r.trace_accuracy), (1.0, 1.0));
}

fn without_timing(mut r: MetricsReport) -> MetricsReport {
    r.decide_latency_ms = Default::default();
    r
}

#[test]
fn replay_is_deterministic() {
    let traces = load_corpus(&corpus_dir()).unwrap();
    let profiles = bundled_profiles();
    for mode in [Mode::UseCapability, Mode::ReAbstract] {
        let (a, ra) = replay_corpus(&traces, mode, &profiles).unwrap();
        let (b, rb) = replay_corpus(&traces, mode, &profiles).unwrap();
        assert_eq!(without_timing(ra), without_timing(rb));
        let norm = |rs: &[leash_core::replay::TraceResult]| -> Vec<Vec<AuditRecord>> {
            rs.iter().map(|t| t.audit.iter().map(AuditRecord::normalized).collect()).collect()
        };
        let (na, nb) = (norm(&a), norm(&b));
        assert_eq!(serde_json::to_vec(&na).unwrap(), serde_json::to_vec(&nb).unwrap());
    }
}

#[test]
fn motivating_session_golden() {
    let traces = load_corpus(&corpus_dir()).unwrap();
    let t = traces.iter().find(|t| t.id == "motivating").unwrap();
    for mode in [Mode::UseCapability, Mode::ReAbstract] {
        let r = replay(t, mode, &bundled_profiles()).unwrap();
        use Label::*;
        assert_eq!(r.predicted(), vec![Ask, Ask, Allow, Ask, Ask, Ask, Deny], "{mode:?}");

        // The search of sales/ is answered with a durable parent grant.
        let grant = r.audit.iter().find(|a| a.step == 2 && a.consent.is_some()).unwrap();
        let consent = grant.consent.as_ref().unwrap();
        assert!(consent.durable);
        let rule = consent.rule.unwrap();
        let grant_text = r
            .audit
            .iter()
            .filter_map(|a| a.consent.as_ref())
            .find(|c| c.rule == Some(rule))
            .unwrap()
            .label
            .clone();
        assert!(grant_text.contains("parent(/project/sales/*)"), "{grant_text}");

        // The follow-up inside sales/ is allowed by that rule.
        let follow = r.audit.iter().find(|a| a.step == 3).unwrap();
        assert_eq!((follow.verdict, follow.matched.clone()), (Verdict::Allow, vec![rule]));

        // The invariant blocks the egress of the tainted archive.
        let egress = r.audit.iter().find(|a| a.step == 7).unwrap();
        assert_eq!(egress.verdict, Verdict::Deny);
        let b = egress.boundary.as_ref().unwrap();
        assert!(b.taint.contains(TaintLabel::Tainted));
        assert_eq!(b.output.class, LocationClass::Extnet);
    }
}

#[test]
fn exfiltration_chain_is_tainted_at_egress_when_re_abstracted() {
    let traces = load_corpus(&corpus_dir()).unwrap();
    let t = traces.iter().find(|t| t.id == "motivating").unwrap();
    let r = replay(t, Mode::ReAbstract, &bundled_profiles()).unwrap();
    let at = |step| r.audit.iter().find(|a| a.step == step && a.consent.is_none()).unwrap().boundary.clone().unwrap();
    // read the key, compress it, mail the archive
    assert!(at(5).taint.contains(TaintLabel::Tainted));
    assert_eq!(at(6).output.guard, ResourceGuard::Exact("/tmp/keys.zip".into()));
    assert!(at(6).taint.contains(TaintLabel::Tainted));
    assert!(at(7).taint.contains(TaintLabel::Tainted));
    assert_eq!(at(7).input.guard, ResourceGuard::Exact("/tmp/keys.zip".into()));
}
