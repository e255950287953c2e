use leash_core::policy::{save_policy, Origin};
use leash_server::launch::{build_session, LaunchError, SessionFiles};

#[test]
fn session_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = dir.path().join("session.toml");
    std::fs::write(&ctx, "workdir = \"/project\"\ninternal_hosts = [\"corp.internal\"]\n").unwrap();
    let inv = dir.path().join("invariants.rules");
    std::fs::write(&inv, "# egress\ndeny local -[tainted; write]-> extnet\n\ndeny ctxt -[tainted; write]-> extnet\n").unwrap();
    let policy = dir.path().join("policy.json");
    let files = SessionFiles { policy: Some(policy.clone()), invariants: Some(inv.clone()), profiles: None, context: Some(ctx) };

    // No saved policy yet: the invariants alone.
    let s = build_session(&files).unwrap();
    assert_eq!(s.context().workdir, "/project");
    assert_eq!(s.policy().invariants().count(), 2);

    // A saved policy that already holds them is not doubled up.
    std::fs::write(&policy, save_policy(s.policy())).unwrap();
    let again = build_session(&files).unwrap();
    assert_eq!(again.policy().len(), 2);
    assert!(again.policy().rules().all(|r| r.origin == Origin::Invariant));

    std::fs::write(&inv, "deny local -[tainted; write]-> extnet\nallow ctxt -[; read]-> ctxt\n").unwrap();
    let Err(err) = build_session(&files) else { panic!("allow rule accepted as invariant") };
    assert!(matches!(err, LaunchError::Invariants { .. }), "{err}");
    assert!(err.to_string().contains("invariants.rules"));
}
