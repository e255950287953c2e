//! The taint environment: which resources currently hold sensitive data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::lattice::{Boundary, Effect, ResourceGuard, TaintLabel};

/// Resource key of the agent context.
pub const CTXT_KEY: &str = "ctxt";

/// Seeds installed by the bundled session config.
pub const DEFAULT_SEEDS: [&str; 3] = ["~/.ssh/**", "**/.env", "/etc/shadow"];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaintEnvironment {
    entries: BTreeMap<String, TaintLabel>,
    #[serde(with = "seed_text")]
    seeds: Vec<ResourceGuard>,
}

mod seed_text {
    use super::ResourceGuard;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(seeds: &[ResourceGuard], s: S) -> Result<S::Ok, S::Error> {
        let text: Vec<&str> = seeds.iter().filter_map(|g| g.pattern()).collect();
        text.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<ResourceGuard>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|t| ResourceGuard::parse(t).map_err(serde::de::Error::custom))
            .collect()
    }
}

impl TaintEnvironment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_seeds(seeds: impl IntoIterator<Item = ResourceGuard>) -> Self {
        TaintEnvironment { entries: BTreeMap::new(), seeds: seeds.into_iter().collect() }
    }

    pub fn seeds(&self) -> &[ResourceGuard] {
        &self.seeds
    }

    pub fn entries(&self) -> &BTreeMap<String, TaintLabel> {
        &self.entries
    }

    pub fn set(&mut self, key: impl Into<String>, label: TaintLabel) {
        self.entries.insert(key.into(), label);
    }

    /// Explicit entry, else tainted if a seed matches, else untainted.
    pub fn query(&self, key: &str) -> TaintLabel {
        if let Some(label) = self.entries.get(key) {
            return *label;
        }
        if self.seeds.iter().any(|g| g.matches(key)) {
            TaintLabel::Tainted
        } else {
            TaintLabel::Untainted
        }
    }

    /// The environment after executing `phi` with the given sink and source keys.
    pub fn propagate(&self, phi: &Boundary, sink: &str, source: &str) -> TaintEnvironment {
        let mut next = self.clone();
        next.propagate_in_place(phi, sink, source);
        next
    }

    /// Applies deletion, then kill, then read/write flow.
    pub fn propagate_in_place(&mut self, phi: &Boundary, sink: &str, source: &str) {
        let e = phi.effects;
        if e.contains(Effect::Del) {
            self.entries.remove(source);
        }
        if e.contains(Effect::Exec) || e.contains(Effect::Spawn) {
            self.entries.insert(sink.to_string(), TaintLabel::Tainted);
        }
        if e.contains(Effect::Read) || e.contains(Effect::Write) {
            let flowing = phi.taint.strictest().unwrap_or(TaintLabel::Untainted);
            let label = self.query(sink).combine(flowing);
            self.entries.insert(sink.to_string(), label);
        }
    }
}

pub fn query_taint(env: &TaintEnvironment, key: &str) -> TaintLabel {
    env.query(key)
}

pub fn propagate(env: &TaintEnvironment, phi: &Boundary, sink: &str, source: &str) -> TaintEnvironment {
    env.propagate(phi, sink, source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{EffectSet, LocationClass, TaintSet};

    fn step(taint: TaintLabel, effects: &[Effect]) -> Boundary {
        Boundary::abstract_point(
            LocationClass::Local,
            LocationClass::Ctxt,
            taint,
            effects.iter().copied().collect::<EffectSet>(),
        )
    }

    #[test]
    fn seeded_ssh_key_is_tainted() {
        let env = TaintEnvironment::with_seeds(DEFAULT_SEEDS.iter().map(|s| ResourceGuard::parse(s).unwrap()));
        assert_eq!(env.query("~/.ssh/id_rsa"), TaintLabel::Tainted);
        assert_eq!(env.query("/etc/shadow"), TaintLabel::Tainted);
        assert_eq!(env.query("/home/u/project/.env"), TaintLabel::Tainted);
        assert_eq!(env.query("/home/u/project/main.py"), TaintLabel::Untainted);
    }

    #[test]
    fn fresh_env_is_untainted() {
        assert_eq!(TaintEnvironment::new().query("/anything"), TaintLabel::Untainted);
    }

    #[test]
    fn read_taints_context() {
        let env = TaintEnvironment::new().propagate(&step(TaintLabel::Tainted, &[Effect::Read]), CTXT_KEY, "/etc/shadow");
        assert_eq!(env.query(CTXT_KEY), TaintLabel::Tainted);
    }

    #[test]
    fn exec_taints_sink_unconditionally() {
        let env = TaintEnvironment::new().propagate(&step(TaintLabel::Untainted, &[Effect::Exec]), "/tmp/out", "/bin/sh");
        assert_eq!(env.query("/tmp/out"), TaintLabel::Tainted);
    }

    #[test]
    fn delete_removes_source() {
        let mut env = TaintEnvironment::new();
        env.set("/k", TaintLabel::Tainted);
        let after = env.propagate(&step(TaintLabel::Untainted, &[Effect::Del]), CTXT_KEY, "/k");
        assert!(!after.entries().contains_key("/k"));
        // The caller's value is untouched.
        assert_eq!(env.query("/k"), TaintLabel::Tainted);
    }

    #[test]
    fn taint_is_sticky_under_untainted_writes() {
        let mut env = TaintEnvironment::new();
        env.set("/k", TaintLabel::Tainted);
        env.propagate_in_place(&step(TaintLabel::Untainted, &[Effect::Write]), "/k", CTXT_KEY);
        assert_eq!(env.query("/k"), TaintLabel::Tainted);
    }

    #[test]
    fn empty_taint_set_flows_as_untainted() {
        let mut phi = step(TaintLabel::Untainted, &[Effect::Write]);
        phi.taint = TaintSet::EMPTY;
        let env = TaintEnvironment::new().propagate(&phi, "/k", CTXT_KEY);
        assert_eq!(env.query("/k"), TaintLabel::Untainted);
    }

    #[test]
    fn serde_round_trip() {
        let mut env = TaintEnvironment::with_seeds([ResourceGuard::glob("~/.ssh/**")]);
        env.set("/a", TaintLabel::Tainted);
        let json = serde_json::to_string(&env).unwrap();
        assert_eq!(serde_json::from_str::<TaintEnvironment>(&json).unwrap(), env);
    }
}
