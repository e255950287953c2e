//! Call abstraction: projecting a raw tool call onto a boundary.
//!
//! Tool profiles say which effects a tool has and which parameters carry its
//! source and sink. The session context supplies the topology (working
//! directory, user-referenced anchors, internal hosts) used to classify the
//! concrete resources into location classes.

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::lattice::{Boundary, Effect, EffectSet, LocationBound, LocationClass, ResourceGuard, TaintLabel, TaintSet};
use crate::taint::{TaintEnvironment, CTXT_KEY, DEFAULT_SEEDS};

/// The profiles bundled with the crate, covering the fixture servers.
pub const BUNDLED_PROFILES: &str = include_str!("../assets/profiles.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCall {
    pub tool_ref: String,
    #[serde(default)]
    pub params: Map<String, Value>,
    #[serde(default)]
    pub step: u64,
}

impl RawCall {
    pub fn new(tool_ref: impl Into<String>, params: Value) -> Self {
        let params = match params {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        RawCall { tool_ref: tool_ref.into(), params, step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    Filesystem,
    Network,
    #[default]
    Context,
}

impl FromStr for ResourceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "filesystem" => Ok(ResourceKind::Filesystem),
            "network" => Ok(ResourceKind::Network),
            "context" => Ok(ResourceKind::Context),
            _ => Err(format!("unknown sink kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolProfile {
    pub tool_ref: String,
    pub effects: EffectSet,
    pub input_param: Option<String>,
    pub sink_param: Option<String>,
    pub sink_kind: ResourceKind,
}

pub type Profiles = BTreeMap<String, ToolProfile>;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile document: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("profile {tool_ref:?}: {message}")]
    Invalid { tool_ref: String, message: String },
    #[error("profile {0:?} is defined twice")]
    Duplicate(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileDocument {
    #[serde(default)]
    tools: Vec<ProfileRecord>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileRecord {
    pub tool_ref: String,
    pub effects: Vec<String>,
    #[serde(default)]
    pub input_param: Option<String>,
    #[serde(default)]
    pub sink_param: Option<String>,
    #[serde(default)]
    pub sink_kind: Option<String>,
}

impl ProfileRecord {
    /// Checks the record against the enumerated domains.
    pub fn validate(&self) -> Result<ToolProfile, ProfileError> {
        let invalid = |message: String| ProfileError::Invalid { tool_ref: self.tool_ref.clone(), message };
        if self.tool_ref.is_empty() {
            return Err(invalid("tool_ref is empty".into()));
        }
        let mut effects = EffectSet::EMPTY;
        for name in &self.effects {
            let e: Effect = name.parse().map_err(|_| invalid(format!("unknown effect {name:?}")))?;
            effects.insert(e);
        }
        if effects.is_empty() {
            return Err(invalid("effects must not be empty".into()));
        }
        let sink_kind = match &self.sink_kind {
            None => ResourceKind::Context,
            Some(k) => k.parse().map_err(invalid)?,
        };
        if self.sink_param.is_some() != (sink_kind != ResourceKind::Context) {
            return Err(invalid("sink_param is required exactly when sink_kind is filesystem or network".into()));
        }
        Ok(ToolProfile {
            tool_ref: self.tool_ref.clone(),
            effects,
            input_param: self.input_param.clone(),
            sink_param: self.sink_param.clone(),
            sink_kind,
        })
    }
}

pub fn load_profiles(bytes: &[u8]) -> Result<Profiles, ProfileError> {
    let text = String::from_utf8_lossy(bytes);
    let doc: ProfileDocument = toml::from_str(&text)?;
    let mut out = Profiles::new();
    for record in doc.tools {
        let profile = record.validate()?;
        if out.contains_key(&profile.tool_ref) {
            return Err(ProfileError::Duplicate(profile.tool_ref));
        }
        out.insert(profile.tool_ref.clone(), profile);
    }
    Ok(out)
}

pub fn bundled_profiles() -> Profiles {
    load_profiles(BUNDLED_PROFILES.as_bytes()).expect("bundled profiles are valid")
}

// ── session context ──────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session config: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("session config: workdir {0:?} must be an absolute path")]
    RelativeWorkdir(String),
    #[error("session config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionContext {
    pub workdir: String,
    #[serde(default)]
    pub anchors: BTreeSet<String>,
    #[serde(default)]
    pub internal_hosts: Vec<String>,
    #[serde(default = "default_sensitive")]
    pub sensitive: Vec<String>,
    /// Used to expand `~`. Derived from `workdir` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub home: Option<String>,
}

fn default_sensitive() -> Vec<String> {
    DEFAULT_SEEDS.iter().map(|s| s.to_string()).collect()
}

impl SessionContext {
    pub fn new(workdir: impl Into<String>) -> Self {
        SessionContext {
            workdir: workdir.into(),
            anchors: BTreeSet::new(),
            internal_hosts: Vec::new(),
            sensitive: default_sensitive(),
            home: None,
        }
    }

    pub fn load(bytes: &[u8]) -> Result<Self, SessionError> {
        let ctx: SessionContext = toml::from_str(&String::from_utf8_lossy(bytes))?;
        ctx.normalized()
    }

    /// Canonicalizes workdir and anchors and checks the seed patterns.
    pub fn normalized(mut self) -> Result<Self, SessionError> {
        if !self.workdir.starts_with('/') {
            return Err(SessionError::RelativeWorkdir(self.workdir));
        }
        self.workdir = lexical_normalize(&self.workdir).map_err(SessionError::Invalid)?;
        if self.workdir.len() > 1 && self.workdir.ends_with('/') {
            self.workdir.pop();
        }
        let anchors = std::mem::take(&mut self.anchors);
        for a in anchors {
            let key = self.canonical_path(&a).map_err(SessionError::Invalid)?;
            self.anchors.insert(key);
        }
        for s in &self.sensitive {
            ResourceGuard::parse(s).map_err(|e| SessionError::Invalid(format!("sensitive pattern {s:?}: {e}")))?;
        }
        Ok(self)
    }

    pub fn home_dir(&self) -> Option<String> {
        if let Some(h) = &self.home {
            return Some(h.trim_end_matches('/').to_string());
        }
        let mut parts = self.workdir.split('/').skip(1);
        match (parts.next(), parts.next()) {
            (Some("root"), _) => Some("/root".into()),
            (Some("home"), Some(user)) if !user.is_empty() => Some(format!("/home/{user}")),
            _ => None,
        }
    }

    /// Seed guards with `~` expanded when a home directory is known.
    pub fn seeds(&self) -> Vec<ResourceGuard> {
        let home = self.home_dir();
        self.sensitive
            .iter()
            .map(|s| {
                let text = match (&home, s.strip_prefix("~/")) {
                    (Some(h), Some(rest)) => format!("{h}/{rest}"),
                    _ => s.clone(),
                };
                ResourceGuard::parse(&text).expect("validated seed")
            })
            .collect()
    }

    pub fn taint_env(&self) -> TaintEnvironment {
        TaintEnvironment::with_seeds(self.seeds())
    }

    /// Absolute, `~`-expanded, lexically normalized path. A trailing slash is kept.
    pub fn canonical_path(&self, raw: &str) -> Result<String, String> {
        if raw.is_empty() {
            return Err("empty path".into());
        }
        let absolute = if raw == "~" || raw.starts_with("~/") {
            let home = self.home_dir().ok_or_else(|| format!("cannot expand `~` in {raw:?}: no home directory"))?;
            format!("{home}{}", &raw[1..])
        } else if raw.starts_with('~') {
            return Err(format!("cannot expand other users' home in {raw:?}"));
        } else if raw.starts_with('/') {
            raw.to_string()
        } else {
            format!("{}/{raw}", self.workdir.trim_end_matches('/'))
        };
        lexical_normalize(&absolute)
    }

    fn is_internal_host(&self, host: &str) -> bool {
        if host == "localhost" || host.ends_with(".localhost") {
            return true;
        }
        let bare = host.trim_start_matches('[').trim_end_matches(']');
        if let Ok(ip) = bare.parse::<IpAddr>() {
            let private = match ip {
                IpAddr::V4(v4) => v4.is_loopback() || v4.is_private(),
                IpAddr::V6(v6) => v6.is_loopback() || (v6.segments()[0] & 0xfe00) == 0xfc00,
            };
            if private {
                return true;
            }
        }
        self.internal_hosts.iter().any(|pattern| {
            let pattern = pattern.to_ascii_lowercase();
            match pattern.strip_prefix("*.") {
                Some(suffix) => host.len() > suffix.len() && host.ends_with(&format!(".{suffix}")),
                None => host == pattern,
            }
        })
    }
}

/// Collapses `.`, `..` and repeated slashes. Does not touch the filesystem.
fn lexical_normalize(path: &str) -> Result<String, String> {
    if path.contains('\0') {
        return Err(format!("path {path:?} contains a NUL byte"));
    }
    let mut parts: Vec<&str> = Vec::new();
    for seg in path.split('/') {
        match seg {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            s => parts.push(s),
        }
    }
    let mut out = format!("/{}", parts.join("/"));
    let dir_like = path.ends_with('/') || path.ends_with("/.") || path.ends_with("/..");
    if dir_like && out.len() > 1 {
        out.push('/');
    }
    Ok(out)
}

/// A resource key plus the host used for classification (network only).
struct NetResource {
    key: String,
    host: String,
}

fn canonical_network(raw: &str) -> Result<NetResource, String> {
    let raw = raw.trim();
    let email = raw.strip_prefix("mailto:").unwrap_or(raw);
    if !email.contains("://") && !email.contains('/') {
        if let Some((local, domain)) = email.rsplit_once('@') {
            if local.is_empty() || domain.is_empty() || local.contains([' ', ',']) || domain.contains([' ', ',']) {
                return Err(format!("malformed address {raw:?}"));
            }
            let domain = domain.to_ascii_lowercase();
            return Ok(NetResource { key: format!("mailto/{domain}/{local}"), host: domain });
        }
    }
    let with_scheme = if raw.contains("://") { raw.to_string() } else { format!("http://{raw}") };
    let url = url::Url::parse(&with_scheme).map_err(|e| format!("malformed URL {raw:?}: {e}"))?;
    let host = url.host_str().ok_or_else(|| format!("URL {raw:?} has no host"))?.to_ascii_lowercase();
    let host_key = match url.port() {
        Some(p) => format!("{host}:{p}"),
        None => host.clone(),
    };
    Ok(NetResource { key: format!("{host_key}{}", url.path()), host })
}

fn looks_like_network(value: &str) -> bool {
    value.contains("://")
        || value.starts_with("mailto:")
        || (value.contains('@') && !value.contains('/'))
        || value.parse::<IpAddr>().is_ok()
}

pub fn classify_location(ctx: &SessionContext, resource: &str, kind: ResourceKind) -> Result<LocationClass, String> {
    Ok(classify(ctx, resource, kind)?.1)
}

/// Canonical key and class of a resource.
fn classify(ctx: &SessionContext, resource: &str, kind: ResourceKind) -> Result<(String, LocationClass), String> {
    match kind {
        ResourceKind::Context => Ok((CTXT_KEY.to_string(), LocationClass::Ctxt)),
        ResourceKind::Network => {
            let net = canonical_network(resource)?;
            let class = if ctx.is_internal_host(&net.host) { LocationClass::Intnet } else { LocationClass::Extnet };
            Ok((net.key, class))
        }
        ResourceKind::Filesystem => {
            let key = ctx.canonical_path(resource)?;
            let trimmed = key.trim_end_matches('/');
            let class = if ctx.anchors.contains(&key) || ctx.anchors.contains(trimmed) {
                LocationClass::Exact
            } else if trimmed == ctx.workdir || trimmed.starts_with(&format!("{}/", ctx.workdir.trim_end_matches('/'))) {
                LocationClass::Parent
            } else {
                LocationClass::Local
            };
            Ok((key, class))
        }
    }
}

// ── abstraction ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AbstractionError {
    #[error("no profile for tool {0:?}")]
    UnknownTool(String),
    #[error("call to {tool_ref:?}: parameter {param:?} {problem}")]
    MalformedCall { tool_ref: String, param: String, problem: String },
    #[error("call to {tool_ref:?}: {message}")]
    Resource { tool_ref: String, message: String },
    #[error("classifier proposal for {tool_ref:?} rejected: {message}")]
    Classifier { tool_ref: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractCall {
    pub boundary: Boundary,
    pub source_key: String,
    pub sink_key: String,
}

/// An untrusted profile source for tools without a static profile, such as a
/// model-backed extractor. Proposals are validated like profile records.
pub trait Classifier: Send + Sync {
    fn propose(&self, call: &RawCall) -> Result<Proposal, String>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub effects: Vec<String>,
    #[serde(default)]
    pub input_param: Option<String>,
    #[serde(default)]
    pub sink_param: Option<String>,
    #[serde(default)]
    pub sink_kind: Option<String>,
    /// A taint label for the source. Never weaker than the environment's.
    #[serde(default)]
    pub taint: Option<String>,
}

fn string_param<'a>(call: &'a RawCall, name: &str) -> Result<&'a str, AbstractionError> {
    let malformed = |problem: &str| AbstractionError::MalformedCall {
        tool_ref: call.tool_ref.clone(),
        param: name.to_string(),
        problem: problem.to_string(),
    };
    match call.params.get(name) {
        None => Err(malformed("is missing")),
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(malformed("is not a string")),
    }
}

fn bound_for(class: LocationClass, key: &str) -> LocationBound {
    if class == LocationClass::Ctxt {
        LocationBound::class(class)
    } else {
        LocationBound::concrete(class, key)
    }
}

pub fn abstract_call(
    ctx: &SessionContext,
    env: &TaintEnvironment,
    profiles: &Profiles,
    call: &RawCall,
) -> Result<AbstractCall, AbstractionError> {
    abstract_call_with(ctx, env, profiles, None, call)
}

pub fn abstract_call_with(
    ctx: &SessionContext,
    env: &TaintEnvironment,
    profiles: &Profiles,
    classifier: Option<&dyn Classifier>,
    call: &RawCall,
) -> Result<AbstractCall, AbstractionError> {
    let mut proposed_taint = None;
    let proposed_profile;
    let profile = match (profiles.get(&call.tool_ref), classifier) {
        (Some(p), _) => p,
        (None, None) => return Err(AbstractionError::UnknownTool(call.tool_ref.clone())),
        (None, Some(c)) => {
            let rejected = |message: String| AbstractionError::Classifier { tool_ref: call.tool_ref.clone(), message };
            let proposal = c.propose(call).map_err(rejected)?;
            if let Some(t) = &proposal.taint {
                proposed_taint = Some(t.parse::<TaintLabel>().map_err(|e| rejected(e.to_string()))?);
            }
            let record = ProfileRecord {
                tool_ref: call.tool_ref.clone(),
                effects: proposal.effects,
                input_param: proposal.input_param,
                sink_param: proposal.sink_param,
                sink_kind: proposal.sink_kind,
            };
            proposed_profile = record.validate().map_err(|e| rejected(e.to_string()))?;
            &proposed_profile
        }
    };
    let resource_err = |message: String| AbstractionError::Resource { tool_ref: call.tool_ref.clone(), message };

    let (source_key, input_class) = match &profile.input_param {
        None => (CTXT_KEY.to_string(), LocationClass::Ctxt),
        Some(name) => {
            let value = string_param(call, name)?;
            let kind = if looks_like_network(value) { ResourceKind::Network } else { ResourceKind::Filesystem };
            classify(ctx, value, kind).map_err(resource_err)?
        }
    };
    let (sink_key, output_class) = match &profile.sink_param {
        None => (CTXT_KEY.to_string(), LocationClass::Ctxt),
        Some(name) => {
            let value = string_param(call, name)?;
            classify(ctx, value, profile.sink_kind).map_err(resource_err)?
        }
    };

    let mut label = env.query(&source_key);
    if let Some(p) = proposed_taint {
        label = label.combine(p);
    }
    let boundary = Boundary::new(
        bound_for(input_class, &source_key),
        bound_for(output_class, &sink_key),
        TaintSet::from(label),
        profile.effects,
    );
    Ok(AbstractCall { boundary, source_key, sink_key })
}
