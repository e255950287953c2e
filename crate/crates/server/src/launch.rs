//! Building a session from files and starting upstream servers.

use std::path::{Path, PathBuf};
use std::process::Stdio;

use leash_core::abstraction::{bundled_profiles, load_profiles, ProfileError, Profiles, SessionContext, SessionError};
use leash_core::authorizer::Session;
use leash_core::dsl::{parse_invariant_file, DslFileError};
use leash_core::policy::{load_policy, Policy, PolicyError, PolicyFileError};
use thiserror::Error;
use tokio::process::{Child, Command};

use crate::proxy::UpstreamIo;

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Policy { path: PathBuf, source: PolicyFileError },
    #[error("{path}: {source}")]
    Invariants { path: PathBuf, source: DslFileError },
    #[error("{path}: {source}")]
    Profiles { path: PathBuf, source: ProfileError },
    #[error("{path}: {source}")]
    Context { path: PathBuf, source: SessionError },
    #[error("{0}")]
    Invariant(#[from] PolicyError),
    #[error("upstream spec {0:?} has no command")]
    EmptyCommand(String),
    #[error("starting {name}: {source}")]
    Spawn { name: String, source: std::io::Error },
}

fn read(path: &Path) -> Result<Vec<u8>, LaunchError> {
    std::fs::read(path).map_err(|source| LaunchError::Read { path: path.into(), source })
}

#[derive(Debug, Default, Clone)]
pub struct SessionFiles {
    /// Loaded if it exists; decisions are saved back to it.
    pub policy: Option<PathBuf>,
    pub invariants: Option<PathBuf>,
    /// Defaults to the bundled fixture profiles.
    pub profiles: Option<PathBuf>,
    /// Defaults to the current directory as workdir.
    pub context: Option<PathBuf>,
}

pub fn load_profiles_file(path: Option<&Path>) -> Result<Profiles, LaunchError> {
    match path {
        None => Ok(bundled_profiles()),
        Some(p) => load_profiles(&read(p)?).map_err(|source| LaunchError::Profiles { path: p.into(), source }),
    }
}

pub fn build_session(files: &SessionFiles) -> Result<Session, LaunchError> {
    let profiles = load_profiles_file(files.profiles.as_deref())?;
    let ctx = match &files.context {
        Some(p) => SessionContext::load(&read(p)?).map_err(|source| LaunchError::Context { path: p.clone(), source })?,
        None => {
            let cwd = std::env::current_dir().map_err(|source| LaunchError::Read { path: ".".into(), source })?;
            SessionContext::new(cwd.to_string_lossy())
                .normalized()
                .map_err(|source| LaunchError::Context { path: cwd, source })?
        }
    };
    let policy = match &files.policy {
        Some(p) if p.exists() => load_policy(&read(p)?).map_err(|source| LaunchError::Policy { path: p.clone(), source })?,
        _ => Policy::new(),
    };
    let mut session = Session::new(ctx, profiles, policy);
    if let Some(p) = &files.invariants {
        let text = String::from_utf8_lossy(&read(p)?).into_owned();
        let rules = parse_invariant_file(&text).map_err(|source| LaunchError::Invariants { path: p.clone(), source })?;
        for rule in rules {
            // A saved policy already carries the invariants of earlier runs.
            let known = session.policy().invariants().any(|r| r.boundary == rule.boundary);
            if !known {
                session.add_invariant(rule)?;
            }
        }
    }
    Ok(session)
}

/// An upstream given as `name=command args`, or just `command args` with the
/// program's file stem as the name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpstreamSpec {
    pub name: String,
    pub command: String,
}

impl UpstreamSpec {
    pub fn parse(spec: &str) -> Result<Self, LaunchError> {
        let (name, command) = match spec.split_once('=') {
            Some((n, c)) if !n.is_empty() && n.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_') => {
                (n.to_string(), c.trim().to_string())
            }
            _ => {
                let program = spec.split_whitespace().next().unwrap_or_default();
                let stem = Path::new(program).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (stem.replace('.', "_"), spec.trim().to_string())
            }
        };
        if command.is_empty() {
            return Err(LaunchError::EmptyCommand(spec.into()));
        }
        Ok(UpstreamSpec { name, command })
    }

    /// Starts the command through `sh -c` with piped stdio; stderr is inherited.
    pub fn spawn(&self) -> Result<(UpstreamIo, Child), LaunchError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .kill_on_drop(true)
            .spawn()
            .map_err(|source| LaunchError::Spawn { name: self.name.clone(), source })?;
        let reader = Box::new(child.stdout.take().expect("piped"));
        let writer = Box::new(child.stdin.take().expect("piped"));
        Ok((UpstreamIo { name: self.name.clone(), reader, writer }, child))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upstream_specs() {
        let s = UpstreamSpec::parse("fs=npx server-filesystem /tmp").unwrap();
        assert_eq!((s.name.as_str(), s.command.as_str()), ("fs", "npx server-filesystem /tmp"));
        let s = UpstreamSpec::parse("/usr/bin/mcp-git --repo=.").unwrap();
        assert_eq!(s.name, "mcp-git");
        assert_eq!(s.command, "/usr/bin/mcp-git --repo=.");
        assert!(UpstreamSpec::parse("fs=").is_err());
    }
}
