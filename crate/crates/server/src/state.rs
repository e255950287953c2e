//! The session shared between the proxy loop and the consent API.
//!
//! All authorizer calls go through one mutex, so consent answers from the
//! panel, the TTY and the timeout are serialized with call processing.

use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use leash_core::abstraction::RawCall;
use leash_core::authorizer::{AuditRecord, Outcome, PendingAsk, Session, SessionError};
use leash_core::dsl::{parse_rule, DslError};
use leash_core::policy::{save_policy, PolicyError, Rule, RuleId};
use thiserror::Error;
use tokio::sync::{broadcast, oneshot, watch};

#[derive(Debug, Error)]
pub enum StateError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invariant: {0}")]
    Dsl(#[from] DslError),
    #[error("invariants must be deny rules")]
    NotDeny,
}

/// Where decisions are written besides memory.
#[derive(Debug, Default)]
pub struct Persistence {
    /// Rewritten whenever the rule set changes.
    pub policy_path: Option<PathBuf>,
    /// Receives one JSON line per audit record.
    pub audit_log: Option<File>,
}

pub enum Authorization {
    Done(Outcome),
    /// The call waits for a consent answer, delivered on the receiver.
    Held(PendingAsk, oneshot::Receiver<Outcome>),
}

struct Inner {
    session: Session,
    published: usize,
    waiter: Option<(u64, oneshot::Sender<Outcome>)>,
    persistence: Persistence,
}

pub struct Shared {
    inner: Mutex<Inner>,
    audit_tx: broadcast::Sender<AuditRecord>,
    pending_tx: watch::Sender<Option<PendingAsk>>,
}

impl Shared {
    pub fn new(session: Session, persistence: Persistence) -> Arc<Self> {
        let (audit_tx, _) = broadcast::channel(1024);
        let (pending_tx, _) = watch::channel(None);
        Arc::new(Shared {
            inner: Mutex::new(Inner { session, published: 0, waiter: None, persistence }),
            audit_tx,
            pending_tx,
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Sends audit records appended since the last call to every sink.
    fn publish(&self, inner: &mut Inner) {
        let records = &inner.session.audit()[inner.published..];
        for r in records {
            if let Some(f) = inner.persistence.audit_log.as_mut() {
                let line = serde_json::to_string(r).expect("audit records serialize");
                if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                    tracing::warn!("audit log write failed: {e}");
                }
            }
            let _ = self.audit_tx.send(r.clone());
        }
        inner.published = inner.session.audit().len();
    }

    fn persist_policy(inner: &Inner) {
        let Some(path) = &inner.persistence.policy_path else { return };
        let tmp = path.with_extension("tmp");
        let result = std::fs::write(&tmp, save_policy(inner.session.policy())).and_then(|_| std::fs::rename(&tmp, path));
        if let Err(e) = result {
            tracing::warn!("could not save policy to {}: {e}", path.display());
        }
    }

    pub fn authorize(&self, call: RawCall) -> Result<Authorization, SessionError> {
        let mut inner = self.lock();
        let outcome = inner.session.process_call(call)?;
        self.publish(&mut inner);
        Ok(match outcome {
            Outcome::AwaitConsent(ask) => {
                let (tx, rx) = oneshot::channel();
                inner.waiter = Some((ask.ask_id, tx));
                self.pending_tx.send_replace(Some(ask.clone()));
                Authorization::Held(ask, rx)
            }
            other => Authorization::Done(other),
        })
    }

    /// Answers the pending ask with option `index`.
    pub fn decide(&self, ask_id: u64, index: usize) -> Result<Outcome, SessionError> {
        let mut inner = self.lock();
        let rules_before = inner.session.policy().len();
        let ids_before = inner.session.policy().next_id();
        let outcome = inner.session.resolve_consent(ask_id, index)?;
        self.publish(&mut inner);
        if inner.session.policy().len() != rules_before || inner.session.policy().next_id() != ids_before {
            Self::persist_policy(&inner);
        }
        if let Some((id, tx)) = inner.waiter.take() {
            if id == ask_id {
                let _ = tx.send(outcome.clone());
            }
        }
        self.pending_tx.send_replace(None);
        Ok(outcome)
    }

    pub fn pending(&self) -> Option<PendingAsk> {
        self.lock().session.pending().cloned()
    }

    pub fn watch_pending(&self) -> watch::Receiver<Option<PendingAsk>> {
        self.pending_tx.subscribe()
    }

    pub fn rules(&self) -> Vec<Rule> {
        self.lock().session.policy().rules().cloned().collect()
    }

    /// Parses and installs one invariant.
    pub fn add_invariant(&self, text: &str) -> Result<Rule, StateError> {
        let rule = parse_rule(text)?;
        if rule.action != leash_core::policy::Action::Deny {
            return Err(StateError::NotDeny);
        }
        let mut inner = self.lock();
        let id = inner.session.add_invariant(rule)?;
        Self::persist_policy(&inner);
        Ok(inner.session.policy().get(id).cloned().expect("just added"))
    }

    pub fn revoke(&self, id: RuleId) -> Result<Rule, PolicyError> {
        let mut inner = self.lock();
        let rule = inner.session.revoke(id)?;
        Self::persist_policy(&inner);
        Ok(rule)
    }

    pub fn audit(&self) -> Vec<AuditRecord> {
        self.lock().session.audit().to_vec()
    }

    /// Every record so far plus a live feed of later ones, with no gap between.
    pub fn subscribe_audit(&self) -> (Vec<AuditRecord>, broadcast::Receiver<AuditRecord>) {
        let inner = self.lock();
        let rx = self.audit_tx.subscribe();
        (inner.session.audit()[..inner.published].to_vec(), rx)
    }
}
