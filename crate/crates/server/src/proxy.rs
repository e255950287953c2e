//! The stdio interposition loop.
//!
//! With one upstream every frame passes through byte for byte and only
//! `tools/call` requests are held for authorization. With several, request
//! ids are rewritten per upstream, `initialize` and `tools/list` fan out, and
//! tools are exposed as `server.tool`.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::sync::Arc;
use std::time::Duration;

use leash_core::abstraction::RawCall;
use leash_core::authorizer::{Outcome, CONSENT_TIMEOUT_SECS};
use serde_json::{json, Map, Value};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use crate::framing::{write_frame, FrameReader};
use crate::jsonrpc::{self, classify, encode, error_response, id_key, result_response, Kind};
use crate::state::{Authorization, Shared};

pub struct UpstreamIo {
    /// Prefix for this server's tools, e.g. `filesystem`.
    pub name: String,
    pub reader: Box<dyn AsyncRead + Send + Unpin>,
    pub writer: Box<dyn AsyncWrite + Send + Unpin>,
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    /// Unanswered asks resolve as deny-once after this long.
    pub consent_timeout: Duration,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig { consent_timeout: Duration::from_secs(CONSENT_TIMEOUT_SECS) }
    }
}

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("no upstream servers configured")]
    NoUpstreams,
    #[error("invalid upstream name {0:?}: names must be non-empty, unique and free of `.`")]
    BadName(String),
    #[error("upstream server {0} exited")]
    UpstreamExited(String),
    #[error("reading from host: {0}")]
    Host(#[source] io::Error),
}

struct CallJob {
    host_id: Value,
    upstream: usize,
    /// What to send upstream once approved.
    frame: Vec<u8>,
    wire_id: Value,
    call: RawCall,
}

enum Event {
    Host(io::Result<Option<Vec<u8>>>),
    Upstream(usize, io::Result<Option<Vec<u8>>>),
    Decided(CallJob, Result<(), Value>),
}

struct Inflight {
    host_id: Value,
    group: Option<u64>,
}

struct Group {
    host_id: Value,
    method: String,
    waiting: usize,
    parts: BTreeMap<usize, Result<Value, Value>>,
}

fn spawn_writer(mut w: Box<dyn AsyncWrite + Send + Unpin>) -> (mpsc::UnboundedSender<Vec<u8>>, JoinHandle<()>) {
    let (tx, mut rx) = mpsc::unbounded_channel::<Vec<u8>>();
    let task = tokio::spawn(async move {
        while let Some(frame) = rx.recv().await {
            if let Err(e) = write_frame(&mut w, &frame).await {
                tracing::debug!("pipe write failed: {e}");
                break;
            }
        }
        // Signals EOF to the other side, e.g. closes a child's stdin.
        let _ = w.shutdown().await;
    });
    (tx, task)
}

fn spawn_reader<R, F>(r: R, events: mpsc::UnboundedSender<Event>, wrap: F)
where
    R: AsyncRead + Send + Unpin + 'static,
    F: Fn(io::Result<Option<Vec<u8>>>) -> Event + Send + 'static,
{
    tokio::spawn(async move {
        let mut frames = FrameReader::new(BufReader::new(r));
        loop {
            let next = frames.next_frame().await;
            let last = match &next {
                Ok(Some(_)) => false,
                Err(e) => e.kind() != io::ErrorKind::InvalidData,
                Ok(None) => true,
            };
            if events.send(wrap(next)).is_err() || last {
                break;
            }
        }
    });
}

/// Authorizes queued calls one at a time, in arrival order.
fn spawn_call_worker(shared: Arc<Shared>, cfg: ProxyConfig, events: mpsc::UnboundedSender<Event>) -> mpsc::UnboundedSender<CallJob> {
    let (tx, mut rx) = mpsc::unbounded_channel::<CallJob>();
    tokio::spawn(async move {
        while let Some(job) = rx.recv().await {
            let verdict = authorize(&shared, &cfg, job.call.clone()).await;
            let result = match verdict {
                Outcome::Execute => Ok(()),
                Outcome::Block { reason, rule } => Err(error_response(
                    &job.host_id,
                    jsonrpc::CONSENT_DENIED,
                    "consent denied",
                    Some(json!({"rule_id": rule, "reason": reason, "tool": job.call.tool_ref})),
                )),
                Outcome::AwaitConsent(_) => unreachable!("authorize waits out every ask"),
            };
            if events.send(Event::Decided(job, result)).is_err() {
                break;
            }
        }
    });
    tx
}

async fn authorize(shared: &Shared, cfg: &ProxyConfig, call: RawCall) -> Outcome {
    let internal = |reason: String| Outcome::Block { reason, rule: None };
    let (ask, mut rx) = match shared.authorize(call) {
        Ok(Authorization::Done(o)) => return o,
        Ok(Authorization::Held(ask, rx)) => (ask, rx),
        Err(e) => return internal(e.to_string()),
    };
    match tokio::time::timeout(cfg.consent_timeout, &mut rx).await {
        Ok(Ok(outcome)) => outcome,
        Ok(Err(_)) => internal("consent channel closed".into()),
        Err(_) => {
            tracing::info!("ask {} timed out; denying once", ask.ask_id);
            match shared.decide(ask.ask_id, ask.deny_once_index()) {
                Ok(o) => o,
                // Answered while the timeout fired.
                Err(_) => rx.await.unwrap_or_else(|_| internal("consent channel closed".into())),
            }
        }
    }
}

struct Router {
    names: Vec<String>,
    multi: bool,
    host: mpsc::UnboundedSender<Vec<u8>>,
    upstreams: Vec<mpsc::UnboundedSender<Vec<u8>>>,
    calls: mpsc::UnboundedSender<CallJob>,
    queued: usize,
    /// Requests awaiting an upstream response, by upstream and wire id.
    inflight: HashMap<(usize, String), Inflight>,
    groups: HashMap<u64, Group>,
    /// Server-to-host requests in multi mode: proxy id → (upstream, original id).
    server_requests: HashMap<String, (usize, Value)>,
    next_id: u64,
}

impl Router {
    fn to_host(&self, v: &Value) {
        let _ = self.host.send(encode(v));
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn idle(&self) -> bool {
        self.queued == 0 && self.inflight.is_empty() && self.groups.is_empty()
    }

    fn send_request(&mut self, upstream: usize, wire_id: Value, frame: Vec<u8>, host_id: Value, group: Option<u64>) {
        self.inflight.insert((upstream, id_key(&wire_id)), Inflight { host_id, group });
        let _ = self.upstreams[upstream].send(frame);
    }

    /// The message with its id replaced, for multi-upstream routing.
    fn rewrite(msg: &Value, id: &Value) -> Value {
        let mut m = msg.clone();
        m["id"] = id.clone();
        m
    }

    fn on_host(&mut self, frame: Vec<u8>) {
        let msg: Value = match serde_json::from_slice(&frame) {
            Ok(v) => v,
            Err(_) => return self.to_host(&error_response(&Value::Null, jsonrpc::PARSE_ERROR, "parse error", None)),
        };
        let kind = match classify(&msg) {
            Ok(k) => k,
            Err((id, code, message)) => return self.to_host(&error_response(&id, code, message, None)),
        };
        match kind {
            Kind::Notification { .. } => {
                for u in &self.upstreams {
                    let _ = u.send(frame.clone());
                }
            }
            Kind::Response { id } => {
                if !self.multi {
                    let _ = self.upstreams[0].send(frame);
                } else if let Some((u, original)) = self.server_requests.remove(&id_key(&id)) {
                    let _ = self.upstreams[u].send(encode(&Self::rewrite(&msg, &original)));
                } else {
                    tracing::warn!("dropping host response to unknown id {id}");
                }
            }
            Kind::Request { id, method } => match method.as_str() {
                "tools/call" => self.on_call(frame, &msg, id),
                "initialize" | "tools/list" if self.multi => self.fan_out(&msg, id, method),
                "ping" if self.multi => self.to_host(&result_response(&id, json!({}))),
                _ if self.multi => {
                    let wire = Value::from(self.fresh_id());
                    let frame = encode(&Self::rewrite(&msg, &wire));
                    self.send_request(0, wire, frame, id, None);
                }
                _ => self.send_request(0, id.clone(), frame, id, None),
            },
        }
    }

    fn on_call(&mut self, frame: Vec<u8>, msg: &Value, id: Value) {
        let params = &msg["params"];
        let Some(name) = params.get("name").and_then(Value::as_str) else {
            return self.to_host(&error_response(&id, jsonrpc::INVALID_PARAMS, "tools/call needs a string `name`", None));
        };
        let arguments = params.get("arguments").cloned().unwrap_or(Value::Object(Map::new()));
        let (upstream, tool_ref, frame, wire_id) = if self.multi {
            let target = name.split_once('.').and_then(|(srv, tool)| Some((self.names.iter().position(|n| n == srv)?, tool)));
            let Some((u, tool)) = target else {
                return self.to_host(&error_response(&id, jsonrpc::INVALID_PARAMS, &format!("unknown tool {name:?}"), None));
            };
            let wire = Value::from(self.fresh_id());
            let mut m = Self::rewrite(msg, &wire);
            m["params"]["name"] = Value::from(tool);
            (u, name.to_string(), encode(&m), wire)
        } else {
            (0, format!("{}.{name}", self.names[0]), frame, id.clone())
        };
        self.queued += 1;
        let job = CallJob { host_id: id, upstream, frame, wire_id, call: RawCall::new(tool_ref, arguments) };
        let _ = self.calls.send(job);
    }

    fn on_decided(&mut self, job: CallJob, result: Result<(), Value>) {
        self.queued -= 1;
        match result {
            Ok(()) => self.send_request(job.upstream, job.wire_id, job.frame, job.host_id, None),
            Err(e) => self.to_host(&e),
        }
    }

    fn fan_out(&mut self, msg: &Value, host_id: Value, method: String) {
        let group = self.fresh_id();
        self.groups.insert(group, Group { host_id: host_id.clone(), method, waiting: self.upstreams.len(), parts: BTreeMap::new() });
        for u in 0..self.upstreams.len() {
            let wire = Value::from(self.fresh_id());
            let frame = encode(&Self::rewrite(msg, &wire));
            self.send_request(u, wire, frame, host_id.clone(), Some(group));
        }
    }

    fn on_upstream(&mut self, u: usize, frame: Vec<u8>) {
        let msg: Value = match serde_json::from_slice(&frame) {
            Ok(v) => v,
            Err(e) => return tracing::warn!("dropping malformed frame from {}: {e}", self.names[u]),
        };
        match classify(&msg) {
            Ok(Kind::Response { id }) => {
                let Some(entry) = self.inflight.remove(&(u, id_key(&id))) else {
                    return tracing::warn!("dropping response from {} to unknown id {id}", self.names[u]);
                };
                match entry.group {
                    Some(g) => {
                        let part = match msg.get("error") {
                            Some(e) => Err(e.clone()),
                            None => Ok(msg["result"].clone()),
                        };
                        self.group_part(g, u, part);
                    }
                    None if self.multi => self.to_host(&Self::rewrite(&msg, &entry.host_id)),
                    None => {
                        let _ = self.host.send(frame);
                    }
                }
            }
            Ok(Kind::Request { id, .. }) if self.multi => {
                let proxy_id = Value::from(format!("leash-{}", self.fresh_id()));
                self.server_requests.insert(id_key(&proxy_id), (u, id));
                self.to_host(&Self::rewrite(&msg, &proxy_id));
            }
            Ok(_) => {
                let _ = self.host.send(frame);
            }
            Err((_, _, problem)) => tracing::warn!("dropping frame from {}: {problem}", self.names[u]),
        }
    }

    fn group_part(&mut self, g: u64, u: usize, part: Result<Value, Value>) {
        let Some(group) = self.groups.get_mut(&g) else { return };
        group.parts.insert(u, part);
        group.waiting -= 1;
        if group.waiting > 0 {
            return;
        }
        let group = self.groups.remove(&g).expect("present");
        let reply = match merge(&self.names, &group) {
            Ok(result) => result_response(&group.host_id, result),
            Err(error) => json!({"jsonrpc": "2.0", "id": group.host_id, "error": error}),
        };
        self.to_host(&reply);
    }

    /// Fails every request still waiting on upstream `u`.
    fn fail_upstream(&mut self, u: usize) {
        let message = format!("upstream server {} exited", self.names[u]);
        let keys: Vec<(usize, String)> = self.inflight.keys().filter(|(x, _)| *x == u).cloned().collect();
        let mut dead: Vec<(String, Inflight)> =
            keys.into_iter().map(|k| (k.1.clone(), self.inflight.remove(&k).expect("listed"))).collect();
        dead.sort_by(|a, b| a.0.cmp(&b.0));
        for (_, entry) in dead {
            match entry.group {
                Some(g) => {
                    if self.groups.remove(&g).is_some() {
                        self.to_host(&error_response(&entry.host_id, jsonrpc::INTERNAL_ERROR, &message, None));
                    }
                }
                None => self.to_host(&error_response(&entry.host_id, jsonrpc::INTERNAL_ERROR, &message, None)),
            }
        }
    }
}

fn merge(names: &[String], group: &Group) -> Result<Value, Value> {
    let ok: Vec<(usize, &Value)> = group.parts.iter().filter_map(|(u, p)| p.as_ref().ok().map(|v| (*u, v))).collect();
    if ok.is_empty() {
        return Err(group.parts.values().find_map(|p| p.clone().err()).unwrap_or(Value::Null));
    }
    for (u, p) in &group.parts {
        if let Err(e) = p {
            tracing::warn!("{} failed {}: {e}", names[*u], group.method);
        }
    }
    match group.method.as_str() {
        "initialize" => {
            let mut result = ok[0].1.clone();
            let mut caps = Map::new();
            for (_, r) in &ok {
                if let Some(c) = r.get("capabilities").and_then(Value::as_object) {
                    for (k, v) in c {
                        caps.entry(k.clone()).or_insert_with(|| v.clone());
                    }
                }
            }
            result["capabilities"] = Value::Object(caps);
            result["serverInfo"] = json!({"name": "leash", "version": env!("CARGO_PKG_VERSION")});
            Ok(result)
        }
        _ => {
            let mut tools = Vec::new();
            for (u, r) in &ok {
                for t in r.get("tools").and_then(Value::as_array).into_iter().flatten() {
                    let mut t = t.clone();
                    if let Some(n) = t.get("name").and_then(Value::as_str) {
                        t["name"] = Value::from(format!("{}.{n}", names[*u]));
                    }
                    tools.push(t);
                }
            }
            Ok(json!({"tools": tools}))
        }
    }
}

/// Runs until the host closes its side and all outstanding work drains, or
/// an upstream exits.
pub async fn run_proxy<R, W>(
    host_in: R,
    host_out: W,
    upstreams: Vec<UpstreamIo>,
    shared: Arc<Shared>,
    cfg: ProxyConfig,
) -> Result<(), ProxyError>
where
    R: AsyncRead + Send + Unpin + 'static,
    W: AsyncWrite + Send + Unpin + 'static,
{
    if upstreams.is_empty() {
        return Err(ProxyError::NoUpstreams);
    }
    let names: Vec<String> = upstreams.iter().map(|u| u.name.clone()).collect();
    for (i, n) in names.iter().enumerate() {
        if n.is_empty() || n.contains('.') || names[..i].contains(n) {
            return Err(ProxyError::BadName(n.clone()));
        }
    }
    let (events_tx, mut events) = mpsc::unbounded_channel();
    let (host, host_task) = spawn_writer(Box::new(host_out));
    let mut writers = Vec::new();
    let mut upstream_tasks = Vec::new();
    for (i, up) in upstreams.into_iter().enumerate() {
        let (tx, task) = spawn_writer(up.writer);
        writers.push(tx);
        upstream_tasks.push(task);
        spawn_reader(up.reader, events_tx.clone(), move |f| Event::Upstream(i, f));
    }
    spawn_reader(host_in, events_tx.clone(), Event::Host);
    let calls = spawn_call_worker(shared, cfg, events_tx);

    let mut r = Router {
        multi: names.len() > 1,
        names,
        host,
        upstreams: writers,
        calls,
        queued: 0,
        inflight: HashMap::new(),
        groups: HashMap::new(),
        server_requests: HashMap::new(),
        next_id: 0,
    };
    let mut host_open = true;
    let mut result = Ok(());
    while host_open || !r.idle() {
        let Some(ev) = events.recv().await else { break };
        match ev {
            Event::Host(Ok(Some(frame))) => r.on_host(frame),
            Event::Host(Ok(None)) => host_open = false,
            Event::Host(Err(e)) if e.kind() == io::ErrorKind::InvalidData => {
                r.to_host(&error_response(&Value::Null, jsonrpc::PARSE_ERROR, &e.to_string(), None));
            }
            Event::Host(Err(e)) => {
                host_open = false;
                result = Err(ProxyError::Host(e));
            }
            Event::Upstream(u, Ok(Some(frame))) => r.on_upstream(u, frame),
            Event::Upstream(u, Err(e)) if e.kind() == io::ErrorKind::InvalidData => {
                tracing::warn!("dropping bad frame from {}: {e}", r.names[u]);
            }
            Event::Upstream(u, end) => {
                if let Err(e) = end {
                    tracing::warn!("reading from {}: {e}", r.names[u]);
                }
                if !host_open && r.idle() {
                    break;
                }
                r.fail_upstream(u);
                result = Err(ProxyError::UpstreamExited(r.names[u].clone()));
                break;
            }
            Event::Decided(job, outcome) => r.on_decided(job, outcome),
        }
    }
    let Router { host, upstreams, calls, .. } = r;
    drop((upstreams, calls, host));
    for t in upstream_tasks {
        let _ = t.await;
    }
    let _ = host_task.await;
    result
}
