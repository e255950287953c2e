#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use leash_client::ConsentClient;
use leash_core::abstraction::{bundled_profiles, SessionContext};
use leash_core::authorizer::{PendingAsk, Session};
use leash_core::dsl::parse_rule;
use leash_core::policy::Policy;
use leash_server::api;
use leash_server::fake::FakeServer;
use leash_server::framing::{write_frame, FrameReader};
use leash_server::proxy::{run_proxy, ProxyConfig, ProxyError, UpstreamIo};
use leash_server::state::{Persistence, Shared};
use serde_json::{json, Value};
use tokio::io::{duplex, split, BufReader, DuplexStream, ReadHalf, WriteHalf};
use tokio::task::JoinHandle;

pub const EXFIL: &str = "deny local -[tainted; write]-> extnet";

pub fn ctx() -> SessionContext {
    let mut c = SessionContext::new("/project");
    c.internal_hosts = vec!["corp.internal".into()];
    c.sensitive = vec!["/home/*/.ssh/**".into(), "**/.env".into()];
    c.normalized().unwrap()
}

/// A session over the bundled profiles with the given invariants and user rules.
pub fn session(invariants: &[&str], rules: &[&str]) -> Session {
    let mut policy = Policy::new();
    for (i, text) in rules.iter().enumerate() {
        let r = parse_rule(text).unwrap();
        policy.add_rule(r.into_rule(policy.next_id(), leash_core::policy::Origin::User, i as u64)).unwrap();
    }
    let mut s = Session::new(ctx(), bundled_profiles(), policy);
    for text in invariants {
        s.add_invariant(parse_rule(text).unwrap()).unwrap();
    }
    s
}

pub fn fake(name: &str) -> FakeServer {
    FakeServer::from_profiles(name, &bundled_profiles())
}

/// Runs `server` on in-memory pipes.
pub fn spawn_fake(server: FakeServer) -> UpstreamIo {
    let (proxy_side, server_side) = duplex(1 << 20);
    let (sr, sw) = split(server_side);
    let name = server.name.clone();
    tokio::spawn(async move { server.serve(sr, sw).await });
    let (reader, writer) = split(proxy_side);
    UpstreamIo { name, reader: Box::new(reader), writer: Box::new(writer) }
}

pub struct Host {
    pub tx: Option<WriteHalf<DuplexStream>>,
    pub rx: FrameReader<BufReader<ReadHalf<DuplexStream>>>,
}

impl Host {
    pub async fn send_raw(&mut self, bytes: &[u8]) {
        use tokio::io::AsyncWriteExt;
        let tx = self.tx.as_mut().expect("host input open");
        tx.write_all(bytes).await.unwrap();
        tx.flush().await.unwrap();
    }

    pub async fn send(&mut self, v: &Value) {
        write_frame(self.tx.as_mut().expect("host input open"), &serde_json::to_vec(v).unwrap()).await.unwrap();
    }

    pub async fn call(&mut self, id: Value, tool: &str, args: Value) {
        self.send(&json!({"jsonrpc": "2.0", "id": id, "method": "tools/call", "params": {"name": tool, "arguments": args}})).await;
    }

    pub async fn recv_bytes(&mut self) -> Vec<u8> {
        tokio::time::timeout(Duration::from_secs(10), self.rx.next_frame())
            .await
            .expect("timed out waiting for a frame")
            .unwrap()
            .expect("proxy closed its output")
    }

    pub async fn recv(&mut self) -> Value {
        serde_json::from_slice(&self.recv_bytes().await).unwrap()
    }

    pub async fn close(&mut self) {
        use tokio::io::AsyncWriteExt;
        if let Some(mut tx) = self.tx.take() {
            tx.shutdown().await.unwrap();
        }
    }
}

pub fn host_pipes() -> (Host, ReadHalf<DuplexStream>, WriteHalf<DuplexStream>) {
    let (host_side, proxy_side) = duplex(1 << 20);
    let (hr, hw) = split(host_side);
    let (pr, pw) = split(proxy_side);
    (Host { tx: Some(hw), rx: FrameReader::new(BufReader::new(hr)) }, pr, pw)
}

pub struct Harness {
    pub host: Host,
    pub shared: Arc<Shared>,
    pub client: ConsentClient,
    pub addr: std::net::SocketAddr,
    pub proxy: JoinHandle<Result<(), ProxyError>>,
}

impl Harness {
    pub async fn start(session: Session, upstreams: Vec<UpstreamIo>) -> Self {
        Self::start_with(session, Persistence::default(), upstreams, ProxyConfig::default()).await
    }

    pub async fn start_with(session: Session, persistence: Persistence, upstreams: Vec<UpstreamIo>, cfg: ProxyConfig) -> Self {
        let shared = Shared::new(session, persistence);
        let (listener, addr) = api::bind(0).await.unwrap();
        tokio::spawn(api::serve(listener, shared.clone()));
        let (host, pr, pw) = host_pipes();
        let proxy = tokio::spawn(run_proxy(pr, pw, upstreams, shared.clone(), cfg));
        Harness { host, shared, client: ConsentClient::new(format!("http://{addr}")), addr, proxy }
    }

    /// Polls the API until an ask is pending.
    pub async fn wait_pending(&self) -> PendingAsk {
        for _ in 0..500 {
            if let Some(ask) = self.client.pending().await.unwrap() {
                return ask;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("no ask became pending");
    }

    pub async fn finish(mut self) -> Result<(), ProxyError> {
        self.host.close().await;
        tokio::time::timeout(Duration::from_secs(10), self.proxy).await.expect("proxy did not stop").unwrap()
    }
}

/// Index of the first option matching `pred`, with the options listed on failure.
pub fn option(ask: &PendingAsk, pred: impl Fn(&leash_core::refinement::ConsentOption) -> bool) -> usize {
    ask.options.iter().position(pred).unwrap_or_else(|| {
        let labels: Vec<&str> = ask.options.iter().map(|o| o.label.as_str()).collect();
        panic!("no matching option among {labels:#?}")
    })
}
