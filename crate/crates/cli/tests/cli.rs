use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdout, Command, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

const LEASH: &str = env!("CARGO_BIN_EXE_leash");
const FAKE: &str = env!("CARGO_BIN_EXE_fake-mcp");

fn corpus() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

fn leash(args: &[&str]) -> std::process::Output {
    Command::new(LEASH).args(args).output().unwrap()
}

fn stdout(o: &std::process::Output) -> String {
    assert!(o.status.success(), "leash failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn replay_scores_the_corpus_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let mut audits = Vec::new();
    for run in 0..2 {
        let report = dir.path().join(format!("report{run}.json"));
        let audit = dir.path().join(format!("audit{run}.ndjson"));
        let out = leash(&["replay", corpus().to_str().unwrap(), "--mode", "use-capability", "--report", report.to_str().unwrap(), "--audit", audit.to_str().unwrap()]);
        stdout(&out);
        let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
        assert_eq!((r["step_accuracy"].as_f64(), r["trace_accuracy"].as_f64()), (Some(1.0), Some(1.0)));
        assert!(r["per_category"].as_object().unwrap().len() >= 5);
        audits.push(std::fs::read(&audit).unwrap());
    }
    assert!(!audits[0].is_empty());
    assert_eq!(audits[0], audits[1]);

    let bad = leash(&["replay", corpus().to_str().unwrap(), "--mode", "sideways"]);
    assert!(!bad.status.success());
}

struct Proxy {
    child: Child,
    out: BufReader<ChildStdout>,
    url: String,
}

impl Proxy {
    fn start(extra: &[&str], servers: &[String]) -> Proxy {
        let mut cmd = Command::new(LEASH);
        cmd.args(["proxy", "--ui", "web", "--listen", "0"]).args(extra);
        for s in servers {
            cmd.args(["--server", s]);
        }
        let mut child = cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap();
        let mut err = BufReader::new(child.stderr.take().unwrap());
        let mut url = None;
        let mut line = String::new();
        while url.is_none() {
            line.clear();
            assert!(err.read_line(&mut line).unwrap() > 0, "proxy exited before serving");
            url = line.split("consent API on ").nth(1).map(|u| u.trim().to_string());
        }
        // Keep draining stderr so the proxy never blocks on it.
        std::thread::spawn(move || std::io::copy(&mut err, &mut std::io::sink()));
        let out = BufReader::new(child.stdout.take().unwrap());
        Proxy { child, out, url: url.unwrap() }
    }

    fn send(&mut self, v: Value) {
        let stdin = self.child.stdin.as_mut().unwrap();
        writeln!(stdin, "{v}").unwrap();
        stdin.flush().unwrap();
    }

    fn recv(&mut self) -> Value {
        let mut line = String::new();
        self.out.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap_or_else(|e| panic!("{e}: {line:?}"))
    }

    fn client(&self, args: &[&str]) -> String {
        let mut all = args.to_vec();
        all.extend(["--url", &self.url]);
        stdout(&leash(&all))
    }

    fn wait_pending(&self) -> String {
        let start = Instant::now();
        loop {
            let out = self.client(&["pending"]);
            if out.starts_with("ask ") {
                return out;
            }
            assert!(start.elapsed() < Duration::from_secs(10), "no ask appeared");
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    fn finish(mut self) -> std::process::ExitStatus {
        drop(self.child.stdin.take());
        self.child.wait().unwrap()
    }
}

#[test]
fn proxy_with_client_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("session.toml");
    std::fs::write(&session, "workdir = \"/project\"\n").unwrap();
    let inv = dir.path().join("invariants.rules");
    std::fs::write(&inv, "deny local -[tainted; write]-> extnet\n").unwrap();
    let policy = dir.path().join("policy.json");
    let args = ["--session", session.to_str().unwrap(), "--invariants", inv.to_str().unwrap(), "--policy", policy.to_str().unwrap()];
    let mut p = Proxy::start(&args, &[format!("filesystem={FAKE} filesystem")]);

    p.send(json!({"jsonrpc": "2.0", "id": 1, "method": "tools/call", "params": {"name": "read_file", "arguments": {"path": "/project/src/a.rs"}}}));
    let ask = p.wait_pending();
    assert!(ask.contains("filesystem.read_file"), "{ask}");
    let ask_id = ask.split_whitespace().nth(1).unwrap().to_string();
    let always = ask
        .lines()
        .find(|l| l.contains("Always allow parent(/project/src/*)"))
        .unwrap_or_else(|| panic!("{ask}"))
        .trim()
        .trim_start_matches('[')
        .split(']')
        .next()
        .unwrap()
        .to_string();
    let decided: Value = serde_json::from_str(&p.client(&["decide", &ask_id, &always])).unwrap();
    assert_eq!(decided["outcome"], "execute");
    assert_eq!(p.recv()["result"]["content"][0]["text"], r#"filesystem.read_file {"path":"/project/src/a.rs"}"#);
    assert_eq!(p.client(&["pending"]).trim(), "nothing pending");

    // The sibling file needs no prompt.
    p.send(json!({"jsonrpc": "2.0", "id": 2, "method": "tools/call", "params": {"name": "read_file", "arguments": {"path": "/project/src/b.rs"}}}));
    assert!(p.recv().get("result").is_some());

    let rules = p.client(&["policy"]);
    let user = rules.lines().find(|l| l.contains("\tuser\t")).unwrap_or_else(|| panic!("{rules}"));
    let user_id = user.split('\t').next().unwrap().to_string();

    let added = p.client(&["invariant", "deny parent -[tainted,untainted; read]-> ctxt"]);
    assert!(added.contains("deny parent"), "{added}");
    p.send(json!({"jsonrpc": "2.0", "id": 3, "method": "tools/call", "params": {"name": "read_file", "arguments": {"path": "/project/src/c.rs"}}}));
    let blocked = p.recv();
    assert_eq!(blocked["error"]["code"], -32090);
    assert_eq!(blocked["error"]["data"]["rule_id"], added.split('\t').next().unwrap());

    let revoked = p.client(&["revoke", &user_id]);
    assert!(revoked.starts_with(&format!("revoked {user_id}")), "{revoked}");
    let denied = leash(&["revoke", "r0", "--url", &p.url]);
    assert!(!denied.status.success());
    assert!(String::from_utf8_lossy(&denied.stderr).contains("403"));

    let audit = p.client(&["audit"]);
    assert_eq!(audit.lines().count(), 4);
    assert!(p.finish().success());
    let saved = std::fs::read_to_string(&policy).unwrap();
    assert_eq!(saved.matches("\"origin\"").count(), 2, "{saved}");
}

#[test]
fn proxy_reports_a_dead_upstream() {
    // The filesystem server answers one tool call and exits.
    let mut p = Proxy::start(&[], &[format!("filesystem={FAKE} filesystem --crash-after 1"), format!("{FAKE} gmail")]);
    p.send(json!({"jsonrpc": "2.0", "id": 1, "method": "tools/call", "params": {"name": "filesystem.read_file", "arguments": {"path": "README.md"}}}));
    let ask = p.wait_pending();
    let id = ask.split_whitespace().nth(1).unwrap().to_string();
    p.client(&["decide", &id, "0"]);
    let r = p.recv();
    assert_eq!(r["id"], 1);
    assert_eq!(r["result"]["isError"], false, "{r}");
    let status = p.child.wait_timeout_or_kill();
    assert!(!status.success());
}

trait WaitTimeout {
    fn wait_timeout_or_kill(&mut self) -> std::process::ExitStatus;
}

impl WaitTimeout for Child {
    fn wait_timeout_or_kill(&mut self) -> std::process::ExitStatus {
        let start = Instant::now();
        loop {
            if let Some(s) = self.try_wait().unwrap() {
                return s;
            }
            if start.elapsed() > Duration::from_secs(10) {
                self.kill().unwrap();
                panic!("proxy kept running");
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}
