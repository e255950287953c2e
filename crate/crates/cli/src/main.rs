//! `leash`: run the consent proxy, replay trace corpora, and talk to a
//! running proxy's consent API.

use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use futures::StreamExt;
use leash_client::ConsentClient;
use leash_core::replay::{load_corpus, replay_corpus, Mode};
use leash_server::launch::{build_session, load_profiles_file, SessionFiles, UpstreamSpec};
use leash_server::proxy::{run_proxy, ProxyConfig};
use leash_server::state::{Persistence, Shared};
use leash_server::{api, tty};

const DEFAULT_PORT: u16 = 7411;

#[derive(Parser)]
#[command(name = "leash", version, about = "Boundary-scoped consent for MCP tool calls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ui {
    /// Answer asks from the web panel or `leash decide` only.
    Web,
    /// Also prompt on the controlling terminal.
    Tty,
}

#[derive(clap::Args)]
struct ApiArgs {
    /// Base URL of a running proxy's consent API.
    #[arg(long, env = "LEASH_URL", default_value_t = format!("http://127.0.0.1:{DEFAULT_PORT}"))]
    url: String,
}

#[derive(Subcommand)]
enum Command {
    /// Sit between an MCP host on stdio and one or more MCP servers.
    Proxy {
        /// Upstream server as `name=command args`; repeat for several.
        #[arg(long = "server", required = true)]
        servers: Vec<String>,
        /// Policy file; created on the first durable decision.
        #[arg(long, env = "LEASH_POLICY")]
        policy: Option<PathBuf>,
        /// Invariant rules, one per line.
        #[arg(long)]
        invariants: Option<PathBuf>,
        /// Tool profiles (TOML); defaults to the bundled set.
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Session context (TOML); defaults to the current directory as workdir.
        #[arg(long)]
        session: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "tty")]
        ui: Ui,
        /// Loopback port of the consent API; 0 picks a free one.
        #[arg(long, default_value_t = DEFAULT_PORT)]
        listen: u16,
        /// Append audit records here as JSON lines.
        #[arg(long)]
        audit: Option<PathBuf>,
        /// Seconds before an unanswered ask is denied once.
        #[arg(long, default_value_t = leash_core::authorizer::CONSENT_TIMEOUT_SECS)]
        consent_timeout: u64,
    },
    /// Replay a directory of `.jsonl` traces and score the decisions.
    Replay {
        dir: PathBuf,
        #[arg(long, default_value = "use-capability")]
        mode: Mode,
        /// Write the metrics report (JSON) here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Write every audit record, timing fields zeroed, as JSON lines.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Show the ask waiting for an answer, if any.
    Pending {
        #[command(flatten)]
        api: ApiArgs,
    },
    /// Answer a pending ask with one of its option indices.
    Decide {
        ask_id: u64,
        option: usize,
        #[command(flatten)]
        api: ApiArgs,
    },
    /// List the current rules.
    Policy {
        #[command(flatten)]
        api: ApiArgs,
    },
    /// Print audit records; with --follow keep printing new ones.
    Audit {
        #[arg(long)]
        follow: bool,
        #[command(flatten)]
        api: ApiArgs,
    },
    /// Add an invariant to a running session.
    Invariant {
        /// Rule text, e.g. `deny local -[tainted; write]-> extnet`.
        rule: String,
        #[command(flatten)]
        api: ApiArgs,
    },
    /// Remove a user rule by id (e.g. `r4`).
    Revoke {
        id: String,
        #[command(flatten)]
        api: ApiArgs,
    },
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("LEASH_LOG").unwrap_or_else(|_| "leash=info,leash_server=info".into());
    let ansi = std::io::IsTerminal::is_terminal(&std::io::stderr());
    tracing_subscriber::fmt().with_env_filter(filter).with_ansi(ansi).with_writer(std::io::stderr).init();
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

async fn proxy(
    servers: Vec<String>,
    files: SessionFiles,
    ui: Ui,
    listen: u16,
    audit: Option<PathBuf>,
    consent_timeout: u64,
) -> Result<()> {
    let session = build_session(&files)?;
    let audit_log = match &audit {
        Some(p) => Some(
            std::fs::OpenOptions::new().create(true).append(true).open(p).with_context(|| format!("opening {}", p.display()))?,
        ),
        None => None,
    };
    let shared = Shared::new(session, Persistence { policy_path: files.policy.clone(), audit_log });

    let mut upstreams = Vec::new();
    let mut children = Vec::new();
    for s in &servers {
        let (io, child) = UpstreamSpec::parse(s)?.spawn()?;
        upstreams.push(io);
        children.push(child);
    }

    let (listener, addr) = api::bind(listen).await.with_context(|| format!("binding 127.0.0.1:{listen}"))?;
    tracing::info!("consent API on http://{addr}");
    tokio::spawn(api::serve(listener, shared.clone()));

    if let Ui::Tty = ui {
        match tokio::fs::OpenOptions::new().read(true).write(true).open("/dev/tty").await {
            Ok(term) => {
                let (r, w) = tokio::io::split(term);
                let shared = shared.clone();
                tokio::spawn(async move {
                    if let Err(e) = tty::prompt_loop(shared, tokio::io::BufReader::new(r), w).await {
                        tracing::warn!("terminal prompt stopped: {e}");
                    }
                });
            }
            Err(e) => tracing::warn!("no terminal for prompts ({e}); answer asks through the consent API"),
        }
    }

    let cfg = ProxyConfig { consent_timeout: Duration::from_secs(consent_timeout) };
    let result = run_proxy(tokio::io::stdin(), tokio::io::stdout(), upstreams, shared, cfg).await;
    for mut c in children {
        // Give servers a moment to exit on their own after stdin closes.
        if tokio::time::timeout(Duration::from_secs(2), c.wait()).await.is_err() {
            let _ = c.kill().await;
        }
    }
    Ok(result?)
}

fn replay(dir: PathBuf, mode: Mode, report: Option<PathBuf>, profiles: Option<PathBuf>, audit: Option<PathBuf>) -> Result<()> {
    let profiles = load_profiles_file(profiles.as_deref())?;
    let traces = load_corpus(&dir)?;
    if traces.is_empty() {
        bail!("no traces found in {}", dir.display());
    }
    let (results, metrics) = replay_corpus(&traces, mode, &profiles)?;
    if let Some(path) = audit {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        for r in &results {
            for a in &r.audit {
                serde_json::to_writer(&mut out, &a.normalized())?;
                writeln!(out)?;
            }
        }
        out.flush()?;
    }
    match report {
        Some(path) => {
            std::fs::write(&path, serde_json::to_vec_pretty(&metrics)?).with_context(|| format!("writing {}", path.display()))?;
        }
        None => print_json(&metrics)?,
    }
    eprintln!(
        "{} traces, {} steps: step accuracy {:.3}, trace accuracy {:.3}, F1 {:.3}, decide p50 {:.4} ms",
        metrics.traces, metrics.steps, metrics.step_accuracy, metrics.trace_accuracy, metrics.f1, metrics.decide_latency_ms.p50
    );
    for m in &metrics.mismatches {
        eprintln!("  mismatch: {m}");
    }
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    let cli = Cli::parse();
    init_logging();
    match cli.command {
        Command::Proxy { servers, policy, invariants, profiles, session, ui, listen, audit, consent_timeout } => {
            let files = SessionFiles { policy, invariants, profiles, context: session };
            let result = proxy(servers, files, ui, listen, audit, consent_timeout).await;
            // The stdin reader may still be parked in a blocking read, which
            // would stall runtime shutdown; leave directly instead.
            let code = match result {
                Ok(()) => 0,
                Err(e) => {
                    eprintln!("Error: {e:#}");
                    1
                }
            };
            std::process::exit(code)
        }
        Command::Replay { dir, mode, report, profiles, audit } => replay(dir, mode, report, profiles, audit),
        Command::Pending { api } => match ConsentClient::new(api.url).pending().await? {
            Some(ask) => {
                println!("ask {} for {} {}", ask.ask_id, ask.call.tool_ref, serde_json::Value::Object(ask.call.params.clone()));
                if let Some(b) = &ask.boundary {
                    println!("  boundary {b}");
                }
                println!("  {}", ask.reason);
                for (i, o) in ask.options.iter().enumerate() {
                    println!("  [{i}] {o}");
                }
                Ok(())
            }
            None => {
                println!("nothing pending");
                Ok(())
            }
        },
        Command::Decide { ask_id, option, api } => print_json(&ConsentClient::new(api.url).decide(ask_id, option).await?),
        Command::Policy { api } => {
            for r in ConsentClient::new(api.url).policy().await? {
                let origin = serde_json::to_value(r.rule.origin)?;
                println!("{}\t{}\t{}", r.rule.id, origin.as_str().unwrap_or_default(), r.text);
            }
            Ok(())
        }
        Command::Audit { follow, api } => {
            let client = ConsentClient::new(api.url);
            if follow {
                let mut records = client.audit_stream().await?;
                while let Some(r) = records.next().await {
                    println!("{}", serde_json::to_string(&r?)?);
                }
            } else {
                for r in client.audit().await? {
                    println!("{}", serde_json::to_string(&r)?);
                }
            }
            Ok(())
        }
        Command::Invariant { rule, api } => match ConsentClient::new(api.url).add_invariant(&rule).await? {
            Some(r) => {
                println!("{}\t{}", r.rule.id, r.text);
                Ok(())
            }
            None => bail!("no rule given"),
        },
        Command::Revoke { id, api } => {
            let r = ConsentClient::new(api.url).revoke(&id).await?;
            println!("revoked {}\t{}", r.rule.id, r.text);
            Ok(())
        }
    }
}
