//! A scripted MCP server on stdio, serving one prefix of a profile set.

use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;
use leash_server::fake::FakeServer;
use leash_server::launch::load_profiles_file;

#[derive(Parser)]
#[command(name = "fake-mcp", about = "Deterministic MCP server for tests and demos")]
struct Args {
    /// Profile prefix to serve, e.g. `filesystem`.
    name: String,
    /// Tool profiles (TOML); defaults to the bundled set.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Exit after answering this many tool calls.
    #[arg(long)]
    crash_after: Option<usize>,
}

#[tokio::main(flavor = "current_thread")]
async fn main() -> Result<()> {
    let args = Args::parse();
    let mut server = FakeServer::from_profiles(&args.name, &load_profiles_file(args.profiles.as_deref())?);
    if server.tools.is_empty() {
        anyhow::bail!("no profiles start with {:?}", format!("{}.", args.name));
    }
    server.crash_after = args.crash_after;
    server.serve(tokio::io::stdin(), tokio::io::stdout()).await?;
    Ok(())
}
