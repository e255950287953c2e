//! Terminal fallback for answering consent asks.
//!
//! Runs alongside the web panel. Whichever answers first wins; a late answer
//! from the other side gets a stale-ask error and is dropped.

use std::sync::Arc;

use leash_core::authorizer::PendingAsk;
use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncWrite, AsyncWriteExt};

use crate::state::Shared;

pub fn render_ask(ask: &PendingAsk) -> String {
    let mut out = format!("\nleash: {} wants {}\n", ask.call.tool_ref, serde_json::Value::Object(ask.call.params.clone()));
    if let Some(b) = &ask.boundary {
        out.push_str(&format!("  boundary {b}\n"));
    }
    out.push_str(&format!("  {}\n", ask.reason));
    for (i, o) in ask.options.iter().enumerate() {
        out.push_str(&format!("  [{i}] {o}\n"));
    }
    out.push_str("choice> ");
    out
}

/// Prompts on `output` for every ask and reads answers from `input` until
/// either side closes.
pub async fn prompt_loop<R, W>(shared: Arc<Shared>, input: R, mut output: W) -> std::io::Result<()>
where
    R: AsyncBufRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let mut pending = shared.watch_pending();
    let mut lines = input.lines();
    loop {
        let ask = pending.borrow_and_update().clone();
        let Some(ask) = ask else {
            if pending.changed().await.is_err() {
                return Ok(());
            }
            continue;
        };
        output.write_all(render_ask(&ask).as_bytes()).await?;
        output.flush().await?;
        loop {
            tokio::select! {
                line = lines.next_line() => {
                    let Some(line) = line? else { return Ok(()) };
                    match line.trim().parse::<usize>() {
                        Ok(i) if i < ask.options.len() => {
                            match shared.decide(ask.ask_id, i) {
                                Ok(_) => {}
                                Err(e) => output.write_all(format!("leash: {e}\n").as_bytes()).await?,
                            }
                            break;
                        }
                        _ => {
                            output.write_all(format!("enter 0-{}> ", ask.options.len() - 1).as_bytes()).await?;
                            output.flush().await?;
                        }
                    }
                }
                changed = pending.changed() => {
                    if changed.is_err() {
                        return Ok(());
                    }
                    // Answered elsewhere.
                    if pending.borrow().as_ref().map(|a| a.ask_id) != Some(ask.ask_id) {
                        output.write_all(b"(answered)\n").await?;
                        output.flush().await?;
                        break;
                    }
                }
            }
        }
    }
}
