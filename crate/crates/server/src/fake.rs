//! A scripted MCP server for tests and demos.
//!
//! Serves the tools of one profile prefix (`filesystem.read_file` becomes
//! `read_file` for server `filesystem`) and answers every call with a
//! deterministic text result echoing the tool and its arguments.

use leash_core::abstraction::Profiles;
use serde_json::{json, Map, Value};
use tokio::io::{AsyncRead, AsyncWrite, BufReader};

use crate::framing::{write_frame, FrameReader};
use crate::jsonrpc::{self, classify, encode, error_response, result_response, Kind};

#[derive(Debug, Clone)]
pub struct FakeServer {
    pub name: String,
    pub tools: Vec<Value>,
    /// Stop after answering this many tool calls, as if the process died.
    pub crash_after: Option<usize>,
}

impl FakeServer {
    pub fn from_profiles(name: &str, profiles: &Profiles) -> Self {
        let prefix = format!("{name}.");
        let tools = profiles
            .values()
            .filter_map(|p| {
                let tool = p.tool_ref.strip_prefix(&prefix)?;
                let mut props = Map::new();
                for param in [&p.input_param, &p.sink_param].into_iter().flatten() {
                    props.insert(param.clone(), json!({"type": "string"}));
                }
                let required: Vec<&String> = props.keys().collect();
                Some(json!({
                    "name": tool,
                    "description": format!("{} ({})", tool, p.effects),
                    "inputSchema": {"type": "object", "properties": props, "required": required},
                }))
            })
            .collect();
        FakeServer { name: name.to_string(), tools, crash_after: None }
    }

    pub fn call_result(&self, tool: &str, arguments: &Value) -> Value {
        json!({
            "content": [{"type": "text", "text": format!("{}.{tool} {arguments}", self.name)}],
            "isError": false,
        })
    }

    fn handle(&self, msg: &Value, calls: &mut usize) -> Option<Value> {
        let (id, method) = match classify(msg) {
            Ok(Kind::Request { id, method }) => (id, method),
            Ok(_) => return None,
            Err((id, code, message)) => return Some(error_response(&id, code, message, None)),
        };
        Some(match method.as_str() {
            "initialize" => result_response(
                &id,
                json!({
                    "protocolVersion": msg["params"]["protocolVersion"].as_str().unwrap_or("2025-06-18"),
                    "capabilities": {"tools": {"listChanged": false}},
                    "serverInfo": {"name": self.name, "version": "0.0.0"},
                }),
            ),
            "ping" => result_response(&id, json!({})),
            "tools/list" => result_response(&id, json!({"tools": self.tools})),
            "tools/call" => {
                let tool = msg["params"]["name"].as_str().unwrap_or_default();
                if !self.tools.iter().any(|t| t["name"] == tool) {
                    return Some(error_response(&id, jsonrpc::INVALID_PARAMS, &format!("unknown tool {tool:?}"), None));
                }
                *calls += 1;
                let args = msg["params"].get("arguments").cloned().unwrap_or(json!({}));
                result_response(&id, self.call_result(tool, &args))
            }
            _ => error_response(&id, jsonrpc::METHOD_NOT_FOUND, "method not found", None),
        })
    }

    /// Serves until `input` closes or the crash point is reached.
    pub async fn serve<R, W>(&self, input: R, mut output: W) -> std::io::Result<()>
    where
        R: AsyncRead + Unpin,
        W: AsyncWrite + Unpin,
    {
        let mut frames = FrameReader::new(BufReader::new(input));
        let mut calls = 0;
        loop {
            let frame = match frames.next_frame().await {
                Ok(Some(f)) => f,
                Ok(None) => return Ok(()),
                Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                    write_frame(&mut output, &encode(&error_response(&Value::Null, jsonrpc::PARSE_ERROR, "parse error", None))).await?;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let reply = match serde_json::from_slice::<Value>(&frame) {
                Ok(msg) => self.handle(&msg, &mut calls),
                Err(_) => Some(error_response(&Value::Null, jsonrpc::PARSE_ERROR, "parse error", None)),
            };
            if let Some(reply) = reply {
                write_frame(&mut output, &encode(&reply)).await?;
            }
            if self.crash_after.is_some_and(|n| calls >= n) {
                return Ok(());
            }
        }
    }
}
