//! Just enough JSON-RPC 2.0 to route messages without owning their schema.

use serde_json::{json, Map, Value};

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;
pub const INTERNAL_ERROR: i64 = -32603;
/// A tool call refused by policy, an invariant, or the user.
pub const CONSENT_DENIED: i64 = -32090;

#[derive(Debug, Clone, PartialEq)]
pub enum Kind {
    Request { id: Value, method: String },
    Notification { method: String },
    Response { id: Value },
}

/// Classifies a decoded message, or returns the error to send back.
pub fn classify(msg: &Value) -> Result<Kind, (Value, i64, &'static str)> {
    let Some(obj) = msg.as_object() else {
        let message = if msg.is_array() { "batch requests are not supported" } else { "message is not an object" };
        return Err((Value::Null, INVALID_REQUEST, message));
    };
    let id = obj.get("id").cloned();
    if obj.get("jsonrpc").and_then(Value::as_str) != Some("2.0") {
        return Err((id.unwrap_or(Value::Null), INVALID_REQUEST, "jsonrpc must be \"2.0\""));
    }
    match (obj.get("method"), id) {
        (Some(Value::String(m)), Some(id)) if valid_id(&id) => Ok(Kind::Request { id, method: m.clone() }),
        (Some(Value::String(m)), None) => Ok(Kind::Notification { method: m.clone() }),
        (None, Some(id)) if obj.contains_key("result") || obj.contains_key("error") => Ok(Kind::Response { id }),
        (_, id) => Err((id.filter(valid_id).unwrap_or(Value::Null), INVALID_REQUEST, "not a request, notification or response")),
    }
}

fn valid_id(id: &Value) -> bool {
    matches!(id, Value::String(_) | Value::Number(_) | Value::Null)
}

/// A stable map key for a message id.
pub fn id_key(id: &Value) -> String {
    id.to_string()
}

pub fn error_response(id: &Value, code: i64, message: &str, data: Option<Value>) -> Value {
    let mut error = Map::new();
    error.insert("code".into(), code.into());
    error.insert("message".into(), message.into());
    if let Some(d) = data {
        error.insert("data".into(), d);
    }
    json!({"jsonrpc": "2.0", "id": id, "error": error})
}

pub fn result_response(id: &Value, result: Value) -> Value {
    json!({"jsonrpc": "2.0", "id": id, "result": result})
}

pub fn encode(v: &Value) -> Vec<u8> {
    serde_json::to_vec(v).expect("json values always serialize")
}
