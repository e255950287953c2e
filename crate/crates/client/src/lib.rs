//! Client for a running proxy's consent API.

use futures::stream::{self, Stream, StreamExt};
use leash_core::authorizer::{AuditRecord, Outcome, PendingAsk};
use leash_core::wire::{DecideRequest, DecideResponse, ErrorBody, InvariantRequest, PolicyView, RuleView};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    /// The server answered with an error body.
    #[error("{status}: {}", body.error)]
    Api { status: StatusCode, body: ErrorBody },
    #[error("bad event stream: {0}")]
    Stream(String),
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct ConsentClient {
    base: String,
    http: reqwest::Client,
}

impl ConsentClient {
    /// `base` is e.g. `http://127.0.0.1:7411`.
    pub fn new(base: impl Into<String>) -> Self {
        ConsentClient { base: base.into().trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await?;
        let body = serde_json::from_str(&text).unwrap_or_else(|_| ErrorBody::new(text));
        Err(ClientError::Api { status, body })
    }

    async fn json<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        Ok(Self::check(resp).await?.json().await?)
    }

    pub async fn pending(&self) -> Result<Option<PendingAsk>> {
        let resp = Self::check(self.http.get(self.url("/pending")).send().await?).await?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        Ok(Some(resp.json().await?))
    }

    pub async fn decide(&self, ask_id: u64, option: usize) -> Result<Outcome> {
        let req = DecideRequest { ask_id, option };
        let resp: DecideResponse = Self::json(self.http.post(self.url("/decide")).json(&req).send().await?).await?;
        Ok(resp.outcome)
    }

    pub async fn policy(&self) -> Result<Vec<RuleView>> {
        let view: PolicyView = Self::json(self.http.get(self.url("/policy")).send().await?).await?;
        Ok(view.rules)
    }

    pub async fn audit(&self) -> Result<Vec<AuditRecord>> {
        Self::json(self.http.get(self.url("/audit")).send().await?).await
    }

    /// Returns `None` when the text holds no rule.
    pub async fn add_invariant(&self, text: &str) -> Result<Option<RuleView>> {
        let req = InvariantRequest { text: text.to_string() };
        let resp = Self::check(self.http.post(self.url("/invariants")).json(&req).send().await?).await?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        Ok(Some(resp.json().await?))
    }

    /// `id` is a rule id such as `r3`.
    pub async fn revoke(&self, id: &str) -> Result<RuleView> {
        Self::json(self.http.delete(self.url(&format!("/rules/{id}"))).send().await?).await
    }

    /// Every audit record so far, then new ones as they happen.
    pub async fn audit_stream(&self) -> Result<impl Stream<Item = Result<AuditRecord>> + Unpin> {
        let resp = Self::check(self.http.get(self.url("/audit/stream")).send().await?).await?;
        let state = SseState { body: Box::pin(resp.bytes_stream()), buf: Vec::new() };
        Ok(Box::pin(stream::unfold(state, |mut s| async move {
            let item = s.next_event().await?;
            Some((item, s))
        })))
    }
}

/// Splits a server-sent event body into `data` payloads of `audit` events.
struct SseState<S> {
    body: S,
    buf: Vec<u8>,
}

impl<S, B> SseState<S>
where
    S: Stream<Item = reqwest::Result<B>> + Unpin,
    B: AsRef<[u8]>,
{
    async fn next_event(&mut self) -> Option<Result<AuditRecord>> {
        loop {
            if let Some(end) = find_blank_line(&self.buf) {
                let block: Vec<u8> = self.buf.drain(..end.1).collect();
                let block = String::from_utf8_lossy(&block[..end.0]).into_owned();
                match parse_block(&block) {
                    Some(data) => return Some(serde_json::from_str(&data).map_err(|e| ClientError::Stream(e.to_string()))),
                    None => continue,
                }
            }
            match self.body.next().await? {
                Ok(chunk) => self.buf.extend_from_slice(chunk.as_ref()),
                Err(e) => return Some(Err(e.into())),
            }
        }
    }
}

/// Start of the blank line ending the first event, and the index after it.
fn find_blank_line(buf: &[u8]) -> Option<(usize, usize)> {
    let lf = buf.windows(2).position(|w| w == b"\n\n").map(|i| (i, i + 2));
    let crlf = buf.windows(4).position(|w| w == b"\r\n\r\n").map(|i| (i, i + 4));
    match (lf, crlf) {
        (Some(a), Some(b)) => Some(if a.0 < b.0 { a } else { b }),
        (a, b) => a.or(b),
    }
}

/// The joined data lines of an `audit` event; comments and other events give `None`.
fn parse_block(block: &str) -> Option<String> {
    let mut event = "message";
    let mut data: Vec<&str> = Vec::new();
    for line in block.lines() {
        let (field, value) = line.split_once(':').unwrap_or((line, ""));
        let value = value.strip_prefix(' ').unwrap_or(value);
        match field {
            "event" => event = value,
            "data" => data.push(value),
            _ => {}
        }
    }
    (event == "audit" && !data.is_empty()).then(|| data.join("\n"))
}
