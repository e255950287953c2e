//! Textual rule syntax.
//!
//! ```text
//! rule   := action loc guard? "-[" taints ";" effects "]->" loc guard?
//! action := "allow" | "deny"
//! guard  := "(" pattern ")"
//! ```
//!
//! Taints and effects are comma-separated. The taint list may be empty, the
//! effect list may not. Rendering is canonical: lists are deduplicated and
//! sorted, with `,` inside a list and `; ` between the two.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::lattice::{Boundary, Effect, EffectSet, LocationBound, LocationClass, ResourceGuard, TaintLabel, TaintSet};
use crate::policy::{Action, Origin, Rule, RuleId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Error)]
#[error("at byte {offset}: expected {}, found {found}", expected.join(" or "))]
pub struct DslError {
    pub offset: usize,
    pub expected: Vec<&'static str>,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DslRule {
    pub action: Action,
    pub boundary: Boundary,
    /// Byte range of the rule within the parsed text.
    pub span: (usize, usize),
}

impl DslRule {
    pub fn into_rule(self, id: RuleId, origin: Origin, created_at: u64) -> Rule {
        Rule { id, action: self.action, boundary: self.boundary, origin, created_at }
    }
}

impl fmt::Display for DslRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(self.action, &self.boundary))
    }
}

pub fn render(action: Action, boundary: &Boundary) -> String {
    let a = match action {
        Action::Allow => "allow",
        Action::Deny => "deny",
    };
    format!("{a} {}", boundary.to_rule_boundary())
}

pub fn render_rule(rule: &Rule) -> String {
    render(rule.action, &rule.boundary)
}

const LOCATIONS: &[&str] = &["exact", "parent", "local", "ctxt", "intnet", "extnet"];

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn found(&self) -> String {
        let rest = self.rest();
        let word: String = rest.chars().take_while(|c| c.is_ascii_alphanumeric() || *c == '_').collect();
        match rest.chars().next() {
            None => "end of input".into(),
            Some(_) if !word.is_empty() => format!("`{word}`"),
            Some(c) => format!("`{c}`"),
        }
    }

    fn error(&self, expected: &[&'static str]) -> DslError {
        DslError { offset: self.pos, expected: expected.to_vec(), found: self.found() }
    }

    fn eat(&mut self, lit: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &'static str) -> Result<(), DslError> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(self.error(&[lit]))
        }
    }

    /// Next identifier, without consuming it.
    fn word(&mut self) -> &'a str {
        self.skip_ws();
        let rest = self.rest();
        let n = rest.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(rest.len());
        &rest[..n]
    }

    fn keyword<T>(&mut self, expected: &[&'static str], pick: impl Fn(&str) -> Option<T>) -> Result<T, DslError> {
        let w = self.word();
        match pick(w) {
            Some(v) => {
                self.pos += w.len();
                Ok(v)
            }
            None => Err(self.error(expected)),
        }
    }

    fn location(&mut self) -> Result<LocationBound, DslError> {
        let class = self.keyword(LOCATIONS, |w| w.parse::<LocationClass>().ok())?;
        if !self.rest().starts_with('(') {
            return Ok(LocationBound::class(class));
        }
        self.pos += 1;
        let start = self.pos;
        let len = self.rest().find([')', '\n', '\r']).unwrap_or(self.rest().len());
        let text = &self.rest()[..len];
        self.pos += len;
        if !self.rest().starts_with(')') {
            return Err(self.error(&[")"]));
        }
        let guard = ResourceGuard::parse(text).map_err(|_| DslError {
            offset: start,
            expected: vec!["guard pattern"],
            found: format!("`{text}`"),
        })?;
        self.pos += 1;
        Ok(LocationBound::guarded(class, guard))
    }

    fn list<T: Copy>(
        &mut self,
        expected: &'static [&'static str],
        close: &'static str,
        pick: impl Fn(&str) -> Option<T>,
    ) -> Result<Vec<T>, DslError> {
        let mut out = Vec::new();
        self.skip_ws();
        if self.rest().starts_with(close) {
            return Ok(out);
        }
        loop {
            out.push(self.keyword(expected, &pick)?);
            if !self.eat(",") {
                return Ok(out);
            }
        }
    }

    fn rule(&mut self) -> Result<DslRule, DslError> {
        self.skip_ws();
        let start = self.pos;
        let action = self.keyword(&["allow", "deny"], |w| match w {
            "allow" => Some(Action::Allow),
            "deny" => Some(Action::Deny),
            _ => None,
        })?;
        let input = self.location()?;
        self.expect("-[")?;
        let taints = self.list(&["tainted", "untainted", ";"], ";", |w| w.parse::<TaintLabel>().ok())?;
        self.expect(";")?;
        self.skip_ws();
        let effects_at = self.pos;
        let effects = self.list(&["read", "write", "del", "exec", "spawn"], "]->", |w| w.parse::<Effect>().ok())?;
        if effects.is_empty() {
            return Err(DslError {
                offset: effects_at,
                expected: vec!["read", "write", "del", "exec", "spawn"],
                found: self.found(),
            });
        }
        self.expect("]->")?;
        let output = self.location()?;
        let end = self.pos;
        self.skip_ws();
        if !self.rest().is_empty() {
            return Err(self.error(&["end of rule"]));
        }
        let boundary = Boundary::new(
            input,
            output,
            taints.into_iter().collect::<TaintSet>(),
            effects.into_iter().collect::<EffectSet>(),
        );
        Ok(DslRule { action, boundary, span: (start, end) })
    }
}

pub fn parse_rule(text: &str) -> Result<DslRule, DslError> {
    Parser { src: text, pos: 0 }.rule()
}

/// Parses and re-renders one rule.
pub fn normalize(text: &str) -> Result<String, DslError> {
    parse_rule(text).map(|r| r.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DslFileError {
    #[error("line {line}: {error}")]
    Syntax { line: usize, error: DslError },
    #[error("line {line}: invariants must be deny rules")]
    NotDeny { line: usize },
}

impl DslFileError {
    pub fn line(&self) -> usize {
        match self {
            DslFileError::Syntax { line, .. } | DslFileError::NotDeny { line } => *line,
        }
    }
}

/// One rule per non-blank line; `#` starts a comment line. The first bad
/// line fails the whole file. Line numbers start at 1.
pub fn parse_policy_file(text: &str) -> Result<Vec<(usize, DslRule)>, DslFileError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rule = parse_rule(line).map_err(|error| DslFileError::Syntax { line: i + 1, error })?;
        out.push((i + 1, rule));
    }
    Ok(out)
}

/// Like [`parse_policy_file`], additionally requiring every rule to deny.
pub fn parse_invariant_file(text: &str) -> Result<Vec<DslRule>, DslFileError> {
    parse_policy_file(text)?
        .into_iter()
        .map(|(line, r)| if r.action == Action::Deny { Ok(r) } else { Err(DslFileError::NotDeny { line }) })
        .collect()
}
