//! Resource guards: the concrete-resource half of a location bound.
//!
//! A guard is either unconstrained, an exact resource, or a `/`-separated glob
//! whose wildcard segments are `*` (exactly one segment) and `**` (zero or
//! more segments). Containment between two globs is language inclusion, which
//! is decided exactly by exploring the product of the two pattern automata
//! over the finite alphabet of literals that appear in either pattern plus
//! one symbol standing for "any other segment".

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;

use thiserror::Error;

/// Patterns longer than this cannot be represented in the automaton bitset.
pub const MAX_GLOB_SEGMENTS: usize = 127;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GuardError {
    #[error("empty guard pattern")]
    Empty,
    #[error("guard pattern has {0} segments (limit {MAX_GLOB_SEGMENTS})")]
    TooLong(usize),
    #[error("guard pattern may not contain ')' or a line break: {0:?}")]
    IllegalChar(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Segment {
    Lit(String),
    Star,
    DoubleStar,
}

/// A canonical glob pattern containing at least one wildcard segment.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GlobPattern {
    text: String,
    segments: Vec<Segment>,
}

type StateSet = u128;

impl GlobPattern {
    fn from_segments(raw: Vec<Segment>) -> Self {
        // Canonicalize each run of adjacent wildcards: `*` segments first,
        // then at most one `**`. Runs with equal languages then print equally.
        let mut segments = Vec::with_capacity(raw.len());
        let mut i = 0;
        while i < raw.len() {
            if matches!(raw[i], Segment::Lit(_)) {
                segments.push(raw[i].clone());
                i += 1;
                continue;
            }
            let mut stars = 0;
            let mut recursive = false;
            while i < raw.len() && !matches!(raw[i], Segment::Lit(_)) {
                match raw[i] {
                    Segment::Star => stars += 1,
                    _ => recursive = true,
                }
                i += 1;
            }
            segments.extend(std::iter::repeat_n(Segment::Star, stars));
            if recursive {
                segments.push(Segment::DoubleStar);
            }
        }
        let text = segments
            .iter()
            .map(|s| match s {
                Segment::Lit(l) => l.as_str(),
                Segment::Star => "*",
                Segment::DoubleStar => "**",
            })
            .collect::<Vec<_>>()
            .join("/");
        GlobPattern { text, segments }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    fn accept(&self) -> StateSet {
        1u128 << self.segments.len()
    }

    fn closure(&self, mut set: StateSet) -> StateSet {
        for (i, seg) in self.segments.iter().enumerate() {
            if set & (1 << i) != 0 && *seg == Segment::DoubleStar {
                set |= 1 << (i + 1);
            }
        }
        set
    }

    fn start(&self) -> StateSet {
        self.closure(1)
    }

    /// `symbol == None` stands for a segment equal to no literal of interest.
    fn step(&self, set: StateSet, symbol: Option<&str>) -> StateSet {
        let mut next = 0;
        for (i, seg) in self.segments.iter().enumerate() {
            if set & (1 << i) == 0 {
                continue;
            }
            match seg {
                Segment::Lit(l) => {
                    if symbol == Some(l.as_str()) {
                        next |= 1 << (i + 1);
                    }
                }
                Segment::Star => next |= 1 << (i + 1),
                Segment::DoubleStar => next |= 1 << i,
            }
        }
        self.closure(next)
    }

    pub fn matches(&self, resource: &str) -> bool {
        let mut set = self.start();
        for part in resource.split('/') {
            set = self.step(set, Some(part));
            if set == 0 {
                return false;
            }
        }
        set & self.accept() != 0
    }

    fn literals(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Lit(l) => Some(l.as_str()),
            _ => None,
        })
    }

    fn product_search(&self, other: &GlobPattern, mut stop: impl FnMut(bool, bool) -> bool) -> bool {
        let alphabet: BTreeSet<Option<&str>> = self
            .literals()
            .chain(other.literals())
            .map(Some)
            .chain(std::iter::once(None))
            .collect();
        let start = (self.start(), other.start());
        let mut seen = HashSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some((a, b)) = queue.pop_front() {
            if stop(a & self.accept() != 0, b & other.accept() != 0) {
                return true;
            }
            for sym in &alphabet {
                let na = self.step(a, *sym);
                if na == 0 {
                    continue;
                }
                let nb = other.step(b, *sym);
                if seen.insert((na, nb)) {
                    queue.push_back((na, nb));
                }
            }
        }
        false
    }

    /// Language inclusion: every resource matched by `self` is matched by `other`.
    pub fn is_subset_of(&self, other: &GlobPattern) -> bool {
        !self.product_search(other, |acc_self, acc_other| acc_self && !acc_other)
    }

    /// Whether some resource is matched by both patterns.
    pub fn intersects(&self, other: &GlobPattern) -> bool {
        self.product_search(other, |a, b| a && b)
    }
}

/// Restricts a location bound to particular concrete resources.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum ResourceGuard {
    /// Matches every resource.
    #[default]
    Any,
    /// Matches one byte-equal resource.
    Exact(String),
    Glob(GlobPattern),
}

impl ResourceGuard {
    /// Parses guard text. Text with a `*` or `**` segment is a glob, anything
    /// else is an exact resource.
    pub fn parse(text: &str) -> Result<Self, GuardError> {
        if text.is_empty() {
            return Err(GuardError::Empty);
        }
        if text.contains([')', '\n', '\r']) {
            return Err(GuardError::IllegalChar(text.to_string()));
        }
        let raw: Vec<Segment> = text
            .split('/')
            .map(|s| match s {
                "*" => Segment::Star,
                "**" => Segment::DoubleStar,
                lit => Segment::Lit(lit.to_string()),
            })
            .collect();
        if raw.iter().all(|s| matches!(s, Segment::Lit(_))) {
            return Ok(ResourceGuard::Exact(text.to_string()));
        }
        if raw.len() > MAX_GLOB_SEGMENTS {
            return Err(GuardError::TooLong(raw.len()));
        }
        Ok(ResourceGuard::Glob(GlobPattern::from_segments(raw)))
    }

    pub fn exact(resource: impl Into<String>) -> Self {
        ResourceGuard::Exact(resource.into())
    }

    /// Convenience for known-good glob text; panics on invalid input.
    pub fn glob(pattern: &str) -> Self {
        Self::parse(pattern).expect("valid glob pattern")
    }

    pub fn is_any(&self) -> bool {
        matches!(self, ResourceGuard::Any)
    }

    /// The guard text, or `None` for [`ResourceGuard::Any`].
    pub fn pattern(&self) -> Option<&str> {
        match self {
            ResourceGuard::Any => None,
            ResourceGuard::Exact(s) => Some(s),
            ResourceGuard::Glob(g) => Some(g.as_str()),
        }
    }

    pub fn matches(&self, resource: &str) -> bool {
        match self {
            ResourceGuard::Any => true,
            ResourceGuard::Exact(s) => s == resource,
            ResourceGuard::Glob(g) => g.matches(resource),
        }
    }

    /// Guard containment: every resource admitted by `self` is admitted by `other`.
    pub fn leq(&self, other: &ResourceGuard) -> bool {
        use ResourceGuard::*;
        match (self, other) {
            (_, Any) => true,
            (Any, _) => false,
            (Exact(a), Exact(b)) => a == b,
            (Exact(a), Glob(g)) => g.matches(a),
            // A canonical glob always has a wildcard, so it admits more than one resource.
            (Glob(_), Exact(_)) => false,
            (Glob(a), Glob(b)) => a.is_subset_of(b),
        }
    }

    /// Whether some resource is admitted by both guards.
    pub fn overlaps(&self, other: &ResourceGuard) -> bool {
        use ResourceGuard::*;
        match (self, other) {
            (Any, _) | (_, Any) => true,
            (Exact(a), Exact(b)) => a == b,
            (Exact(a), Glob(g)) | (Glob(g), Exact(a)) => g.matches(a),
            (Glob(a), Glob(b)) => a.intersects(b),
        }
    }

    /// Resource-axis generalizations, narrowest first.
    ///
    /// An exact resource lifts to its directory (`dir/*`) and then to the
    /// recursive glob of the directory above (`grandparent/**`). A glob lifts
    /// one recursive step. Lifts that would cover the whole namespace are
    /// omitted; dropping the guard altogether is the job of the class axis.
    pub fn widen(&self) -> Vec<ResourceGuard> {
        let parts: Vec<&str> = match self {
            ResourceGuard::Any => return Vec::new(),
            ResourceGuard::Exact(s) => s.split('/').collect(),
            ResourceGuard::Glob(g) => g.as_str().split('/').collect(),
        };
        let n = parts.len();
        let meaningful = |prefix: &[&str]| prefix.iter().any(|p| !p.is_empty());
        let with = |prefix: &[&str], wildcard: &str| {
            let mut text = prefix.join("/");
            text.push('/');
            text.push_str(wildcard);
            ResourceGuard::parse(&text).ok()
        };
        let mut out = Vec::new();
        match self {
            ResourceGuard::Exact(_) => {
                if n >= 2 && meaningful(&parts[..n - 1]) {
                    out.extend(with(&parts[..n - 1], "*"));
                }
                if n >= 3 && meaningful(&parts[..n - 2]) {
                    out.extend(with(&parts[..n - 2], "**"));
                }
            }
            ResourceGuard::Glob(_) => {
                let last = parts[n - 1];
                if (last == "*" || last == "**") && n >= 3 && meaningful(&parts[..n - 2]) {
                    out.extend(with(&parts[..n - 2], "**"));
                }
            }
            ResourceGuard::Any => {}
        }
        out.retain(|g| g != self && self.leq(g));
        out
    }
}

impl fmt::Display for ResourceGuard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pattern() {
            Some(p) => f.write_str(p),
            None => f.write_str("*any*"),
        }
    }
}
