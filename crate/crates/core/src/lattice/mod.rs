//! The risk lattice.
//!
//! A [`Boundary`] summarizes one information flow as an input location, an
//! output location, a taint set and an effect set. Boundaries are ordered
//! componentwise: location classes by their containment chains, guards by
//! resource containment, taint and effects by set inclusion. Everything the
//! policy engine does reduces to [`Boundary::leq`].

mod guard;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use guard::{GlobPattern, GuardError, ResourceGuard, MAX_GLOB_SEGMENTS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {kind} `{value}`")]
pub struct UnknownName {
    pub kind: &'static str,
    pub value: String,
}

/// Abstract location classes.
///
/// `exact ⊑ parent ⊑ local` and `intnet ⊑ extnet`; `ctxt` is comparable only
/// with itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationClass {
    Exact,
    Parent,
    Local,
    Ctxt,
    Intnet,
    Extnet,
}

impl LocationClass {
    pub const ALL: [LocationClass; 6] = [
        LocationClass::Exact,
        LocationClass::Parent,
        LocationClass::Local,
        LocationClass::Ctxt,
        LocationClass::Intnet,
        LocationClass::Extnet,
    ];

    /// Position in its chain, and the chain it belongs to.
    fn chain(self) -> (u8, u8) {
        match self {
            LocationClass::Exact => (0, 0),
            LocationClass::Parent => (0, 1),
            LocationClass::Local => (0, 2),
            LocationClass::Ctxt => (1, 0),
            LocationClass::Intnet => (2, 0),
            LocationClass::Extnet => (2, 1),
        }
    }

    pub fn leq(self, other: LocationClass) -> bool {
        let (c1, r1) = self.chain();
        let (c2, r2) = other.chain();
        c1 == c2 && r1 <= r2
    }

    /// Two classes have a common lower bound iff they share a chain.
    pub fn same_chain(self, other: LocationClass) -> bool {
        self.chain().0 == other.chain().0
    }

    /// The immediate cover of this class, if any.
    pub fn cover(self) -> Option<LocationClass> {
        match self {
            LocationClass::Exact => Some(LocationClass::Parent),
            LocationClass::Parent => Some(LocationClass::Local),
            LocationClass::Intnet => Some(LocationClass::Extnet),
            LocationClass::Local | LocationClass::Ctxt | LocationClass::Extnet => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LocationClass::Exact => "exact",
            LocationClass::Parent => "parent",
            LocationClass::Local => "local",
            LocationClass::Ctxt => "ctxt",
            LocationClass::Intnet => "intnet",
            LocationClass::Extnet => "extnet",
        }
    }
}

impl FromStr for LocationClass {
    type Err = UnknownName;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LocationClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| UnknownName { kind: "location class", value: s.to_string() })
    }
}

impl fmt::Display for LocationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaintLabel {
    Tainted,
    Untainted,
}

impl TaintLabel {
    pub const ALL: [TaintLabel; 2] = [TaintLabel::Tainted, TaintLabel::Untainted];

    /// `⊕`: tainted absorbs.
    pub fn combine(self, other: TaintLabel) -> TaintLabel {
        if self == TaintLabel::Tainted || other == TaintLabel::Tainted {
            TaintLabel::Tainted
        } else {
            TaintLabel::Untainted
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaintLabel::Tainted => "tainted",
            TaintLabel::Untainted => "untainted",
        }
    }

    fn bit(self) -> u8 {
        match self {
            TaintLabel::Tainted => 1,
            TaintLabel::Untainted => 2,
        }
    }
}

impl FromStr for TaintLabel {
    type Err = UnknownName;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaintLabel::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownName { kind: "taint label", value: s.to_string() })
    }
}

impl fmt::Display for TaintLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Read,
    Write,
    Del,
    Exec,
    Spawn,
}

impl Effect {
    pub const ALL: [Effect; 5] = [Effect::Read, Effect::Write, Effect::Del, Effect::Exec, Effect::Spawn];

    pub fn as_str(self) -> &'static str {
        match self {
            Effect::Read => "read",
            Effect::Write => "write",
            Effect::Del => "del",
            Effect::Exec => "exec",
            Effect::Spawn => "spawn",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl FromStr for Effect {
    type Err = UnknownName;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Effect::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| UnknownName { kind: "effect", value: s.to_string() })
    }
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

macro_rules! label_set {
    ($(#[$meta:meta])* $name:ident, $item:ty, $width:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
        pub struct $name(u8);

        impl $name {
            pub const EMPTY: $name = $name(0);
            pub const FULL: $name = $name((1u8 << $width) - 1);

            pub fn from_bits(bits: u8) -> Self {
                $name(bits & Self::FULL.0)
            }

            pub fn bits(self) -> u8 {
                self.0
            }

            pub fn contains(self, item: $item) -> bool {
                self.0 & item.bit() != 0
            }

            pub fn insert(&mut self, item: $item) {
                self.0 |= item.bit();
            }

            pub fn is_empty(self) -> bool {
                self.0 == 0
            }

            pub fn is_subset(self, other: $name) -> bool {
                self.0 & !other.0 == 0
            }

            pub fn union(self, other: $name) -> $name {
                $name(self.0 | other.0)
            }

            pub fn intersects(self, other: $name) -> bool {
                self.0 & other.0 != 0
            }

            pub fn iter(self) -> impl Iterator<Item = $item> {
                <$item>::ALL.into_iter().filter(move |i| self.contains(*i))
            }

            /// Every subset, in bit order.
            pub fn all() -> impl Iterator<Item = $name> {
                (0..=Self::FULL.0).map($name)
            }
        }

        impl FromIterator<$item> for $name {
            fn from_iter<I: IntoIterator<Item = $item>>(iter: I) -> Self {
                let mut set = $name::EMPTY;
                for i in iter {
                    set.insert(i);
                }
                set
            }
        }

        impl<const N: usize> From<[$item; N]> for $name {
            fn from(items: [$item; N]) -> Self {
                items.into_iter().collect()
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.debug_set().entries(self.iter()).finish()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let names: Vec<&str> = self.iter().map(|i| i.as_str()).collect();
                f.write_str(&names.join(","))
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_seq(self.iter())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let items = Vec::<$item>::deserialize(d)?;
                Ok(items.into_iter().collect())
            }
        }
    };
}

label_set!(
    /// A subset of `{tainted, untainted}`, ordered by inclusion.
    TaintSet,
    TaintLabel,
    2
);
label_set!(
    /// A subset of `{read, write, del, exec, spawn}`, ordered by inclusion.
    EffectSet,
    Effect,
    5
);

impl From<TaintLabel> for TaintSet {
    fn from(label: TaintLabel) -> Self {
        [label].into()
    }
}

impl From<Effect> for EffectSet {
    fn from(effect: Effect) -> Self {
        [effect].into()
    }
}

impl TaintSet {
    /// The strictest label in the set; `None` for the empty set.
    pub fn strictest(self) -> Option<TaintLabel> {
        if self.contains(TaintLabel::Tainted) {
            Some(TaintLabel::Tainted)
        } else if self.contains(TaintLabel::Untainted) {
            Some(TaintLabel::Untainted)
        } else {
            None
        }
    }
}

/// A location class refined by a resource guard.
///
/// `concrete` records the resource of a concrete call. It is metadata for
/// taint bookkeeping and display and does not take part in the order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocationBound {
    pub class: LocationClass,
    #[serde(default, with = "guard_text", skip_serializing_if = "ResourceGuard::is_any")]
    pub guard: ResourceGuard,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concrete: Option<String>,
}

mod guard_text {
    use super::ResourceGuard;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(g: &ResourceGuard, s: S) -> Result<S::Ok, S::Error> {
        match g.pattern() {
            Some(p) => s.serialize_str(p),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ResourceGuard, D::Error> {
        match Option::<String>::deserialize(d)? {
            None => Ok(ResourceGuard::Any),
            Some(text) => ResourceGuard::parse(&text).map_err(serde::de::Error::custom),
        }
    }
}

impl LocationBound {
    pub fn class(class: LocationClass) -> Self {
        LocationBound { class, guard: ResourceGuard::Any, concrete: None }
    }

    pub fn guarded(class: LocationClass, guard: ResourceGuard) -> Self {
        LocationBound { class, guard, concrete: None }
    }

    /// The bound of a concrete call on `resource`: exact guard plus the resource itself.
    pub fn concrete(class: LocationClass, resource: impl Into<String>) -> Self {
        let resource = resource.into();
        LocationBound {
            class,
            guard: ResourceGuard::Exact(resource.clone()),
            concrete: Some(resource),
        }
    }

    pub fn leq(&self, other: &LocationBound) -> bool {
        self.class.leq(other.class) && self.guard.leq(&other.guard)
    }

    /// Some location bound lies below both.
    pub fn overlaps(&self, other: &LocationBound) -> bool {
        self.class.same_chain(other.class) && self.guard.overlaps(&other.guard)
    }

    /// Drops the concrete resource, keeping class and guard.
    pub fn to_rule_bound(&self) -> LocationBound {
        LocationBound { class: self.class, guard: self.guard.clone(), concrete: None }
    }
}

impl fmt::Display for LocationBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.guard.pattern() {
            Some(p) => write!(f, "{}({})", self.class, p),
            None => write!(f, "{}", self.class),
        }
    }
}

/// A flow summary `input -[taint; effects]-> output`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Boundary {
    pub input: LocationBound,
    pub output: LocationBound,
    pub taint: TaintSet,
    pub effects: EffectSet,
}

/// Number of boundaries in the guard-free lattice: 6 × 6 × 4 × 32.
pub const ABSTRACT_LATTICE_SIZE: usize = 6 * 6 * 4 * 32;

impl Boundary {
    pub fn new(input: LocationBound, output: LocationBound, taint: TaintSet, effects: EffectSet) -> Self {
        Boundary { input, output, taint, effects }
    }

    /// Guard-free boundary from lattice coordinates.
    pub fn abstract_point(
        input: LocationClass,
        output: LocationClass,
        taint: impl Into<TaintSet>,
        effects: impl Into<EffectSet>,
    ) -> Self {
        Boundary {
            input: LocationBound::class(input),
            output: LocationBound::class(output),
            taint: taint.into(),
            effects: effects.into(),
        }
    }

    /// Subsumption: `self ⊑ other` iff every component is contained in the
    /// corresponding component of `other`.
    pub fn leq(&self, other: &Boundary) -> bool {
        self.taint.is_subset(other.taint)
            && self.effects.is_subset(other.effects)
            && self.input.leq(&other.input)
            && self.output.leq(&other.output)
    }

    pub fn strictly_below(&self, other: &Boundary) -> bool {
        self.leq(other) && !other.leq(self)
    }

    /// Equal as lattice points (mutual subsumption).
    pub fn equivalent(&self, other: &Boundary) -> bool {
        self.leq(other) && other.leq(self)
    }

    /// Some boundary lies below both.
    pub fn overlaps(&self, other: &Boundary) -> bool {
        // The empty taint and effect sets are common lower bounds, so only
        // the location dimensions can separate two boundaries.
        self.input.overlaps(&other.input) && self.output.overlaps(&other.output)
    }

    pub fn is_abstract(&self) -> bool {
        self.input.guard.is_any() && self.output.guard.is_any()
    }

    /// The same point without concrete-resource metadata.
    pub fn to_rule_boundary(&self) -> Boundary {
        Boundary {
            input: self.input.to_rule_bound(),
            output: self.output.to_rule_bound(),
            taint: self.taint,
            effects: self.effects,
        }
    }

    /// The same lattice coordinates with all guards dropped.
    pub fn without_guards(&self) -> Boundary {
        Boundary::abstract_point(self.input.class, self.output.class, self.taint, self.effects)
    }

    /// Every point of the guard-free lattice, in a fixed order.
    pub fn all_abstract() -> Vec<Boundary> {
        let mut out = Vec::with_capacity(ABSTRACT_LATTICE_SIZE);
        for input in LocationClass::ALL {
            for output in LocationClass::ALL {
                for taint in TaintSet::all() {
                    for effects in EffectSet::all() {
                        out.push(Boundary::abstract_point(input, output, taint, effects));
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -[{}; {}]-> {}", self.input, self.taint, self.effects, self.output)
    }
}

pub fn location_class_leq(a: LocationClass, b: LocationClass) -> bool {
    a.leq(b)
}

pub fn boundary_leq(phi: &Boundary, phi_prime: &Boundary) -> bool {
    phi.leq(phi_prime)
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Side {
    Input,
    Output,
}

fn lift_bound(bound: &LocationBound) -> Vec<(u8, LocationBound)> {
    let mut out = Vec::new();
    for (i, guard) in bound.guard.widen().into_iter().enumerate() {
        // A directory-wide guard no longer pins a user-referenced resource.
        let class = if bound.class == LocationClass::Exact {
            LocationClass::Parent
        } else {
            bound.class
        };
        out.push((1 + i as u8, LocationBound::guarded(class, guard)));
    }
    if let Some(up) = bound.class.cover() {
        out.push((3, LocationBound::class(up)));
    }
    out
}

/// Single-step generalizations of `phi`, narrowest first.
///
/// Along the resource axis each guard widens to `dir/*` and then
/// `grandparent/**`; along the abstract axis each location class lifts to its
/// immediate cover with the guard dropped. Taint and effects are never lifted.
/// Every candidate strictly covers `phi`; candidates carry no concrete
/// resources.
pub fn lift_candidates(phi: &Boundary) -> Vec<Boundary> {
    let base = phi.to_rule_boundary();
    let mut ranked: Vec<(u8, Side, Boundary)> = Vec::new();
    for (rank, bound) in lift_bound(&phi.input) {
        let mut c = base.clone();
        c.input = bound;
        ranked.push((rank, Side::Input, c));
    }
    for (rank, bound) in lift_bound(&phi.output) {
        let mut c = base.clone();
        c.output = bound;
        ranked.push((rank, Side::Output, c));
    }
    ranked.sort_by_key(|(rank, side, _)| (*rank, *side));
    let mut out: Vec<Boundary> = Vec::with_capacity(ranked.len());
    for (_, _, c) in ranked {
        if phi.strictly_below(&c) && !out.iter().any(|o| o.equivalent(&c)) {
            out.push(c);
        }
    }
    out
}
