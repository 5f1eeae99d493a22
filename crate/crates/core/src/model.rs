//! Domain types shared by every analysis stage: component and snapshot
//! identifiers, facts and relations, circuit activation records and roles.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ComponentKind {
    AttentionHead,
    Ffn,
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComponentKind::AttentionHead => "heads",
            ComponentKind::Ffn => "ffns",
        })
    }
}

/// An attention head or an FFN block.
///
/// The canonical text form is `a<layer>.<head>` for heads and `f<layer>` for
/// FFNs. Ordering puts all heads before all FFNs, each sorted by layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComponentId {
    Head { layer: u32, head: u32 },
    Ffn { layer: u32 },
}

impl ComponentId {
    pub fn head(layer: u32, head: u32) -> Self {
        ComponentId::Head { layer, head }
    }

    pub fn ffn(layer: u32) -> Self {
        ComponentId::Ffn { layer }
    }

    pub fn kind(&self) -> ComponentKind {
        match self {
            ComponentId::Head { .. } => ComponentKind::AttentionHead,
            ComponentId::Ffn { .. } => ComponentKind::Ffn,
        }
    }

    pub fn layer(&self) -> u32 {
        match *self {
            ComponentId::Head { layer, .. } | ComponentId::Ffn { layer } => layer,
        }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentId::Head { layer, head } => write!(f, "a{layer}.{head}"),
            ComponentId::Ffn { layer } => write!(f, "f{layer}"),
        }
    }
}

fn parse_index(digits: &str) -> Option<u32> {
    // Reject signs, whitespace and leading zeros so that format(parse(x)) == x.
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return None;
    }
    digits.parse().ok()
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let err = || Error::ParseComponent(text.to_string());
        if let Some(rest) = text.strip_prefix('a') {
            let (layer, head) = rest.split_once('.').ok_or_else(err)?;
            Ok(ComponentId::Head {
                layer: parse_index(layer).ok_or_else(err)?,
                head: parse_index(head).ok_or_else(err)?,
            })
        } else if let Some(rest) = text.strip_prefix('f') {
            Ok(ComponentId::Ffn {
                layer: parse_index(rest).ok_or_else(err)?,
            })
        } else {
            Err(err())
        }
    }
}

pub fn parse_component_id(text: &str) -> Result<ComponentId> {
    text.parse()
}

impl Serialize for ComponentId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Layer/head geometry of the analyzed model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub num_layers: u32,
    pub num_heads: u32,
}

impl ModelGeometry {
    pub fn new(num_layers: u32, num_heads: u32) -> Self {
        Self {
            num_layers,
            num_heads,
        }
    }

    pub fn contains(&self, c: ComponentId) -> bool {
        match c {
            ComponentId::Head { layer, head } => layer < self.num_layers && head < self.num_heads,
            ComponentId::Ffn { layer } => layer < self.num_layers,
        }
    }

    pub fn heads(&self) -> impl Iterator<Item = ComponentId> + '_ {
        (0..self.num_layers)
            .flat_map(move |l| (0..self.num_heads).map(move |h| ComponentId::head(l, h)))
    }

    pub fn ffns(&self) -> impl Iterator<Item = ComponentId> + '_ {
        (0..self.num_layers).map(ComponentId::ffn)
    }

    pub fn universe(&self) -> BTreeSet<ComponentId> {
        self.heads().chain(self.ffns()).collect()
    }

    pub fn universe_of(&self, kind: ComponentKind) -> BTreeSet<ComponentId> {
        match kind {
            ComponentKind::AttentionHead => self.heads().collect(),
            ComponentKind::Ffn => self.ffns().collect(),
        }
    }

    pub fn universe_size(&self) -> usize {
        (self.num_layers as usize) * (self.num_heads as usize + 1)
    }
}

/// A training snapshot: `S1..Sn` or the final `MAIN` model, which orders last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SnapshotId {
    Numbered(u32),
    Main,
}

impl fmt::Display for SnapshotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnapshotId::Numbered(i) => write!(f, "s{i}"),
            SnapshotId::Main => f.write_str("main"),
        }
    }
}

impl FromStr for SnapshotId {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let lower = text.to_ascii_lowercase();
        if lower == "main" {
            return Ok(SnapshotId::Main);
        }
        lower
            .strip_prefix('s')
            .and_then(parse_index)
            .filter(|&i| i >= 1)
            .map(SnapshotId::Numbered)
            .ok_or_else(|| Error::ParseSnapshot(text.to_string()))
    }
}

impl Serialize for SnapshotId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SnapshotId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Snapshot entry in a manifest. The tokens-seen annotation is metadata only;
/// ordering always follows [`SnapshotId`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotInfo {
    pub id: SnapshotId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_seen_b: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "LOC")]
    Loc,
    #[serde(rename = "NAME")]
    Name,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Loc => "loc",
            Group::Name => "name",
        })
    }
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// One prompt instance: a tokenized sentence with its SUBJECT and ANSWER spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactEntry {
    pub fact_id: String,
    #[serde(skip)]
    pub relation_id: String,
    #[serde(skip)]
    pub group: Option<Group>,
    pub subtokens: Vec<String>,
    pub subject_span: Span,
    pub answer_span: Span,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_period_index: Option<usize>,
}

impl FactEntry {
    pub fn len(&self) -> usize {
        self.subtokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtokens.is_empty()
    }

    /// The first answer subtoken, which logit records are scored against.
    pub fn gold_first_token(&self) -> &str {
        &self.subtokens[self.answer_span.start]
    }

    /// Returns every broken invariant, empty when the fact is valid.
    pub fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.subtokens.len();
        if self.fact_id.is_empty() || self.fact_id.chars().any(char::is_whitespace) {
            out.push(format!("fact id {:?} must be non-empty without whitespace", self.fact_id));
        }
        if n == 0 {
            out.push(format!("fact {} has no subtokens", self.fact_id));
            return out;
        }
        for (name, span) in [("subject", self.subject_span), ("answer", self.answer_span)] {
            if span.is_empty() {
                out.push(format!("fact {}: {name} span {:?} is empty", self.fact_id, span));
            } else if span.end > n {
                out.push(format!(
                    "fact {}: {name} span [{}, {}) exceeds {} subtokens",
                    self.fact_id, span.start, span.end, n
                ));
            }
        }
        if !self.subject_span.is_empty()
            && !self.answer_span.is_empty()
            && self.answer_span.start < self.subject_span.end
        {
            out.push(format!(
                "fact {}: answer span must follow the subject span without overlap",
                self.fact_id
            ));
        }
        if let Some(p) = self.final_period_index {
            if p >= n {
                out.push(format!(
                    "fact {}: final period index {p} out of range for {n} subtokens",
                    self.fact_id
                ));
            }
        }
        out
    }
}

/// A prompt template candidate evaluated during dataset construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub template_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub relation_id: String,
    pub group: Group,
    pub template: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidate_templates: Vec<Template>,
    pub facts: Vec<FactEntry>,
}

impl Relation {
    /// Copies relation id and group onto each fact.
    pub fn link_facts(&mut self) {
        for f in &mut self.facts {
            f.relation_id = self.relation_id.clone();
            f.group = Some(self.group);
        }
    }
}

/// Circuit membership `c_srft` at one output position: every component in
/// `active_components` is part of the route, every other one is not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationRecord {
    pub snapshot: SnapshotId,
    pub fact_id: String,
    pub token_pos: usize,
    pub active_components: BTreeSet<ComponentId>,
}

/// The five roles a component can hold at a snapshot. "Fact-answer" and
/// "answer-specific" name the same role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    General,
    Entity,
    RelationAnswer,
    FactAnswer,
    Deactivated,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::General,
        Role::Entity,
        Role::RelationAnswer,
        Role::FactAnswer,
        Role::Deactivated,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> char {
        match self {
            Role::General => 'g',
            Role::Entity => 'e',
            Role::RelationAnswer => 'r',
            Role::FactAnswer => 'f',
            Role::Deactivated => 'd',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::General => "general",
            Role::Entity => "entity",
            Role::RelationAnswer => "relation_answer",
            Role::FactAnswer => "fact_answer",
            Role::Deactivated => "deactivated",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        Ok(match text {
            "g" | "general" => Role::General,
            "e" | "entity" => Role::Entity,
            "r" | "relation_answer" => Role::RelationAnswer,
            "f" | "fact_answer" | "answer_specific" => Role::FactAnswer,
            "d" | "deactivated" => Role::Deactivated,
            other => return Err(Error::Input(format!("unknown role {other:?}"))),
        })
    }
}
