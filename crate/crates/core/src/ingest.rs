//! On-disk dataset layout and validation.
//!
//! A dataset directory holds:
//!
//! * `manifest.json`: geometry, snapshot list (MAIN last) and relations with their facts.
//! * `circuits.txt`: a `# circuits format_version=1` header, then one line per
//!   `(snapshot, fact, position)`: `<snapshot> <fact_id> <pos> [component ...]`.
//! * `logits.jsonl` (optional): a `{"format_version":1,"kind":"logits"}` header
//!   line, then one JSON object per `(snapshot, fact[, template])`.
//!
//! Loading validates every cross-reference and reports all issues together.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationIssue};
use crate::model::{
    ActivationRecord, ComponentId, FactEntry, Group, ModelGeometry, Relation, SnapshotId, SnapshotInfo,
};
use crate::probing::{LogitSnapshot, CANDIDATE_DEPTH};
use crate::store::CircuitStore;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CIRCUITS_FILE: &str = "circuits.txt";
pub const LOGITS_FILE: &str = "logits.jsonl";
pub const SUBJECT_SLOT: &str = "{subject}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub geometry: ModelGeometry,
    pub snapshots: Vec<SnapshotInfo>,
    pub relations: Vec<Relation>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, String>,
}

impl Manifest {
    pub fn snapshot_ids(&self) -> Vec<SnapshotId> {
        self.snapshots.iter().map(|s| s.id).collect()
    }

    pub fn facts(&self) -> impl Iterator<Item = &FactEntry> {
        self.relations.iter().flat_map(|r| &r.facts)
    }

    fn link(&mut self) {
        self.relations.iter_mut().for_each(Relation::link_facts);
    }

    fn check(&self) -> Vec<ValidationIssue> {
        let issue = |m: String| ValidationIssue::new(MANIFEST_FILE, None, m);
        let mut out = Vec::new();
        if self.format_version != FORMAT_VERSION {
            out.push(issue(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.geometry.num_layers == 0 || self.geometry.num_heads == 0 {
            out.push(issue("geometry needs at least one layer and one head".into()));
        }
        let ids = self.snapshot_ids();
        let mains = ids.iter().filter(|s| **s == SnapshotId::Main).count();
        if mains != 1 {
            out.push(issue(format!("MAIN must appear exactly once, found {mains}")));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            out.push(issue("snapshots must be unique and listed in order with MAIN last".into()));
        }
        if self.relations.is_empty() {
            out.push(issue("no relations".into()));
        }
        let mut rel_ids = HashSet::new();
        let mut fact_ids = HashSet::new();
        for r in &self.relations {
            if !rel_ids.insert(r.relation_id.as_str()) {
                out.push(issue(format!("duplicate relation id {}", r.relation_id)));
            }
            if r.facts.is_empty() {
                out.push(issue(format!("relation {} has no facts", r.relation_id)));
            }
            let slots = |t: &str| t.matches(SUBJECT_SLOT).count();
            if slots(&r.template) != 1 {
                out.push(issue(format!(
                    "template of relation {} must contain exactly one {SUBJECT_SLOT} slot",
                    r.relation_id
                )));
            }
            for t in &r.candidate_templates {
                if slots(&t.text) != 1 {
                    out.push(issue(format!(
                        "candidate template {} of relation {} must contain exactly one {SUBJECT_SLOT} slot",
                        t.template_id, r.relation_id
                    )));
                }
            }
            for f in &r.facts {
                if !fact_ids.insert(f.fact_id.as_str()) {
                    out.push(issue(format!("duplicate fact id {}", f.fact_id)));
                }
                out.extend(f.check().into_iter().map(issue));
            }
        }
        out
    }
}

/// A validated dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub circuits: CircuitStore,
    pub logits: Vec<LogitSnapshot>,
}

/// Which relations an analysis covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupFilter {
    #[default]
    All,
    Loc,
    Name,
}

impl GroupFilter {
    pub fn admits(self, g: Group) -> bool {
        match self {
            GroupFilter::All => true,
            GroupFilter::Loc => g == Group::Loc,
            GroupFilter::Name => g == Group::Name,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroupFilter::All => "all",
            GroupFilter::Loc => "loc",
            GroupFilter::Name => "name",
        }
    }
}

impl std::str::FromStr for GroupFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(GroupFilter::All),
            "loc" => Ok(GroupFilter::Loc),
            "name" => Ok(GroupFilter::Name),
            other => Err(Error::Input(format!("unknown group {other:?}"))),
        }
    }
}

impl Dataset {
    /// Assembles an in-memory dataset, validating it as [`load_dataset`] would.
    pub fn new(mut manifest: Manifest, records: Vec<ActivationRecord>, logits: Vec<LogitSnapshot>) -> Result<Self> {
        manifest.link();
        let mut issues = manifest.check();
        let mut circuits = CircuitStore::new();
        if issues.is_empty() {
            let index = FactIndex::new(&manifest);
            for (i, r) in records.into_iter().enumerate() {
                let loc = Some(i + 1);
                issues.extend(index.check_record(&r, CIRCUITS_FILE, loc));
                let key = format!("{} {} {}", r.snapshot, r.fact_id, r.token_pos);
                if !circuits.insert(r) {
                    issues.push(ValidationIssue::new(CIRCUITS_FILE, loc, format!("duplicate record {key}")));
                }
            }
            issues.extend(index.check_logits(&logits));
        }
        if !issues.is_empty() {
            return Err(Error::Validation(issues));
        }
        Ok(Self {
            manifest,
            circuits,
            logits,
        })
    }

    pub fn snapshots(&self) -> Vec<SnapshotId> {
        self.manifest.snapshot_ids()
    }

    pub fn geometry(&self) -> ModelGeometry {
        self.manifest.geometry
    }

    /// Relations admitted by `group`, in manifest order.
    pub fn relations(&self, group: GroupFilter) -> Vec<Relation> {
        self.manifest
            .relations
            .iter()
            .filter(|r| group.admits(r.group))
            .cloned()
            .collect()
    }

    pub fn fact(&self, fact_id: &str) -> Option<&FactEntry> {
        self.manifest.facts().find(|f| f.fact_id == fact_id)
    }
}

struct FactIndex<'a> {
    geometry: ModelGeometry,
    snapshots: BTreeSet<SnapshotId>,
    facts: HashMap<&'a str, &'a FactEntry>,
}

impl<'a> FactIndex<'a> {
    fn new(m: &'a Manifest) -> Self {
        Self {
            geometry: m.geometry,
            snapshots: m.snapshot_ids().into_iter().collect(),
            facts: m.facts().map(|f| (f.fact_id.as_str(), f)).collect(),
        }
    }

    fn check_record(&self, r: &ActivationRecord, file: &str, line: Option<usize>) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        let mut push = |m: String| out.push(ValidationIssue::new(file, line, m));
        if !self.snapshots.contains(&r.snapshot) {
            push(format!("unknown snapshot {}", r.snapshot));
        }
        match self.facts.get(r.fact_id.as_str()) {
            None => push(format!("unknown fact {}", r.fact_id)),
            Some(f) if r.token_pos >= f.len() => push(format!(
                "token_pos {} out of range for fact {} with {} subtokens",
                r.token_pos,
                r.fact_id,
                f.len()
            )),
            Some(_) => {}
        }
        for c in &r.active_components {
            if !self.geometry.contains(*c) {
                push(format!("component {c} outside model geometry"));
            }
        }
        out
    }

    fn check_logits(&self, logits: &[LogitSnapshot]) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for (i, l) in logits.iter().enumerate() {
            // Header occupies line 1.
            let line = Some(i + 2);
            let mut push = |m: String| out.push(ValidationIssue::new(LOGITS_FILE, line, m));
            if !self.snapshots.contains(&l.snapshot) {
                push(format!("unknown snapshot {}", l.snapshot));
            }
            if !seen.insert((l.snapshot, l.fact_id.clone(), l.template_id.clone())) {
                push(format!("duplicate logits record for {} {}", l.snapshot, l.fact_id));
            }
            if l.candidates.len() < CANDIDATE_DEPTH {
                push(format!(
                    "fact {} lists {} candidates, need at least {CANDIDATE_DEPTH}",
                    l.fact_id,
                    l.candidates.len()
                ));
            }
            match self.facts.get(l.fact_id.as_str()) {
                None => push(format!("unknown fact {}", l.fact_id)),
                Some(f) => {
                    for m in l.check(f.gold_first_token()) {
                        push(format!("fact {}: {m}", l.fact_id));
                    }
                }
            }
        }
        out
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn circuits_header() -> String {
    format!("# circuits format_version={FORMAT_VERSION}")
}

/// Parses circuit records; syntax problems are appended to `issues`.
pub fn parse_circuits(text: &str, issues: &mut Vec<ValidationIssue>) -> Vec<(usize, ActivationRecord)> {
    let mut out = Vec::new();
    let mut saw_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        let mut push = |m: String| issues.push(ValidationIssue::new(CIRCUITS_FILE, Some(line_no), m));
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if !saw_header {
                let version = comment
                    .split_whitespace()
                    .find_map(|kv| kv.strip_prefix("format_version="));
                match version.map(str::parse::<u32>) {
                    Some(Ok(FORMAT_VERSION)) => saw_header = true,
                    Some(_) => push(format!("unsupported circuits format version in {line:?}")),
                    None => {}
                }
            }
            continue;
        }
        if !saw_header {
            push("missing `# circuits format_version=1` header".into());
            saw_header = true;
        }
        let mut fields = line.split_whitespace();
        let (Some(snap), Some(fact), Some(pos)) = (fields.next(), fields.next(), fields.next()) else {
            push(format!("expected `<snapshot> <fact_id> <pos> [components]`, got {line:?}"));
            continue;
        };
        let snapshot = match snap.parse::<SnapshotId>() {
            Ok(s) => s,
            Err(e) => {
                push(e.to_string());
                continue;
            }
        };
        let Ok(token_pos) = pos.parse::<usize>() else {
            push(format!("invalid token position {pos:?}"));
            continue;
        };
        let mut active = BTreeSet::new();
        let mut ok = true;
        for tok in fields {
            match tok.parse::<ComponentId>() {
                Ok(c) => {
                    if !active.insert(c) {
                        push(format!("component {c} listed twice"));
                    }
                }
                Err(e) => {
                    push(e.to_string());
                    ok = false;
                }
            }
        }
        if ok {
            out.push((
                line_no,
                ActivationRecord {
                    snapshot,
                    fact_id: fact.to_string(),
                    token_pos,
                    active_components: active,
                },
            ));
        }
    }
    if !saw_header {
        issues.push(ValidationIssue::new(CIRCUITS_FILE, None, "missing circuits header"));
    }
    out
}

pub fn format_circuits(records: impl IntoIterator<Item = ActivationRecord>) -> String {
    let mut out = circuits_header();
    out.push('\n');
    for r in records {
        let _ = write!(out, "{} {} {}", r.snapshot, r.fact_id, r.token_pos);
        for c in &r.active_components {
            let _ = write!(out, " {c}");
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize, Deserialize)]
struct LogitsHeader {
    format_version: u32,
    kind: String,
}

pub fn parse_logits(text: &str, issues: &mut Vec<ValidationIssue>) -> Vec<LogitSnapshot> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next().map(|(_, l)| serde_json::from_str::<LogitsHeader>(l)) {
        Some(Ok(h)) if h.format_version == FORMAT_VERSION && h.kind == "logits" => {}
        _ => issues.push(ValidationIssue::new(
            LOGITS_FILE,
            Some(1),
            "expected header {\"format_version\":1,\"kind\":\"logits\"}",
        )),
    }
    lines
        .filter_map(|(i, l)| match serde_json::from_str::<LogitSnapshot>(l) {
            Ok(r) => Some(r),
            Err(e) => {
                issues.push(ValidationIssue::new(LOGITS_FILE, Some(i + 1), e.to_string()));
                None
            }
        })
        .collect()
}

pub fn format_logits(logits: &[LogitSnapshot]) -> Result<String> {
    let mut out = serde_json::to_string(&LogitsHeader {
        format_version: FORMAT_VERSION,
        kind: "logits".into(),
    })?;
    out.push('\n');
    for l in logits {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    Ok(out)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_text = read(&root.join(MANIFEST_FILE))?;
    let mut manifest: Manifest = serde_json::from_str(&manifest_text).map_err(|e| {
        Error::Validation(vec![ValidationIssue::new(MANIFEST_FILE, Some(e.line()), e.to_string())])
    })?;
    manifest.link();
    let mut issues = manifest.check();
    if !issues.is_empty() {
        return Err(Error::Validation(issues));
    }

    let circuits_text = read(&root.join(CIRCUITS_FILE))?;
    let parsed = parse_circuits(&circuits_text, &mut issues);
    let logits_path = root.join(LOGITS_FILE);
    let logits = if logits_path.exists() {
        parse_logits(&read(&logits_path)?, &mut issues)
    } else {
        Vec::new()
    };

    let index = FactIndex::new(&manifest);
    let mut circuits = CircuitStore::new();
    for (line, r) in parsed {
        issues.extend(index.check_record(&r, CIRCUITS_FILE, Some(line)));
        let key = format!("{} {} {}", r.snapshot, r.fact_id, r.token_pos);
        if !circuits.insert(r) {
            issues.push(ValidationIssue::new(CIRCUITS_FILE, Some(line), format!("duplicate record {key}")));
        }
    }
    issues.extend(index.check_logits(&logits));
    if !issues.is_empty() {
        return Err(Error::Validation(issues));
    }
    log::info!(
        "loaded {} snapshots, {} facts, {} circuit records, {} logit records",
        manifest.snapshots.len(),
        manifest.facts().count(),
        circuits.len(),
        logits.len()
    );
    Ok(Dataset {
        manifest,
        circuits,
        logits,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes a dataset directory; the logits file is omitted when there are no logits.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = serde_json::to_string_pretty(&dataset.manifest)?;
    manifest.push('\n');
    write(&root.join(MANIFEST_FILE), &manifest)?;
    write(&root.join(CIRCUITS_FILE), &format_circuits(dataset.circuits.records()))?;
    let logits_path = root.join(LOGITS_FILE);
    if dataset.logits.is_empty() {
        if logits_path.exists() {
            fs::remove_file(&logits_path).map_err(|e| Error::io(&logits_path, e))?;
        }
    } else {
        write(&logits_path, &format_logits(&dataset.logits)?)?;
    }
    Ok(())
}
