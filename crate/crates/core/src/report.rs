//! Tabular report emission as CSV or JSON.
//!
//! Every table has a fixed column order and rows are produced in a fixed
//! order (group, kind, snapshot, role, ...), so identical analyses always
//! produce identical bytes. An empty [`Analyses`] yields header-only tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::analysis::{switch_pairs, Analyses, GroupAnalysis, KindAnalysis};
use crate::error::{Error, Result};
use crate::ingest::FORMAT_VERSION;
use crate::model::Role;
use crate::probing::FactValidity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Str(String),
    Int(u64),
    Float(f64),
    Bool(bool),
    Empty,
}

impl Cell {
    fn to_csv(&self) -> String {
        match self {
            Cell::Str(s) => s.clone(),
            Cell::Int(n) => n.to_string(),
            Cell::Float(x) => x.to_string(),
            Cell::Bool(b) => b.to_string(),
            Cell::Empty => String::new(),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Str(s) => json!(s),
            Cell::Int(n) => json!(n),
            Cell::Float(x) => json!(x),
            Cell::Bool(b) => json!(b),
            Cell::Empty => Value::Null,
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Str(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Str(s)
    }
}

impl From<u64> for Cell {
    fn from(n: u64) -> Self {
        Cell::Int(n)
    }
}

impl From<usize> for Cell {
    fn from(n: usize) -> Self {
        Cell::Int(n as u64)
    }
}

impl From<u32> for Cell {
    fn from(n: u32) -> Self {
        Cell::Int(u64::from(n))
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(b)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(name: &'static str, columns: &[&'static str]) -> Self {
        Self {
            name,
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len(), "table {}", self.name);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::to_csv))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| Value::Array(r.iter().map(Cell::to_json).collect()))
            .collect();
        let doc = json!({
            "format_version": FORMAT_VERSION,
            "table": self.name,
            "columns": self.columns,
            "rows": rows,
        });
        let mut s = serde_json::to_string_pretty(&doc)?;
        s.push('\n');
        Ok(s)
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }
}

pub const ROLE_COUNTS: &str = "role_counts";
pub const ROLE_TRENDS: &str = "role_trends";
pub const ROLE_ASSIGNMENTS: &str = "role_assignments";
pub const EXCLUSIONS: &str = "exclusions";
pub const IOU: &str = "iou";
pub const SWITCHES: &str = "switches";
pub const SWITCHES_PER_PAIR: &str = "switches_per_pair";
pub const SWITCHES_CUMULATIVE: &str = "switches_cumulative";
pub const SWITCHES_PER_LAYER: &str = "switches_per_layer";
pub const MARKOV: &str = "markov";
pub const ACCURACY: &str = "accuracy";
pub const TEMPLATE_SCORES: &str = "template_scores";
pub const FACT_VALIDITY: &str = "fact_validity";

pub const ALL_TABLES: [&str; 13] = [
    ROLE_COUNTS,
    ROLE_TRENDS,
    ROLE_ASSIGNMENTS,
    EXCLUSIONS,
    IOU,
    SWITCHES,
    SWITCHES_PER_PAIR,
    SWITCHES_CUMULATIVE,
    SWITCHES_PER_LAYER,
    MARKOV,
    ACCURACY,
    TEMPLATE_SCORES,
    FACT_VALIDITY,
];

fn scope(g: &GroupAnalysis, k: &KindAnalysis) -> [Cell; 2] {
    [g.group.as_str().into(), k.kind.to_string().into()]
}

fn with_scope(g: &GroupAnalysis, k: &KindAnalysis, rest: Vec<Cell>) -> Vec<Cell> {
    scope(g, k).into_iter().chain(rest).collect()
}

fn kinds(a: &Analyses) -> impl Iterator<Item = (&GroupAnalysis, &KindAnalysis)> {
    a.groups.iter().flat_map(|g| g.kinds().into_iter().map(move |k| (g, k)))
}

fn role_counts(a: &Analyses) -> Table {
    let mut t = Table::new(
        ROLE_COUNTS,
        &[
            "group",
            "kind",
            "snapshot",
            "general",
            "entity",
            "relation_answer",
            "fact_answer",
            "deactivated",
            "universe",
        ],
    );
    for (g, k) in kinds(a) {
        for (s, sets) in &k.role_sets {
            let counts = sets.counts();
            let mut row = vec![s.to_string().into()];
            row.extend(counts.iter().map(|&c| Cell::from(c)));
            row.push(sets.universe_len().into());
            t.push(with_scope(g, k, row));
        }
    }
    t
}

fn role_trends(a: &Analyses) -> Table {
    let mut t = Table::new(ROLE_TRENDS, &["group", "kind", "role", "trend"]);
    for (g, k) in kinds(a) {
        for (r, trend) in &k.count_trends {
            let name = serde_json::to_value(trend)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default();
            t.push(with_scope(g, k, vec![r.name().into(), name.into()]));
        }
    }
    t
}

fn role_assignments(a: &Analyses) -> Table {
    let mut t = Table::new(
        ROLE_ASSIGNMENTS,
        &[
            "group",
            "kind",
            "snapshot",
            "component",
            "role",
            "general_score",
            "entity_score",
            "max_relation",
            "max_relation_score",
            "max_fact",
            "max_fact_score",
        ],
    );
    for (g, k) in kinds(a) {
        for (s, sets) in &k.role_sets {
            let scores = g.scores.get(s);
            for traj in &k.trajectories {
                let c = traj.component;
                let Ok(role) = sets.role_of(c) else { continue };
                let sc = scores.and_then(|x| x.scores.get(&c));
                let rel = sc.and_then(|x| x.max_relation());
                let fact = sc.and_then(|x| x.max_fact());
                t.push(with_scope(
                    g,
                    k,
                    vec![
                        s.to_string().into(),
                        c.to_string().into(),
                        role.name().into(),
                        sc.map_or(0.0, |x| x.general).into(),
                        sc.map_or(0.0, |x| x.entity).into(),
                        rel.map(|(r, _)| r.to_string()).into(),
                        rel.map_or(0.0, |(_, v)| v).into(),
                        fact.map(|(f, _)| f.to_string()).into(),
                        fact.map_or(0.0, |(_, v)| v).into(),
                    ],
                ));
            }
        }
    }
    t
}

fn exclusions(a: &Analyses) -> Table {
    let mut t = Table::new(EXCLUSIONS, &["group", "snapshot", "general", "entity", "answer"]);
    for g in &a.groups {
        for (s, sc) in &g.scores {
            let e = sc.exclusions;
            t.push(vec![
                g.group.as_str().into(),
                s.to_string().into(),
                e.general.into(),
                e.entity.into(),
                e.answer.into(),
            ]);
        }
    }
    t
}

fn iou(a: &Analyses) -> Table {
    let mut t = Table::new(IOU, &["group", "kind", "role", "snapshot", "iou", "both_empty"]);
    for (g, k) in kinds(a) {
        for (r, series) in &k.iou {
            for p in series {
                t.push(with_scope(
                    g,
                    k,
                    vec![r.name().into(), p.snapshot.to_string().into(), p.iou.into(), p.both_empty.into()],
                ));
            }
        }
    }
    t
}

fn switches(a: &Analyses) -> Table {
    let mut t = Table::new(SWITCHES, &["group", "kind", "snapshots", "from", "to", "count"]);
    for (g, k) in kinds(a) {
        let sel = k.selected.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        for (from, to) in switch_pairs() {
            t.push(with_scope(
                g,
                k,
                vec![sel.clone().into(), from.name().into(), to.name().into(), k.switches.count(from, to).into()],
            ));
        }
    }
    t
}

fn switches_per_pair(a: &Analyses) -> Table {
    let mut t = Table::new(
        SWITCHES_PER_PAIR,
        &["group", "kind", "from_snapshot", "to_snapshot", "from", "to", "count"],
    );
    for (g, k) in kinds(a) {
        for (w, m) in k.selected.windows(2).zip(&k.switches_per_pair) {
            for (from, to) in switch_pairs() {
                t.push(with_scope(
                    g,
                    k,
                    vec![
                        w[0].to_string().into(),
                        w[1].to_string().into(),
                        from.name().into(),
                        to.name().into(),
                        m.count(from, to).into(),
                    ],
                ));
            }
        }
    }
    t
}

fn switches_cumulative(a: &Analyses) -> Table {
    let mut t = Table::new(SWITCHES_CUMULATIVE, &["group", "kind", "through_snapshot", "from", "to", "count"]);
    for (g, k) in kinds(a) {
        for (s, m) in k.selected.iter().skip(1).zip(&k.switches_cumulative) {
            for (from, to) in switch_pairs() {
                t.push(with_scope(
                    g,
                    k,
                    vec![s.to_string().into(), from.name().into(), to.name().into(), m.count(from, to).into()],
                ));
            }
        }
    }
    t
}

fn switches_per_layer(a: &Analyses) -> Table {
    let mut t = Table::new(SWITCHES_PER_LAYER, &["group", "kind", "layer", "from", "to", "count"]);
    for (g, k) in kinds(a) {
        for (&layer, &n) in &k.per_layer_total {
            t.push(with_scope(g, k, vec![layer.into(), "any".into(), "any".into(), n.into()]));
        }
        for ((from, to), layers) in &k.per_layer {
            for (&layer, &n) in layers {
                t.push(with_scope(
                    g,
                    k,
                    vec![layer.into(), from.name().into(), to.name().into(), n.into()],
                ));
            }
        }
    }
    t
}

fn markov(a: &Analyses) -> Table {
    let mut t = Table::new(MARKOV, &["group", "kind", "from", "to", "count", "probability"]);
    for (g, k) in kinds(a) {
        for from in Role::ALL {
            for to in Role::ALL {
                t.push(with_scope(
                    g,
                    k,
                    vec![
                        from.name().into(),
                        to.name().into(),
                        k.markov.count(from, to).into(),
                        k.markov.probability(from, to).into(),
                    ],
                ));
            }
        }
    }
    t
}

fn accuracy(a: &Analyses) -> Table {
    let mut t = Table::new(ACCURACY, &["snapshot", "scope", "k", "accuracy"]);
    for p in a.probe.iter().flat_map(|p| &p.accuracy) {
        t.push(vec![
            p.snapshot.to_string().into(),
            p.scope.to_string().into(),
            p.k.into(),
            p.accuracy.into(),
        ]);
    }
    t
}

fn template_scores(a: &Analyses) -> Table {
    let mut t = Table::new(
        TEMPLATE_SCORES,
        &[
            "relation",
            "template_id",
            "first_token_score",
            "second_token_reliability",
            "combined",
            "selected",
            "tied",
        ],
    );
    for (rel, sel) in a.probe.iter().flat_map(|p| &p.templates) {
        for s in &sel.scores {
            t.push(vec![
                rel.as_str().into(),
                s.template_id.as_str().into(),
                s.first_token_score.into(),
                s.second_token_reliability.into(),
                s.combined.into(),
                (s.template_id == sel.best).into(),
                sel.tied.contains(&s.template_id).into(),
            ]);
        }
    }
    t
}

fn fact_validity(a: &Analyses) -> Table {
    let mut t = Table::new(FACT_VALIDITY, &["fact_id", "relation", "status", "reason"]);
    for c in a.probe.iter().flat_map(|p| &p.validity) {
        let (status, reason) = match c.validity {
            FactValidity::Reliable => ("reliable", None),
            FactValidity::Rejected(r) => ("rejected", Some(r.to_string())),
        };
        t.push(vec![
            c.fact_id.as_str().into(),
            c.relation_id.as_str().into(),
            status.into(),
            reason.into(),
        ]);
    }
    t
}

/// Builds the named tables, in the order given.
pub fn build_tables(analyses: &Analyses, names: &[&str]) -> Result<Vec<Table>> {
    names
        .iter()
        .map(|&n| {
            Ok(match n {
                ROLE_COUNTS => role_counts(analyses),
                ROLE_TRENDS => role_trends(analyses),
                ROLE_ASSIGNMENTS => role_assignments(analyses),
                EXCLUSIONS => exclusions(analyses),
                IOU => iou(analyses),
                SWITCHES => switches(analyses),
                SWITCHES_PER_PAIR => switches_per_pair(analyses),
                SWITCHES_CUMULATIVE => switches_cumulative(analyses),
                SWITCHES_PER_LAYER => switches_per_layer(analyses),
                MARKOV => markov(analyses),
                ACCURACY => accuracy(analyses),
                TEMPLATE_SCORES => template_scores(analyses),
                FACT_VALIDITY => fact_validity(analyses),
                other => return Err(Error::Input(format!("unknown table {other:?}"))),
            })
        })
        .collect()
}

/// Writes each table to `<dir>/<name>.<ext>` and returns the paths written.
pub fn write_tables(tables: &[Table], dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tables
        .iter()
        .map(|t| {
            let path = dir.join(format!("{}.{}", t.name, format.extension()));
            fs::write(&path, t.render(format)?).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Emits every report table.
pub fn emit_report(analyses: &Analyses, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    write_tables(&build_tables(analyses, &ALL_TABLES)?, dir, format)
}
