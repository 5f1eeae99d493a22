//! Synthetic datasets with known role dynamics.
//!
//! Every component follows a Markov role trajectory drawn from per-role
//! stability parameters. Each role is then written into the circuit file as
//! an activation pattern that the classifier maps back to exactly that role,
//! so measured dynamics can be checked against the returned ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Dataset, Manifest, FORMAT_VERSION, SUBJECT_SLOT};
use crate::model::{
    ActivationRecord, ComponentId, ComponentKind, FactEntry, Group, ModelGeometry, Relation, Role, SnapshotId,
    SnapshotInfo, Span, Template,
};
use crate::probing::{Candidate, LogitSnapshot, CANDIDATE_DEPTH};
use crate::roles::Thresholds;

/// Synthetic facts share one layout: two subject tokens, eight filler
/// tokens, two answer tokens and a final period.
const FACT_LEN: usize = 13;
const SUBJECT: Span = Span { start: 0, end: 2 };
const ANSWER: Span = Span { start: 10, end: 12 };
const PERIOD: usize = 12;
const TEMPLATES_PER_RELATION: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub num_layers: u32,
    pub num_heads: u32,
    /// Snapshot count including MAIN.
    pub num_snapshots: u32,
    pub loc_relations: usize,
    pub name_relations: usize,
    pub facts_per_relation: usize,
    /// Probability that a head keeps its role between consecutive snapshots, per [`Role::index`].
    pub head_stability: [f64; 5],
    pub ffn_stability: [f64; 5],
    /// Role distribution at the first snapshot; also the base weights for
    /// choosing a new role after a switch.
    pub head_initial: [f64; 5],
    pub ffn_initial: [f64; 5],
    /// Per-snapshot multiplicative growth of the switch-in weight of the
    /// relation-answer and fact-answer roles.
    pub specialization_growth: f64,
    /// Probability that a specialized component targets a NAME relation.
    pub name_skew: f64,
    /// Per-snapshot top-1 accuracy gain of LOC facts; NAME facts gain half as fast.
    pub accuracy_growth: f64,
    pub thresholds: Thresholds,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_layers: 10,
            num_heads: 20,
            num_snapshots: 10,
            loc_relations: 4,
            name_relations: 4,
            facts_per_relation: 6,
            head_stability: [0.95, 0.8, 0.75, 0.5, 0.85],
            ffn_stability: [0.99, 0.97, 0.97, 0.97, 0.99],
            head_initial: [0.15, 0.05, 0.05, 0.05, 0.70],
            ffn_initial: [0.80, 0.10, 0.05, 0.05, 0.0],
            specialization_growth: 0.15,
            name_skew: 0.3,
            accuracy_growth: 0.08,
            thresholds: Thresholds::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(format!("synthetic config: {m}")));
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if self.num_layers == 0 || self.num_heads == 0 {
            return bad("geometry needs at least one layer and one head".into());
        }
        if self.num_snapshots < 2 {
            return bad("need at least two snapshots (one numbered plus MAIN)".into());
        }
        if self.loc_relations + self.name_relations == 0 || self.facts_per_relation == 0 {
            return bad("need at least one relation with one fact".into());
        }
        for (name, p) in [
            ("head_stability", &self.head_stability),
            ("ffn_stability", &self.ffn_stability),
        ] {
            if !p.iter().all(|&x| unit(x)) {
                return bad(format!("{name} entries must lie in [0, 1]"));
            }
        }
        for (name, w) in [("head_initial", &self.head_initial), ("ffn_initial", &self.ffn_initial)] {
            if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                return bad(format!("{name} must be non-negative with positive sum"));
            }
        }
        if !(self.specialization_growth >= 0.0 && self.specialization_growth.is_finite()) {
            return bad("specialization_growth must be non-negative".into());
        }
        if !unit(self.name_skew) || !unit(self.accuracy_growth) {
            return bad("name_skew and accuracy_growth must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn geometry(&self) -> ModelGeometry {
        ModelGeometry::new(self.num_layers, self.num_heads)
    }

    pub fn snapshots(&self) -> Vec<SnapshotId> {
        (1..self.num_snapshots)
            .map(SnapshotId::Numbered)
            .chain([SnapshotId::Main])
            .collect()
    }

    fn num_relations(&self) -> usize {
        self.loc_relations + self.name_relations
    }
}

/// Generated dataset plus the role every component was given at each snapshot.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub truth: BTreeMap<SnapshotId, BTreeMap<ComponentId, Role>>,
}

impl SyntheticData {
    /// Ground truth as `snapshot,component,role` CSV lines.
    pub fn truth_csv(&self) -> String {
        let mut out = String::from("snapshot,component,role\n");
        for (s, roles) in &self.truth {
            for (c, r) in roles {
                let _ = writeln!(out, "{s},{c},{}", r.name());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scope {
    AllFacts,
    Relation,
    Fact,
}

/// Token positions a component is active at, and over which facts.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Pattern {
    positions: Vec<usize>,
    scope: Scope,
}

fn count_in(positions: &[usize], selector: &BTreeSet<usize>) -> f64 {
    positions.iter().filter(|p| selector.contains(p)).count() as f64
}

/// Role the classifier assigns to `pattern`, computed in closed form from the
/// fixed fact layout.
fn classify_pattern(pattern: &Pattern, theta: f64, num_facts: usize, facts_per_relation: usize) -> Role {
    let t_g: BTreeSet<usize> = (0..FACT_LEN).filter(|&i| i != PERIOD).collect();
    let t_a: BTreeSet<usize> = ANSWER.indices().collect();
    let t_e: BTreeSet<usize> = SUBJECT
        .indices()
        .map(|i| i + 1)
        .filter(|&i| i < FACT_LEN)
        .chain(ANSWER.indices())
        .collect();
    let p = &pattern.positions;
    let (covered, per_relation) = match pattern.scope {
        Scope::AllFacts => (num_facts, facts_per_relation),
        Scope::Relation => (facts_per_relation, facts_per_relation),
        Scope::Fact => (1, 1),
    };
    let share = covered as f64 / num_facts as f64;
    let general = share * count_in(p, &t_g) / t_g.len() as f64;
    let entity = share * count_in(p, &t_e) / t_e.len() as f64;
    let answer = count_in(p, &t_a) / t_a.len() as f64;
    let relation = per_relation as f64 / facts_per_relation as f64 * answer;
    if general > theta {
        Role::General
    } else if entity > theta {
        Role::Entity
    } else if relation > theta {
        Role::RelationAnswer
    } else if answer > theta {
        Role::FactAnswer
    } else {
        Role::Deactivated
    }
}

fn candidate_patterns(role: Role) -> Vec<Pattern> {
    let p = |positions: Vec<usize>, scope| Pattern { positions, scope };
    let answer: Vec<usize> = ANSWER.indices().collect();
    match role {
        Role::General => vec![p((0..FACT_LEN).collect(), Scope::AllFacts)],
        Role::Entity => vec![
            p(vec![1, 2, 10, 11], Scope::AllFacts),
            p(vec![1], Scope::AllFacts),
            p(vec![2], Scope::AllFacts),
        ],
        Role::RelationAnswer => vec![p(answer.clone(), Scope::Relation), p(vec![ANSWER.start], Scope::Relation)],
        Role::FactAnswer => vec![p(answer, Scope::Fact), p(vec![ANSWER.start], Scope::Fact)],
        Role::Deactivated => vec![p(Vec::new(), Scope::AllFacts)],
    }
}

/// First candidate pattern that classifies back to `role` at `theta`.
fn pattern_for(role: Role, theta: f64, num_facts: usize, facts_per_relation: usize) -> Result<Pattern> {
    candidate_patterns(role)
        .into_iter()
        .find(|p| classify_pattern(p, theta, num_facts, facts_per_relation) == role)
        .ok_or_else(|| {
            Error::Input(format!(
                "synthetic geometry ({num_facts} facts, {facts_per_relation} per relation) cannot express role {} at threshold {theta}",
                role.name()
            ))
        })
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64; 5], exclude: Option<Role>) -> Option<Role> {
    let w = |r: Role| if Some(r) == exclude { 0.0 } else { weights[r.index()] };
    let total: f64 = Role::ALL.iter().map(|&r| w(r)).sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random_range(0.0..total);
    for r in Role::ALL {
        if u < w(r) {
            return Some(r);
        }
        u -= w(r);
    }
    Role::ALL.into_iter().rev().find(|&r| w(r) > 0.0)
}

/// Markov role sequence of one component over `n` snapshots.
fn simulate(rng: &mut ChaCha8Rng, n: usize, stability: &[f64; 5], initial: &[f64; 5], growth: f64) -> Vec<Role> {
    let mut role = sample_weighted(rng, initial, None).unwrap_or(Role::Deactivated);
    let mut out = vec![role];
    for step in 1..n {
        if rng.random::<f64>() >= stability[role.index()] {
            let boost = (1.0 + growth).powi(step as i32);
            let mut w = *initial;
            w[Role::RelationAnswer.index()] *= boost;
            w[Role::FactAnswer.index()] *= boost;
            if let Some(next) = sample_weighted(rng, &w, Some(role)) {
                role = next;
            }
        }
        out.push(role);
    }
    out
}

fn relation_index(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> usize {
    let pick_name = cfg.name_relations > 0 && (cfg.loc_relations == 0 || rng.random::<f64>() < cfg.name_skew);
    if pick_name {
        cfg.loc_relations + rng.random_range(0..cfg.name_relations)
    } else {
        rng.random_range(0..cfg.loc_relations)
    }
}

fn build_relations(cfg: &SyntheticConfig) -> Vec<Relation> {
    (0..cfg.num_relations())
        .map(|r| {
            let (group, prefix) = if r < cfg.loc_relations {
                (Group::Loc, "loc")
            } else {
                (Group::Name, "name")
            };
            let relation_id = format!("{prefix}_rel{r}");
            let filler: Vec<String> = (SUBJECT.end..ANSWER.start).map(|k| format!("r{r}w{k}")).collect();
            let template = format!("{SUBJECT_SLOT} {}", filler.join(" "));
            let candidate_templates = (0..TEMPLATES_PER_RELATION)
                .map(|t| Template {
                    template_id: format!("{relation_id}_t{t}"),
                    text: format!("{SUBJECT_SLOT} {} v{t}", filler[..filler.len() - 1].join(" ")),
                })
                .collect();
            let facts = (0..cfg.facts_per_relation)
                .map(|f| {
                    let answer = [format!("a{r}_{f}x"), format!("a{r}_{f}y")];
                    let mut subtokens = vec![format!("s{r}_{f}x"), format!("s{r}_{f}y")];
                    subtokens.extend(filler.iter().cloned());
                    subtokens.extend(answer.iter().cloned());
                    subtokens.push(".".into());
                    debug_assert_eq!(subtokens.len(), FACT_LEN);
                    FactEntry {
                        fact_id: format!("{relation_id}_f{f}"),
                        relation_id: relation_id.clone(),
                        group: Some(group),
                        subtokens,
                        subject_span: SUBJECT,
                        answer_span: ANSWER,
                        gold_answer: answer.concat(),
                        final_period_index: Some(PERIOD),
                    }
                })
                .collect();
            Relation {
                relation_id,
                group,
                template,
                candidate_templates,
                facts,
            }
        })
        .collect()
}

/// A ranked top-10 list with the gold token at `rank` (1-based; beyond the
/// list when larger than [`CANDIDATE_DEPTH`]).
fn ranked_logits(
    rng: &mut ChaCha8Rng,
    snapshot: SnapshotId,
    fact: &FactEntry,
    rank: usize,
    confident: bool,
) -> LogitSnapshot {
    let gold = fact.gold_first_token();
    let mut probs = Vec::with_capacity(CANDIDATE_DEPTH);
    let top: f64 = if rank == 1 && confident {
        rng.random_range(0.76..0.97)
    } else {
        rng.random_range(0.2..0.7)
    };
    probs.push(top);
    let mut p = if rank == 1 {
        let cap = (1.0 - top).min(top).min(if confident { 0.099 } else { 0.25 });
        rng.random_range(0.2 * cap..cap)
    } else {
        top * rng.random_range(0.3..0.9)
    };
    while probs.len() < CANDIDATE_DEPTH {
        probs.push(p);
        p *= rng.random_range(0.4..0.9);
    }
    let mut alt = 0;
    let candidates: Vec<Candidate> = probs
        .iter()
        .enumerate()
        .map(|(i, &prob)| {
            if i + 1 == rank {
                Candidate::new(gold, prob)
            } else {
                alt += 1;
                Candidate::new(format!("{}_alt{alt}", fact.fact_id), prob)
            }
        })
        .collect();
    LogitSnapshot::from_candidates(snapshot, fact.fact_id.clone(), candidates, gold, p * 0.5)
}

fn sample_rank(rng: &mut ChaCha8Rng, top1: f64) -> usize {
    if rng.random::<f64>() < top1 {
        1
    } else {
        rng.random_range(2..=CANDIDATE_DEPTH + 4)
    }
}

/// Generates a dataset and its ground-truth role trajectories. A pure
/// function of `cfg`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let geometry = cfg.geometry();
    let snapshots = cfg.snapshots();
    let relations = build_relations(cfg);
    let num_facts = cfg.num_relations() * cfg.facts_per_relation;

    let mut patterns: BTreeMap<(ComponentKind, Role), Pattern> = BTreeMap::new();
    for kind in [ComponentKind::AttentionHead, ComponentKind::Ffn] {
        let theta = match kind {
            ComponentKind::AttentionHead => cfg.thresholds.head,
            ComponentKind::Ffn => cfg.thresholds.ffn,
        };
        for role in Role::ALL {
            patterns.insert((kind, role), pattern_for(role, theta, num_facts, cfg.facts_per_relation)?);
        }
    }

    let mut truth: BTreeMap<SnapshotId, BTreeMap<ComponentId, Role>> = BTreeMap::new();
    // (snapshot index, fact index) -> position -> active components
    let mut active: BTreeMap<(usize, usize), BTreeMap<usize, BTreeSet<ComponentId>>> = BTreeMap::new();
    for c in geometry.universe() {
        let (stability, initial) = match c.kind() {
            ComponentKind::AttentionHead => (&cfg.head_stability, &cfg.head_initial),
            ComponentKind::Ffn => (&cfg.ffn_stability, &cfg.ffn_initial),
        };
        let roles = simulate(&mut rng, snapshots.len(), stability, initial, cfg.specialization_growth);
        let mut target: Option<(Role, usize)> = None;
        for (si, (&snapshot, &role)) in snapshots.iter().zip(&roles).enumerate() {
            truth.entry(snapshot).or_default().insert(c, role);
            let pattern = &patterns[&(c.kind(), role)];
            let facts: Vec<usize> = match pattern.scope {
                Scope::AllFacts => (0..num_facts).collect(),
                Scope::Relation | Scope::Fact => {
                    // Keep the target while the role persists.
                    let t = match target {
                        Some((r, t)) if r == role => t,
                        _ => {
                            let rel = relation_index(cfg, &mut rng);
                            let t = if pattern.scope == Scope::Relation {
                                rel
                            } else {
                                rel * cfg.facts_per_relation + rng.random_range(0..cfg.facts_per_relation)
                            };
                            target = Some((role, t));
                            t
                        }
                    };
                    if pattern.scope == Scope::Relation {
                        (t * cfg.facts_per_relation..(t + 1) * cfg.facts_per_relation).collect()
                    } else {
                        vec![t]
                    }
                }
            };
            for f in facts {
                let slot = active.entry((si, f)).or_default();
                for &p in &pattern.positions {
                    slot.entry(p).or_default().insert(c);
                }
            }
        }
    }

    let all_facts: Vec<&FactEntry> = relations.iter().flat_map(|r| &r.facts).collect();
    let mut records = Vec::with_capacity(snapshots.len() * num_facts * FACT_LEN);
    for (si, &snapshot) in snapshots.iter().enumerate() {
        for (fi, fact) in all_facts.iter().enumerate() {
            let slots = active.remove(&(si, fi)).unwrap_or_default();
            for pos in 0..FACT_LEN {
                records.push(ActivationRecord {
                    snapshot,
                    fact_id: fact.fact_id.clone(),
                    token_pos: pos,
                    active_components: slots.get(&pos).cloned().unwrap_or_default(),
                });
            }
        }
    }

    let mut logits = Vec::new();
    let last = snapshots.len() - 1;
    for (si, &snapshot) in snapshots.iter().enumerate() {
        for fact in &all_facts {
            let speed = match fact.group {
                Some(Group::Name) => 0.5,
                _ => 1.0,
            };
            let top1 = (0.1 + cfg.accuracy_growth * speed * si as f64).min(0.95);
            let rank = sample_rank(&mut rng, top1);
            let confident = rng.random::<f64>() < 0.7;
            logits.push(ranked_logits(&mut rng, snapshot, fact, rank, confident));
        }
        if si == last {
            for relation in &relations {
                for (ti, t) in relation.candidate_templates.iter().enumerate() {
                    // Earlier templates are better on average.
                    let quality = 0.9 - 0.25 * ti as f64;
                    for fact in &relation.facts {
                        let rank = sample_rank(&mut rng, quality);
                        let confident = rng.random::<f64>() < quality;
                        logits.push(
                            ranked_logits(&mut rng, snapshot, fact, rank, confident).with_template(&t.template_id),
                        );
                    }
                }
            }
        }
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        geometry,
        snapshots: snapshots
            .iter()
            .enumerate()
            .map(|(i, &id)| SnapshotInfo {
                id,
                tokens_seen_b: (id != SnapshotId::Main).then_some(21.0 * (i + 1) as f64),
            })
            .collect(),
        relations,
        provenance: BTreeMap::from([
            ("generator".to_string(), "synthetic".to_string()),
            ("seed".to_string(), cfg.seed.to_string()),
        ]),
    };
    let dataset = Dataset::new(manifest, records, logits)?;
    Ok(SyntheticData { dataset, truth })
}
