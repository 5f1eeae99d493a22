//! Role classification of circuit components.
//!
//! Binary circuit membership is averaged over token selectors, turned into
//! four activation scores per component, thresholded into role sets `J_*`
//! and resolved into the disjoint proper sets `H_*`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ComponentId, ComponentKind, FactEntry, Relation, Role, SnapshotId};
use crate::store::CircuitStore;

pub const DEFAULT_THETA_HEAD: f64 = 0.1;
pub const DEFAULT_THETA_FFN: f64 = 0.90;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenSelectorKind {
    /// Every subtoken except the final period.
    AllTokens,
    /// SUBJECT subtokens shifted right by one, plus ANSWER subtokens.
    EntityTokens,
    /// ANSWER subtokens.
    AnswerTokens,
}

impl fmt::Display for TokenSelectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenSelectorKind::AllTokens => "T_g",
            TokenSelectorKind::EntityTokens => "T_e",
            TokenSelectorKind::AnswerTokens => "T_a",
        })
    }
}

pub fn select_tokens(fact: &FactEntry, kind: TokenSelectorKind) -> Result<BTreeSet<usize>> {
    let n = fact.len();
    let set: BTreeSet<usize> = match kind {
        TokenSelectorKind::AllTokens => (0..n).filter(|&t| Some(t) != fact.final_period_index).collect(),
        TokenSelectorKind::EntityTokens => fact
            .subject_span
            .indices()
            .map(|t| t + 1)
            .filter(|&t| t < n)
            .chain(fact.answer_span.indices())
            .collect(),
        TokenSelectorKind::AnswerTokens => fact.answer_span.indices().collect(),
    };
    if set.is_empty() {
        return Err(Error::DegenerateSelector {
            fact_id: fact.fact_id.clone(),
            selector: kind.to_string(),
        });
    }
    Ok(set)
}

/// `c_srf(T)`: the fraction of positions in `tokens` where `component` is in the circuit.
pub fn mean_activation(
    store: &CircuitStore,
    snapshot: SnapshotId,
    fact_id: &str,
    component: ComponentId,
    tokens: &BTreeSet<usize>,
) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::Input(format!("empty token set for fact {fact_id}")));
    }
    let hits = tokens
        .iter()
        .filter(|&&t| store.is_active(snapshot, fact_id, t, component))
        .count();
    Ok(hits as f64 / tokens.len() as f64)
}

fn micro_score(
    store: &CircuitStore,
    snapshot: SnapshotId,
    component: ComponentId,
    relations: &[Relation],
    kind: TokenSelectorKind,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for fact in relations.iter().flat_map(|r| &r.facts) {
        let Ok(tokens) = select_tokens(fact, kind) else {
            continue;
        };
        sum += mean_activation(store, snapshot, &fact.fact_id, component, &tokens)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Input(format!("no usable facts for {kind} score")));
    }
    Ok(sum / count as f64)
}

/// `c^g_s`, micro-averaged over every fact of every relation.
pub fn general_score(
    store: &CircuitStore,
    snapshot: SnapshotId,
    component: ComponentId,
    relations: &[Relation],
) -> Result<f64> {
    micro_score(store, snapshot, component, relations, TokenSelectorKind::AllTokens)
}

/// `c^e_s`, micro-averaged over every fact of every relation.
pub fn entity_score(
    store: &CircuitStore,
    snapshot: SnapshotId,
    component: ComponentId,
    relations: &[Relation],
) -> Result<f64> {
    micro_score(store, snapshot, component, relations, TokenSelectorKind::EntityTokens)
}

/// `c^r_s` for one relation: answer activation averaged over its facts.
pub fn relation_answer_score(
    store: &CircuitStore,
    snapshot: SnapshotId,
    component: ComponentId,
    relation: &Relation,
) -> Result<f64> {
    micro_score(
        store,
        snapshot,
        component,
        std::slice::from_ref(relation),
        TokenSelectorKind::AnswerTokens,
    )
    .map_err(|_| Error::Input(format!("relation {} has no usable facts", relation.relation_id)))
}

/// `c^f_s = c_srf(T_a)` for one fact.
pub fn fact_answer_score(
    store: &CircuitStore,
    snapshot: SnapshotId,
    component: ComponentId,
    fact: &FactEntry,
) -> Result<f64> {
    let tokens = select_tokens(fact, TokenSelectorKind::AnswerTokens)?;
    mean_activation(store, snapshot, &fact.fact_id, component, &tokens)
}

/// Activation scores of one component at one snapshot. Relation and fact maps
/// hold only non-zero entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleScores {
    pub general: f64,
    pub entity: f64,
    pub relation_answer: BTreeMap<String, f64>,
    pub fact_answer: BTreeMap<String, f64>,
}

impl RoleScores {
    /// Largest relation-answer score with its relation id (ties: smallest id).
    pub fn max_relation(&self) -> Option<(&str, f64)> {
        max_entry(&self.relation_answer)
    }

    pub fn max_fact(&self) -> Option<(&str, f64)> {
        max_entry(&self.fact_answer)
    }
}

fn max_entry(m: &BTreeMap<String, f64>) -> Option<(&str, f64)> {
    m.iter()
        .fold(None, |best: Option<(&str, f64)>, (k, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((k.as_str(), v)),
        })
}

/// How many facts each averaged score had to skip because their selector was empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusions {
    pub general: usize,
    pub entity: usize,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotScores {
    pub snapshot: SnapshotId,
    pub scores: BTreeMap<ComponentId, RoleScores>,
    pub exclusions: Exclusions,
}

/// Scores every component of `universe` at `snapshot` in one pass over the records.
pub fn score_snapshot(
    store: &CircuitStore,
    snapshot: SnapshotId,
    relations: &[Relation],
    universe: &BTreeSet<ComponentId>,
) -> Result<SnapshotScores> {
    let mut general: HashMap<ComponentId, f64> = HashMap::new();
    let mut entity: HashMap<ComponentId, f64> = HashMap::new();
    let mut relation_answer: BTreeMap<ComponentId, BTreeMap<String, f64>> = BTreeMap::new();
    let mut fact_answer: BTreeMap<ComponentId, BTreeMap<String, f64>> = BTreeMap::new();
    let mut exclusions = Exclusions::default();
    let (mut n_general, mut n_entity) = (0usize, 0usize);

    // Accumulates c_srf(T) for every component active somewhere in T.
    let per_fact = |fact: &FactEntry, kind: TokenSelectorKind| -> Option<HashMap<ComponentId, f64>> {
        let tokens = match select_tokens(fact, kind) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("snapshot {snapshot}: excluding fact from {kind} average: {e}");
                return None;
            }
        };
        let mut counts: HashMap<ComponentId, usize> = HashMap::new();
        if let Some(positions) = store.positions(snapshot, &fact.fact_id) {
            for t in &tokens {
                for &c in positions.get(t).into_iter().flatten() {
                    if universe.contains(&c) {
                        *counts.entry(c).or_default() += 1;
                    }
                }
            }
        }
        let denom = tokens.len() as f64;
        Some(counts.into_iter().map(|(c, k)| (c, k as f64 / denom)).collect())
    };

    for relation in relations {
        let mut rel_sum: HashMap<ComponentId, f64> = HashMap::new();
        let mut rel_facts = 0usize;
        for fact in &relation.facts {
            match per_fact(fact, TokenSelectorKind::AllTokens) {
                Some(m) => {
                    n_general += 1;
                    m.into_iter().for_each(|(c, v)| *general.entry(c).or_default() += v);
                }
                None => exclusions.general += 1,
            }
            match per_fact(fact, TokenSelectorKind::EntityTokens) {
                Some(m) => {
                    n_entity += 1;
                    m.into_iter().for_each(|(c, v)| *entity.entry(c).or_default() += v);
                }
                None => exclusions.entity += 1,
            }
            match per_fact(fact, TokenSelectorKind::AnswerTokens) {
                Some(m) => {
                    rel_facts += 1;
                    for (c, v) in m {
                        *rel_sum.entry(c).or_default() += v;
                        fact_answer.entry(c).or_default().insert(fact.fact_id.clone(), v);
                    }
                }
                None => exclusions.answer += 1,
            }
        }
        if rel_facts == 0 {
            return Err(Error::Input(format!(
                "relation {} has no usable facts",
                relation.relation_id
            )));
        }
        for (c, v) in rel_sum {
            relation_answer
                .entry(c)
                .or_default()
                .insert(relation.relation_id.clone(), v / rel_facts as f64);
        }
    }
    if n_general == 0 || n_entity == 0 {
        return Err(Error::Input("dataset has no usable facts".into()));
    }

    let scores = universe
        .iter()
        .map(|&c| {
            let s = RoleScores {
                general: general.get(&c).copied().unwrap_or(0.0) / n_general as f64,
                entity: entity.get(&c).copied().unwrap_or(0.0) / n_entity as f64,
                relation_answer: relation_answer.remove(&c).unwrap_or_default(),
                fact_answer: fact_answer.remove(&c).unwrap_or_default(),
            };
            (c, s)
        })
        .collect();
    Ok(SnapshotScores {
        snapshot,
        scores,
        exclusions,
    })
}

/// Role thresholds, configurable per component kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub head: f64,
    pub ffn: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            head: DEFAULT_THETA_HEAD,
            ffn: DEFAULT_THETA_FFN,
        }
    }
}

impl Thresholds {
    pub fn uniform(theta: f64) -> Self {
        Self { head: theta, ffn: theta }
    }

    pub fn for_component(&self, c: ComponentId) -> f64 {
        match c.kind() {
            ComponentKind::AttentionHead => self.head,
            ComponentKind::Ffn => self.ffn,
        }
    }
}

/// Raw role sets `J_*` and proper role sets `H_*` for one snapshot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoleSets {
    pub j_general: BTreeSet<ComponentId>,
    pub j_entity: BTreeSet<ComponentId>,
    pub j_relation: BTreeSet<ComponentId>,
    pub j_fact: BTreeSet<ComponentId>,
    pub h_general: BTreeSet<ComponentId>,
    pub h_entity: BTreeSet<ComponentId>,
    pub h_relation: BTreeSet<ComponentId>,
    pub h_fact: BTreeSet<ComponentId>,
    pub h_deactivated: BTreeSet<ComponentId>,
    /// Relations whose score put each component into `J_r`.
    pub relation_triggers: BTreeMap<ComponentId, Vec<String>>,
}

impl RoleSets {
    pub fn proper(&self, role: Role) -> &BTreeSet<ComponentId> {
        match role {
            Role::General => &self.h_general,
            Role::Entity => &self.h_entity,
            Role::RelationAnswer => &self.h_relation,
            Role::FactAnswer => &self.h_fact,
            Role::Deactivated => &self.h_deactivated,
        }
    }

    pub fn universe_len(&self) -> usize {
        Role::ALL.iter().map(|&r| self.proper(r).len()).sum()
    }

    pub fn role_of(&self, component: ComponentId) -> Result<Role> {
        Role::ALL
            .into_iter()
            .find(|&r| self.proper(r).contains(&component))
            .ok_or_else(|| Error::UnknownComponent(component.to_string()))
    }

    /// Counts of the five proper sets in [`Role::ALL`] order.
    pub fn counts(&self) -> [usize; 5] {
        Role::ALL.map(|r| self.proper(r).len())
    }
}

/// Thresholds scores (strict `>`) and resolves proper sets by the
/// subtraction chain general → entity → relation-answer → fact-answer.
/// Components of `universe` without scores count as all-zero.
pub fn assign_roles(
    scores: &BTreeMap<ComponentId, RoleScores>,
    thresholds: &Thresholds,
    universe: &BTreeSet<ComponentId>,
) -> RoleSets {
    let mut sets = RoleSets::default();
    for &c in universe {
        let theta = thresholds.for_component(c);
        let Some(s) = scores.get(&c) else {
            continue;
        };
        if s.general > theta {
            sets.j_general.insert(c);
        }
        if s.entity > theta {
            sets.j_entity.insert(c);
        }
        let triggers: Vec<String> = s
            .relation_answer
            .iter()
            .filter(|(_, &v)| v > theta)
            .map(|(r, _)| r.clone())
            .collect();
        if !triggers.is_empty() {
            sets.j_relation.insert(c);
            sets.relation_triggers.insert(c, triggers);
        }
        if s.fact_answer.values().any(|&v| v > theta) {
            sets.j_fact.insert(c);
        }
    }
    for &c in universe {
        let target = if sets.j_general.contains(&c) {
            &mut sets.h_general
        } else if sets.j_entity.contains(&c) {
            &mut sets.h_entity
        } else if sets.j_relation.contains(&c) {
            &mut sets.h_relation
        } else if sets.j_fact.contains(&c) {
            &mut sets.h_fact
        } else {
            &mut sets.h_deactivated
        };
        target.insert(c);
    }
    sets
}

/// [`assign_roles`] with one threshold for every component.
pub fn assign_roles_uniform(
    scores: &BTreeMap<ComponentId, RoleScores>,
    theta_role: f64,
    universe: &BTreeSet<ComponentId>,
) -> RoleSets {
    assign_roles(scores, &Thresholds::uniform(theta_role), universe)
}

pub fn role_of(component: ComponentId, role_sets: &RoleSets) -> Result<Role> {
    role_sets.role_of(component)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActivationRecord, Group, Span};
    use proptest::prelude::*;

    fn fact(id: &str, tokens: &[&str], subject: Span, answer: Span, period: Option<usize>) -> FactEntry {
        FactEntry {
            fact_id: id.into(),
            relation_id: String::new(),
            group: None,
            subtokens: tokens.iter().map(|s| s.to_string()).collect(),
            subject_span: subject,
            answer_span: answer,
            gold_answer: tokens[answer.start].into(),
            final_period_index: period,
        }
    }

    fn france() -> FactEntry {
        fact(
            "france",
            &["France", "has", "the", "capital", "Paris", "."],
            Span::new(0, 1),
            Span::new(4, 5),
            Some(5),
        )
    }

    #[test]
    fn selectors_on_worked_example() {
        let f = france();
        let g = select_tokens(&f, TokenSelectorKind::AllTokens).unwrap();
        assert_eq!(g, BTreeSet::from([0, 1, 2, 3, 4]));
        let e = select_tokens(&f, TokenSelectorKind::EntityTokens).unwrap();
        assert_eq!(e, BTreeSet::from([1, 4]));
        let a = select_tokens(&f, TokenSelectorKind::AnswerTokens).unwrap();
        assert_eq!(a, BTreeSet::from([4]));
    }

    #[test]
    fn no_period_means_all_tokens() {
        let mut f = france();
        f.final_period_index = None;
        assert_eq!(select_tokens(&f, TokenSelectorKind::AllTokens).unwrap().len(), 6);
    }

    #[test]
    fn degenerate_selector_is_reported() {
        // A single-token sentence that is only its period.
        let f = FactEntry {
            subtokens: vec![".".into()],
            subject_span: Span::new(0, 1),
            answer_span: Span::new(0, 1),
            final_period_index: Some(0),
            ..france()
        };
        assert!(matches!(
            select_tokens(&f, TokenSelectorKind::AllTokens),
            Err(Error::DegenerateSelector { .. })
        ));
    }

    fn store_with(records: &[(&str, usize, &[ComponentId])]) -> CircuitStore {
        records
            .iter()
            .map(|(f, t, cs)| ActivationRecord {
                snapshot: SnapshotId::Main,
                fact_id: f.to_string(),
                token_pos: *t,
                active_components: cs.iter().copied().collect(),
            })
            .collect()
    }

    #[test]
    fn mean_activation_is_binary_mean() {
        let c = ComponentId::head(0, 0);
        let store = store_with(&[("x", 5, &[c]), ("x", 9, &[c])]);
        let t = BTreeSet::from([2, 5, 7, 9]);
        assert_eq!(mean_activation(&store, SnapshotId::Main, "x", c, &t).unwrap(), 0.5);
        let t = BTreeSet::from([5, 9]);
        assert_eq!(mean_activation(&store, SnapshotId::Main, "x", c, &t).unwrap(), 1.0);
        let t = BTreeSet::from([1, 2]);
        assert_eq!(mean_activation(&store, SnapshotId::Main, "x", c, &t).unwrap(), 0.0);
        assert!(mean_activation(&store, SnapshotId::Main, "x", c, &BTreeSet::new()).is_err());
    }

    /// One-token facts ("a" then "."), so c_srf(T_g) is 0 or 1.
    fn relation(id: &str, fact_ids: &[&str]) -> Relation {
        let mut r = Relation {
            relation_id: id.into(),
            group: Group::Loc,
            template: "{}".into(),
            candidate_templates: vec![],
            facts: fact_ids
                .iter()
                .map(|f| fact(f, &["s", "a", "."], Span::new(0, 1), Span::new(1, 2), Some(2)))
                .collect(),
        };
        r.link_facts();
        r
    }

    #[test]
    fn general_score_is_micro_averaged() {
        let c = ComponentId::head(1, 1);
        let rels = [relation("r1", &["a", "b", "c"]), relation("r2", &["d"])];
        // Active at every T_g position of the three r1 facts, never for d.
        let store = store_with(&[
            ("a", 0, &[c]),
            ("a", 1, &[c]),
            ("b", 0, &[c]),
            ("b", 1, &[c]),
            ("c", 0, &[c]),
            ("c", 1, &[c]),
        ]);
        let g = general_score(&store, SnapshotId::Main, c, &rels).unwrap();
        assert_eq!(g, 0.75);
        assert!(general_score(&store, SnapshotId::Main, c, &[]).is_err());
    }

    #[test]
    fn relation_and_fact_answer_scores() {
        let c = ComponentId::ffn(0);
        let rel = relation("r", &["a", "b", "c"]);
        let store = store_with(&[("a", 1, &[c]), ("b", 1, &[c])]);
        let r = relation_answer_score(&store, SnapshotId::Main, c, &rel).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(fact_answer_score(&store, SnapshotId::Main, c, &rel.facts[0]).unwrap(), 1.0);
        assert_eq!(fact_answer_score(&store, SnapshotId::Main, c, &rel.facts[2]).unwrap(), 0.0);

        let two = fact("two", &["s", "x", "y", "."], Span::new(0, 1), Span::new(1, 3), Some(3));
        let store = store_with(&[("two", 2, &[c])]);
        assert_eq!(fact_answer_score(&store, SnapshotId::Main, c, &two).unwrap(), 0.5);
    }

    #[test]
    fn score_snapshot_agrees_with_reference_scores() {
        let a = ComponentId::head(0, 0);
        let b = ComponentId::head(0, 1);
        let rels = [relation("r1", &["x", "y"]), relation("r2", &["z"])];
        let store = store_with(&[("x", 0, &[a, b]), ("x", 1, &[a]), ("y", 2, &[b]), ("z", 1, &[b])]);
        let universe = BTreeSet::from([a, b, ComponentId::ffn(0)]);
        let s = score_snapshot(&store, SnapshotId::Main, &rels, &universe).unwrap();
        for &c in &universe {
            let got = &s.scores[&c];
            assert_eq!(got.general, general_score(&store, SnapshotId::Main, c, &rels).unwrap());
            assert_eq!(got.entity, entity_score(&store, SnapshotId::Main, c, &rels).unwrap());
            for r in &rels {
                let want = relation_answer_score(&store, SnapshotId::Main, c, r).unwrap();
                assert_eq!(got.relation_answer.get(&r.relation_id).copied().unwrap_or(0.0), want);
                for f in &r.facts {
                    let want = fact_answer_score(&store, SnapshotId::Main, c, f).unwrap();
                    assert_eq!(got.fact_answer.get(&f.fact_id).copied().unwrap_or(0.0), want);
                }
            }
        }
    }

    fn scores(general: f64, entity: f64, rel: f64, fact: f64) -> RoleScores {
        RoleScores {
            general,
            entity,
            relation_answer: BTreeMap::from([("r".to_string(), rel)]),
            fact_answer: BTreeMap::from([("f".to_string(), fact)]),
        }
    }

    #[test]
    fn proper_sets_by_subtraction() {
        let [a, b, c, d, e] = [0, 1, 2, 3, 4].map(|h| ComponentId::head(0, h));
        let table = BTreeMap::from([
            (a, scores(0.5, 0.5, 0.5, 0.0)),
            (b, scores(0.0, 0.5, 0.5, 0.0)),
            (c, scores(0.0, 0.0, 0.5, 0.0)),
            (d, scores(0.0, 0.0, 0.0, 0.5)),
            (e, scores(0.0, 0.0, 0.0, 0.0)),
        ]);
        let universe = BTreeSet::from([a, b, c, d, e]);
        let sets = assign_roles_uniform(&table, 0.1, &universe);
        assert_eq!(sets.h_general, BTreeSet::from([a]));
        assert_eq!(sets.h_entity, BTreeSet::from([b]));
        assert_eq!(sets.h_relation, BTreeSet::from([c]));
        assert_eq!(sets.h_fact, BTreeSet::from([d]));
        assert_eq!(sets.h_deactivated, BTreeSet::from([e]));
        assert_eq!(role_of(c, &sets).unwrap(), Role::RelationAnswer);
        assert_eq!(role_of(e, &sets).unwrap(), Role::Deactivated);
        assert!(role_of(ComponentId::ffn(9), &sets).is_err());
        assert_eq!(sets.relation_triggers[&a], vec!["r".to_string()]);
    }

    #[test]
    fn threshold_is_strict() {
        let a = ComponentId::head(0, 0);
        let table = BTreeMap::from([(a, scores(0.1, 0.1, 0.1, 0.1))]);
        let sets = assign_roles_uniform(&table, 0.1, &BTreeSet::from([a]));
        assert!(sets.j_general.is_empty());
        assert_eq!(sets.role_of(a).unwrap(), Role::Deactivated);
    }

    #[test]
    fn per_kind_thresholds() {
        let h = ComponentId::head(0, 0);
        let f = ComponentId::ffn(0);
        let table = BTreeMap::from([(h, scores(0.5, 0.0, 0.0, 0.0)), (f, scores(0.5, 0.0, 0.0, 0.0))]);
        let sets = assign_roles(&table, &Thresholds::default(), &BTreeSet::from([h, f]));
        assert_eq!(sets.role_of(h).unwrap(), Role::General);
        assert_eq!(sets.role_of(f).unwrap(), Role::Deactivated);
    }

    fn arb_scores() -> impl Strategy<Value = RoleScores> {
        (
            0.0..1.0f64,
            0.0..1.0f64,
            proptest::collection::btree_map("r[0-3]", 0.0..1.0f64, 0..4),
            proptest::collection::btree_map("f[0-5]", 0.0..1.0f64, 0..6),
        )
            .prop_map(|(general, entity, relation_answer, fact_answer)| RoleScores {
                general,
                entity,
                relation_answer,
                fact_answer,
            })
    }

    proptest! {
        #[test]
        fn raising_threshold_never_grows_j_sets(
            table in proptest::collection::vec(arb_scores(), 1..30),
            lo in 0.01..0.5f64,
            delta in 0.0..0.49f64,
        ) {
            let universe: BTreeSet<_> = (0..table.len() as u32).map(|h| ComponentId::head(0, h)).collect();
            let map: BTreeMap<_, _> = universe.iter().copied().zip(table).collect();
            let low = assign_roles_uniform(&map, lo, &universe);
            let high = assign_roles_uniform(&map, lo + delta, &universe);
            prop_assert!(high.j_general.is_subset(&low.j_general));
            prop_assert!(high.j_entity.is_subset(&low.j_entity));
            prop_assert!(high.j_relation.is_subset(&low.j_relation));
            prop_assert!(high.j_fact.is_subset(&low.j_fact));
            prop_assert_eq!(low.universe_len(), universe.len());
        }
    }
}
