//! End-to-end analysis of a loaded dataset: classify every snapshot, then
//! derive IoU series, switch counts, Markov estimates and probing results.

use std::collections::{BTreeMap, BTreeSet};

use crate::dynamics::{
    self, cumulative_switch_counts, iou_series, markov_matrix, per_layer_switches, switch_counts,
    switch_counts_per_pair, IouPoint, RoleTrajectory, SwitchFilter, TransitionMatrix, Trend,
};
use crate::error::{Error, Result};
use crate::ingest::{Dataset, GroupFilter};
use crate::model::{ComponentId, ComponentKind, FactEntry, Relation, Role, SnapshotId};
use crate::par::{self, Execution};
use crate::probing::{
    accuracy_series, mean_combiner, select_best_template, validate_fact, AccuracyPoint, FactValidity,
    TemplateSelection,
};
use crate::roles::{assign_roles, score_snapshot, RoleSets, SnapshotScores, Thresholds};

/// Snapshots used for switch counting when none are given.
pub const DEFAULT_SELECTED: [SnapshotId; 5] = [
    SnapshotId::Numbered(1),
    SnapshotId::Numbered(10),
    SnapshotId::Numbered(20),
    SnapshotId::Numbered(40),
    SnapshotId::Main,
];

/// Top-k depths reported in accuracy series.
pub const ACCURACY_KS: [usize; 2] = [1, 10];

#[derive(Debug, Clone, Default)]
pub struct AnalysisConfig {
    pub thresholds: Thresholds,
    /// Snapshots for switch counting; `None` uses [`default_selection`].
    pub selected: Option<Vec<SnapshotId>>,
    pub execution: Execution,
}

/// [`DEFAULT_SELECTED`] restricted to the available snapshots, or every
/// available snapshot when fewer than two of the defaults exist.
pub fn default_selection(available: &[SnapshotId]) -> Vec<SnapshotId> {
    let picked: Vec<SnapshotId> = DEFAULT_SELECTED
        .iter()
        .copied()
        .filter(|s| available.contains(s))
        .collect();
    if picked.len() >= 2 {
        picked
    } else {
        available.to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct KindAnalysis {
    pub kind: ComponentKind,
    pub role_sets: BTreeMap<SnapshotId, RoleSets>,
    pub trajectories: Vec<RoleTrajectory>,
    pub iou: BTreeMap<Role, Vec<IouPoint>>,
    pub selected: Vec<SnapshotId>,
    pub switches: TransitionMatrix,
    pub switches_per_pair: Vec<TransitionMatrix>,
    pub switches_cumulative: Vec<TransitionMatrix>,
    /// Per-layer switch counts for every off-diagonal role pair.
    pub per_layer: BTreeMap<(Role, Role), BTreeMap<u32, u64>>,
    pub per_layer_total: BTreeMap<u32, u64>,
    pub markov: TransitionMatrix,
    pub count_trends: BTreeMap<Role, Trend>,
}

#[derive(Debug, Clone)]
pub struct GroupAnalysis {
    pub group: GroupFilter,
    pub scores: BTreeMap<SnapshotId, SnapshotScores>,
    pub heads: KindAnalysis,
    pub ffns: KindAnalysis,
}

impl GroupAnalysis {
    pub fn kinds(&self) -> [&KindAnalysis; 2] {
        [&self.heads, &self.ffns]
    }
}

#[derive(Debug, Clone)]
pub struct FactCheck {
    pub fact_id: String,
    pub relation_id: String,
    pub validity: FactValidity,
}

#[derive(Debug, Clone, Default)]
pub struct ProbeAnalysis {
    pub accuracy: Vec<AccuracyPoint>,
    pub templates: Vec<(String, TemplateSelection)>,
    /// Reliability of each fact's MAIN logits.
    pub validity: Vec<FactCheck>,
}

#[derive(Debug, Clone, Default)]
pub struct Analyses {
    pub groups: Vec<GroupAnalysis>,
    pub probe: Option<ProbeAnalysis>,
}

/// Scores and role sets for every snapshot, computed per snapshot in parallel.
pub fn classify(
    dataset: &Dataset,
    relations: &[Relation],
    thresholds: &Thresholds,
    execution: Execution,
) -> Result<BTreeMap<SnapshotId, (SnapshotScores, RoleSets)>> {
    let universe = dataset.geometry().universe();
    let snapshots = dataset.snapshots();
    let results = par::try_map(execution, &snapshots, |&s| {
        let scores = score_snapshot(&dataset.circuits, s, relations, &universe)?;
        let sets = assign_roles(&scores.scores, thresholds, &universe);
        Ok::<_, Error>((s, (scores, sets)))
    })?;
    Ok(results.into_iter().collect())
}

fn restrict(sets: &RoleSets, keep: &BTreeSet<ComponentId>) -> RoleSets {
    let f = |s: &BTreeSet<ComponentId>| s.intersection(keep).copied().collect();
    RoleSets {
        j_general: f(&sets.j_general),
        j_entity: f(&sets.j_entity),
        j_relation: f(&sets.j_relation),
        j_fact: f(&sets.j_fact),
        h_general: f(&sets.h_general),
        h_entity: f(&sets.h_entity),
        h_relation: f(&sets.h_relation),
        h_fact: f(&sets.h_fact),
        h_deactivated: f(&sets.h_deactivated),
        relation_triggers: sets
            .relation_triggers
            .iter()
            .filter(|(c, _)| keep.contains(c))
            .map(|(c, r)| (*c, r.clone()))
            .collect(),
    }
}

/// Off-diagonal role pairs in row-major order.
pub fn switch_pairs() -> impl Iterator<Item = (Role, Role)> {
    Role::ALL
        .into_iter()
        .flat_map(|a| Role::ALL.into_iter().map(move |b| (a, b)))
        .filter(|(a, b)| a != b)
}

pub fn analyze_kind(
    kind: ComponentKind,
    role_sets: BTreeMap<SnapshotId, RoleSets>,
    selected: &[SnapshotId],
    num_layers: u32,
) -> Result<KindAnalysis> {
    let trajectories = dynamics::trajectories(&role_sets)?;
    let iou = Role::ALL
        .into_iter()
        .map(|r| Ok((r, iou_series(r, &role_sets)?)))
        .collect::<Result<_>>()?;
    let per_layer = switch_pairs()
        .map(|pair| {
            let filter = SwitchFilter { pair: Some(pair) };
            Ok((pair, per_layer_switches(&trajectories, selected, num_layers, &filter)?))
        })
        .collect::<Result<_>>()?;
    let counts = dynamics::role_counts(&role_sets);
    let count_trends = Role::ALL
        .into_iter()
        .map(|r| {
            let series: Vec<f64> = counts.iter().map(|(_, c)| c[r.index()] as f64).collect();
            (r, dynamics::trend(&series))
        })
        .collect();
    Ok(KindAnalysis {
        kind,
        switches: switch_counts(&trajectories, selected)?,
        switches_per_pair: switch_counts_per_pair(&trajectories, selected)?,
        switches_cumulative: cumulative_switch_counts(&trajectories, selected)?,
        per_layer_total: per_layer_switches(&trajectories, selected, num_layers, &SwitchFilter::default())?,
        per_layer,
        markov: markov_matrix(&trajectories)?,
        count_trends,
        iou,
        trajectories,
        selected: selected.to_vec(),
        role_sets,
    })
}

pub fn analyze_group(dataset: &Dataset, group: GroupFilter, config: &AnalysisConfig) -> Result<GroupAnalysis> {
    let relations = dataset.relations(group);
    if relations.is_empty() {
        return Err(Error::Input(format!("no relations in group {}", group.as_str())));
    }
    let snapshots = dataset.snapshots();
    let selected = match &config.selected {
        Some(s) => {
            if let Some(missing) = s.iter().find(|x| !snapshots.contains(x)) {
                return Err(Error::Input(format!("selected snapshot {missing} is not in the dataset")));
            }
            s.clone()
        }
        None => default_selection(&snapshots),
    };
    let classified = classify(dataset, &relations, &config.thresholds, config.execution)?;
    let geometry = dataset.geometry();
    let mut scores = BTreeMap::new();
    let mut heads = BTreeMap::new();
    let mut ffns = BTreeMap::new();
    let head_universe = geometry.universe_of(ComponentKind::AttentionHead);
    let ffn_universe = geometry.universe_of(ComponentKind::Ffn);
    for (s, (sc, sets)) in classified {
        heads.insert(s, restrict(&sets, &head_universe));
        ffns.insert(s, restrict(&sets, &ffn_universe));
        scores.insert(s, sc);
    }
    Ok(GroupAnalysis {
        group,
        scores,
        heads: analyze_kind(ComponentKind::AttentionHead, heads, &selected, geometry.num_layers)?,
        ffns: analyze_kind(ComponentKind::Ffn, ffns, &selected, geometry.num_layers)?,
    })
}

/// Probing results, or `None` when the dataset carries no logits.
pub fn analyze_probing(dataset: &Dataset) -> Result<Option<ProbeAnalysis>> {
    if dataset.logits.is_empty() {
        return Ok(None);
    }
    let relations = dataset.relations(GroupFilter::All);
    let untagged: BTreeSet<SnapshotId> = dataset
        .logits
        .iter()
        .filter(|l| l.template_id.is_none())
        .map(|l| l.snapshot)
        .collect();
    let snapshots: Vec<SnapshotId> = untagged.iter().copied().collect();
    let accuracy = accuracy_series(&relations, &snapshots, &dataset.logits, &ACCURACY_KS)?;

    let mut templates = Vec::new();
    for r in &relations {
        let ids: Vec<String> = r.candidate_templates.iter().map(|t| t.template_id.clone()).collect();
        let tagged: Vec<_> = dataset
            .logits
            .iter()
            .filter(|l| l.snapshot == SnapshotId::Main && l.template_id.as_ref().is_some_and(|t| ids.contains(t)))
            .cloned()
            .collect();
        if ids.is_empty() || tagged.is_empty() {
            continue;
        }
        let facts: Vec<&FactEntry> = r.facts.iter().collect();
        let selection = select_best_template(&ids, &facts, &tagged, &mean_combiner)?;
        if !selection.tied.is_empty() {
            log::warn!(
                "relation {}: templates {} tie, keeping {}",
                r.relation_id,
                selection.tied.join(", "),
                selection.best
            );
        }
        templates.push((r.relation_id.clone(), selection));
    }

    let mut validity = Vec::new();
    for r in &relations {
        for f in &r.facts {
            let main = dataset
                .logits
                .iter()
                .find(|l| l.snapshot == SnapshotId::Main && l.template_id.is_none() && l.fact_id == f.fact_id);
            if let Some(l) = main {
                validity.push(FactCheck {
                    fact_id: f.fact_id.clone(),
                    relation_id: r.relation_id.clone(),
                    validity: validate_fact(f, l),
                });
            }
        }
    }
    Ok(Some(ProbeAnalysis {
        accuracy,
        templates,
        validity,
    }))
}

/// Runs every analysis. Groups without relations are skipped.
pub fn analyze(dataset: &Dataset, groups: &[GroupFilter], config: &AnalysisConfig) -> Result<Analyses> {
    let mut out = Vec::new();
    for &g in groups {
        if dataset.relations(g).is_empty() {
            log::warn!("skipping group {}: no relations", g.as_str());
            continue;
        }
        out.push(analyze_group(dataset, g, config)?);
    }
    if out.is_empty() {
        return Err(Error::Input("none of the requested groups has relations".into()));
    }
    Ok(Analyses {
        groups: out,
        probe: analyze_probing(dataset)?,
    })
}
