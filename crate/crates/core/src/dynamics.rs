//! How role assignments change across snapshots: IoU against the final
//! model, role switches between selected snapshots and a pooled Markov chain
//! over consecutive snapshots.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ComponentId, Role, SnapshotId};
use crate::roles::RoleSets;

/// Jaccard similarity `|a ∩ b| / |a ∪ b|`, with `iou(∅, ∅) = 1`.
pub fn iou<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IouPoint {
    pub snapshot: SnapshotId,
    pub iou: f64,
    /// Both sets were empty, so the value is the `iou(∅, ∅) = 1` convention.
    pub both_empty: bool,
}

/// IoU of each snapshot's proper `role` set against MAIN's.
pub fn iou_series(role: Role, per_snapshot: &BTreeMap<SnapshotId, RoleSets>) -> Result<Vec<IouPoint>> {
    let main = per_snapshot
        .get(&SnapshotId::Main)
        .ok_or_else(|| Error::Input("IoU series needs the MAIN snapshot".into()))?
        .proper(role);
    Ok(per_snapshot
        .iter()
        .map(|(&snapshot, sets)| {
            let s = sets.proper(role);
            IouPoint {
                snapshot,
                iou: iou(s, main),
                both_empty: s.is_empty() && main.is_empty(),
            }
        })
        .collect())
}

/// The roles one component held over the analyzed snapshots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleTrajectory {
    pub component: ComponentId,
    pub roles: Vec<(SnapshotId, Role)>,
}

impl RoleTrajectory {
    pub fn new(component: ComponentId, roles: Vec<(SnapshotId, Role)>) -> Result<Self> {
        if roles.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Input(format!(
                "trajectory of {component} is not strictly increasing in snapshot order"
            )));
        }
        Ok(Self { component, roles })
    }

    pub fn role_at(&self, snapshot: SnapshotId) -> Option<Role> {
        self.roles
            .binary_search_by_key(&snapshot, |(s, _)| *s)
            .ok()
            .map(|i| self.roles[i].1)
    }

    /// Roles at `selected` snapshots, in order.
    fn restricted(&self, selected: &[SnapshotId]) -> Result<Vec<Role>> {
        selected
            .iter()
            .map(|&s| {
                self.role_at(s).ok_or_else(|| {
                    Error::Input(format!("snapshot {s} missing from trajectory of {}", self.component))
                })
            })
            .collect()
    }
}

/// Builds one trajectory per component from per-snapshot role sets.
pub fn trajectories(per_snapshot: &BTreeMap<SnapshotId, RoleSets>) -> Result<Vec<RoleTrajectory>> {
    let Some(first) = per_snapshot.values().next() else {
        return Ok(Vec::new());
    };
    let universe: BTreeSet<ComponentId> = Role::ALL
        .iter()
        .flat_map(|&r| first.proper(r).iter().copied())
        .collect();
    universe
        .into_iter()
        .map(|c| {
            let roles = per_snapshot
                .iter()
                .map(|(&s, sets)| Ok((s, sets.role_of(c)?)))
                .collect::<Result<Vec<_>>>()?;
            RoleTrajectory::new(c, roles)
        })
        .collect()
}

/// 5×5 transition counts indexed by [`Role::index`], rows are sources.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TransitionMatrix {
    pub counts: [[u64; 5]; 5],
}

impl TransitionMatrix {
    pub fn count(&self, from: Role, to: Role) -> u64 {
        self.counts[from.index()][to.index()]
    }

    pub fn record(&mut self, from: Role, to: Role) {
        self.counts[from.index()][to.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn off_diagonal_total(&self) -> u64 {
        self.total() - (0..5).map(|i| self.counts[i][i]).sum::<u64>()
    }

    pub fn row_total(&self, from: Role) -> u64 {
        self.counts[from.index()].iter().sum()
    }

    /// Row-normalised probabilities; `None` for rows without observations.
    pub fn probabilities(&self) -> [Option<[f64; 5]>; 5] {
        Role::ALL.map(|from| {
            let total = self.row_total(from);
            (total > 0).then(|| self.counts[from.index()].map(|n| n as f64 / total as f64))
        })
    }

    pub fn probability(&self, from: Role, to: Role) -> Option<f64> {
        self.probabilities()[from.index()].map(|row| row[to.index()])
    }

    fn add(&mut self, other: &TransitionMatrix) {
        for i in 0..5 {
            for j in 0..5 {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }
}

fn check_selected(selected: &[SnapshotId]) -> Result<()> {
    if selected.len() < 2 {
        return Err(Error::Input("switch counting needs at least two snapshots".into()));
    }
    if selected.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input("selected snapshots must be strictly increasing".into()));
    }
    Ok(())
}

/// Role switches per adjacent pair of `selected` snapshots. Entry `i` covers
/// `selected[i] → selected[i+1]`; diagonals are always zero.
pub fn switch_counts_per_pair(
    trajectories: &[RoleTrajectory],
    selected: &[SnapshotId],
) -> Result<Vec<TransitionMatrix>> {
    check_selected(selected)?;
    let mut out = vec![TransitionMatrix::default(); selected.len() - 1];
    for t in trajectories {
        let roles = t.restricted(selected)?;
        for (i, w) in roles.windows(2).enumerate() {
            if w[0] != w[1] {
                out[i].record(w[0], w[1]);
            }
        }
    }
    Ok(out)
}

/// Total role switches over all adjacent pairs of `selected` snapshots.
pub fn switch_counts(trajectories: &[RoleTrajectory], selected: &[SnapshotId]) -> Result<TransitionMatrix> {
    let mut total = TransitionMatrix::default();
    for m in switch_counts_per_pair(trajectories, selected)? {
        total.add(&m);
    }
    Ok(total)
}

/// Running totals: entry `i` sums the per-pair matrices `0..=i`.
pub fn cumulative_switch_counts(
    trajectories: &[RoleTrajectory],
    selected: &[SnapshotId],
) -> Result<Vec<TransitionMatrix>> {
    let mut acc = TransitionMatrix::default();
    Ok(switch_counts_per_pair(trajectories, selected)?
        .into_iter()
        .map(|m| {
            acc.add(&m);
            acc
        })
        .collect())
}

/// Restricts per-layer switch counting to particular transitions.
#[derive(Debug, Clone, Default)]
pub struct SwitchFilter {
    /// Only count `from → to` if set.
    pub pair: Option<(Role, Role)>,
}

/// Switches grouped by the switching component's layer. Every layer in
/// `0..num_layers` appears, with zero when nothing switched there.
pub fn per_layer_switches(
    trajectories: &[RoleTrajectory],
    selected: &[SnapshotId],
    num_layers: u32,
    filter: &SwitchFilter,
) -> Result<BTreeMap<u32, u64>> {
    check_selected(selected)?;
    let mut out: BTreeMap<u32, u64> = (0..num_layers).map(|l| (l, 0)).collect();
    for t in trajectories {
        let roles = t.restricted(selected)?;
        let n = roles
            .windows(2)
            .filter(|w| w[0] != w[1])
            .filter(|w| filter.pair.is_none_or(|p| p == (w[0], w[1])))
            .count() as u64;
        *out.entry(t.component.layer()).or_default() += n;
    }
    Ok(out)
}

/// Pooled (time-homogeneous) transition counts over every consecutive
/// snapshot pair, self-transitions included.
pub fn markov_matrix(trajectories: &[RoleTrajectory]) -> Result<TransitionMatrix> {
    let mut m = TransitionMatrix::default();
    for t in trajectories {
        if t.roles.len() < 2 {
            return Err(Error::Input("Markov estimation needs at least two snapshots".into()));
        }
        for w in t.roles.windows(2) {
            m.record(w[0].1, w[1].1);
        }
    }
    Ok(m)
}

/// One transition-count matrix per consecutive snapshot interval.
pub fn markov_matrices_per_interval(trajectories: &[RoleTrajectory]) -> Result<Vec<(SnapshotId, SnapshotId, TransitionMatrix)>> {
    let Some(first) = trajectories.first() else {
        return Ok(Vec::new());
    };
    let snaps: Vec<SnapshotId> = first.roles.iter().map(|(s, _)| *s).collect();
    if snaps.len() < 2 {
        return Err(Error::Input("Markov estimation needs at least two snapshots".into()));
    }
    let per_pair = switch_like(trajectories, &snaps)?;
    Ok(snaps
        .windows(2)
        .zip(per_pair)
        .map(|(w, m)| (w[0], w[1], m))
        .collect())
}

fn switch_like(trajectories: &[RoleTrajectory], snaps: &[SnapshotId]) -> Result<Vec<TransitionMatrix>> {
    let mut out = vec![TransitionMatrix::default(); snaps.len() - 1];
    for t in trajectories {
        let roles = t.restricted(snaps)?;
        for (i, w) in roles.windows(2).enumerate() {
            out[i].record(w[0], w[1]);
        }
    }
    Ok(out)
}

/// Sizes of the five proper sets per snapshot, in [`Role::ALL`] order.
pub fn role_counts(per_snapshot: &BTreeMap<SnapshotId, RoleSets>) -> Vec<(SnapshotId, [usize; 5])> {
    per_snapshot.iter().map(|(&s, sets)| (s, sets.counts())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Increasing,
    Flat,
    Decreasing,
}

/// Sign of the least-squares slope of `values` against their index.
pub fn trend(values: &[f64]) -> Trend {
    let n = values.len() as f64;
    if values.len() < 2 {
        return Trend::Flat;
    }
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = values.iter().sum::<f64>() / n;
    let slope: f64 = values
        .iter()
        .enumerate()
        .map(|(i, y)| (i as f64 - mean_x) * (y - mean_y))
        .sum();
    if slope > 1e-12 {
        Trend::Increasing
    } else if slope < -1e-12 {
        Trend::Decreasing
    } else {
        Trend::Flat
    }
}
