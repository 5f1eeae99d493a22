use std::collections::{BTreeMap, BTreeSet};

use crate::model::{ActivationRecord, ComponentId, SnapshotId};

/// Activation records indexed by `(snapshot, fact)`, one component set per
/// token position. Positions without a record are inactive for every
/// component.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CircuitStore {
    entries: BTreeMap<(SnapshotId, String), BTreeMap<usize, BTreeSet<ComponentId>>>,
}

static EMPTY: BTreeSet<ComponentId> = BTreeSet::new();

impl CircuitStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a record; returns `false` if `(snapshot, fact, pos)` was already present.
    pub fn insert(&mut self, record: ActivationRecord) -> bool {
        let slot = self
            .entries
            .entry((record.snapshot, record.fact_id))
            .or_default();
        if slot.contains_key(&record.token_pos) {
            return false;
        }
        slot.insert(record.token_pos, record.active_components);
        true
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = ActivationRecord>) {
        for r in records {
            self.insert(r);
        }
    }

    /// Active components at one position.
    pub fn active(&self, snapshot: SnapshotId, fact_id: &str, pos: usize) -> &BTreeSet<ComponentId> {
        self.entries
            .get(&(snapshot, fact_id.to_string()))
            .and_then(|m| m.get(&pos))
            .unwrap_or(&EMPTY)
    }

    pub fn is_active(&self, snapshot: SnapshotId, fact_id: &str, pos: usize, c: ComponentId) -> bool {
        self.active(snapshot, fact_id, pos).contains(&c)
    }

    pub fn positions(&self, snapshot: SnapshotId, fact_id: &str) -> Option<&BTreeMap<usize, BTreeSet<ComponentId>>> {
        self.entries.get(&(snapshot, fact_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All records in `(snapshot, fact, position)` order.
    pub fn records(&self) -> impl Iterator<Item = ActivationRecord> + '_ {
        self.entries.iter().flat_map(|((s, f), positions)| {
            positions.iter().map(move |(&pos, set)| ActivationRecord {
                snapshot: *s,
                fact_id: f.clone(),
                token_pos: pos,
                active_components: set.clone(),
            })
        })
    }
}

impl FromIterator<ActivationRecord> for CircuitStore {
    fn from_iter<I: IntoIterator<Item = ActivationRecord>>(iter: I) -> Self {
        let mut s = CircuitStore::new();
        s.extend(iter);
        s
    }
}
