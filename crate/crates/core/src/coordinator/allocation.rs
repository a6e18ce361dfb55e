//! Which worker trains on which datum.

use std::collections::{BTreeMap, BTreeSet};

use crate::datastore::{DatasetManifest, DatumId};

pub type WorkerId = String;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatumState {
    pub label: String,
    pub allocated_to: Option<WorkerId>,
    pub cached_by: BTreeSet<WorkerId>,
}

/// Ids to add to and remove from one worker's allocation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AllocationDelta {
    pub add: Vec<DatumId>,
    pub remove: Vec<DatumId>,
}

impl AllocationDelta {
    pub fn is_empty(&self) -> bool {
        self.add.is_empty() && self.remove.is_empty()
    }
}

/// Per-worker allocation changes produced by one operation.
pub type AllocationChanges = BTreeMap<WorkerId, AllocationDelta>;

/// Datum ids that are already registered.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{} datum ids already registered, e.g. {}", .0.len(), .0.first().map(|d| d.to_string()).unwrap_or_default())]
pub struct DuplicateIds(pub Vec<DatumId>);

/// The data index: per-datum label, allocated worker and caching workers,
/// plus the per-worker allocation sets.
///
/// Every datum is either allocated to exactly one worker or in the
/// unallocated pool, and no worker holds more than its limit.
#[derive(Clone, Debug, Default)]
pub struct DataIndexTable {
    data: BTreeMap<DatumId, DatumState>,
    by_worker: BTreeMap<WorkerId, BTreeSet<DatumId>>,
    limits: BTreeMap<WorkerId, usize>,
    unallocated: BTreeSet<DatumId>,
}

impl DataIndexTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn unallocated_len(&self) -> usize {
        self.unallocated.len()
    }

    pub fn allocated_len(&self) -> usize {
        self.data.len() - self.unallocated.len()
    }

    pub fn datum(&self, id: &DatumId) -> Option<&DatumState> {
        self.data.get(id)
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerId> {
        self.by_worker.keys()
    }

    pub fn contains_worker(&self, worker: &str) -> bool {
        self.by_worker.contains_key(worker)
    }

    pub fn limit(&self, worker: &str) -> Option<usize> {
        self.limits.get(worker).copied()
    }

    pub fn allocation(&self, worker: &str) -> Option<&BTreeSet<DatumId>> {
        self.by_worker.get(worker)
    }

    pub fn allocation_len(&self, worker: &str) -> usize {
        self.by_worker.get(worker).map_or(0, |s| s.len())
    }

    /// Allocation sizes in ascending worker-id order.
    pub fn sizes(&self) -> BTreeMap<WorkerId, usize> {
        self.by_worker
            .iter()
            .map(|(w, s)| (w.clone(), s.len()))
            .collect()
    }

    /// Adds a dataset's ids to the unallocated pool. Nothing is inserted if
    /// any id collides with one already present.
    pub fn register(&mut self, manifest: &DatasetManifest) -> Result<usize, DuplicateIds> {
        let collisions: Vec<DatumId> = manifest
            .datum_ids()
            .filter(|id| self.data.contains_key(id))
            .collect();
        if !collisions.is_empty() {
            return Err(DuplicateIds(collisions));
        }
        for (id, entry) in manifest.datum_ids().zip(&manifest.entries) {
            self.data.insert(
                id.clone(),
                DatumState {
                    label: entry.label.clone(),
                    allocated_to: None,
                    cached_by: BTreeSet::new(),
                },
            );
            self.unallocated.insert(id);
        }
        Ok(manifest.entries.len())
    }

    fn assign(&mut self, id: &DatumId, worker: &str, changes: &mut AllocationChanges) {
        self.data.get_mut(id).expect("known datum").allocated_to = Some(worker.to_string());
        self.by_worker
            .get_mut(worker)
            .expect("known worker")
            .insert(id.clone());
        changes.entry(worker.to_string()).or_default().add.push(id.clone());
    }

    fn unassign(&mut self, id: &DatumId, worker: &str, changes: &mut AllocationChanges) {
        self.data.get_mut(id).expect("known datum").allocated_to = None;
        self.by_worker
            .get_mut(worker)
            .expect("known worker")
            .remove(id);
        changes
            .entry(worker.to_string())
            .or_default()
            .remove
            .push(id.clone());
    }

    /// The worker with the smallest allocation that still has room,
    /// lowest id first on ties.
    fn smallest_with_room(&self, exclude: Option<&str>) -> Option<WorkerId> {
        self.by_worker
            .iter()
            .filter(|(w, s)| Some(w.as_str()) != exclude && s.len() < self.limits[w.as_str()])
            .min_by_key(|(_, s)| s.len())
            .map(|(w, _)| w.clone())
    }

    /// Hands every unallocated id, in ascending order, to the smallest
    /// allocation with room. Stops when no worker has room.
    pub fn allocate_unallocated(&mut self) -> AllocationChanges {
        let mut changes = AllocationChanges::new();
        while let Some(id) = self.unallocated.first().cloned() {
            let Some(worker) = self.smallest_with_room(None) else {
                break;
            };
            self.unallocated.remove(&id);
            self.assign(&id, &worker, &mut changes);
        }
        changes
    }

    /// Registers a joining worker and provisions it.
    ///
    /// Unallocated data is used first, up to the smaller of `limit` and a
    /// fair share of the whole dataset. If the pool is (or becomes) empty
    /// the pie-cutter takes one id at a time from the largest existing
    /// allocation (lowest worker id on ties) until the joiner holds
    /// `floor(allocated / (n + 1))`, capped by `limit`. Data never moves
    /// between two existing workers.
    pub fn join(&mut self, worker: &str, limit: usize) -> AllocationChanges {
        let mut changes = AllocationChanges::new();
        if self.by_worker.contains_key(worker) {
            return changes;
        }
        let existing = self.by_worker.len();
        self.by_worker.insert(worker.to_string(), BTreeSet::new());
        self.limits.insert(worker.to_string(), limit);

        if !self.unallocated.is_empty() {
            let fair = self.data.len().div_ceil(existing + 1);
            let take = limit.min(fair).min(self.unallocated.len());
            let ids: Vec<DatumId> = self.unallocated.iter().take(take).cloned().collect();
            for id in ids {
                self.unallocated.remove(&id);
                self.assign(&id, worker, &mut changes);
            }
        }

        if self.unallocated.is_empty() && existing > 0 {
            let target = (self.allocated_len() / (existing + 1)).min(limit);
            while self.allocation_len(worker) < target {
                let donor = self
                    .by_worker
                    .iter()
                    .filter(|(w, _)| w.as_str() != worker)
                    .max_by(|(wa, a), (wb, b)| a.len().cmp(&b.len()).then(wb.cmp(wa)))
                    .map(|(w, s)| (w.clone(), s.len()));
                let Some((donor, donor_len)) = donor else {
                    break;
                };
                if donor_len <= self.allocation_len(worker) {
                    break;
                }
                let id = self.by_worker[&donor]
                    .last()
                    .cloned()
                    .expect("non-empty donor");
                self.unassign(&id, &donor, &mut changes);
                self.assign(&id, worker, &mut changes);
            }
        }
        changes
    }

    /// Removes a worker and redistributes its ids, ascending, to the
    /// smallest remaining allocations with room; the rest become
    /// unallocated. The lost worker itself gets no delta.
    pub fn remove_worker(&mut self, worker: &str) -> AllocationChanges {
        let mut changes = AllocationChanges::new();
        let Some(ids) = self.by_worker.remove(worker) else {
            return changes;
        };
        self.limits.remove(worker);
        for state in self.data.values_mut() {
            state.cached_by.remove(worker);
        }
        for id in ids {
            self.data.get_mut(&id).expect("known datum").allocated_to = None;
            match self.smallest_with_room(None) {
                Some(recipient) => self.assign(&id, &recipient, &mut changes),
                None => {
                    self.unallocated.insert(id);
                }
            }
        }
        changes
    }

    /// Records that a worker holds local copies of `ids`.
    pub fn mark_cached(&mut self, worker: &str, ids: &[DatumId]) {
        for id in ids {
            if let Some(state) = self.data.get_mut(id) {
                state.cached_by.insert(worker.to_string());
            }
        }
    }

    pub fn mark_evicted(&mut self, worker: &str, ids: &[DatumId]) {
        for id in ids {
            if let Some(state) = self.data.get_mut(id) {
                state.cached_by.remove(worker);
            }
        }
    }

    /// Returns allocated ids to the pool (e.g. ids a worker could not fetch).
    pub fn release(&mut self, worker: &str, ids: &[DatumId]) -> AllocationChanges {
        let mut changes = AllocationChanges::new();
        for id in ids {
            let owned = self
                .data
                .get(id)
                .is_some_and(|s| s.allocated_to.as_deref() == Some(worker));
            if owned {
                self.unassign(id, worker, &mut changes);
                self.unallocated.insert(id.clone());
            }
        }
        changes
    }

    /// Checks the partition and cap invariants; returns a description of
    /// the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = 0usize;
        for (worker, ids) in &self.by_worker {
            if ids.len() > self.limits[worker] {
                return Err(format!(
                    "{worker} holds {} ids, limit {}",
                    ids.len(),
                    self.limits[worker]
                ));
            }
            for id in ids {
                match self.data.get(id).and_then(|s| s.allocated_to.as_deref()) {
                    Some(owner) if owner == worker => {}
                    other => return Err(format!("{id} in {worker}'s set but owned by {other:?}")),
                }
            }
            seen += ids.len();
        }
        for id in &self.unallocated {
            if self.data.get(id).is_none_or(|s| s.allocated_to.is_some()) {
                return Err(format!("{id} is pooled but allocated"));
            }
        }
        if seen + self.unallocated.len() != self.data.len() {
            return Err(format!(
                "{seen} allocated + {} unallocated != {} registered",
                self.unallocated.len(),
                self.data.len()
            ));
        }
        Ok(())
    }

    /// Max minus min allocation among workers below their limit, or 0.
    pub fn imbalance(&self) -> usize {
        let below: Vec<usize> = self
            .by_worker
            .iter()
            .filter(|(w, s)| s.len() < self.limits[w.as_str()])
            .map(|(_, s)| s.len())
            .collect();
        match (below.iter().max(), below.iter().min()) {
            (Some(max), Some(min)) => max - min,
            _ => 0,
        }
    }
}
