use super::key::SegmentKey;
use super::tree::DetHashMap;
use std::cmp::Reverse;
use std::collections::BTreeSet;

/// Eviction order of a replica: oldest access first, then deeper segments
/// first (so leaves leave before their ancestors when touched together), then
/// smallest key.
pub type LruEntry = (u64, Reverse<u32>, SegmentKey);

/// Per-instance storage and load bookkeeping.
#[derive(Debug, Clone)]
pub struct InstanceDirectory {
    pub(crate) slot_capacity: usize,
    /// Eviction index. An entry may carry an older timestamp than its
    /// replica's last access; eviction reindexes such entries lazily.
    pub(crate) stored: Vec<BTreeSet<LruEntry>>,
    pub(crate) access_load: Vec<f64>,
    pub(crate) pinned: DetHashMap<SegmentKey, u32>,
}

impl InstanceDirectory {
    pub fn new(n_instances: usize, slot_capacity: usize) -> Self {
        Self {
            slot_capacity,
            stored: vec![BTreeSet::new(); n_instances],
            access_load: vec![0.0; n_instances],
            pinned: Default::default(),
        }
    }

    pub fn n_instances(&self) -> usize {
        self.stored.len()
    }

    pub fn slot_capacity(&self) -> usize {
        self.slot_capacity
    }

    pub fn used(&self, instance: usize) -> usize {
        self.stored[instance].len()
    }

    pub fn free(&self, instance: usize) -> usize {
        self.slot_capacity.saturating_sub(self.used(instance))
    }

    pub fn total_used(&self) -> usize {
        self.stored.iter().map(BTreeSet::len).sum()
    }

    pub fn access_load(&self) -> &[f64] {
        &self.access_load
    }

    pub fn set_access_load(&mut self, instance: usize, load: f64) {
        self.access_load[instance] = load;
    }

    pub fn is_pinned(&self, key: SegmentKey) -> bool {
        self.pinned.contains_key(&key)
    }

    pub fn pinned_count(&self) -> usize {
        self.pinned.len()
    }

    pub fn pinned_keys(&self) -> impl Iterator<Item = SegmentKey> + '_ {
        self.pinned.keys().copied()
    }

    /// Stored replicas on `instance` in eviction order, with current timestamps.
    pub fn stored_on(&self, instance: usize, tree: &super::GlobalPrefixTree) -> Vec<LruEntry> {
        let mut v: Vec<LruEntry> = self.stored[instance]
            .iter()
            .map(|&(ts, d, k)| {
                let cur = tree.get(k).and_then(|s| s.replicas.last_access(instance)).unwrap_or(ts);
                (cur, d, k)
            })
            .collect();
        v.sort_unstable();
        v
    }

    /// Instances ordered by (access_load, index), least loaded first.
    pub fn by_load(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_instances()).collect();
        idx.sort_by(|&a, &b| self.access_load[a].total_cmp(&self.access_load[b]).then(a.cmp(&b)));
        idx
    }
}
