//! Segment-level prefix cache pool.
//!
//! Normal segments are hashed to a single home instance. Segments near the
//! root that draw most of the traffic (heavy hitters) are replicated from
//! overloaded instances to the least-loaded ones, reads of replicated
//! segments pick the less loaded of two sampled replicas, and eviction is a
//! global LRU over per-replica access times.

mod directory;
mod key;
mod tree;

pub use directory::{InstanceDirectory, LruEntry};
pub use key::{
    fnv1a, fnv1a_extend, home_instance, ChainLink, SegmentKey, Token, TokenChain, FNV_OFFSET_BASIS, FNV_PRIME,
};
pub use tree::{GlobalPrefixTree, Replicas, Segment};

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::ops::Bound;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("instance {instance} is full and every remaining replica is pinned ({freed} of {demand} slots freed)")]
    EvictionFailed {
        instance: usize,
        demand: usize,
        freed: usize,
    },
    #[error("cannot store segment {key} on instance {instance}: capacity exhausted")]
    CapacityExhausted {
        key: SegmentKey,
        instance: usize,
        /// Keys of the chain that were stored before the failure.
        stored: Vec<SegmentKey>,
    },
    #[error("empty token sequence")]
    EmptyInput,
    #[error("unknown segment {0}")]
    UnknownSegment(SegmentKey),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub n_instances: usize,
    /// Segment size C in tokens.
    pub segment_size: u32,
    /// Segments per instance.
    pub slot_capacity: usize,
    /// An instance is overloaded when its access load exceeds (1 + delta) * mean.
    pub overload_delta: f64,
    /// Half-life of the access-load signal, in iterations.
    pub load_half_life: f64,
    /// Heavy-hitter budget is ceil(factor * N * ln N).
    pub heavy_hitter_factor: f64,
}

impl PoolConfig {
    pub fn new(n_instances: usize, segment_size: u32, slot_capacity: usize) -> Self {
        Self {
            n_instances,
            segment_size,
            slot_capacity,
            overload_delta: 0.2,
            load_half_life: 32.0,
            heavy_hitter_factor: 1.0,
        }
    }

    pub fn heavy_hitter_budget(&self) -> usize {
        heavy_hitter_budget(self.n_instances, self.heavy_hitter_factor)
    }
}

/// ceil(factor * N * ln N).
pub fn heavy_hitter_budget(n: usize, factor: f64) -> usize {
    if n <= 1 {
        return 0;
    }
    (factor * n as f64 * (n as f64).ln()).ceil() as usize
}

/// Result of matching a sequence against the pool.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrefixMatch {
    pub chain: Vec<SegmentKey>,
    pub hit_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InsertOutcome {
    /// Full chain root -> tail.
    pub keys: Vec<SegmentKey>,
    pub created: Vec<SegmentKey>,
    pub evicted: Vec<(SegmentKey, usize)>,
    /// Segments stored away from the preferred instance (locality placement).
    pub spilled: Vec<(SegmentKey, usize)>,
}

/// Where new segments go.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Hash to the home instance, evicting there when full.
    Home,
    /// Prefer the given instance; when it is full use the instance with the
    /// most free slots, and only evict on the preferred one when all are full.
    Local(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationAction {
    pub key: SegmentKey,
    pub from_instance: usize,
    pub to_instance: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RebalanceReport {
    pub actions: Vec<ReplicationAction>,
    /// Heavy segments on an overloaded instance with no eligible target.
    pub skipped: Vec<(SegmentKey, usize)>,
    pub evicted: Vec<(SegmentKey, usize)>,
    /// Distinct heavy-hitter keys considered by this invocation.
    pub heavy_keys: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicaChoice {
    pub instance: usize,
    /// The other sampled replica, when two were compared.
    pub alternative: Option<usize>,
    /// Tokens held by the segment.
    pub token_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    OverCapacity { instance: usize, used: usize },
    DuplicateNormal { key: SegmentKey, replicas: usize },
    NoReplica(SegmentKey),
    MissingParent(SegmentKey),
    BadDepth(SegmentKey),
    BadTokenCount(SegmentKey),
    PartialWithChildren(SegmentKey),
    AccessCountIncreasesDownward { parent: SegmentKey, child: SegmentKey },
    DirectoryMismatch { key: SegmentKey, instance: usize },
    PinnedNotStored(SegmentKey),
}

#[derive(Debug, Clone)]
pub struct PrefixPool {
    config: PoolConfig,
    tree: GlobalPrefixTree,
    directory: InstanceDirectory,
    decay: f64,
    /// Segments whose placement changed since the last incremental check.
    changed: Option<BTreeSet<SegmentKey>>,
}

impl PrefixPool {
    pub fn new(config: PoolConfig) -> Self {
        assert!(config.n_instances >= 1, "pool needs at least one instance");
        assert!(config.segment_size >= 1, "segment size must be positive");
        let decay = if config.load_half_life > 0.0 {
            0.5f64.powf(1.0 / config.load_half_life)
        } else {
            0.0
        };
        Self {
            directory: InstanceDirectory::new(config.n_instances, config.slot_capacity),
            tree: GlobalPrefixTree::default(),
            config,
            decay,
            changed: None,
        }
    }

    /// Record placement changes for [`PrefixPool::check_changed`].
    pub fn track_changes(&mut self, on: bool) {
        self.changed = on.then(BTreeSet::new);
    }

    fn mark(&mut self, key: SegmentKey) {
        if let Some(c) = &mut self.changed {
            c.insert(key);
        }
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn tree(&self) -> &GlobalPrefixTree {
        &self.tree
    }

    pub fn directory(&self) -> &InstanceDirectory {
        &self.directory
    }

    /// Replicas on `instance` in eviction order.
    pub fn stored_on(&self, instance: usize) -> Vec<LruEntry> {
        self.directory.stored_on(instance, &self.tree)
    }

    pub fn directory_mut(&mut self) -> &mut InstanceDirectory {
        &mut self.directory
    }

    pub fn n_instances(&self) -> usize {
        self.config.n_instances
    }

    pub fn segment_size(&self) -> u32 {
        self.config.segment_size
    }

    pub fn segment(&self, key: SegmentKey) -> Option<&Segment> {
        self.tree.get(key)
    }

    pub fn home_instance(&self, key: SegmentKey) -> usize {
        home_instance(key, self.config.n_instances)
    }

    pub fn chain(&self, tokens: &[Token]) -> TokenChain {
        TokenChain::new(tokens.to_vec(), self.config.segment_size as usize)
    }

    /// Longest cached chain of whole segments that is a prefix of `tokens`.
    pub fn match_prefix(&self, tokens: &[Token]) -> PrefixMatch {
        let chain = self.chain(tokens);
        self.match_chain(&chain, tokens.len())
    }

    /// Like [`match_prefix`](Self::match_prefix) over the first `len` tokens of a precomputed chain.
    pub fn match_chain(&self, chain: &TokenChain, len: usize) -> PrefixMatch {
        let c = chain.segment_size();
        let mut out = PrefixMatch::default();
        let mut parent: Option<SegmentKey> = None;
        let mut depth = 0usize;
        loop {
            let start = depth * c;
            if start >= len {
                break;
            }
            if len - start >= c {
                let key = chain.key_at(start + c);
                if self.tree.contains(key) {
                    out.chain.push(key);
                    out.hit_tokens += c as u64;
                    parent = Some(key);
                    depth += 1;
                    continue;
                }
            }
            // No full segment matches here; a cached partial tail may still.
            let remaining = len - start;
            let mut best: Option<(u32, SegmentKey)> = None;
            if let Some(children) = self.tree.children_of(parent) {
                for &child in children {
                    let seg = &self.tree.nodes[&child];
                    let tc = seg.token_count as usize;
                    if tc >= c || tc > remaining {
                        continue;
                    }
                    if best.is_some_and(|(b, _)| b as usize >= tc) {
                        continue;
                    }
                    if chain.key_at(start + tc) == child {
                        best = Some((seg.token_count, child));
                    }
                }
            }
            if let Some((tc, key)) = best {
                out.chain.push(key);
                out.hit_tokens += tc as u64;
            }
            break;
        }
        out
    }

    /// Split `tokens` into segments and store the ones not already cached.
    pub fn insert_prefix(&mut self, tokens: &[Token], now: u64) -> Result<InsertOutcome, PoolError> {
        if tokens.is_empty() {
            return Err(PoolError::EmptyInput);
        }
        let chain = self.chain(tokens);
        let links = chain.links(tokens.len());
        self.insert_links(&links, now, Placement::Home)
    }

    /// Insert a precomputed chain of links (root first).
    pub fn insert_links(
        &mut self,
        links: &[ChainLink],
        now: u64,
        placement: Placement,
    ) -> Result<InsertOutcome, PoolError> {
        let mut out = InsertOutcome::default();
        // The chain itself must survive any eviction this insertion triggers.
        let mut pinned_here = Vec::new();
        for l in links {
            if self.tree.contains(l.key) {
                self.pin(l.key);
                pinned_here.push(l.key);
            }
        }
        let result = (|| {
            for l in links {
                if self.tree.contains(l.key) {
                    out.keys.push(l.key);
                    continue;
                }
                if let Some(p) = l.parent {
                    if !self.tree.contains(p) {
                        return Err(PoolError::UnknownSegment(p));
                    }
                }
                let target = match placement {
                    Placement::Home => self.home_instance(l.key),
                    Placement::Local(preferred) => self.local_target(preferred),
                };
                if self.directory.free(target) == 0 {
                    match self.evict(target, 1) {
                        Ok(ev) => out.evicted.extend(ev),
                        Err(_) => {
                            return Err(PoolError::CapacityExhausted {
                                key: l.key,
                                instance: target,
                                stored: out.keys.clone(),
                            })
                        }
                    }
                }
                if let Placement::Local(preferred) = placement {
                    if target != preferred {
                        out.spilled.push((l.key, target));
                    }
                }
                let replicas = Replicas::single(target, now);
                self.tree.add(Segment {
                    key: l.key,
                    parent: l.parent,
                    depth: l.depth,
                    token_count: l.token_count,
                    access_count: 0,
                    last_access: now,
                    replicas,
                    heavy: false,
                });
                self.directory.stored[target].insert((now, Reverse(l.depth), l.key));
                self.mark(l.key);
                if let Some(p) = l.parent {
                    self.mark(p);
                }
                self.pin(l.key);
                pinned_here.push(l.key);
                out.keys.push(l.key);
                out.created.push(l.key);
            }
            Ok(())
        })();
        for k in pinned_here {
            self.unpin(k);
        }
        result.map(|_| out)
    }

    fn local_target(&self, preferred: usize) -> usize {
        if self.directory.free(preferred) > 0 {
            return preferred;
        }
        (0..self.n_instances())
            .filter(|&i| self.directory.free(i) > 0)
            .max_by(|&a, &b| self.directory.free(a).cmp(&self.directory.free(b)).then(b.cmp(&a)))
            .unwrap_or(preferred)
    }

    pub fn pin(&mut self, key: SegmentKey) {
        *self.directory.pinned.entry(key).or_insert(0) += 1;
    }

    pub fn unpin(&mut self, key: SegmentKey) {
        if let Some(c) = self.directory.pinned.get_mut(&key) {
            *c -= 1;
            if *c == 0 {
                self.directory.pinned.remove(&key);
            }
        }
    }

    /// Multiply every access load by the per-iteration decay factor.
    pub fn decay_loads(&mut self) {
        for l in &mut self.directory.access_load {
            *l *= self.decay;
        }
    }

    fn set_replica_access(&mut self, key: SegmentKey, instance: usize, now: u64) {
        let seg = self.tree.get_mut(key).expect("segment exists");
        seg.access_count += 1;
        seg.last_access = seg.last_access.max(now);
        let found = seg.replicas.touch(instance, now);
        debug_assert!(found, "replica exists");
    }

    /// Route one access of a cached segment to a replica: the only replica, or
    /// the less loaded of two distinct uniformly sampled replicas.
    pub fn select_replica<R: Rng + ?Sized>(
        &mut self,
        key: SegmentKey,
        now: u64,
        rng: &mut R,
    ) -> Result<ReplicaChoice, PoolError> {
        let seg = self.tree.get(key).ok_or(PoolError::UnknownSegment(key))?;
        let choice = if seg.replicas.len() == 1 {
            ReplicaChoice {
                instance: seg.replicas.first().expect("stored segment has a replica"),
                alternative: None,
                token_count: seg.token_count,
            }
        } else {
            let n = seg.replicas.len();
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let a = seg.replicas.instances().nth(i).expect("index in range");
            let b = seg.replicas.instances().nth(j).expect("index in range");
            let load = &self.directory.access_load;
            let a_first = load[a] < load[b] || (load[a] == load[b] && a < b);
            let (win, lose) = if a_first { (a, b) } else { (b, a) };
            ReplicaChoice {
                instance: win,
                alternative: Some(lose),
                token_count: seg.token_count,
            }
        };
        self.directory.access_load[choice.instance] += 1.0;
        self.set_replica_access(key, choice.instance, now);
        Ok(choice)
    }

    /// Record an access on a specific replica (locality policies).
    pub fn touch_on(&mut self, key: SegmentKey, instance: usize, now: u64) -> Result<(), PoolError> {
        let seg = self.tree.get(key).ok_or(PoolError::UnknownSegment(key))?;
        if !seg.replicas.contains(instance) {
            return Err(PoolError::UnknownSegment(key));
        }
        self.directory.access_load[instance] += 1.0;
        self.set_replica_access(key, instance, now);
        Ok(())
    }

    fn remove_replica(&mut self, key: SegmentKey, instance: usize) {
        let seg = self.tree.get_mut(key).expect("segment exists");
        let ts = seg.replicas.remove(instance).expect("replica exists");
        let depth = seg.depth;
        if seg.replicas.len() <= 1 {
            seg.heavy = false;
        }
        let empty = seg.replicas.is_empty();
        self.directory.stored[instance].remove(&(ts, Reverse(depth), key));
        self.mark(key);
        if empty {
            self.tree.remove_leaf(key);
        }
    }

    /// Free at least `demand` slots on `instance` in LRU order. Pinned
    /// segments are skipped; the last copy of a segment with cached
    /// descendants goes only together with its whole (unpinned) subtree.
    pub fn evict(&mut self, instance: usize, demand: usize) -> Result<Vec<(SegmentKey, usize)>, PoolError> {
        let mut evicted = Vec::new();
        if demand == 0 {
            return Ok(evicted);
        }
        let mut freed = 0usize;
        let mut cursor: Option<LruEntry> = None;
        while freed < demand {
            let next = {
                let set = &self.directory.stored[instance];
                match cursor {
                    None => set.iter().next().copied(),
                    Some(c) => set.range((Bound::Excluded(c), Bound::Unbounded)).next().copied(),
                }
            };
            let Some(entry) = next else {
                return Err(PoolError::EvictionFailed {
                    instance,
                    demand,
                    freed,
                });
            };
            cursor = Some(entry);
            let key = entry.2;
            let seg = self.tree.get_mut(key).expect("indexed segment exists");
            let (indexed, cur) = seg.replicas.reindex(instance).expect("indexed replica exists");
            if indexed != cur {
                debug_assert_eq!(indexed, entry.0);
                // Reindex under the last access; restart if it moved behind the cursor.
                let set = &mut self.directory.stored[instance];
                set.remove(&entry);
                set.insert((cur, entry.1, key));
                if cur < entry.0 {
                    cursor = None;
                }
                continue;
            }
            if self.directory.is_pinned(key) {
                continue;
            }
            let seg = &self.tree.nodes[&key];
            if seg.replicas.len() > 1 || !self.tree.has_children(key) {
                self.remove_replica(key, instance);
                evicted.push((key, instance));
                freed += 1;
                continue;
            }
            let subtree = self.tree.subtree_deepest_first(key);
            if subtree.iter().any(|k| self.directory.is_pinned(*k)) {
                continue;
            }
            for k in subtree {
                let reps: Vec<usize> = self.tree.nodes[&k].replicas.instances().collect();
                for r in reps {
                    self.remove_replica(k, r);
                    evicted.push((k, r));
                    if r == instance {
                        freed += 1;
                    }
                }
            }
            self.remove_replica(key, instance);
            evicted.push((key, instance));
            freed += 1;
        }
        Ok(evicted)
    }

    /// Up to `budget` full segments with the highest access counts, found by
    /// a pruned BFS from the root. Sorted by count descending, then key.
    pub fn find_heavy_hitters(&self, budget: usize) -> Vec<SegmentKey> {
        if budget == 0 {
            return Vec::new();
        }
        let c = self.config.segment_size;
        // Min-heap of the current best: the root is the k-th best.
        let mut best: BinaryHeap<Reverse<(u64, Reverse<SegmentKey>)>> = BinaryHeap::new();
        let mut queue: VecDeque<SegmentKey> = self.tree.root_children.iter().copied().collect();
        while let Some(key) = queue.pop_front() {
            let seg = &self.tree.nodes[&key];
            let count = seg.access_count;
            if best.len() == budget {
                let Reverse((kth, _)) = *best.peek().unwrap();
                if count < kth {
                    continue;
                }
            }
            if seg.is_full(c) {
                best.push(Reverse((count, Reverse(key))));
                if best.len() > budget {
                    best.pop();
                }
            }
            if let Some(ch) = self.tree.children.get(&key) {
                queue.extend(ch.iter().copied());
            }
        }
        let mut out: Vec<(u64, SegmentKey)> = best.into_iter().map(|Reverse((n, Reverse(k)))| (n, k)).collect();
        out.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        out.into_iter().map(|(_, k)| k).collect()
    }

    pub fn heavy_hitter_budget(&self) -> usize {
        self.config.heavy_hitter_budget()
    }

    /// Replicate heavy hitters held by overloaded instances to the
    /// least-loaded instances without a copy.
    pub fn rebalance(&mut self, now: u64) -> RebalanceReport {
        let mut report = RebalanceReport::default();
        let n = self.n_instances();
        if n < 2 {
            return report;
        }
        let loads = self.directory.access_load.clone();
        let mean = loads.iter().sum::<f64>() / n as f64;
        if mean <= 0.0 {
            return report;
        }
        let threshold = (1.0 + self.config.overload_delta) * mean;
        let mut overloaded: Vec<usize> = (0..n).filter(|&i| loads[i] > threshold).collect();
        if overloaded.is_empty() {
            return report;
        }
        overloaded.sort_by(|&a, &b| loads[b].total_cmp(&loads[a]).then(a.cmp(&b)));
        let heavy = self.find_heavy_hitters(self.heavy_hitter_budget());
        report.heavy_keys = heavy.len();
        let mut handled: BTreeSet<SegmentKey> = BTreeSet::new();
        for &src in &overloaded {
            for &key in &heavy {
                if handled.contains(&key) {
                    continue;
                }
                let Some(seg) = self.tree.get(key) else { continue };
                if !seg.replicas.contains(src) {
                    continue;
                }
                handled.insert(key);
                let holders: BTreeSet<usize> = seg.replicas.instances().collect();
                let depth = seg.depth;
                let candidates: Vec<usize> = self
                    .directory
                    .by_load()
                    .into_iter()
                    .filter(|t| !holders.contains(t))
                    .collect();
                self.pin(key);
                let mut placed = None;
                for t in candidates {
                    if self.directory.free(t) == 0 {
                        match self.evict(t, 1) {
                            Ok(ev) => report.evicted.extend(ev),
                            Err(_) => continue,
                        }
                    }
                    placed = Some(t);
                    break;
                }
                self.unpin(key);
                match placed {
                    Some(t) => {
                        let seg = self.tree.get_mut(key).expect("pinned segment survives eviction");
                        seg.replicas.add(t, now);
                        seg.heavy = true;
                        self.directory.stored[t].insert((now, Reverse(depth), key));
                        self.mark(key);
                        report.actions.push(ReplicationAction {
                            key,
                            from_instance: src,
                            to_instance: t,
                        });
                    }
                    None => report.skipped.push((key, src)),
                }
            }
        }
        report
    }

    /// Capacity on every instance plus every invariant of the segments
    /// changed since the previous call. Together with one full check at the
    /// start of tracking this covers the whole pool, since unchanged segments
    /// keep their placement.
    pub fn check_changed(&mut self) -> Vec<Violation> {
        let mut v = self.capacity_violations();
        let changed = self.changed.replace(BTreeSet::new()).unwrap_or_default();
        for key in changed {
            let Some(seg) = self.tree.get(key) else { continue };
            self.check_segment(seg, &mut v);
            for (i, _, indexed) in seg.replicas.iter() {
                let entry = (indexed, Reverse(seg.depth), key);
                if !self.directory.stored[i].contains(&entry) {
                    v.push(Violation::DirectoryMismatch { key, instance: i });
                }
            }
        }
        v
    }

    fn capacity_violations(&self) -> Vec<Violation> {
        (0..self.n_instances())
            .filter(|&i| self.directory.used(i) > self.directory.slot_capacity)
            .map(|i| Violation::OverCapacity {
                instance: i,
                used: self.directory.used(i),
            })
            .collect()
    }

    fn check_segment(&self, seg: &Segment, v: &mut Vec<Violation>) {
        let c = self.config.segment_size;
        if seg.replicas.is_empty() {
            v.push(Violation::NoReplica(seg.key));
        }
        if seg.replicas.len() > 1 && !seg.heavy {
            v.push(Violation::DuplicateNormal {
                key: seg.key,
                replicas: seg.replicas.len(),
            });
        }
        if seg.token_count == 0 || seg.token_count > c {
            v.push(Violation::BadTokenCount(seg.key));
        }
        if seg.token_count < c && self.tree.has_children(seg.key) {
            v.push(Violation::PartialWithChildren(seg.key));
        }
        match seg.parent {
            None => {
                if seg.depth != 0 {
                    v.push(Violation::BadDepth(seg.key));
                }
            }
            Some(p) => match self.tree.get(p) {
                None => v.push(Violation::MissingParent(seg.key)),
                Some(ps) => {
                    if ps.depth + 1 != seg.depth {
                        v.push(Violation::BadDepth(seg.key));
                    }
                    if ps.access_count < seg.access_count {
                        v.push(Violation::AccessCountIncreasesDownward {
                            parent: p,
                            child: seg.key,
                        });
                    }
                }
            },
        }
    }

    /// Check every structural invariant; returns all violations found.
    pub fn check_invariants(&self) -> Vec<Violation> {
        let mut v = self.capacity_violations();
        for (i, set) in self.directory.stored.iter().enumerate() {
            for &(ts, Reverse(depth), key) in set {
                let ok = self
                    .tree
                    .get(key)
                    .is_some_and(|s| s.depth == depth && s.replicas.indexed(i) == Some(ts));
                if !ok {
                    v.push(Violation::DirectoryMismatch { key, instance: i });
                }
            }
        }
        let mut replica_total = 0usize;
        for seg in self.tree.segments() {
            replica_total += seg.replicas.len();
            self.check_segment(seg, &mut v);
        }
        if replica_total != self.directory.total_used() {
            v.push(Violation::DirectoryMismatch {
                key: SegmentKey(0),
                instance: usize::MAX,
            });
        }
        for key in self.directory.pinned_keys() {
            if !self.tree.contains(key) {
                v.push(Violation::PinnedNotStored(key));
            }
        }
        v
    }
}
