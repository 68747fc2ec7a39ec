use super::key::SegmentKey;
use std::collections::BTreeSet;

/// Keys are already well mixed hashes, so a fast fixed-seed hasher suffices.
pub(crate) type DetHashMap<K, V> = rustc_hash::FxHashMap<K, V>;

/// A cached slice of some token prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub key: SegmentKey,
    pub parent: Option<SegmentKey>,
    pub depth: u32,
    pub token_count: u32,
    pub access_count: u64,
    pub last_access: u64,
    pub replicas: Replicas,
    /// Designated heavy hitter: the only state in which a segment may hold
    /// more than one replica. Cleared when replicas drop back to one.
    pub heavy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Replica {
    instance: usize,
    last_access: u64,
    /// Timestamp of this replica's eviction-index entry; trails
    /// `last_access` until the entry is reindexed.
    indexed: u64,
}

/// Copies of one segment, ordered by instance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Replicas(Vec<Replica>);

impl Replicas {
    pub fn single(instance: usize, now: u64) -> Self {
        let mut r = Self::default();
        r.add(instance, now);
        r
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn instances(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|r| r.instance)
    }

    pub fn first(&self) -> Option<usize> {
        self.0.first().map(|r| r.instance)
    }

    fn find(&self, instance: usize) -> Option<usize> {
        self.0.iter().position(|r| r.instance == instance)
    }

    pub fn contains(&self, instance: usize) -> bool {
        self.find(instance).is_some()
    }

    pub fn last_access(&self, instance: usize) -> Option<u64> {
        self.find(instance).map(|i| self.0[i].last_access)
    }

    pub fn indexed(&self, instance: usize) -> Option<u64> {
        self.find(instance).map(|i| self.0[i].indexed)
    }

    /// Instance, last access and indexed timestamp of every replica.
    pub fn iter(&self) -> impl Iterator<Item = (usize, u64, u64)> + '_ {
        self.0.iter().map(|r| (r.instance, r.last_access, r.indexed))
    }

    /// Add a replica indexed at `now`; false if one already exists.
    pub(crate) fn add(&mut self, instance: usize, now: u64) -> bool {
        match self.0.binary_search_by_key(&instance, |r| r.instance) {
            Ok(_) => false,
            Err(pos) => {
                self.0.insert(
                    pos,
                    Replica {
                        instance,
                        last_access: now,
                        indexed: now,
                    },
                );
                true
            }
        }
    }

    /// Record an access; false if there is no such replica.
    pub(crate) fn touch(&mut self, instance: usize, now: u64) -> bool {
        match self.0.iter_mut().find(|r| r.instance == instance) {
            Some(r) => {
                r.last_access = now;
                true
            }
            None => false,
        }
    }

    /// Drop a replica, returning its indexed timestamp.
    pub(crate) fn remove(&mut self, instance: usize) -> Option<u64> {
        let i = self.find(instance)?;
        Some(self.0.remove(i).indexed)
    }

    /// Move the index timestamp up to the last access; returns (old, new).
    pub(crate) fn reindex(&mut self, instance: usize) -> Option<(u64, u64)> {
        let r = self.0.iter_mut().find(|r| r.instance == instance)?;
        let old = r.indexed;
        r.indexed = r.last_access;
        Some((old, r.last_access))
    }
}

impl Segment {
    pub fn is_full(&self, segment_size: u32) -> bool {
        self.token_count == segment_size
    }
}

/// Deduplicated tree of cached prefixes.
#[derive(Debug, Clone, Default)]
pub struct GlobalPrefixTree {
    pub(crate) nodes: DetHashMap<SegmentKey, Segment>,
    pub(crate) children: DetHashMap<SegmentKey, BTreeSet<SegmentKey>>,
    pub(crate) root_children: BTreeSet<SegmentKey>,
}

impl GlobalPrefixTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, key: SegmentKey) -> Option<&Segment> {
        self.nodes.get(&key)
    }

    pub fn contains(&self, key: SegmentKey) -> bool {
        self.nodes.contains_key(&key)
    }

    pub fn root_children(&self) -> &BTreeSet<SegmentKey> {
        &self.root_children
    }

    pub fn children_of(&self, parent: Option<SegmentKey>) -> Option<&BTreeSet<SegmentKey>> {
        match parent {
            None => Some(&self.root_children),
            Some(p) => self.children.get(&p),
        }
    }

    pub fn has_children(&self, key: SegmentKey) -> bool {
        self.children.get(&key).is_some_and(|c| !c.is_empty())
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.nodes.values()
    }

    pub(crate) fn get_mut(&mut self, key: SegmentKey) -> Option<&mut Segment> {
        self.nodes.get_mut(&key)
    }

    pub(crate) fn add(&mut self, seg: Segment) {
        match seg.parent {
            None => {
                self.root_children.insert(seg.key);
            }
            Some(p) => {
                self.children.entry(p).or_default().insert(seg.key);
            }
        }
        self.nodes.insert(seg.key, seg);
    }

    /// Remove a leaf node.
    pub(crate) fn remove_leaf(&mut self, key: SegmentKey) -> Option<Segment> {
        debug_assert!(!self.has_children(key), "removing internal node {key:?}");
        let seg = self.nodes.remove(&key)?;
        self.children.remove(&key);
        match seg.parent {
            None => {
                self.root_children.remove(&key);
            }
            Some(p) => {
                if let Some(set) = self.children.get_mut(&p) {
                    set.remove(&key);
                    if set.is_empty() {
                        self.children.remove(&p);
                    }
                }
            }
        }
        Some(seg)
    }

    /// All descendants of `key` (excluding it), deepest first.
    pub fn subtree_deepest_first(&self, key: SegmentKey) -> Vec<SegmentKey> {
        let mut order = Vec::new();
        let mut frontier = vec![key];
        while let Some(k) = frontier.pop() {
            if let Some(ch) = self.children.get(&k) {
                for &c in ch {
                    order.push(c);
                    frontier.push(c);
                }
            }
        }
        order.sort_by(|a, b| {
            let da = self.nodes[a].depth;
            let db = self.nodes[b].depth;
            db.cmp(&da).then(a.cmp(b))
        });
        order
    }
}
