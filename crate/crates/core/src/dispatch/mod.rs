//! Dispatch of scheduled (sub-)batches onto instances so that the total
//! query and put traffic is minimal.
//!
//! Each batch node knows which instances hold the segments its queries must
//! attend (`query_set`) and how many new KV segments it will store on each
//! instance (`put_map`). Placing the node on instance `j` costs one token row
//! per remote query target plus one token row per remote put; the minimum
//! total is a maximum-weight perfect matching between nodes and instances.

pub mod hungarian;

use crate::cost::HardwareProfile;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DispatchError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

/// How a contiguous run of tokens in a batch relates to the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Touch {
    /// Cached segment the batch's queries attend, held on this instance.
    Query(usize),
    /// New KV destined for this instance.
    Put(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentTouch {
    pub tokens: u64,
    pub touch: Touch,
}

/// A scheduler batch with its token span laid out as segment touches.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Batch {
    pub batch_id: usize,
    pub request_ids: Vec<u64>,
    pub touches: Vec<SegmentTouch>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchNode {
    pub batch_id: usize,
    pub request_ids: Vec<u64>,
    pub dop_index: u32,
    pub dop: u32,
    pub query_set: BTreeSet<usize>,
    /// Instance -> number of new KV segments stored there.
    pub put_map: BTreeMap<usize, u64>,
    /// Tokens of the parent span covered by this node.
    pub tokens: u64,
}

impl BatchNode {
    /// A node with explicit touch sets (useful for tests and external callers).
    pub fn new(query_set: impl IntoIterator<Item = usize>, put_map: impl IntoIterator<Item = (usize, u64)>) -> Self {
        Self {
            batch_id: 0,
            request_ids: Vec::new(),
            dop_index: 0,
            dop: 1,
            query_set: query_set.into_iter().collect(),
            put_map: put_map.into_iter().collect(),
            tokens: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchPlan {
    /// `assignment[i]` is the instance of node `i`.
    pub assignment: Vec<usize>,
    /// Total bytes (per layer) of remote query and put traffic.
    pub total_volume: u64,
}

/// Touch sets of one node, indexed by instance.
#[derive(Default)]
struct NodeSets {
    queried: Vec<bool>,
    puts: Vec<u64>,
}

impl NodeSets {
    fn add(&mut self, touch: Touch) {
        let (Touch::Query(i) | Touch::Put(i)) = touch;
        if i >= self.queried.len() {
            self.queried.resize(i + 1, false);
            self.puts.resize(i + 1, 0);
        }
        match touch {
            Touch::Query(i) => self.queried[i] = true,
            Touch::Put(i) => self.puts[i] += 1,
        }
    }

    fn into_node(self, batch: &Batch, dop_index: u32, dop: u32, tokens: u64) -> BatchNode {
        BatchNode {
            batch_id: batch.batch_id,
            request_ids: batch.request_ids.clone(),
            dop_index,
            dop,
            query_set: (0..self.queried.len()).filter(|&i| self.queried[i]).collect(),
            put_map: (0..self.puts.len())
                .filter(|&i| self.puts[i] > 0)
                .map(|i| (i, self.puts[i]))
                .collect(),
            tokens,
        }
    }
}

/// Split a batch into `dop` sub-batch nodes over contiguous, balanced token
/// shards. A touch belongs to the shard containing its first token.
pub fn decompose(batch: &Batch, dop: u32, available_instances: usize) -> Result<Vec<BatchNode>, DispatchError> {
    if dop == 0 {
        return Err(DispatchError::InvalidPlan("dop must be >= 1".into()));
    }
    if dop as usize > available_instances {
        return Err(DispatchError::InvalidPlan(format!(
            "dop {dop} exceeds {available_instances} available instances"
        )));
    }
    let total: u64 = batch.touches.iter().map(|t| t.tokens).sum();
    let d = dop as u64;
    let bound = |s: u64| s * total / d;
    let mut shards: Vec<NodeSets> = (0..dop).map(|_| NodeSets::default()).collect();
    let mut shard = 0u64;
    let mut offset = 0u64;
    for t in &batch.touches {
        // Offsets only grow, so the shard index only moves forward.
        while shard + 1 < d && bound(shard + 1) <= offset {
            shard += 1;
        }
        shards[shard as usize].add(t.touch);
        offset += t.tokens;
    }
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(s, sets)| {
            let tokens = bound(s as u64 + 1) - bound(s as u64);
            sets.into_node(batch, s as u32, dop, tokens)
        })
        .collect())
}

/// Negated traffic (bytes per layer) of running `node` on `instance`.
pub fn edge_weight(node: &BatchNode, instance: usize, profile: &HardwareProfile) -> i64 {
    let row = profile.token_row_bytes() as i64;
    let queries = node.query_set.iter().filter(|&&k| k != instance).count() as i64;
    let puts: i64 = node
        .put_map
        .iter()
        .filter(|(&k, _)| k != instance)
        .map(|(_, &n)| n as i64)
        .sum();
    -(queries * row + puts * row)
}

/// Minimum-traffic injective placement of `nodes` onto `n_instances`.
/// Among optimal placements the lexicographically smallest is returned.
pub fn assign(
    nodes: &[BatchNode],
    n_instances: usize,
    profile: &HardwareProfile,
) -> Result<DispatchPlan, DispatchError> {
    if nodes.len() > n_instances {
        return Err(DispatchError::InvalidPlan(format!(
            "{} nodes for {n_instances} instances",
            nodes.len()
        )));
    }
    if nodes.is_empty() {
        return Ok(DispatchPlan {
            assignment: Vec::new(),
            total_volume: 0,
        });
    }
    let n = n_instances;
    // Dummy rows pad the matrix to square with zero cost. Costs are in rows.
    let row = profile.token_row_bytes() as i64;
    let mut costs = vec![vec![0i64; n]; n];
    for (i, node) in nodes.iter().enumerate() {
        for (j, c) in costs[i].iter_mut().enumerate() {
            *c = -edge_weight(node, j, profile) / row;
        }
    }
    let assignment =
        lexicographic_scaled(&costs, nodes.len()).unwrap_or_else(|| lexicographic_by_fixing(&costs, nodes.len()));
    let total_volume = nodes
        .iter()
        .zip(&assignment)
        .map(|(node, &j)| (-edge_weight(node, j, profile)) as u64)
        .sum();
    Ok(DispatchPlan {
        assignment,
        total_volume,
    })
}

/// Lexicographically smallest optimum in one solve: real row `i` in column
/// `j` pays `j * n^(m-1-i)` on top of its cost scaled by `n^m`. The extra
/// terms are base-`n` digits summing below `n^m`, so they only break ties.
/// `None` if the scaled matrix would overflow.
fn lexicographic_scaled(costs: &[Vec<i64>], m: usize) -> Option<Vec<usize>> {
    let n = costs.len();
    let limit = i64::MAX / 16;
    let scale = (n as i64).checked_pow(m as u32)?;
    let max = costs.iter().flatten().copied().max().unwrap_or(0);
    max.checked_mul(scale)?.checked_mul(n as i64).filter(|&v| v < limit)?;
    let mut scaled = vec![vec![0i64; n]; n];
    for (i, row) in scaled.iter_mut().enumerate() {
        let digit = if i < m { (n as i64).pow((m - 1 - i) as u32) } else { 0 };
        for (j, c) in row.iter_mut().enumerate() {
            *c = costs[i][j] * scale + j as i64 * digit;
        }
    }
    let a = hungarian::min_cost_assignment(&scaled);
    Some(a[..m].to_vec())
}

/// Fix real rows one at a time to the smallest column that keeps the optimum
/// reachable.
fn lexicographic_by_fixing(costs: &[Vec<i64>], m: usize) -> Vec<usize> {
    let n = costs.len();
    let optimum = hungarian::assignment_cost(costs, &hungarian::min_cost_assignment(costs));
    let big = costs.iter().flatten().sum::<i64>() + 1;
    let mut forced = costs.to_vec();
    let mut assignment = Vec::with_capacity(m);
    let mut used = vec![false; n];
    for i in 0..m {
        let mut fixed = None;
        for j in 0..n {
            if used[j] {
                continue;
            }
            let mut trial = forced.clone();
            for (jj, c) in trial[i].iter_mut().enumerate() {
                if jj != j {
                    *c = big;
                }
            }
            let a = hungarian::min_cost_assignment(&trial);
            if hungarian::assignment_cost(costs, &a) == optimum && a[i] == j {
                fixed = Some(j);
                forced = trial;
                break;
            }
        }
        let j = fixed.expect("the optimal column for some row is always feasible");
        used[j] = true;
        assignment.push(j);
    }
    assignment
}
