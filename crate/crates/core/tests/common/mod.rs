//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use lakesim::cost::{self, HardwareProfile, LatencyModel, RequestShape};
use lakesim::dispatch::BatchNode;
use lakesim::pool::{PoolConfig, PrefixPool, SegmentKey, Token};
use lakesim::scheduler::{Phase, PhaseRequest};
use lakesim::sim::{PolicyConfig, PolicyKind, SimConfig};
use lakesim::workload::{self, Preset, TraceRecord, TraceSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- dispatch

/// K plus V rows of one token in one layer.
pub fn row_bytes(p: &HardwareProfile) -> u64 {
    2 * p.hidden_dim * p.bytes_per_elem as u64
}

pub fn random_nodes(r: &mut ChaCha8Rng, n: usize) -> Vec<BatchNode> {
    let m = r.random_range(1..=n);
    (0..m)
        .map(|_| {
            let queries: Vec<usize> = (0..n).filter(|_| r.random_bool(0.4)).collect();
            let mut puts: Vec<(usize, u64)> = Vec::new();
            for i in 0..n {
                if r.random_bool(0.3) {
                    puts.push((i, r.random_range(1..4)));
                }
            }
            BatchNode::new(queries, puts)
        })
        .collect()
}

fn node_volume(node: &BatchNode, j: usize, row: u64) -> u64 {
    let q = node.query_set.iter().filter(|&&k| k != j).count() as u64;
    let p: u64 = node.put_map.iter().filter(|(&k, _)| k != j).map(|(_, &c)| c).sum();
    (q + p) * row
}

/// Minimum total volume over every injective placement, and the
/// lexicographically smallest placement attaining it.
pub fn brute_force_assign(nodes: &[BatchNode], n: usize, p: &HardwareProfile) -> (u64, Vec<usize>) {
    #[allow(clippy::too_many_arguments)]
    fn go(
        i: usize,
        nodes: &[BatchNode],
        n: usize,
        row: u64,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        acc: u64,
        best: &mut Option<(u64, Vec<usize>)>,
    ) {
        if i == nodes.len() {
            // Enumeration is in lexicographic order: keep the first optimum.
            if best.as_ref().is_none_or(|(b, _)| acc < *b) {
                *best = Some((acc, cur.clone()));
            }
            return;
        }
        for j in 0..n {
            if used[j] {
                continue;
            }
            used[j] = true;
            cur.push(j);
            go(
                i + 1,
                nodes,
                n,
                row,
                used,
                cur,
                acc + node_volume(&nodes[i], j, row),
                best,
            );
            cur.pop();
            used[j] = false;
        }
    }
    let mut best = None;
    go(
        0,
        nodes,
        n,
        row_bytes(p),
        &mut vec![false; n],
        &mut Vec::new(),
        0,
        &mut best,
    );
    best.expect("m <= n admits a placement")
}

// --------------------------------------------------------------- scheduler

pub struct DpCase {
    pub requests: Vec<PhaseRequest>,
    pub n: usize,
    pub load: f64,
}

pub fn random_dp_case(r: &mut ChaCha8Rng, model: &LatencyModel) -> DpCase {
    let m = r.random_range(1..=5);
    let n = r.random_range(1..=4);
    let load = if r.random_bool(0.3) {
        0.0
    } else {
        r.random_range(0.0..0.6)
    };
    let requests = (0..m)
        .map(|i| {
            let input = r.random_range(1..=2048u64);
            let context = input + r.random_range(0..=8192u64);
            let alone = cost::estimate_batch_latency(&[RequestShape::new(context - input, input)], 1, load, model)
                .expect("valid load");
            PhaseRequest {
                request_id: i as u64,
                session_id: i as u64,
                phase: Phase::Prefill,
                context_len: context,
                input_len: input,
                slo_tbt: alone * r.random_range(0.2..3.0),
            }
        })
        .collect();
    DpCase { requests, n, load }
}

/// Best folded objective over every ordered partition of the sorted list
/// and every DoP vector with sum <= n: (SLO-feasible optimum, unconstrained optimum).
pub fn enumerate_plans(case: &DpCase, model: &LatencyModel) -> (Option<f64>, f64) {
    let mut sorted: Vec<&PhaseRequest> = case.requests.iter().collect();
    sorted.sort_by_key(|r| (r.context_len, r.request_id));
    let m = sorted.len();
    let mut feasible: Option<f64> = None;
    let mut any = f64::INFINITY;
    // Bit b of `cuts` set: a batch ends after request b.
    for cuts in 0u32..(1 << (m - 1)) {
        let mut groups = Vec::new();
        let mut start = 0;
        for b in 0..m {
            if b == m - 1 || cuts & (1 << b) != 0 {
                groups.push(start..b + 1);
                start = b + 1;
            }
        }
        if groups.len() > case.n {
            continue;
        }
        let mut dops = vec![1u32; groups.len()];
        loop {
            let mut obj = 0.0;
            let mut ok = true;
            for (g, &d) in groups.iter().zip(&dops) {
                let shapes: Vec<RequestShape> = sorted[g.clone()].iter().map(|r| r.shape()).collect();
                let t = cost::estimate_batch_latency(&shapes, d, case.load, model).unwrap();
                let slo = sorted[g.clone()]
                    .iter()
                    .map(|r| r.slo_tbt)
                    .fold(f64::INFINITY, f64::min);
                ok &= t <= slo;
                obj += g.len() as f64 * t;
            }
            any = any.min(obj);
            if ok {
                feasible = Some(feasible.map_or(obj, |f: f64| f.min(obj)));
            }
            // Next DoP vector with sum <= n, odometer style.
            let mut i = 0;
            loop {
                if i == dops.len() {
                    break;
                }
                dops[i] += 1;
                if dops.iter().sum::<u32>() as usize <= case.n {
                    break;
                }
                dops[i] = 1;
                i += 1;
            }
            if i == dops.len() {
                break;
            }
        }
    }
    (feasible, any)
}

// --------------------------------------------------------------- attention

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_range(-scale..scale)).collect())
        .collect()
}

/// softmax(q K^T / sqrt(d)) V in one pass over all keys.
pub fn dense_attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let scale = (q.len() as f64).sqrt();
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / scale)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (w, v) in weights.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w / total * x;
        }
    }
    out
}

/// Max-norm relative difference.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

// -------------------------------------------------------------------- pool

pub const C: u32 = 4;

/// Blocks drawn from a small alphabet so that prefixes are shared often.
pub fn random_sequence(r: &mut ChaCha8Rng, alphabet: u32) -> Vec<Token> {
    let segments = r.random_range(1..=6);
    let mut out = Vec::new();
    for _ in 0..segments {
        let block = r.random_range(0..alphabet);
        out.extend((0..C).map(|i| block * 16 + i));
    }
    if r.random_bool(0.3) {
        out.truncate(out.len() - r.random_range(1..C as usize));
    }
    out
}

/// A pool with random shared prefixes, each touched along its chain a random
/// number of times, so access counts never increase downward.
pub fn random_tree(seed: u64) -> PrefixPool {
    let mut r = rng(seed);
    let n = r.random_range(1..=8);
    let mut pool = PrefixPool::new(PoolConfig::new(n, C, 4096));
    let alphabet = r.random_range(2..=6);
    let mut now = 0;
    for _ in 0..r.random_range(1..=40) {
        let tokens = random_sequence(&mut r, alphabet);
        now += 1;
        pool.insert_prefix(&tokens, now).expect("ample capacity");
        let m = pool.match_prefix(&tokens);
        let depth = r.random_range(0..=m.chain.len());
        for _ in 0..r.random_range(0..5) {
            for &k in &m.chain[..depth] {
                pool.select_replica(k, now, &mut r).expect("cached");
            }
        }
    }
    pool
}

/// Top `budget` full segments by access count, ties by key, over every node.
pub fn full_scan_heavy(pool: &PrefixPool, budget: usize) -> Vec<SegmentKey> {
    let mut all: Vec<(u64, SegmentKey)> = pool
        .tree()
        .segments()
        .filter(|s| s.token_count == pool.segment_size())
        .map(|s| (s.access_count, s.key))
        .collect();
    all.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(budget).map(|(_, k)| k).collect()
}

// --------------------------------------------------------------------- sim

pub fn heavy_budget_bound(n: usize) -> u64 {
    (n as f64 * (n as f64).ln()).ceil() as u64
}

/// Ten thousand requests of the mixed preset, 8 instances, invariant checks on.
pub fn dedup_run_inputs() -> (SimConfig, Vec<TraceRecord>) {
    let mut spec = TraceSpec::new(Preset::Mixed, 1.0, 0.0, 8);
    spec.sessions = Some(4400);
    let mut trace = workload::generate(&spec).expect("valid spec");
    trace.truncate(10_000);
    let mut cfg = SimConfig::new(PolicyConfig::new(PolicyKind::Pooled), PoolConfig::new(8, 640, 2048));
    cfg.content = spec.content();
    cfg.seed = 8;
    cfg.check_invariants = true;
    (cfg, trace)
}
