//! Stateless per-iteration scheduling: chunked prefill, then a dynamic program
//! that batches prefill requests and assigns each batch a DoP under the SLO.
//!
//! Decode requests always run at DoP 1. They are packed into contiguous,
//! balanced batches first and the DP runs over the instances that remain.

use crate::cost::{self, BatchFeatures, CostError, HardwareProfile, LatencyModel, RequestShape};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

/// A request's work for one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRequest {
    pub request_id: u64,
    pub session_id: u64,
    pub phase: Phase,
    /// Cached prefix plus this iteration's input.
    pub context_len: u64,
    /// Tokens processed this iteration; 1 for decode.
    pub input_len: u64,
    /// Latency budget of the batch carrying this request, in seconds.
    pub slo_tbt: f64,
}

impl PhaseRequest {
    pub fn shape(&self) -> RequestShape {
        RequestShape {
            prefix_len: self.context_len - self.input_len,
            input_len: self.input_len,
        }
    }
}

/// A request with its outstanding work before chunking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingRequest {
    pub request_id: u64,
    pub session_id: u64,
    pub phase: Phase,
    /// Tokens whose KV already exists.
    pub processed: u64,
    /// Input tokens still to process (ignored for decode).
    pub pending: u64,
    pub slo_tbt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledBatch {
    pub request_ids: Vec<u64>,
    pub dop: u32,
    pub phase: Phase,
    /// Estimated latency at the planning load.
    pub latency: f64,
    /// Strictest member SLO.
    pub slo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub batches: Vec<ScheduledBatch>,
    /// Sum over batches of size times latency, folded in batch order.
    pub objective: f64,
    pub fallback_used: bool,
    /// Prefill requests left for a later iteration because no instance was free.
    pub deferred: Vec<u64>,
}

impl ScheduleDecision {
    pub fn total_dop(&self) -> u32 {
        self.batches.iter().map(|b| b.dop).sum()
    }
}

/// SLO applied during planning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slo {
    /// Each request's own `slo_tbt`.
    PerRequest,
    /// One budget for every request; `f64::INFINITY` disables the constraint.
    Uniform(f64),
}

/// Clip prefill work to at most `chunk_size` tokens; decode work is one token.
pub fn chunk_prefill(requests: &[PendingRequest], chunk_size: u64) -> Vec<PhaseRequest> {
    assert!(chunk_size >= 1, "chunk_size must be >= 1");
    requests
        .iter()
        .map(|r| {
            let input_len = match r.phase {
                Phase::Prefill => r.pending.min(chunk_size),
                Phase::Decode => 1,
            };
            PhaseRequest {
                request_id: r.request_id,
                session_id: r.session_id,
                phase: r.phase,
                context_len: r.processed + input_len,
                input_len,
                slo_tbt: r.slo_tbt,
            }
        })
        .collect()
}

/// Maximum decode requests per decode batch before another instance is used.
pub const DEFAULT_DECODE_BATCH_CAP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOptions {
    pub decode_batch_cap: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            decode_batch_cap: DEFAULT_DECODE_BATCH_CAP,
        }
    }
}

pub fn plan(
    requests: &[PhaseRequest],
    n: usize,
    load: f64,
    model: &LatencyModel,
    slo: Slo,
) -> Result<ScheduleDecision, ScheduleError> {
    plan_with(requests, n, load, model, slo, PlanOptions::default())
}

pub fn plan_with(
    requests: &[PhaseRequest],
    n: usize,
    load: f64,
    model: &LatencyModel,
    slo: Slo,
    options: PlanOptions,
) -> Result<ScheduleDecision, ScheduleError> {
    if n == 0 {
        return Err(ScheduleError::InvalidInput("n must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&load) {
        return Err(ScheduleError::Cost(CostError::InfeasibleLoad(load)));
    }
    if let Some(r) = requests.iter().find(|r| r.phase == Phase::Decode && r.input_len != 1) {
        return Err(ScheduleError::InvalidInput(format!(
            "decode request {} has input_len {}",
            r.request_id, r.input_len
        )));
    }
    let slo_of = |r: &PhaseRequest| match slo {
        Slo::PerRequest => r.slo_tbt,
        Slo::Uniform(s) => s,
    };

    let mut sorted: Vec<&PhaseRequest> = requests.iter().collect();
    sorted.sort_by_key(|r| (r.context_len, r.request_id));
    let (prefill, decode): (Vec<&PhaseRequest>, Vec<&PhaseRequest>) =
        sorted.into_iter().partition(|r| r.phase == Phase::Prefill);

    let mut batches = Vec::new();
    let mut fallback_used = false;
    let mut objective = 0.0;

    let mut free = n;
    if !decode.is_empty() {
        let reserve = usize::from(!prefill.is_empty() && n > 1);
        let (packed, ok) = pack_decode(&decode, n - reserve, load, model, &slo_of, options.decode_batch_cap)?;
        fallback_used |= !ok;
        free -= packed.len();
        for b in &packed {
            objective += b.request_ids.len() as f64 * b.latency;
        }
        batches.extend(packed);
    }

    let mut deferred = Vec::new();
    if !prefill.is_empty() {
        if free == 0 {
            deferred = prefill.iter().map(|r| r.request_id).collect();
        } else {
            let shapes: Vec<RequestShape> = prefill.iter().map(|r| r.shape()).collect();
            let slos: Vec<f64> = prefill.iter().map(|r| slo_of(r)).collect();
            let (groups, obj, ok) = match prefill_dp(&shapes, Some(&slos), free, load, model)? {
                Some((g, o)) => (g, o, true),
                None => {
                    let (g, o) =
                        prefill_dp(&shapes, None, free, load, model)?.expect("an unconstrained plan always exists");
                    (g, o, false)
                }
            };
            fallback_used |= !ok;
            objective = if batches.is_empty() { obj } else { objective + obj };
            for (range, dop) in groups {
                let members = &prefill[range.clone()];
                let latency = cost::estimate_batch_latency(&shapes[range.clone()], dop, load, model)?;
                batches.push(ScheduledBatch {
                    request_ids: members.iter().map(|r| r.request_id).collect(),
                    dop,
                    phase: Phase::Prefill,
                    latency,
                    slo: slos[range].iter().copied().fold(f64::INFINITY, f64::min),
                });
            }
        }
    }

    Ok(ScheduleDecision {
        batches,
        objective,
        fallback_used,
        deferred,
    })
}

/// Contiguous balanced decode batches on at most `max_instances` instances.
/// Uses the fewest batches (at least `ceil(len / cap)`) meeting every batch's
/// SLO; the flag is false when even `max_instances` batches miss it.
fn pack_decode(
    decode: &[&PhaseRequest],
    max_instances: usize,
    load: f64,
    model: &LatencyModel,
    slo_of: &dyn Fn(&PhaseRequest) -> f64,
    cap: usize,
) -> Result<(Vec<ScheduledBatch>, bool), ScheduleError> {
    let max_batches = max_instances.min(decode.len()).max(1);
    let min_batches = decode.len().div_ceil(cap.max(1)).clamp(1, max_batches);
    let mut last = Vec::new();
    for count in min_batches..=max_batches {
        let batches = split_balanced(decode, count, load, model, slo_of)?;
        let ok = batches.iter().all(|b| b.latency <= b.slo);
        if ok {
            return Ok((batches, true));
        }
        last = batches;
    }
    Ok((last, false))
}

fn split_balanced(
    decode: &[&PhaseRequest],
    count: usize,
    load: f64,
    model: &LatencyModel,
    slo_of: &dyn Fn(&PhaseRequest) -> f64,
) -> Result<Vec<ScheduledBatch>, ScheduleError> {
    // Greedy fill: close a batch once its work reaches an equal share of the
    // remaining work over the remaining batches.
    let work: Vec<f64> = decode.iter().map(|r| model.raw(&[r.shape()])).collect();
    let mut remaining: f64 = work.iter().sum();
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for b in 0..count {
        let left = count - b;
        let must_leave = left - 1;
        let share = remaining / left as f64;
        let mut end = start;
        let mut acc = 0.0;
        while end < decode.len() - must_leave && (end == start || acc < share || left == 1) {
            acc += work[end];
            end += 1;
        }
        remaining -= acc;
        let members = &decode[start..end];
        let shapes: Vec<RequestShape> = members.iter().map(|r| r.shape()).collect();
        out.push(ScheduledBatch {
            request_ids: members.iter().map(|r| r.request_id).collect(),
            dop: 1,
            phase: Phase::Decode,
            latency: cost::estimate_batch_latency(&shapes, 1, load, model)?,
            slo: members.iter().map(|r| slo_of(r)).fold(f64::INFINITY, f64::min),
        });
        start = end;
    }
    debug_assert_eq!(start, decode.len());
    Ok(out)
}

type Groups = Vec<(std::ops::Range<usize>, u32)>;

#[derive(Clone, Copy)]
struct Cell {
    objective: f64,
    batches: u32,
    from: (usize, usize),
}

/// f(i, k): best fold of the first `i` sorted requests on exactly `k`
/// instances. Returns `None` when the SLO admits no plan.
fn prefill_dp(
    shapes: &[RequestShape],
    slos: Option<&[f64]>,
    n: usize,
    load: f64,
    model: &LatencyModel,
) -> Result<Option<(Groups, f64)>, ScheduleError> {
    let m = shapes.len();
    // latency[j][i - j - 1][dop - 1] for batch j..i.
    let mut latency = vec![Vec::new(); m];
    let mut tightest = vec![Vec::new(); m];
    for j in 0..m {
        let mut feats = BatchFeatures::default();
        let mut slo = f64::INFINITY;
        for i in j + 1..=m {
            feats.add(&shapes[i - 1]);
            if let Some(s) = slos {
                slo = slo.min(s[i - 1]);
            }
            let row: Vec<f64> = (1..=n as u32)
                .map(|d| cost::estimate_features_latency(&feats, d, load, model))
                .collect::<Result<_, _>>()?;
            latency[j].push(row);
            tightest[j].push(slo);
        }
    }

    let mut f: Vec<Vec<Option<Cell>>> = vec![vec![None; n + 1]; m + 1];
    f[0][0] = Some(Cell {
        objective: 0.0,
        batches: 0,
        from: (0, 0),
    });
    for i in 1..=m {
        for k in 1..=n {
            let mut best: Option<Cell> = None;
            for j in 0..i {
                let size = (i - j) as f64;
                for l in 0..k {
                    let Some(prev) = f[j][l] else { continue };
                    let t = latency[j][i - j - 1][k - l - 1];
                    if slos.is_some() && t > tightest[j][i - j - 1] {
                        continue;
                    }
                    let cand = Cell {
                        objective: prev.objective + size * t,
                        batches: prev.batches + 1,
                        from: (j, l),
                    };
                    let better = match best {
                        None => true,
                        Some(b) => (cand.objective, cand.batches) < (b.objective, b.batches),
                    };
                    if better {
                        best = Some(cand);
                    }
                }
            }
            f[i][k] = best;
        }
    }

    let mut end: Option<(usize, Cell)> = None;
    for k in 1..=n {
        if let Some(c) = f[m][k] {
            let better = match end {
                None => true,
                Some((_, b)) => (c.objective, c.batches) < (b.objective, b.batches),
            };
            if better {
                end = Some((k, c));
            }
        }
    }
    let Some((mut k, cell)) = end else { return Ok(None) };
    let mut groups = Vec::new();
    let mut i = m;
    while i > 0 {
        let c = f[i][k].expect("backtrack follows filled cells");
        let (j, l) = c.from;
        groups.push((j..i, (k - l) as u32));
        i = j;
        k = l;
    }
    groups.reverse();
    Ok(Some((groups, cell.objective)))
}

/// Pool load seen by `reqs` when spread ideally over `n` instances.
pub fn consume_cache_load(
    reqs: &[RequestShape],
    n: u32,
    profile: &HardwareProfile,
    model: &LatencyModel,
) -> Result<f64, CostError> {
    let ideal = cost::ideal_time(reqs, n, model)?;
    cost::cache_load(reqs, n, profile, ideal)
}
