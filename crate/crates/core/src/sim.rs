//! Iteration-stepped cluster simulation.
//!
//! Each step is one cluster-wide scheduling round: admit released requests,
//! schedule one chunk of prefill or one decode token per scheduled request,
//! charge compute and communication per instance, and advance the clock by
//! the slowest instance. The pooled policy runs the scheduler and dispatcher
//! over one shared prefix pool; the baselines run every request at DoP 1 on
//! a single instance with a private cache per instance (or, for strict
//! locality, a shared pool that only spills when the local instance is full).

use crate::cost::{self, HardwareProfile, LatencyModel, RequestShape};
use crate::dispatch::{self, Batch, SegmentTouch, Touch};
use crate::metrics::{MetricsReport, RequestRecord};
use crate::pool::{ChainLink, Placement, PoolConfig, PoolError, PrefixPool, SegmentKey, TokenChain, Violation};
use crate::scheduler::{self, PendingRequest, Phase, PlanOptions, Slo};
use crate::workload::{ContentModel, TraceRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid trace: {0}")]
    Trace(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Pooled,
    CacheAwareRouter,
    PdDisagg,
    StrictLocality,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterWeights {
    /// Score per locally cached prefix token.
    pub w_hit: f64,
    /// Penalty per queued token.
    pub w_load: f64,
}

impl Default for RouterWeights {
    fn default() -> Self {
        Self {
            w_hit: 1.0,
            w_load: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdSplit {
    pub prefill: usize,
    pub decode: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default)]
    pub pd_split: Option<PdSplit>,
    #[serde(default)]
    pub router: RouterWeights,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            pd_split: None,
            router: RouterWeights::default(),
        }
    }

    pub fn pd(prefill: usize, decode: usize) -> Self {
        Self {
            kind: PolicyKind::PdDisagg,
            pd_split: Some(PdSplit { prefill, decode }),
            router: RouterWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub profile: HardwareProfile,
    pub policy: PolicyConfig,
    pub pool: PoolConfig,
    /// Prefill tokens per request per iteration.
    pub chunk_size: u64,
    /// SLO is this multiple of the batch-size-1 time.
    pub slo_multiplier: f64,
    pub max_active: usize,
    /// Fraction of cache slots that active requests may pin.
    pub pin_budget: f64,
    /// Iterations a request may stall on a failed KV insert before it is dropped.
    pub admission_retries: u32,
    pub decode_batch_cap: usize,
    /// Fixed per-batch overhead of the calibrated latency model, seconds.
    pub latency_overhead: f64,
    pub content: ContentModel,
    /// Width of the recorded access windows, seconds.
    pub access_window: f64,
    pub seed: u64,
    /// Run the pool's invariant check after every step.
    pub check_invariants: bool,
}

impl SimConfig {
    pub fn new(policy: PolicyConfig, pool: PoolConfig) -> Self {
        Self {
            profile: HardwareProfile::a100_llama7b(),
            policy,
            pool,
            chunk_size: 512,
            slo_multiplier: 10.0,
            max_active: 64,
            pin_budget: 0.5,
            admission_retries: 3,
            decode_batch_cap: scheduler::DEFAULT_DECODE_BATCH_CAP,
            latency_overhead: 1e-3,
            content: ContentModel::default(),
            access_window: 10.0,
            seed: 0,
            check_invariants: false,
        }
    }

    pub fn n_instances(&self) -> usize {
        self.pool.n_instances
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        self.profile.validate().map_err(|e| SimError::Config(e.to_string()))?;
        let n = self.pool.n_instances;
        if n == 0 {
            return bad("pool.n_instances must be >= 1".into());
        }
        if self.pool.segment_size == 0 {
            return bad("pool.segment_size must be >= 1".into());
        }
        if self.pool.slot_capacity == 0 {
            return bad("pool.slot_capacity must be >= 1".into());
        }
        if !(self.pool.overload_delta >= 0.0) {
            return bad("pool.overload_delta must be >= 0".into());
        }
        if !(self.pool.load_half_life > 0.0) {
            return bad("pool.load_half_life must be > 0".into());
        }
        if !(self.pool.heavy_hitter_factor >= 0.0) {
            return bad("pool.heavy_hitter_factor must be >= 0".into());
        }
        if self.chunk_size == 0 {
            return bad("scheduler.chunk_size must be >= 1".into());
        }
        if !(self.slo_multiplier > 0.0) {
            return bad("scheduler.slo_multiplier must be > 0".into());
        }
        if self.max_active == 0 || self.decode_batch_cap == 0 {
            return bad("scheduler.max_active and scheduler.decode_batch_cap must be >= 1".into());
        }
        if !(self.pin_budget > 0.0 && self.pin_budget <= 1.0) {
            return bad("scheduler.pin_budget must be in (0, 1]".into());
        }
        if !(self.access_window > 0.0) {
            return bad("metrics.cv_window must be > 0".into());
        }
        if !(self.latency_overhead >= 0.0) {
            return bad("hardware.latency_overhead must be >= 0".into());
        }
        if self.policy.kind == PolicyKind::PdDisagg {
            match self.policy.pd_split {
                Some(s) if s.prefill >= 1 && s.decode >= 1 && s.prefill + s.decode == n => {}
                Some(s) => {
                    return bad(format!(
                        "policy.pd_split {}:{} must have both parts >= 1 and sum to n_instances = {n}",
                        s.prefill, s.decode
                    ))
                }
                None => return bad("policy.pd_split is required for pd_disagg".into()),
            }
        }
        Ok(())
    }
}

/// Where a baseline runs a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Instance(usize),
    PrefillDecode { prefill: usize, decode: usize },
}

/// Cache-aware router choice: argmax of `w_hit * hit - w_load * queued`,
/// ties to the lowest index.
pub fn router_pick(weights: RouterWeights, hits: &[u64], queued: &[u64]) -> usize {
    router_ranking(weights, hits, queued)[0]
}

fn router_ranking(weights: RouterWeights, hits: &[u64], queued: &[u64]) -> Vec<usize> {
    let score = |i: usize| weights.w_hit * hits[i] as f64 - weights.w_load * queued[i] as f64;
    let mut idx: Vec<usize> = (0..hits.len()).collect();
    idx.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    idx
}

/// Bytes moved when handing a context of `context_tokens` to a decode instance.
pub fn pd_transfer_volume(profile: &HardwareProfile, context_tokens: u64) -> f64 {
    cost::kv_put_volume(profile, context_tokens) * profile.layers as f64
}

fn transfer_time(profile: &HardwareProfile, bytes: f64) -> f64 {
    if bytes <= 0.0 {
        0.0
    } else {
        profile.net_latency + bytes / profile.net_bandwidth
    }
}

/// Measurements of one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationLog {
    pub iteration: u64,
    /// Clock at the start of the step, seconds.
    pub start: f64,
    /// Cluster iteration latency: max busy time.
    pub latency: f64,
    pub busy: Vec<f64>,
    /// Non-overlapped communication, max(0, comm - self-attention), per instance.
    pub comm_exposed: Vec<f64>,
    pub accesses: Vec<u64>,
    pub comm_bytes: f64,
    pub admitted: Vec<u64>,
    pub completed: Vec<RequestRecord>,
    pub dropped: Vec<u64>,
    pub inserted_segments: u64,
    pub evictions: u64,
    pub replications: u64,
    pub recompute_tokens: u64,
    pub heavy_keys: usize,
    pub fallback_used: bool,
    /// Tokens of work performed per request this step.
    pub progress: Vec<(u64, u64)>,
    pub violations: Vec<Violation>,
}

impl IterationLog {
    fn new(iteration: u64, start: f64, n: usize) -> Self {
        Self {
            iteration,
            start,
            busy: vec![0.0; n],
            comm_exposed: vec![0.0; n],
            accesses: vec![0; n],
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Waiting,
    Prefill,
    Decode,
    Done,
}

#[derive(Debug, Clone)]
struct Req {
    session: usize,
    turn: usize,
    release: f64,
    stage: Stage,
    chain: Option<TokenChain>,
    prompt_len: u64,
    output_len: u64,
    processed: u64,
    generated: u64,
    /// Pinned full segments of the prompt, root first.
    full: Vec<SegmentKey>,
    /// Pinned partial segment matched at admission.
    partial: Option<SegmentKey>,
    /// Pool holding the pinned keys (0 for a shared pool).
    cache: usize,
    /// Instance running the request (baselines).
    exec: usize,
    stall: u32,
    reserved: usize,
    last_token: f64,
    record: RequestRecord,
}

impl Req {
    fn pinned(&self) -> impl Iterator<Item = SegmentKey> + '_ {
        self.full.iter().copied().chain(self.partial)
    }
}

enum Cluster {
    Shared(PrefixPool),
    PerInstance(Vec<PrefixPool>),
}

pub struct Simulator {
    cfg: SimConfig,
    model: LatencyModel,
    cluster: Cluster,
    sessions: Vec<Vec<TraceRecord>>,
    reqs: Vec<Req>,
    pending: BinaryHeap<Reverse<(u64, usize)>>,
    active: Vec<usize>,
    /// Work charged to an instance's next step (transfers, migrations).
    carry: Vec<f64>,
    clock: f64,
    iteration: u64,
    rng: ChaCha8Rng,
    report: MetricsReport,
    finished: usize,
}

impl Simulator {
    pub fn new(cfg: SimConfig, trace: &[TraceRecord]) -> Result<Self, SimError> {
        cfg.validate()?;
        let n = cfg.n_instances();
        let model = LatencyModel::calibrate(&cfg.profile, cfg.latency_overhead);

        let mut by_session: BTreeMap<u64, Vec<TraceRecord>> = BTreeMap::new();
        for r in trace {
            if !(r.arrival_time >= 0.0 && r.arrival_time.is_finite()) {
                return Err(SimError::Trace(format!(
                    "request {} has arrival_time {}",
                    r.request_id, r.arrival_time
                )));
            }
            if r.input_len == 0 {
                return Err(SimError::Trace(format!("request {} has input_len 0", r.request_id)));
            }
            by_session.entry(r.session_id).or_default().push(r.clone());
        }
        let mut sessions = Vec::with_capacity(by_session.len());
        let mut reqs = Vec::with_capacity(trace.len());
        let mut pending = BinaryHeap::new();
        for (_, mut recs) in by_session {
            recs.sort_by_key(|r| r.turn_index);
            if recs.windows(2).any(|w| w[0].turn_index == w[1].turn_index) {
                return Err(SimError::Trace(format!(
                    "session {} repeats a turn index",
                    recs[0].session_id
                )));
            }
            let s = sessions.len();
            for (t, r) in recs.iter().enumerate() {
                let idx = reqs.len();
                reqs.push(Req::new(s, t, r, &cfg, &model));
                if t == 0 {
                    reqs[idx].release = r.arrival_time;
                    pending.push(Reverse((r.arrival_time.to_bits(), idx)));
                }
            }
            sessions.push(recs);
        }
        let new_pool = |config: PoolConfig| {
            let mut p = PrefixPool::new(config);
            p.track_changes(cfg.check_invariants);
            p
        };
        let cluster = match cfg.policy.kind {
            PolicyKind::Pooled | PolicyKind::StrictLocality => Cluster::Shared(new_pool(cfg.pool.clone())),
            PolicyKind::CacheAwareRouter | PolicyKind::PdDisagg => {
                let single = PoolConfig {
                    n_instances: 1,
                    ..cfg.pool.clone()
                };
                Cluster::PerInstance((0..n).map(|_| new_pool(single.clone())).collect())
            }
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            report: MetricsReport::new(n, cfg.access_window),
            carry: vec![0.0; n],
            cfg,
            model,
            cluster,
            sessions,
            reqs,
            pending,
            active: Vec::new(),
            clock: 0.0,
            iteration: 0,
            finished: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.finished == self.reqs.len()
    }

    pub fn active_requests(&self) -> usize {
        self.active.len()
    }

    /// The shared pool, for pooled and strict-locality runs.
    pub fn shared_pool(&self) -> Option<&PrefixPool> {
        match &self.cluster {
            Cluster::Shared(p) => Some(p),
            Cluster::PerInstance(_) => None,
        }
    }

    /// Per-instance pools of the router and PD baselines.
    pub fn instance_pools(&self) -> &[PrefixPool] {
        match &self.cluster {
            Cluster::Shared(_) => &[],
            Cluster::PerInstance(p) => p,
        }
    }

    pub fn report(&self) -> &MetricsReport {
        &self.report
    }

    pub fn into_report(self) -> MetricsReport {
        self.report
    }

    fn n(&self) -> usize {
        self.cfg.n_instances()
    }

    fn pool_mut(&mut self, cache: usize) -> &mut PrefixPool {
        match &mut self.cluster {
            Cluster::Shared(p) => p,
            Cluster::PerInstance(p) => &mut p[cache],
        }
    }

    fn pool(&self, cache: usize) -> &PrefixPool {
        match &self.cluster {
            Cluster::Shared(p) => p,
            Cluster::PerInstance(p) => &p[cache],
        }
    }

    fn next_release(&self) -> Option<f64> {
        self.pending.peek().map(|Reverse((bits, _))| f64::from_bits(*bits))
    }

    fn segment_size(&self) -> u64 {
        self.cfg.pool.segment_size as u64
    }

    /// Remaining prefill and decode tokens of active requests per execution instance.
    fn queued_tokens(&self, decode_only: bool) -> Vec<u64> {
        let mut q = vec![0u64; self.n()];
        for &i in &self.active {
            let r = &self.reqs[i];
            let prefill = r.prompt_len - r.processed;
            let decode = r.output_len - r.generated;
            match r.stage {
                Stage::Prefill if !decode_only => q[r.exec] += prefill + decode,
                Stage::Decode => q[r.exec] += decode,
                _ => {}
            }
        }
        q
    }

    fn budget(&self) -> usize {
        let per = (self.cfg.pin_budget * self.cfg.pool.slot_capacity as f64).floor() as usize;
        match self.cluster {
            Cluster::Shared(_) => per * self.n(),
            Cluster::PerInstance(_) => per,
        }
    }

    fn reserved_on(&self, cache: usize) -> usize {
        self.active
            .iter()
            .map(|&i| &self.reqs[i])
            .filter(|r| matches!(self.cluster, Cluster::Shared(_)) || r.cache == cache)
            .map(|r| r.reserved)
            .sum()
    }

    /// Baseline placement of a waiting request under the current state.
    pub fn route_baseline(&self, request: usize) -> Route {
        let r = &self.reqs[request];
        let prompt = self.prompt_chain(r);
        match self.cfg.policy.kind {
            PolicyKind::CacheAwareRouter => {
                let hits = self.local_hits(&prompt, r.prompt_len);
                Route::Instance(router_pick(self.cfg.policy.router, &hits, &self.queued_tokens(false)))
            }
            PolicyKind::PdDisagg => {
                let split = self.cfg.policy.pd_split.expect("validated");
                let q = self.queued_tokens(false);
                let prefill = least_loaded(&q[..split.prefill], 0);
                let decode = least_loaded(&q[split.prefill..], split.prefill);
                Route::PrefillDecode { prefill, decode }
            }
            PolicyKind::StrictLocality => Route::Instance(self.strict_home(&prompt, r.prompt_len)),
            PolicyKind::Pooled => panic!("route_baseline called for the pooled policy"),
        }
    }

    fn local_hits(&self, chain: &TokenChain, len: u64) -> Vec<u64> {
        (0..self.n())
            .map(|i| self.pool(i).match_chain(chain, len as usize).hit_tokens)
            .collect()
    }

    fn strict_home(&self, chain: &TokenChain, len: u64) -> usize {
        let pool = self.pool(0);
        let m = pool.match_chain(chain, len as usize);
        match m.chain.last() {
            Some(&k) => pool.segment(k).expect("matched").replicas.first().expect("replica"),
            None => pool.home_instance(chain.key_at((self.segment_size() as usize).min(len as usize))),
        }
    }

    fn prompt_chain(&self, r: &Req) -> TokenChain {
        let tokens = self.cfg.content.prompt(&self.sessions[r.session], r.turn);
        TokenChain::new(tokens, self.cfg.pool.segment_size as usize)
    }

    /// One simulation step.
    pub fn step(&mut self) -> IterationLog {
        self.iteration += 1;
        let n = self.n();
        if self.active.is_empty() {
            match self.next_release() {
                Some(t) if t > self.clock => self.clock = t,
                Some(_) => {}
                None => return IterationLog::new(self.iteration, self.clock, n),
            }
        }
        let mut log = IterationLog::new(self.iteration, self.clock, n);
        self.admit(&mut log);
        self.retry_stalled(&mut log);
        let progress = match self.cfg.policy.kind {
            PolicyKind::Pooled => self.exec_pooled(&mut log),
            _ => self.exec_local(&mut log),
        };
        for (i, c) in self.carry.iter_mut().enumerate() {
            log.busy[i] += *c;
            *c = 0.0;
        }
        log.latency = log.busy.iter().copied().fold(0.0, f64::max);
        self.clock += log.latency;
        for (req, tokens) in progress {
            log.progress.push((self.reqs[req].record.request_id, tokens));
            self.apply_progress(req, tokens, &mut log);
        }
        if let (PolicyKind::Pooled, Cluster::Shared(pool)) = (self.cfg.policy.kind, &mut self.cluster) {
            let rb = pool.rebalance(self.iteration);
            log.replications += rb.actions.len() as u64;
            log.evictions += rb.evicted.len() as u64;
            log.heavy_keys = rb.heavy_keys;
        }
        if self.cfg.check_invariants {
            log.violations = match &mut self.cluster {
                Cluster::Shared(p) => p.check_changed(),
                Cluster::PerInstance(ps) => ps.iter_mut().flat_map(PrefixPool::check_changed).collect(),
            };
        }
        self.absorb(&log);
        log
    }

    fn absorb(&mut self, log: &IterationLog) {
        self.report.record_access(log.start, &log.accesses);
        let t = &mut self.report.totals;
        t.iterations += 1;
        t.comm_bytes += log.comm_bytes;
        t.recompute_tokens += log.recompute_tokens;
        t.evictions += log.evictions;
        t.replications += log.replications;
        t.drops += log.dropped.len() as u64;
        t.invariant_violations += log.violations.len() as u64;
        t.max_heavy_keys = t.max_heavy_keys.max(log.heavy_keys as u64);
        t.makespan = self.clock;
        self.report.requests.extend(log.completed.iter().cloned());
    }

    fn admit(&mut self, log: &mut IterationLog) {
        let budget = self.budget();
        while self.active.len() < self.cfg.max_active {
            let Some(&Reverse((bits, idx))) = self.pending.peek() else {
                break;
            };
            if f64::from_bits(bits) > self.clock {
                break;
            }
            if self.reqs[idx].chain.is_none() {
                let chain = self.prompt_chain(&self.reqs[idx]);
                self.reqs[idx].chain = Some(chain);
            }
            let chain = self.reqs[idx].chain.take().expect("just built");
            let (prompt_len, output_len) = (self.reqs[idx].prompt_len, self.reqs[idx].output_len);
            let reserved = (prompt_len + output_len).div_ceil(self.segment_size()) as usize;
            if reserved > budget {
                // Dropped prompts still count as cacheable, with zero hits.
                self.report.totals.cacheable_tokens += prompt_len;
                self.pending.pop();
                self.drop_request(idx, log);
                continue;
            }
            let kind = self.cfg.policy.kind;
            let target = match kind {
                PolicyKind::Pooled | PolicyKind::StrictLocality => {
                    (self.reserved_on(0) + reserved <= budget).then_some((0, 0))
                }
                PolicyKind::CacheAwareRouter => {
                    let hits = self.local_hits(&chain, prompt_len);
                    let ranking = router_ranking(self.cfg.policy.router, &hits, &self.queued_tokens(false));
                    ranking
                        .into_iter()
                        .find(|&i| self.reserved_on(i) + reserved <= budget)
                        .map(|i| (i, i))
                }
                PolicyKind::PdDisagg => {
                    let p = self.cfg.policy.pd_split.expect("validated").prefill;
                    let q = self.queued_tokens(false);
                    let mut order: Vec<usize> = (0..p).collect();
                    order.sort_by_key(|&i| (q[i], i));
                    order
                        .into_iter()
                        .find(|&i| self.reserved_on(i) + reserved <= budget)
                        .map(|i| (i, i))
                }
            };
            let Some((cache, mut exec)) = target else {
                self.reqs[idx].chain = Some(chain);
                break;
            };
            self.pending.pop();
            if kind == PolicyKind::StrictLocality {
                exec = self.strict_home(&chain, prompt_len);
            }
            let m = self.pool(cache).match_chain(&chain, prompt_len as usize);
            let c = self.segment_size();
            let now = self.iteration;
            let mut migrate = 0.0;
            let profile = self.cfg.profile;
            {
                let pool = self.pool_mut(cache);
                for &k in &m.chain {
                    pool.pin(k);
                }
                if kind == PolicyKind::StrictLocality {
                    // Locality requires the matched KV on the executing instance.
                    for &k in &m.chain {
                        let seg = pool.segment(k).expect("matched");
                        let holder = seg.replicas.first().expect("replica");
                        let tokens = seg.token_count as u64;
                        if holder != exec {
                            migrate += pd_transfer_volume(&profile, tokens);
                        }
                        pool.touch_on(k, holder, now).expect("matched replica");
                    }
                }
            }
            if migrate > 0.0 {
                self.carry[exec] += transfer_time(&self.cfg.profile, migrate);
                log.comm_bytes += migrate;
            }
            let r = &mut self.reqs[idx];
            r.stage = Stage::Prefill;
            r.cache = cache;
            r.exec = exec;
            r.reserved = reserved;
            r.record.hit_tokens = m.hit_tokens;
            r.processed = m.hit_tokens.min(prompt_len - 1);
            let n_full = (m.hit_tokens / c) as usize;
            r.full = m.chain[..n_full].to_vec();
            r.partial = m.chain.get(n_full).copied();
            r.chain = Some(chain);
            self.report.totals.hit_tokens += m.hit_tokens;
            self.report.totals.cacheable_tokens += prompt_len;
            log.admitted.push(r.record.request_id);
            self.active.push(idx);
        }
    }

    fn retry_stalled(&mut self, log: &mut IterationLog) {
        let stalled: Vec<usize> = self
            .active
            .iter()
            .copied()
            .filter(|&i| self.reqs[i].stall > 0)
            .collect();
        for i in stalled {
            if self.store_prefill(i, log) {
                self.reqs[i].stall = 0;
                if self.reqs[i].processed == self.reqs[i].prompt_len {
                    self.finish_prefill(i, log);
                }
            } else {
                self.reqs[i].stall += 1;
                if self.reqs[i].stall > self.cfg.admission_retries {
                    self.drop_request(i, log);
                }
            }
        }
    }

    fn runnable(&self) -> Vec<usize> {
        self.active
            .iter()
            .copied()
            .filter(|&i| self.reqs[i].stall == 0 && matches!(self.reqs[i].stage, Stage::Prefill | Stage::Decode))
            .collect()
    }

    fn pending_work(&self, i: usize) -> PendingRequest {
        let r = &self.reqs[i];
        let decode = r.stage == Stage::Decode;
        PendingRequest {
            request_id: i as u64,
            session_id: r.record.session_id,
            phase: if decode { Phase::Decode } else { Phase::Prefill },
            processed: if decode {
                r.prompt_len + r.generated
            } else {
                r.processed
            },
            pending: if decode { 1 } else { r.prompt_len - r.processed },
            slo_tbt: 0.0,
        }
    }

    fn bs1_time(&self, shape: RequestShape) -> f64 {
        cost::estimate_batch_latency(&[shape], 1, 0.0, &self.model).expect("valid shape")
    }

    fn exec_pooled(&mut self, log: &mut IterationLog) -> Vec<(usize, u64)> {
        let runnable = self.runnable();
        if runnable.is_empty() {
            return Vec::new();
        }
        let n = self.n();
        let c = self.segment_size();
        let pending: Vec<PendingRequest> = runnable.iter().map(|&i| self.pending_work(i)).collect();
        let mut work = scheduler::chunk_prefill(&pending, self.cfg.chunk_size);
        for w in &mut work {
            w.slo_tbt = self.cfg.slo_multiplier * self.bs1_time(w.shape());
        }
        let shapes: Vec<RequestShape> = work.iter().map(|w| w.shape()).collect();
        let load = scheduler::consume_cache_load(&shapes, n as u32, &self.cfg.profile, &self.model)
            .expect("non-empty work has positive ideal time");
        let options = PlanOptions {
            decode_batch_cap: self.cfg.decode_batch_cap,
        };
        let decision = scheduler::plan_with(&work, n, load, &self.model, Slo::PerRequest, options)
            .expect("planning inputs are valid");
        log.fallback_used = decision.fallback_used;
        let by_id: BTreeMap<u64, &scheduler::PhaseRequest> = work.iter().map(|w| (w.request_id, w)).collect();

        let now = self.iteration;
        let mut batches = Vec::with_capacity(decision.batches.len());
        let mut progress = Vec::new();
        for (b, sb) in decision.batches.iter().enumerate() {
            let mut touches: Vec<SegmentTouch> = Vec::new();
            let Cluster::Shared(pool) = &mut self.cluster else {
                unreachable!()
            };
            for &rid in &sb.request_ids {
                let i = rid as usize;
                let w = by_id[&rid];
                progress.push((i, w.input_len));
                let r = &self.reqs[i];
                for k in r.pinned() {
                    let choice = pool
                        .select_replica(k, now, &mut self.rng)
                        .expect("pinned segment is cached");
                    log.accesses[choice.instance] += 1;
                    let touch = Touch::Query(choice.instance);
                    let tokens = choice.token_count as u64;
                    // A single node holds the whole batch, so adjacent queries to
                    // one instance are interchangeable with their merge.
                    match touches.last_mut() {
                        Some(last) if sb.dop == 1 && last.touch == touch => last.tokens += tokens,
                        _ => touches.push(SegmentTouch { tokens, touch }),
                    }
                }
                if w.phase == Phase::Prefill {
                    let chain = r.chain.as_ref().expect("active request has a chain");
                    let first = r.full.len() as u64;
                    let last = (r.processed + w.input_len) / c;
                    for d in first..last {
                        let key = chain.key_at(((d + 1) * c) as usize);
                        if !pool.tree().contains(key) {
                            touches.push(SegmentTouch {
                                tokens: c,
                                touch: Touch::Put(pool.home_instance(key)),
                            });
                        }
                    }
                }
            }
            batches.push(Batch {
                batch_id: b,
                request_ids: sb.request_ids.clone(),
                touches,
            });
        }

        let mut nodes = Vec::new();
        for (batch, sb) in batches.iter().zip(&decision.batches) {
            nodes.extend(dispatch::decompose(batch, sb.dop, n).expect("plan respects instance count"));
        }
        let plan = dispatch::assign(&nodes, n, &self.cfg.profile).expect("plan respects instance count");
        let p = &self.cfg.profile;
        for (node, &j) in nodes.iter().zip(&plan.assignment) {
            let sb = &decision.batches[node.batch_id];
            let shapes: Vec<RequestShape> = sb.request_ids.iter().map(|id| by_id[id].shape()).collect();
            let tokens: u64 = shapes.iter().map(|s| s.input_len).sum();
            let share = tokens.div_ceil(sb.dop as u64);
            let remote_queries = node.query_set.iter().filter(|&&q| q != j).count() as u64;
            let remote_puts: u64 = node.put_map.iter().filter(|(&k, _)| k != j).map(|(_, &v)| v).sum();
            let per_layer = cost::query_comm_volume(p, share, remote_queries) + cost::kv_put_volume(p, remote_puts * c);
            let comm = if per_layer > 0.0 {
                p.layers as f64 * (2.0 * p.net_latency + per_layer / p.net_bandwidth)
            } else {
                0.0
            };
            let overlap = cost::self_attention_time(&shapes, sb.dop, load, &self.model);
            let exposed = (comm - overlap).max(0.0);
            log.busy[j] += sb.latency + exposed;
            log.comm_exposed[j] += exposed;
            log.comm_bytes += per_layer * p.layers as f64;
        }
        progress
    }

    fn exec_local(&mut self, log: &mut IterationLog) -> Vec<(usize, u64)> {
        let runnable = self.runnable();
        let mut per_instance: Vec<Vec<RequestShape>> = vec![Vec::new(); self.n()];
        let mut progress = Vec::with_capacity(runnable.len());
        let now = self.iteration;
        for i in runnable {
            let w = self.pending_work(i);
            let input = match w.phase {
                Phase::Prefill => w.pending.min(self.cfg.chunk_size),
                Phase::Decode => 1,
            };
            let r = &self.reqs[i];
            per_instance[r.exec].push(RequestShape::new(w.processed, input));
            progress.push((i, input));
            let (cache, keys): (usize, Vec<SegmentKey>) = (r.cache, r.pinned().collect());
            let shared = matches!(self.cluster, Cluster::Shared(_));
            let pool = self.pool_mut(cache);
            for k in keys {
                let holder = pool.segment(k).expect("pinned").replicas.first().expect("replica");
                pool.touch_on(k, holder, now).expect("pinned replica");
                log.accesses[if shared { holder } else { cache }] += 1;
            }
        }
        for (i, shapes) in per_instance.iter().enumerate() {
            if !shapes.is_empty() {
                log.busy[i] += cost::estimate_batch_latency(shapes, 1, 0.0, &self.model).expect("valid batch");
            }
        }
        progress
    }

    fn apply_progress(&mut self, i: usize, tokens: u64, log: &mut IterationLog) {
        match self.reqs[i].stage {
            Stage::Prefill => {
                self.reqs[i].processed += tokens;
                if !self.store_prefill(i, log) {
                    self.reqs[i].stall = 1;
                    return;
                }
                if self.reqs[i].processed == self.reqs[i].prompt_len {
                    self.finish_prefill(i, log);
                }
            }
            Stage::Decode => {
                let r = &mut self.reqs[i];
                r.generated += 1;
                r.record.tbt.push(self.clock - r.last_token);
                r.last_token = self.clock;
                if r.generated == r.output_len {
                    self.retire(i, log);
                }
            }
            Stage::Waiting | Stage::Done => unreachable!("only active requests progress"),
        }
    }

    fn placement(&self, r: &Req) -> Placement {
        match self.cfg.policy.kind {
            PolicyKind::StrictLocality => Placement::Local(r.exec),
            _ => Placement::Home,
        }
    }

    /// Store and pin the full prompt segments completed so far. False when
    /// the pool cannot take them.
    fn store_prefill(&mut self, i: usize, log: &mut IterationLog) -> bool {
        let r = &self.reqs[i];
        let chain = r.chain.as_ref().expect("active request has a chain");
        let c = self.cfg.pool.segment_size as usize;
        let links: Vec<ChainLink> = chain.links_from(r.full.len(), (r.processed as usize / c) * c);
        if links.is_empty() {
            return true;
        }
        let placement = self.placement(r);
        let cache = r.cache;
        let now = self.iteration;
        let result = self.pool_mut(cache).insert_links(&links, now, placement);
        let (stored, ok) = match result {
            Ok(out) => {
                log.inserted_segments += out.created.len() as u64;
                log.evictions += out.evicted.len() as u64;
                self.charge_spills(&out.spilled, i, log);
                (out.keys, true)
            }
            Err(PoolError::CapacityExhausted { stored, .. }) => (stored, false),
            Err(e) => panic!("prefill insert failed unexpectedly: {e}"),
        };
        let pool = self.pool_mut(cache);
        for &k in &stored {
            pool.pin(k);
        }
        let r = &mut self.reqs[i];
        r.full.extend(stored);
        if let Some(p) = r.partial {
            if (r.full.len() as u64) * (self.cfg.pool.segment_size as u64) >= r.record.hit_tokens {
                r.partial = None;
                self.pool_mut(cache).unpin(p);
            }
        }
        ok
    }

    fn finish_prefill(&mut self, i: usize, log: &mut IterationLog) {
        let clock = self.clock;
        {
            let r = &mut self.reqs[i];
            r.record.ttft = Some(clock - r.release);
            r.last_token = clock;
            r.stage = Stage::Decode;
        }
        if self.cfg.policy.kind == PolicyKind::PdDisagg {
            self.handoff(i, log);
        }
        if self.reqs[i].output_len == 0 {
            self.retire(i, log);
        }
    }

    /// Move a finished prefill to the least-loaded decode instance.
    fn handoff(&mut self, i: usize, log: &mut IterationLog) {
        let split = self.cfg.policy.pd_split.expect("validated");
        let q = self.queued_tokens(true);
        let d = least_loaded(&q[split.prefill..], split.prefill);
        let prompt = self.reqs[i].prompt_len;
        let bytes = pd_transfer_volume(&self.cfg.profile, prompt);
        self.carry[d] += transfer_time(&self.cfg.profile, bytes);
        log.comm_bytes += bytes;

        let old = self.reqs[i].cache;
        let keys: Vec<SegmentKey> = self.reqs[i].pinned().collect();
        for k in keys {
            self.pool_mut(old).unpin(k);
        }
        let links = self.reqs[i].chain.as_ref().expect("chain").links(prompt as usize);
        let now = self.iteration;
        let stored = match self.pool_mut(d).insert_links(&links, now, Placement::Home) {
            Ok(out) => {
                log.evictions += out.evicted.len() as u64;
                log.inserted_segments += out.created.len() as u64;
                out.keys
            }
            Err(_) => {
                // No room for the transferred KV: the decode side rebuilds it.
                self.carry[d] += self.bs1_time(RequestShape::new(0, prompt));
                log.recompute_tokens += prompt;
                Vec::new()
            }
        };
        for &k in &stored {
            self.pool_mut(d).pin(k);
        }
        let r = &mut self.reqs[i];
        r.partial = None;
        r.full = stored;
        r.cache = d;
        r.exec = d;
    }

    fn release_pins(&mut self, i: usize) {
        let cache = self.reqs[i].cache;
        let keys: Vec<SegmentKey> = self.reqs[i].pinned().collect();
        for k in keys {
            self.pool_mut(cache).unpin(k);
        }
        let r = &mut self.reqs[i];
        r.full.clear();
        r.partial = None;
    }

    fn retire(&mut self, i: usize, log: &mut IterationLog) {
        // Cache the whole conversation so far for later turns.
        let (session, turn, cache) = (self.reqs[i].session, self.reqs[i].turn, self.reqs[i].cache);
        let placement = self.placement(&self.reqs[i]);
        let mut chain = self.reqs[i].chain.take().expect("chain");
        chain.extend(&self.cfg.content.output_tokens(&self.sessions[session][turn]));
        let links = chain.links(chain.len());
        let now = self.iteration;
        // A full pool leaves the conversation uncached; the request still completes.
        if let Ok(out) = self.pool_mut(cache).insert_links(&links, now, placement) {
            log.inserted_segments += out.created.len() as u64;
            log.evictions += out.evicted.len() as u64;
            self.charge_spills(&out.spilled, i, log);
        }
        self.release_pins(i);
        self.reqs[i].stage = Stage::Done;
        self.finish(i, log);
    }

    fn drop_request(&mut self, i: usize, log: &mut IterationLog) {
        self.release_pins(i);
        let r = &mut self.reqs[i];
        r.chain = None;
        r.stage = Stage::Done;
        r.record.dropped = true;
        log.dropped.push(r.record.request_id);
        self.finish(i, log);
    }

    fn finish(&mut self, i: usize, log: &mut IterationLog) {
        self.active.retain(|&a| a != i);
        self.finished += 1;
        log.completed.push(self.reqs[i].record.clone());
        let (session, turn) = (self.reqs[i].session, self.reqs[i].turn);
        if let Some(next) = self.sessions[session].get(turn + 1) {
            let gap = (next.arrival_time - self.sessions[session][turn].arrival_time).max(0.0);
            let idx = i + 1;
            debug_assert_eq!(self.reqs[idx].session, session);
            let release = self.clock + gap;
            self.reqs[idx].release = release;
            self.pending.push(Reverse((release.to_bits(), idx)));
        }
    }

    fn charge_spills(&mut self, spilled: &[(SegmentKey, usize)], i: usize, log: &mut IterationLog) {
        if spilled.is_empty() {
            return;
        }
        let bytes = spilled.len() as f64 * pd_transfer_volume(&self.cfg.profile, self.segment_size());
        let exec = self.reqs[i].exec;
        self.carry[exec] += transfer_time(&self.cfg.profile, bytes);
        log.comm_bytes += bytes;
    }
}

impl Req {
    fn new(session: usize, turn: usize, r: &TraceRecord, cfg: &SimConfig, model: &LatencyModel) -> Self {
        let bs1 = |shape| cost::estimate_batch_latency(&[shape], 1, 0.0, model).expect("valid shape");
        let mut ttft_ref = 0.0;
        let mut done = 0;
        while done < r.input_len {
            let chunk = cfg.chunk_size.min(r.input_len - done);
            ttft_ref += bs1(RequestShape::new(done, chunk));
            done += chunk;
        }
        let tbt_ref = (0..r.output_len)
            .map(|k| bs1(RequestShape::new(r.input_len + k, 1)))
            .collect();
        Self {
            session,
            turn,
            release: f64::INFINITY,
            stage: Stage::Waiting,
            chain: None,
            prompt_len: r.input_len,
            output_len: r.output_len,
            processed: 0,
            generated: 0,
            full: Vec::new(),
            partial: None,
            cache: 0,
            exec: 0,
            stall: 0,
            reserved: 0,
            last_token: 0.0,
            record: RequestRecord {
                request_id: r.request_id,
                session_id: r.session_id,
                turn_index: r.turn_index,
                input_len: r.input_len,
                output_len: r.output_len,
                hit_tokens: 0,
                ttft: None,
                ttft_ref,
                tbt: Vec::new(),
                tbt_ref,
                dropped: false,
            },
        }
    }
}

fn least_loaded(queued: &[u64], offset: usize) -> usize {
    offset
        + (0..queued.len())
            .min_by_key(|&i| (queued[i], i))
            .expect("at least one instance")
}

/// Run a trace to completion.
pub fn run(cfg: &SimConfig, trace: &[TraceRecord]) -> Result<MetricsReport, SimError> {
    let mut sim = Simulator::new(cfg.clone(), trace)?;
    while !sim.is_finished() {
        sim.step();
    }
    Ok(sim.into_report())
}

/// Distinct segments needed to cache every prompt and output of `trace`.
pub fn unique_segment_footprint(trace: &[TraceRecord], content: &ContentModel, segment_size: u32) -> usize {
    let mut by_session: BTreeMap<u64, Vec<TraceRecord>> = BTreeMap::new();
    for r in trace {
        by_session.entry(r.session_id).or_default().push(r.clone());
    }
    let mut keys = std::collections::BTreeSet::new();
    for (_, mut recs) in by_session {
        recs.sort_by_key(|r| r.turn_index);
        for t in 0..recs.len() {
            let mut tokens = content.prompt(&recs, t);
            tokens.extend(content.output_tokens(&recs[t]));
            let chain = TokenChain::new(tokens, segment_size as usize);
            keys.extend(chain.links(chain.len()).into_iter().map(|l| l.key));
        }
    }
    keys.len()
}
