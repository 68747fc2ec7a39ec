mod common;

use lakesim::cost::{self, RequestShape};
use lakesim::metrics::{self, hit_rate};
use lakesim::pool::PoolConfig;
use lakesim::scheduler;
use lakesim::sim::{
    pd_transfer_volume, router_pick, run, PolicyConfig, PolicyKind, RouterWeights, SimConfig, Simulator,
};
use lakesim::workload::{self, ContentModel, Preset, TraceRecord, TraceSpec};
use std::collections::BTreeMap;

const C: u32 = 640;

fn record(id: u64, session: u64, turn: u32, at: f64, input: u64, output: u64) -> TraceRecord {
    TraceRecord {
        request_id: id,
        session_id: session,
        turn_index: turn,
        arrival_time: at,
        input_len: input,
        output_len: output,
        shared_prefix_id: None,
    }
}

fn config(kind: PolicyKind, n: usize, cap: usize) -> SimConfig {
    let policy = match kind {
        PolicyKind::PdDisagg => PolicyConfig::pd(n / 4, n - n / 4),
        k => PolicyConfig::new(k),
    };
    SimConfig::new(policy, PoolConfig::new(n, C, cap))
}

fn small_trace(preset: Preset, sessions: u64, seed: u64) -> (Vec<TraceRecord>, ContentModel) {
    let spec = TraceSpec {
        sessions: Some(sessions),
        loogle_mean_len: 6000.0,
        loogle_documents: 40,
        scbench_mean_len: 12_000.0,
        output_mean: 32.0,
        ..TraceSpec::new(preset, 2.0, 0.0, seed)
    };
    (workload::generate(&spec).unwrap(), spec.content())
}

#[test]
fn idle_step_costs_nothing() {
    let mut sim = Simulator::new(config(PolicyKind::Pooled, 4, 64), &[]).unwrap();
    assert!(sim.is_finished());
    let log = sim.step();
    assert_eq!(sim.iteration(), 1);
    assert_eq!(log.latency, 0.0);
    assert!(log.busy.iter().all(|&b| b == 0.0));
    assert_eq!(log.comm_bytes, 0.0);
    assert_eq!(sim.clock(), 0.0);
}

#[test]
fn empty_trace_gives_an_empty_report() {
    let report = run(&config(PolicyKind::Pooled, 4, 64), &[]).unwrap();
    assert!(report.requests.is_empty());
    assert_eq!(report.totals.iterations, 0);
    assert!(hit_rate(&report).is_err());
    assert!(metrics::slo_attainment(&report, 10.0).is_err());
}

#[test]
fn cold_prefill_of_one_segment_matches_hand_composition() {
    let mut cfg = config(PolicyKind::Pooled, 1, 16);
    cfg.chunk_size = C as u64;
    cfg.content = ContentModel {
        system_prompt_len: 0,
        question_len: 0,
    };
    let trace = [record(0, 0, 0, 0.0, C as u64, 3)];
    let mut sim = Simulator::new(cfg.clone(), &trace).unwrap();
    let log = sim.step();

    let shapes = [RequestShape::new(0, C as u64)];
    let load = scheduler::consume_cache_load(&shapes, 1, &cfg.profile, sim.model()).unwrap();
    let expect = cost::estimate_batch_latency(&shapes, 1, load, sim.model()).unwrap();
    assert_eq!(log.busy, vec![expect]);
    assert_eq!(log.latency, expect);
    assert_eq!(log.inserted_segments, 1);
    assert_eq!(log.comm_bytes, 0.0);
    assert_eq!(log.comm_exposed, vec![0.0]);
    assert_eq!(sim.shared_pool().unwrap().tree().len(), 1);
}

#[test]
fn decode_takes_exactly_output_len_steps() {
    for k in [0u64, 1, 5, 17] {
        let mut cfg = config(PolicyKind::Pooled, 2, 64);
        cfg.chunk_size = 4096;
        let trace = [record(0, 0, 0, 0.0, 1500, k)];
        let mut sim = Simulator::new(cfg, &trace).unwrap();
        let mut steps = 0;
        let mut done_at = None;
        while !sim.is_finished() {
            let log = sim.step();
            steps += 1;
            if !log.completed.is_empty() {
                done_at = Some(steps);
            }
        }
        let r = &sim.report().requests[0];
        assert_eq!(r.tbt.len() as u64, k);
        // One prefill step, then one step per generated token.
        assert_eq!(done_at, Some(1 + k as usize));
    }
}

#[test]
fn router_examples() {
    let w = RouterWeights::default();
    assert_eq!(router_pick(w, &[0, 0, 0], &[10, 0, 5]), 1);
    assert_eq!(router_pick(w, &[0, 0, 3 * C as u64], &[7, 7, 7]), 2);
    assert_eq!(router_pick(w, &[0, 0, 0], &[3, 3, 3]), 0);
}

#[test]
fn router_prefers_the_instance_holding_the_prefix() {
    let mut cfg = config(PolicyKind::CacheAwareRouter, 3, 64);
    cfg.content = ContentModel {
        system_prompt_len: 0,
        question_len: 0,
    };
    // Second turn repeats the first turn's prompt as its prefix.
    let trace = [
        record(0, 0, 0, 0.0, 3 * C as u64, 1),
        record(1, 0, 1, 0.0, 3 * C as u64 + 10, 1),
    ];
    let mut sim = Simulator::new(cfg, &trace).unwrap();
    let mut ran_on: BTreeMap<u64, usize> = BTreeMap::new();
    while !sim.is_finished() {
        let log = sim.step();
        // One request is active at a time, so the busy instance is its instance.
        for &(id, _) in &log.progress {
            ran_on
                .entry(id)
                .or_insert_with(|| log.busy.iter().position(|&b| b > 0.0).unwrap());
        }
    }
    let second = sim
        .report()
        .requests
        .iter()
        .find(|r| r.request_id == 1)
        .unwrap()
        .clone();
    // The full first prompt plus the cached output token.
    assert_eq!(second.hit_tokens, 3 * C as u64 + 1);
    assert_eq!(ran_on[&0], ran_on[&1]);
}

#[test]
fn pd_handoff_volume() {
    let p = lakesim::cost::HardwareProfile::a100_llama7b();
    assert_eq!(pd_transfer_volume(&p, 2048), (2048u64 * 16_384 * 32) as f64);
}

#[test]
fn runs_are_deterministic() {
    let (trace, content) = small_trace(Preset::Mixed, 30, 4);
    for kind in [
        PolicyKind::Pooled,
        PolicyKind::CacheAwareRouter,
        PolicyKind::PdDisagg,
        PolicyKind::StrictLocality,
    ] {
        let mut cfg = config(kind, 4, 256);
        cfg.content = content;
        cfg.seed = 11;
        let a = metrics::to_csv(&run(&cfg, &trace).unwrap(), 10.0, 10.0);
        let b = metrics::to_csv(&run(&cfg, &trace).unwrap(), 10.0, 10.0);
        assert_eq!(a, b, "{kind:?}");
    }
}

#[test]
fn every_request_is_retired_or_dropped_and_work_is_conserved() {
    let (trace, content) = small_trace(Preset::Mixed, 40, 5);
    for kind in [
        PolicyKind::Pooled,
        PolicyKind::CacheAwareRouter,
        PolicyKind::PdDisagg,
        PolicyKind::StrictLocality,
    ] {
        let mut cfg = config(kind, 4, 256);
        cfg.content = content;
        let mut sim = Simulator::new(cfg, &trace).unwrap();
        let mut work: BTreeMap<u64, u64> = BTreeMap::new();
        while !sim.is_finished() {
            let log = sim.step();
            assert!(log.busy.iter().all(|&b| b >= 0.0));
            assert!(log
                .comm_exposed
                .iter()
                .zip(&log.busy)
                .all(|(&e, &b)| e >= 0.0 && e <= b));
            for (id, tokens) in log.progress {
                *work.entry(id).or_default() += tokens;
            }
        }
        let report = sim.report();
        assert_eq!(report.requests.len(), trace.len(), "{kind:?}");
        assert!(report.totals.hit_tokens <= report.totals.cacheable_tokens);
        for r in report.requests.iter().filter(|r| !r.dropped) {
            let skipped = r.hit_tokens.min(r.input_len - 1);
            assert_eq!(
                work[&r.request_id],
                r.input_len - skipped + r.output_len,
                "{kind:?} {}",
                r.request_id
            );
            assert!(r.ttft.unwrap() >= 0.0);
        }
    }
}

#[test]
fn pooled_runs_keep_the_dedup_invariant_every_step() {
    let (trace, content) = small_trace(Preset::LoogleLike, 120, 6);
    let mut cfg = config(PolicyKind::Pooled, 8, 64);
    cfg.content = content;
    cfg.check_invariants = true;
    let mut sim = Simulator::new(cfg, &trace).unwrap();
    while !sim.is_finished() {
        let log = sim.step();
        assert!(log.violations.is_empty(), "{:?}", log.violations);
    }
    assert!(sim.shared_pool().unwrap().check_invariants().is_empty());
}

#[test]
fn pd_pools_hold_separate_copies() {
    let (trace, content) = small_trace(Preset::ScbenchLike, 20, 7);
    let mut cfg = config(PolicyKind::PdDisagg, 4, 512);
    cfg.content = content;
    let mut sim = Simulator::new(cfg, &trace).unwrap();
    while !sim.is_finished() {
        sim.step();
    }
    let pools = sim.instance_pools();
    assert_eq!(pools.len(), 4);
    for p in pools {
        assert_eq!(p.directory().total_used(), p.tree().len());
        assert!(p.check_invariants().is_empty());
    }
    // The transferred context is cached again on the decode side.
    let prefill: Vec<_> = pools[0].tree().segments().map(|s| s.key).collect();
    let duplicated = pools[1..]
        .iter()
        .flat_map(|p| p.tree().segments())
        .filter(|s| prefill.contains(&s.key))
        .count();
    assert!(duplicated > 0);
}

#[test]
fn halving_capacity_never_raises_hit_rate() {
    let (trace, content) = small_trace(Preset::LoogleLike, 200, 9);
    for kind in [PolicyKind::Pooled, PolicyKind::CacheAwareRouter] {
        let mut last = f64::INFINITY;
        for cap in [1024, 512, 256, 128, 64, 32, 16] {
            let mut cfg = config(kind, 4, cap);
            cfg.content = content;
            let rate = hit_rate(&run(&cfg, &trace).unwrap()).unwrap();
            assert!(rate <= last, "{kind:?} cap {cap}: {rate} > {last}");
            last = rate;
        }
    }
}

#[test]
fn pooled_balances_a_skewed_trace_better_than_the_router() {
    let (trace, content) = small_trace(Preset::LoogleLike, 200, 10);
    let cv = |kind| {
        let mut cfg = config(kind, 8, 1024);
        cfg.content = content;
        metrics::access_cv(&run(&cfg, &trace).unwrap(), 10.0).mean
    };
    assert!(cv(PolicyKind::Pooled) < cv(PolicyKind::CacheAwareRouter));
}

#[test]
fn invalid_configs_are_rejected_before_simulation() {
    let mut cfg = config(PolicyKind::PdDisagg, 4, 64);
    cfg.policy.pd_split = None;
    assert!(Simulator::new(cfg, &[]).is_err());
    let cfg = config(PolicyKind::Pooled, 0, 64);
    assert!(Simulator::new(cfg, &[]).is_err());
    let bad = [record(0, 0, 0, -1.0, 10, 1)];
    assert!(Simulator::new(config(PolicyKind::Pooled, 2, 64), &bad).is_err());
}
