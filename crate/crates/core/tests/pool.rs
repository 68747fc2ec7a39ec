mod common;

use common::{full_scan_heavy, random_sequence, random_tree, rng, C};
use lakesim::pool::{fnv1a, heavy_hitter_budget, home_instance, PoolConfig, PrefixPool, SegmentKey, Token};
use proptest::prelude::*;
use rand::Rng;
use std::hash::Hasher;

fn seq(base: u32, len: usize) -> Vec<Token> {
    (0..len as u32).map(|i| base * 1000 + i).collect()
}

fn fnv_crate(tokens: &[Token]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    for t in tokens {
        h.write(&t.to_le_bytes());
    }
    h.finish()
}

fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51afd7ed558ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ceb9fe1a85ec53);
    k ^ (k >> 33)
}

#[test]
fn keys_agree_with_an_independent_fnv() {
    assert_eq!(fnv1a(&[]), fnv_crate(&[]));
    let mut r = rng(1);
    for _ in 0..1000 {
        let len = r.random_range(0..50);
        let tokens: Vec<Token> = (0..len).map(|_| r.random()).collect();
        assert_eq!(fnv1a(&tokens), fnv_crate(&tokens));
        let n = r.random_range(1..=16);
        let expect = ((fmix64(fnv_crate(&tokens)) as u128 * n as u128) >> 64) as usize;
        assert_eq!(home_instance(SegmentKey(fnv1a(&tokens)), n), expect);
    }
    // Chain keys hash every token from the root.
    let p = PrefixPool::new(PoolConfig::new(4, C, 64));
    let tokens = seq(3, 10);
    let chain = p.chain(&tokens);
    for end in [4, 8, 10] {
        assert_eq!(chain.key_at(end), SegmentKey(fnv_crate(&tokens[..end])));
    }
}

#[test]
fn home_instance_is_spread() {
    let n = 8;
    let mut counts = [0u32; 8];
    for i in 0..80_000u32 {
        counts[home_instance(SegmentKey(fnv1a(&[i])), n)] += 1;
    }
    assert!(counts.iter().all(|&c| (9_000..11_000).contains(&c)), "{counts:?}");
}

#[test]
fn diverging_sequences_share_their_first_segment() {
    let mut p = PrefixPool::new(PoolConfig::new(4, C, 64));
    let shared = seq(1, C as usize);
    let a = [shared.clone(), seq(2, C as usize)].concat();
    let b = [shared, seq(3, C as usize)].concat();
    p.insert_prefix(&a, 0).unwrap();
    p.insert_prefix(&b, 1).unwrap();
    assert_eq!(p.tree().len(), 3);
    assert_eq!(p.directory().total_used(), 3);
}

#[test]
fn partial_overlap_counts_whole_segments_only() {
    let c = C as usize;
    let mut p = PrefixPool::new(PoolConfig::new(2, C, 64));
    let cached = seq(1, 2 * c);
    p.insert_prefix(&cached, 0).unwrap();
    let mut probe = cached[..c + 3].to_vec();
    probe.extend(seq(9, 5));
    let m = p.match_prefix(&probe);
    assert_eq!(m.chain.len(), 1);
    assert_eq!(m.hit_tokens, C as u64);
}

#[test]
fn heavy_hitters_equal_full_scan_on_1000_trees() {
    let mut nonempty = 0;
    for seed in 0..1000 {
        let pool = random_tree(seed);
        let n = pool.n_instances();
        let budgets = [heavy_hitter_budget(n, 1.0), 1, 3, pool.tree().len(), usize::MAX / 2];
        for budget in budgets {
            let got = pool.find_heavy_hitters(budget);
            assert_eq!(got, full_scan_heavy(&pool, budget), "seed {seed} budget {budget}");
            nonempty += usize::from(!got.is_empty());
        }
    }
    assert!(nonempty > 2000);
}

#[test]
fn select_replica_returns_the_less_loaded_of_its_pair() {
    let mut p = PrefixPool::new(PoolConfig::new(4, C, 64));
    let key = p.insert_prefix(&seq(1, C as usize), 0).unwrap().keys[0];
    // Replicate onto every instance through repeated rebalancing.
    let mut now = 1;
    while p.segment(key).unwrap().replicas.len() < 4 {
        let home = p.segment(key).unwrap().replicas.first().unwrap();
        for i in 0..4 {
            let held = p.segment(key).unwrap().replicas.contains(i);
            p.directory_mut().set_access_load(i, if held { 100.0 } else { 1.0 });
        }
        p.directory_mut().set_access_load(home, 100.0);
        let mut r = rng(now);
        for _ in 0..3 {
            p.select_replica(key, now, &mut r).unwrap();
        }
        p.rebalance(now);
        now += 1;
        assert!(now < 50, "replication stalled");
    }
    let mut r = rng(99);
    for i in 0..10_000u64 {
        if i % 97 == 0 {
            for j in 0..4 {
                p.directory_mut().set_access_load(j, r.random_range(0.0..50.0));
            }
        }
        let before = p.directory().access_load().to_vec();
        let choice = p.select_replica(key, now + i, &mut r).unwrap();
        let other = choice.alternative.expect("several replicas");
        assert_ne!(choice.instance, other);
        assert!(before[choice.instance] <= before[other]);
        if before[choice.instance] == before[other] {
            assert!(choice.instance < other);
        }
    }
}

/// Sort unpinned leaf replicas by last access (then key) and take a prefix.
#[test]
fn eviction_follows_the_sorting_oracle() {
    for seed in 0..200 {
        let mut r = rng(seed);
        let cap = r.random_range(4..40);
        let mut p = PrefixPool::new(PoolConfig::new(1, C, cap));
        let mut keys = Vec::new();
        for (t, base) in (0..cap as u32).enumerate() {
            keys.push(p.insert_prefix(&seq(base + 1, C as usize), t as u64).unwrap().keys[0]);
        }
        let mut now = cap as u64;
        for _ in 0..r.random_range(0..3 * cap) {
            let k = keys[r.random_range(0..keys.len())];
            // Equal timestamps are allowed so the key tie-break matters.
            now += r.random_range(0..2);
            p.touch_on(k, 0, now).unwrap();
        }
        let pinned: Vec<SegmentKey> = keys.iter().copied().filter(|_| r.random_bool(0.3)).collect();
        for &k in &pinned {
            p.pin(k);
        }
        let mut oracle: Vec<(u64, SegmentKey)> = keys
            .iter()
            .filter(|k| !pinned.contains(k))
            .map(|&k| (p.segment(k).unwrap().replicas.last_access(0).unwrap(), k))
            .collect();
        oracle.sort();
        let demand = r.random_range(0..=oracle.len());
        let evicted = p.evict(0, demand).unwrap();
        let expect: Vec<(SegmentKey, usize)> = oracle[..demand].iter().map(|&(_, k)| (k, 0)).collect();
        assert_eq!(evicted, expect, "seed {seed}");
        assert!(p.check_invariants().is_empty());
        if demand < oracle.len() {
            assert!(p.evict(0, oracle.len() - demand + 1).is_err());
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Insert(u64),
    Touch(u64),
    Rebalance,
    Evict(usize, usize),
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        prop_oneof![
            4 => any::<u64>().prop_map(Op::Insert),
            4 => any::<u64>().prop_map(Op::Touch),
            1 => Just(Op::Rebalance),
            1 => (0usize..8, 0usize..4).prop_map(|(i, d)| Op::Evict(i, d)),
        ],
        1..120,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariants_hold_after_every_operation(n in 1usize..=6, cap in 3usize..20, ops in ops()) {
        let mut p = PrefixPool::new(PoolConfig::new(n, C, cap));
        let mut r = rng(n as u64 * 131 + cap as u64);
        for (now, op) in ops.into_iter().enumerate() {
            let now = now as u64;
            match op {
                Op::Insert(s) => {
                    let tokens = random_sequence(&mut rng(s), 5);
                    // Capacity failures are legitimate outcomes here.
                    let _ = p.insert_prefix(&tokens, now);
                }
                Op::Touch(s) => {
                    let tokens = random_sequence(&mut rng(s), 5);
                    for k in p.match_prefix(&tokens).chain {
                        p.select_replica(k, now, &mut r).unwrap();
                    }
                    p.decay_loads();
                }
                Op::Rebalance => {
                    let report = p.rebalance(now);
                    prop_assert!(report.heavy_keys <= heavy_hitter_budget(n, 1.0));
                }
                Op::Evict(i, d) => {
                    let _ = p.evict(i % n, d);
                }
            }
            let v = p.check_invariants();
            prop_assert!(v.is_empty(), "{:?}", v);
            for i in 0..n {
                prop_assert!(p.directory().used(i) <= cap);
            }
        }
    }

    #[test]
    fn hits_grow_with_the_probe(seed in any::<u64>(), cut in 0usize..30) {
        let mut p = PrefixPool::new(PoolConfig::new(3, C, 256));
        let mut r = rng(seed);
        for t in 0..10 {
            p.insert_prefix(&random_sequence(&mut r, 3), t).unwrap();
        }
        let b = random_sequence(&mut r, 3);
        let a = &b[..cut.min(b.len())];
        prop_assert!(p.match_prefix(a).hit_tokens <= p.match_prefix(&b).hit_tokens);
    }
}
