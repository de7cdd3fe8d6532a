use std::collections::{HashSet, VecDeque};

use call_demo::{group_batch, load_timelines, policy_hits, random_sizes, GroupParams, LoadParams, PolicyParams, StreamParams};

fn jaccard(a: &[u32], b: &[u32]) -> f64 {
    let a: HashSet<_> = a.iter().collect();
    let b: HashSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

#[test]
fn grouping_view_is_consistent() {
    let p = GroupParams::default();
    let v = group_batch(&p).unwrap();
    assert_eq!(v.sets.len(), p.queries);
    for i in 0..p.queries {
        for j in 0..p.queries {
            assert!((v.matrix[i][j] - jaccard(&v.sets[i], &v.sets[j])).abs() < 1e-12);
        }
    }
    let mut order: Vec<u64> = v.groups.iter().flat_map(|g| g.members.clone()).collect();
    assert_eq!(order, v.order);
    order.sort_unstable();
    assert_eq!(order, (0..p.queries as u64).collect::<Vec<_>>());
    for g in &v.groups {
        for a in &g.members {
            for b in &g.members {
                assert!(v.matrix[*a as usize][*b as usize] >= p.theta);
            }
        }
    }
    for w in v.groups.windows(2) {
        assert_eq!(w[0].prefetch, v.sets[w[1].members[0] as usize]);
    }
    assert!(v.groups.last().unwrap().prefetch.is_empty());
    assert!(v.groups.len() < p.queries);
    assert!(v.mean_adjacent_execution > v.mean_adjacent_arrival);
}

#[test]
fn theta_one_keeps_only_identical_sets_together() {
    let v = group_batch(&GroupParams { theta: 1.0, ..GroupParams::default() }).unwrap();
    for g in &v.groups {
        let head = &v.sets[g.members[0] as usize];
        let mut head = head.clone();
        head.sort_unstable();
        for m in &g.members {
            let mut s = v.sets[*m as usize].clone();
            s.sort_unstable();
            assert_eq!(s, head);
        }
    }
}

#[test]
fn load_timelines_reproduce_the_worked_example() {
    // 1000 MB/s and no overhead makes one MB cost one ms
    let v = load_timelines(&LoadParams {
        sizes_mb: vec![3.0, 10.0, 4.0, 9.0, 5.0, 8.0, 6.0, 7.0],
        threads: 2,
        throughput_mb: 1000.0,
        overhead_ms: 0.0,
    })
    .unwrap();
    assert!((v.greedy.makespan_ms - 28.0).abs() < 1e-9);
    assert!((v.round_robin.makespan_ms - 34.0).abs() < 1e-9);
    let first: Vec<u32> = v.greedy.workers[0].iter().map(|t| t.cluster).collect();
    assert_eq!(first, [1, 5, 6, 2]);
    for w in &v.greedy.workers {
        for pair in w.windows(2) {
            assert_eq!(pair[0].end_ms, pair[1].start_ms);
        }
    }
}

#[test]
fn load_timelines_reject_bad_input() {
    let bad = LoadParams { sizes_mb: vec![1.0, -2.0], ..LoadParams::default() };
    assert!(load_timelines(&bad).is_err());
    let bad = LoadParams { threads: 0, ..LoadParams::default() };
    assert!(load_timelines(&bad).is_err());
}

#[test]
fn random_sizes_are_seeded_and_positive() {
    let a = random_sizes(50, 7);
    assert_eq!(a, random_sizes(50, 7));
    assert_ne!(a, random_sizes(50, 8));
    assert!(a.iter().all(|s| *s >= 0.1));
}

fn oracle(sets: &[Vec<u32>], capacity: usize, refresh_on_hit: bool) -> f64 {
    let mut resident: VecDeque<u32> = VecDeque::new();
    let (mut hits, mut total) = (0, 0);
    for set in sets {
        let mut missing = Vec::new();
        for id in set {
            total += 1;
            if let Some(pos) = resident.iter().position(|r| r == id) {
                hits += 1;
                if refresh_on_hit {
                    let id = resident.remove(pos).unwrap();
                    resident.push_back(id);
                }
            } else {
                missing.push(*id);
            }
        }
        for id in missing {
            // never evict what this query just touched
            while resident.len() >= capacity {
                let victim = resident.iter().position(|r| !set.contains(r)).unwrap();
                resident.remove(victim);
            }
            resident.push_back(id);
        }
    }
    hits as f64 / total as f64
}

#[test]
fn policy_series_match_queue_oracles() {
    let p = PolicyParams { queries: 600, ..PolicyParams::default() };
    let series = policy_hits(&p).unwrap();
    let names: Vec<&str> = series.iter().map(|s| s.policy.as_str()).collect();
    assert_eq!(names, ["lru", "clru", "wlru", "fifo"]);
    let sets = p.stream.probe_sets(p.queries).unwrap();
    let hit = |name: &str| series.iter().find(|s| s.policy == name).unwrap().hit_ratio;
    assert!((hit("lru") - oracle(&sets, p.capacity, true)).abs() < 1e-12);
    assert!((hit("fifo") - oracle(&sets, p.capacity, false)).abs() < 1e-12);
    for s in &series {
        assert!((0.0..=1.0).contains(&s.hit_ratio));
        assert_eq!(s.cumulative.last().unwrap(), &(p.queries, s.hit_ratio));
    }
}

#[test]
fn policy_sim_rejects_capacity_below_nprobe() {
    let p = PolicyParams {
        capacity: 3,
        stream: StreamParams { nprobe: 4, ..StreamParams::default() },
        ..PolicyParams::default()
    };
    assert!(policy_hits(&p).is_err());
}

#[test]
fn params_parse_from_partial_json() {
    let p: GroupParams = serde_json::from_str(r#"{"theta": 0.3, "nprobe": 4}"#).unwrap();
    assert_eq!(p.theta, 0.3);
    assert_eq!(p.stream.nprobe, 4);
    assert_eq!(p.queries, GroupParams::default().queries);
    let p: PolicyParams = serde_json::from_str("{}").unwrap();
    assert_eq!(p, PolicyParams::default());
}
