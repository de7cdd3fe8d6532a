use call_core::grouping::{PrefetchMetadata, QueryGroup, QueryId};
use call_core::prefetch::{PrefetchAction, PrefetchTracker, PrefetchTrigger};
use proptest::prelude::*;

fn chain(sizes: &[usize]) -> Vec<QueryGroup> {
    let mut next_id = 0u64;
    let members: Vec<Vec<QueryId>> = sizes
        .iter()
        .map(|n| {
            let m = (next_id..next_id + *n as u64).collect();
            next_id += *n as u64;
            m
        })
        .collect();
    (0..sizes.len())
        .map(|g| QueryGroup {
            group_id: g,
            members: members[g].clone(),
            member_indices: vec![],
            union_clusters: vec![],
            prefetch: members.get(g + 1).map(|m| PrefetchMetadata {
                fq: m[0],
                fqset: vec![g as u32 + 1],
            }),
        })
        .collect()
}

proptest! {
    /// Dispatch and completion events delivered in any order that respects
    /// dispatch-before-complete per query fire at most once per group and
    /// exactly once for every group with metadata.
    #[test]
    fn single_shot_under_any_interleaving(sizes in prop::collection::vec(1usize..5, 1..8),
                                          seed in any::<u64>(),
                                          completion in any::<bool>()) {
        let groups = chain(&sizes);
        let trigger = if completion { PrefetchTrigger::Completion } else { PrefetchTrigger::Dispatch };
        let mut tracker = PrefetchTracker::new(&groups, trigger);
        let mut events: Vec<(QueryId, usize, bool)> = Vec::new();
        for g in &groups {
            for q in &g.members {
                events.push((*q, g.group_id, false));
            }
        }
        // shuffle while keeping each completion after its dispatch
        let mut rng = seed;
        let mut pending: Vec<(QueryId, usize, bool)> = events.clone();
        let mut fired = vec![0usize; groups.len()];
        while !pending.is_empty() {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let i = (rng >> 33) as usize % pending.len();
            let (q, g, done) = pending.swap_remove(i);
            let action = if done {
                tracker.on_query_complete(q, g).unwrap()
            } else {
                pending.push((q, g, true));
                tracker.on_query_dispatch(q, g).unwrap()
            };
            if let PrefetchAction::Fire(m) = action {
                fired[g] += 1;
                prop_assert_eq!(m.fq, groups[g + 1].members[0]);
            }
        }
        for (g, n) in fired.iter().enumerate() {
            let expect = usize::from(g + 1 < groups.len());
            prop_assert_eq!(*n, expect, "group {}", g);
        }
        prop_assert_eq!(tracker.prefetches_issued(), groups.len() - 1);
    }
}

#[test]
fn five_groups_issue_four_prefetches() {
    let groups = chain(&[2, 1, 3, 1, 2]);
    let mut t = PrefetchTracker::new(&groups, PrefetchTrigger::Dispatch);
    for g in &groups {
        for q in &g.members {
            t.on_query_dispatch(*q, g.group_id).unwrap();
            t.on_query_complete(*q, g.group_id).unwrap();
        }
    }
    assert_eq!(t.prefetches_issued(), 4);
}
