use std::collections::HashSet;

use call_core::grouping::{
    form_groups, form_groups_with, jaccard_bitmap, jaccard_hash, pairwise_similarity, reorder_batch,
    ClusterBitmap, QueryGroup, QueryRecord, SimilarityKernel,
};
use call_core::index::ClusterId;
use proptest::prelude::*;

fn sets(k: usize, max_len: usize, n: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = Vec<Vec<ClusterId>>> {
    prop::collection::vec(
        prop::collection::btree_set(0..k as ClusterId, 0..=max_len).prop_map(|s| s.into_iter().collect()),
        n,
    )
}

fn records(k: usize, sets: &[Vec<ClusterId>]) -> Vec<QueryRecord> {
    sets.iter()
        .enumerate()
        .map(|(i, s)| QueryRecord::new(i as u64 + 100, i as f64, s.clone(), k).unwrap())
        .collect()
}

/// Every way to split `0..n` into non-empty blocks.
fn partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in partitions(n - 1) {
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i].push(n - 1);
            out.push(q);
        }
        let mut q = p.clone();
        q.push(vec![n - 1]);
        out.push(q);
    }
    out
}

fn hash(s: &[ClusterId]) -> HashSet<ClusterId> {
    s.iter().copied().collect()
}

fn satisfies_threshold(block: &[usize], sets: &[Vec<ClusterId>], theta: f64) -> bool {
    block.iter().all(|&a| {
        block
            .iter()
            .all(|&b| a == b || (!sets[a].is_empty() && !sets[b].is_empty() && jaccard_hash(&hash(&sets[a]), &hash(&sets[b])) >= theta))
    })
}

fn canonical(groups: &[QueryGroup]) -> Vec<Vec<usize>> {
    let mut g: Vec<Vec<usize>> = groups.iter().map(|g| g.member_indices.clone()).collect();
    g.sort();
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn bitmap_matches_hash_oracle((k, s) in prop::sample::select(vec![64usize, 100, 130, 512])
                                      .prop_flat_map(|k| (Just(k), sets(k, k.min(60), 2)))) {
        let a = ClusterBitmap::from_ids(k, &s[0]).unwrap();
        let b = ClusterBitmap::from_ids(k, &s[1]).unwrap();
        prop_assert_eq!(jaccard_bitmap(&a, &b).unwrap(), jaccard_hash(&hash(&s[0]), &hash(&s[1])));
    }

    #[test]
    fn groups_are_sound_maximal_partitions(s in sets(40, 12, 1..40usize),
                                           theta in 0.05f64..0.95) {
        let recs = records(40, &s);
        let groups = form_groups(&recs, theta).unwrap();
        let mut seen: Vec<usize> = groups.iter().flat_map(|g| g.member_indices.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..s.len()).collect::<Vec<_>>());
        for g in &groups {
            prop_assert!(satisfies_threshold(&g.member_indices, &s, theta));
            prop_assert!(g.member_indices.windows(2).all(|w| w[0] < w[1]));
        }
        // no two groups could still be merged
        for (i, a) in groups.iter().enumerate() {
            for b in &groups[i + 1..] {
                let joined: Vec<usize> = a.member_indices.iter().chain(&b.member_indices).copied().collect();
                prop_assert!(!satisfies_threshold(&joined, &s, theta));
            }
        }
        let firsts: Vec<usize> = groups.iter().map(|g| g.member_indices[0]).collect();
        prop_assert!(firsts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn grouping_is_a_valid_partition_per_brute_force(s in sets(12, 6, 6), theta in 0.1f64..0.9) {
        let recs = records(12, &s);
        let got = canonical(&form_groups(&recs, theta).unwrap());
        let valid: Vec<Vec<Vec<usize>>> = partitions(s.len())
            .into_iter()
            .filter(|p| p.iter().all(|b| satisfies_threshold(b, &s, theta)))
            .map(|mut p| { p.iter_mut().for_each(|b| b.sort_unstable()); p.sort(); p })
            .collect();
        prop_assert!(valid.contains(&got));
    }

    #[test]
    fn kernels_agree_and_grouping_is_deterministic(s in sets(100, 30, 40), theta in 0.2f64..0.8) {
        let recs = records(100, &s);
        let a = pairwise_similarity(&recs, SimilarityKernel::Bitmap).unwrap();
        let b = pairwise_similarity(&recs, SimilarityKernel::HashSet).unwrap();
        prop_assert_eq!(&a, &b);
        let g1 = form_groups_with(&recs, theta, SimilarityKernel::Bitmap).unwrap();
        let g2 = form_groups_with(&recs, theta, SimilarityKernel::HashSet).unwrap();
        prop_assert_eq!(&g1, &g2);
        prop_assert_eq!(g1, form_groups(&recs, theta).unwrap());
    }

    #[test]
    fn metadata_chains_group_heads(s in sets(50, 10, 30)) {
        let recs = records(50, &s);
        let batch = reorder_batch(form_groups(&recs, 0.5).unwrap(), &recs).unwrap();
        prop_assert_eq!(batch.order.len(), recs.len());
        for w in batch.groups.windows(2) {
            let m = w[0].prefetch.as_ref().unwrap();
            prop_assert_eq!(m.fq, w[1].members[0]);
            let head = recs.iter().find(|r| r.query_id == m.fq).unwrap();
            prop_assert_eq!(&m.fqset, &head.cluster_set);
        }
        prop_assert!(batch.groups.last().unwrap().prefetch.is_none());
    }
}

#[test]
fn three_query_example_is_the_only_maximal_valid_partition() {
    let s = vec![vec![1, 2, 3, 4], vec![1, 2, 3, 5], vec![7, 8, 9, 10]];
    let valid: Vec<_> = partitions(3)
        .into_iter()
        .filter(|p| p.iter().all(|b| satisfies_threshold(b, &s, 0.5)))
        .collect();
    assert_eq!(valid.len(), 2);
    let got = canonical(&form_groups(&records(16, &s), 0.5).unwrap());
    assert_eq!(got, vec![vec![0, 1], vec![2]]);
}

#[test]
fn partition_enumeration_counts_bell_numbers() {
    let bell: Vec<usize> = (0..7).map(|n| partitions(n).len()).collect();
    assert_eq!(bell, vec![1, 1, 2, 5, 15, 52, 203]);
}
