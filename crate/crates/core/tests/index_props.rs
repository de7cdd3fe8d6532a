mod common;

use call_core::embedding::{l2_squared, VectorSet};
use call_core::index::{
    assign_vectors, decode_cluster, encode_cluster, read_cluster, train_kmeans, write_index, CentroidIndex,
    ClusterData, ClusterId, ClusterManifest, ClusterStore, DiskStore,
};
use proptest::prelude::*;

fn vectors(dim: usize, n: std::ops::Range<usize>) -> impl Strategy<Value = VectorSet> {
    prop::collection::vec(prop::collection::vec(-10.0f32..10.0, dim), n)
        .prop_map(move |rows| VectorSet::from_rows(dim, rows).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_is_nearest_centroid(corpus in vectors(3, 8..60), k in 1usize..8, seed in any::<u64>()) {
        let index = train_kmeans(&corpus, k, seed).unwrap();
        let assigned = assign_vectors(&corpus, &index).unwrap();
        for (v, c) in corpus.rows().zip(&assigned) {
            // brute force: lowest distance, ties to lower id
            let best = (0..k as ClusterId)
                .min_by(|a, b| {
                    l2_squared(v, index.centroid(*a))
                        .total_cmp(&l2_squared(v, index.centroid(*b)))
                        .then(a.cmp(b))
                })
                .unwrap();
            prop_assert_eq!(*c, best);
        }
    }

    #[test]
    fn probe_is_sorted_prefix(centroids in vectors(4, 1..40), q in prop::collection::vec(-10.0f32..10.0, 4), nprobe in 1usize..40) {
        let index = CentroidIndex::new(centroids.clone()).unwrap();
        let nprobe = nprobe.min(centroids.len());
        let got = index.probe(&q, nprobe).unwrap();
        let mut all: Vec<(f32, ClusterId)> = centroids.rows().enumerate().map(|(i, c)| (l2_squared(&q, c), i as ClusterId)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        prop_assert_eq!(got, all.iter().take(nprobe).map(|x| x.1).collect::<Vec<_>>());
    }

    #[test]
    fn cluster_encoding_round_trips(v in vectors(5, 0..30), id in 0u32..1000) {
        let ids: Vec<u64> = (0..v.len() as u64).map(|i| i * 7 + 3).collect();
        let c = ClusterData::new(id, ids, v).unwrap();
        let bytes = encode_cluster(&c);
        prop_assert_eq!(bytes.len() as u64, c.encoded_len());
        prop_assert_eq!(decode_cluster(&bytes, "x".as_ref()).unwrap(), c);
    }
}

#[test]
fn written_index_partitions_the_corpus() {
    let w = common::world(2000, 8, 20, 16, 3);
    let dir = tempfile::tempdir().unwrap();
    let assigned = assign_vectors(&w.corpus, &w.index).unwrap();
    let manifest = write_index(&w.corpus, &assigned, &w.index, dir.path()).unwrap();
    let reloaded = ClusterManifest::load(dir.path()).unwrap();
    assert_eq!(reloaded.total_vectors(), 2000);
    let mut seen = vec![false; 2000];
    for id in 0..16 {
        let c = read_cluster(&reloaded, id).unwrap();
        assert_eq!(c.len() as u64, reloaded.entry(id).unwrap().vector_count);
        for (row, vid) in c.vectors.rows().zip(&c.ids) {
            assert!(!seen[*vid as usize]);
            seen[*vid as usize] = true;
            assert_eq!(row, w.corpus.row(*vid as usize));
            assert_eq!(assigned[*vid as usize], id);
        }
    }
    assert!(seen.iter().all(|s| *s));
    let disk = DiskStore::new(manifest);
    assert_eq!(disk.read(3).unwrap().as_ref(), w.store.read(3).unwrap().as_ref());
}

#[test]
fn truncated_cluster_file_is_a_storage_error() {
    let w = common::world(300, 4, 5, 4, 1);
    let dir = tempfile::tempdir().unwrap();
    let assigned = assign_vectors(&w.corpus, &w.index).unwrap();
    let manifest = write_index(&w.corpus, &assigned, &w.index, dir.path()).unwrap();
    let path = manifest.path_of(2).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = DiskStore::new(manifest).read(2).unwrap_err();
    assert!(err.is_storage(), "{err}");
}
