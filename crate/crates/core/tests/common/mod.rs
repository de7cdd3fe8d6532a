#![allow(dead_code)]

use std::sync::Arc;

use call_core::cache::{ClusterCache, PolicyKind};
use call_core::embedding::{Embedding, VectorSet};
use call_core::engine::{EngineConfig, SearchEngine, SearchRequest};
use call_core::index::{train_kmeans, CentroidIndex, ClusterStore, MemoryStore};
use call_core::workload::{synth_corpus, synth_queries, CorpusParams, OverlapProfile};

pub struct World {
    pub corpus: VectorSet,
    pub index: CentroidIndex,
    pub store: Arc<MemoryStore>,
    pub params: CorpusParams,
}

pub fn world(n: usize, dim: usize, topics: usize, k: usize, seed: u64) -> World {
    let params = CorpusParams {
        n,
        dim,
        topics,
        spread: 0.3,
        seed,
    };
    let corpus = synth_corpus(&params).unwrap();
    let index = train_kmeans(&corpus, k, seed).unwrap();
    let store = Arc::new(MemoryStore::from_corpus(&corpus, &index).unwrap());
    World {
        corpus,
        index,
        store,
        params,
    }
}

impl World {
    pub fn queries(&self, n: usize, seed: u64) -> VectorSet {
        synth_queries(&self.params, n, &OverlapProfile::default(), seed).unwrap()
    }

    pub fn requests(&self, queries: &VectorSet, k: usize, nprobe: usize) -> Vec<SearchRequest> {
        queries
            .rows()
            .enumerate()
            .map(|(i, q)| {
                SearchRequest::new(i as u64, Embedding::new(q.to_vec()).unwrap(), k, nprobe).at(i as f64 * 0.01)
            })
            .collect()
    }

    pub fn engine(&self, capacity: usize, policy: PolicyKind, config: EngineConfig) -> SearchEngine {
        let store: Arc<dyn ClusterStore> = self.store.clone();
        let cache = ClusterCache::with_entries(capacity, policy).unwrap();
        SearchEngine::new(self.index.clone(), store, cache, config).unwrap()
    }
}

/// Exhaustive scan: `k` smallest squared-L2 distances, ties by lower id.
pub fn exact_topk(corpus: &VectorSet, q: &[f32], k: usize) -> Vec<(u64, f32)> {
    let mut all: Vec<(u64, f32)> = corpus
        .rows()
        .enumerate()
        .map(|(i, v)| {
            let d: f32 = call_core::embedding::l2_squared(q, v);
            (i as u64, d)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}
