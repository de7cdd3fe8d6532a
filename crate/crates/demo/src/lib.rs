//! Three small views over the engine's building blocks, exported to the
//! browser as JSON-in, JSON-out functions: a batch's pairwise Jaccard matrix
//! with its grouping, greedy vs round-robin load timelines, and cache hit
//! ratios per replacement policy over one query stream.

use std::sync::Arc;

use call_core::cache::{AdmitOrigin, CachePolicy, Capacity, ClusterCache, PolicyKind};
use call_core::embedding::VectorSet;
use call_core::grouping::{pairwise_similarity, groups_from_matrix, reorder_batch, QueryRecord, SimilarityKernel};
use call_core::index::{CentroidIndex, ClusterData, ClusterId};
use call_core::loader::{baseline_round_robin, plan_load, CostModel, LoadPlan};
use call_core::workload::{synth_queries, CorpusParams, OverlapProfile};
use call_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

const DIM: usize = 16;

#[cfg(target_arch = "wasm32")]
mod wasm;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamParams {
    pub clusters: usize,
    pub nprobe: usize,
    pub repeat_prob: f64,
    /// Queries back a repeat may copy from; 0 means all.
    pub horizon: usize,
    pub seed: u64,
}

impl Default for StreamParams {
    fn default() -> Self {
        StreamParams {
            clusters: 32,
            nprobe: 6,
            repeat_prob: 0.7,
            horizon: 200,
            seed: 1,
        }
    }
}

impl StreamParams {
    /// Cluster sets of `n` synthetic queries. Topic centers double as the
    /// centroids, so no corpus or k-means run is needed.
    pub fn probe_sets(&self, n: usize) -> Result<Vec<Vec<ClusterId>>> {
        let corpus = CorpusParams {
            n: 1,
            dim: DIM,
            topics: self.clusters,
            spread: 0.3,
            seed: self.seed,
        };
        let index = CentroidIndex::new(corpus.centers()?)?;
        let profile = OverlapProfile {
            structural_repeat_prob: self.repeat_prob,
            noise: 0.05,
            repeat_horizon: self.horizon,
        };
        let queries: VectorSet = synth_queries(&corpus, n, &profile, self.seed.wrapping_add(1))?;
        queries.rows().map(|q| index.probe(q, self.nprobe)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupParams {
    pub queries: usize,
    pub theta: f64,
    #[serde(flatten)]
    pub stream: StreamParams,
}

impl Default for GroupParams {
    fn default() -> Self {
        GroupParams {
            queries: 24,
            theta: 0.5,
            stream: StreamParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub group_id: usize,
    pub members: Vec<u64>,
    pub union_clusters: Vec<ClusterId>,
    /// Clusters of the next group's head, prefetched while this group runs.
    pub prefetch: Vec<ClusterId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupView {
    pub sets: Vec<Vec<ClusterId>>,
    /// Dense Jaccard matrix in arrival order.
    pub matrix: Vec<Vec<f64>>,
    pub groups: Vec<GroupInfo>,
    /// Execution order of query ids.
    pub order: Vec<u64>,
    pub mean_adjacent_arrival: f64,
    pub mean_adjacent_execution: f64,
}

fn mean_adjacent(matrix: &[Vec<f64>], order: &[usize]) -> f64 {
    if order.len() < 2 {
        return 0.0;
    }
    let sum: f64 = order.windows(2).map(|w| matrix[w[0]][w[1]]).sum();
    sum / (order.len() - 1) as f64
}

pub fn group_batch(p: &GroupParams) -> Result<GroupView> {
    let sets = p.stream.probe_sets(p.queries)?;
    let records = sets
        .iter()
        .enumerate()
        .map(|(i, s)| QueryRecord::new(i as u64, i as f64, s.clone(), p.stream.clusters))
        .collect::<Result<Vec<_>>>()?;
    let sim = pairwise_similarity(&records, SimilarityKernel::Bitmap)?;
    let groups = groups_from_matrix(&records, &sim, p.theta)?;
    let batch = reorder_batch(groups, &records)?;
    let matrix = sim.to_dense();
    let arrival: Vec<usize> = (0..records.len()).collect();
    let execution: Vec<usize> = batch.order.iter().map(|q| *q as usize).collect();
    Ok(GroupView {
        mean_adjacent_arrival: mean_adjacent(&matrix, &arrival),
        mean_adjacent_execution: mean_adjacent(&matrix, &execution),
        sets,
        matrix,
        groups: batch
            .groups
            .into_iter()
            .map(|g| GroupInfo {
                group_id: g.group_id,
                members: g.members,
                union_clusters: g.union_clusters,
                prefetch: g.prefetch.map(|m| m.fqset).unwrap_or_default(),
            })
            .collect(),
        order: batch.order,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadParams {
    /// Cluster sizes in MB, one per missing cluster.
    pub sizes_mb: Vec<f64>,
    pub threads: usize,
    pub throughput_mb: f64,
    pub overhead_ms: f64,
}

impl Default for LoadParams {
    fn default() -> Self {
        LoadParams {
            sizes_mb: random_sizes(20, 1),
            threads: 4,
            throughput_mb: 100.0,
            overhead_ms: 1.0,
        }
    }
}

/// Heavy-tailed cluster sizes in MB, rounded to 0.1.
pub fn random_sizes(n: usize, seed: u64) -> Vec<f64> {
    let dist = LogNormal::new(0.5, 0.9).expect("constant parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (dist.sample(&mut rng) * 10.0f64).round().max(1.0) / 10.0)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub cluster: ClusterId,
    pub mb: f64,
    pub start_ms: f64,
    pub end_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub workers: Vec<Vec<Task>>,
    pub makespan_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadView {
    pub greedy: Timeline,
    pub round_robin: Timeline,
}

fn timeline(plan: &LoadPlan, sizes: &[u64], cost: &CostModel) -> Timeline {
    let workers: Vec<Vec<Task>> = (0..plan.threads)
        .map(|w| {
            let mut t = 0.0;
            plan.worker_queue(w)
                .into_iter()
                .map(|id| {
                    let bytes = sizes[id as usize];
                    let start = t;
                    t += cost.cost(bytes) * 1e3;
                    Task {
                        cluster: id,
                        mb: bytes as f64 / 1e6,
                        start_ms: start,
                        end_ms: t,
                    }
                })
                .collect()
        })
        .collect();
    let makespan_ms = workers
        .iter()
        .filter_map(|w| w.last().map(|t| t.end_ms))
        .fold(0.0, f64::max);
    Timeline { workers, makespan_ms }
}

pub fn load_timelines(p: &LoadParams) -> Result<LoadView> {
    if p.sizes_mb.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::InvalidArgument("sizes must be non-negative numbers".into()));
    }
    if !(p.throughput_mb > 0.0) || !(p.overhead_ms >= 0.0) {
        return Err(Error::InvalidArgument("throughput must be positive and overhead non-negative".into()));
    }
    let sizes: Vec<u64> = p.sizes_mb.iter().map(|s| (s * 1e6).round() as u64).collect();
    let missing: Vec<(ClusterId, u64)> = sizes.iter().enumerate().map(|(i, b)| (i as ClusterId, *b)).collect();
    let cost = CostModel {
        throughput: p.throughput_mb * 1e6,
        per_file_overhead: p.overhead_ms / 1e3,
    };
    Ok(LoadView {
        greedy: timeline(&plan_load(&missing, p.threads)?, &sizes, &cost),
        round_robin: timeline(&baseline_round_robin(&missing, p.threads)?, &sizes, &cost),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyParams {
    pub queries: usize,
    pub capacity: usize,
    /// Queries per second, for the WLRU window clock.
    pub rate: f64,
    pub window_length: f64,
    pub window_top_n: usize,
    /// Points in each returned series.
    pub points: usize,
    #[serde(flatten)]
    pub stream: StreamParams,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            queries: 2000,
            capacity: 12,
            rate: 100.0,
            window_length: 2.0,
            window_top_n: 6,
            points: 100,
            stream: StreamParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySeries {
    pub policy: String,
    pub hit_ratio: f64,
    /// (query index, cumulative hit ratio) samples.
    pub cumulative: Vec<(usize, f64)>,
}

/// Cluster payloads with sizes drawn once per seed; CLRU sees larger
/// clusters as costlier to reload.
fn payloads(clusters: usize, seed: u64) -> Result<Vec<Arc<ClusterData>>> {
    random_sizes(clusters, seed ^ 0x5eed)
        .into_iter()
        .enumerate()
        .map(|(id, mb)| {
            let n = (mb * 10.0) as usize;
            let vectors = VectorSet::from_flat(1, vec![0.0; n])?;
            Ok(Arc::new(ClusterData::new(id as ClusterId, (0..n as u64).collect(), vectors)?))
        })
        .collect()
}

pub fn policy_hits(p: &PolicyParams) -> Result<Vec<PolicySeries>> {
    if p.stream.nprobe > p.capacity {
        return Err(Error::InvalidArgument("capacity must hold at least nprobe clusters".into()));
    }
    if !(p.rate > 0.0) {
        return Err(Error::InvalidArgument("rate must be positive".into()));
    }
    let sets = p.stream.probe_sets(p.queries)?;
    let data = payloads(p.stream.clusters, p.stream.seed)?;
    let cost = CostModel::default();
    let every = (p.queries / p.points.max(1)).max(1);
    [PolicyKind::Lru, PolicyKind::Clru, PolicyKind::Wlru, PolicyKind::Fifo]
        .into_iter()
        .map(|kind| {
            let policy = CachePolicy {
                kind,
                window_length: p.window_length,
                window_top_n: p.window_top_n,
            };
            let mut cache = ClusterCache::new(Capacity::Entries(p.capacity), policy)?;
            let mut cumulative = Vec::new();
            for (i, set) in sets.iter().enumerate() {
                cache.window_tick(i as f64 / p.rate);
                // hits stay pinned so this query's own admission cannot evict them
                let found = cache.lookup_and_pin(set);
                let loaded = found
                    .misses
                    .iter()
                    .map(|id| {
                        let d = data[*id as usize].clone();
                        let secs = cost.cost(d.encoded_len());
                        (d, secs)
                    })
                    .collect();
                cache.admit(loaded, AdmitOrigin::Demand)?;
                cache.unpin(&found.hits);
                if (i + 1) % every == 0 || i + 1 == sets.len() {
                    cumulative.push((i + 1, cache.stats_ref().hit_ratio()));
                }
            }
            Ok(PolicySeries {
                policy: kind.name().to_string(),
                hit_ratio: cache.stats_ref().hit_ratio(),
                cumulative,
            })
        })
        .collect()
}
