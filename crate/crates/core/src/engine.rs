//! Batch search pipeline.
//!
//! A batch is probed, grouped by cluster overlap and reordered; queries then
//! run one at a time on the calling thread while cluster loads fan out to the
//! loader workers and the next group's head clusters are prefetched in the
//! background.
//!
//! The engine runs either against the wall clock with a real thread pool, or
//! in virtual time where I/O and compute are charged from a cost model. Both
//! modes make the same cache, grouping and packing decisions for the same
//! input, so virtual runs are reproducible and machine independent.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering as AtomicOrdering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cache::{AdmitOrigin, CachePolicy, ClusterCache, PolicyKind};
use crate::clock::Stopwatch;
use crate::embedding::{Embedding, Metric, VectorSet};
use crate::error::{Error, Result};
use crate::grouping::{
    form_groups_with, reorder_batch, QueryGroup, QueryId, QueryRecord, SimilarityKernel,
};
use crate::index::{CentroidIndex, ClusterData, ClusterId, ClusterStore};
use crate::loader::{
    make_plan, CostModel, LoadOrdering, LoadPlan, LoadTicket, LoadTiming, LoaderPool, Priority,
    VirtualPool, VirtualWave,
};
use crate::prefetch::{admit_prefetched, PrefetchAction, PrefetchState, PrefetchTracker, PrefetchTrigger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerMode {
    /// Group, reorder, prefetch group heads and pack loads by size.
    #[default]
    Call,
    /// Arrival order, no grouping or group prefetch, round-robin loads.
    BaselineFifoOrder,
}

impl SchedulerMode {
    pub fn name(self) -> &'static str {
        match self {
            SchedulerMode::Call => "call",
            SchedulerMode::BaselineFifoOrder => "baseline_fifo_order",
        }
    }
}

impl FromStr for SchedulerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "call" => Ok(SchedulerMode::Call),
            "baseline" | "baseline_fifo_order" => Ok(SchedulerMode::BaselineFifoOrder),
            other => Err(Error::invalid(format!("unknown scheduler {other:?}"))),
        }
    }
}

/// How the periodic baseline prefetcher picks clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodicRanking {
    /// Most requested clusters of the last window.
    Frequency,
    /// Clusters with the highest smoothed load latency.
    LoadCost,
}

/// Speculative prefetch of a fixed number of clusters at a fixed period,
/// independent of batch structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodicPrefetch {
    pub ranking: PeriodicRanking,
    pub degree: usize,
    pub period: f64,
}

impl PeriodicPrefetch {
    /// The usual companion of a baseline policy: load-cost ranking for CLRU,
    /// frequency ranking otherwise.
    pub fn for_policy(kind: PolicyKind) -> Self {
        PeriodicPrefetch {
            ranking: if kind == PolicyKind::Clru {
                PeriodicRanking::LoadCost
            } else {
                PeriodicRanking::Frequency
            },
            degree: 20,
            period: 60.0,
        }
    }
}

/// Charges for virtual-time runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualCosts {
    pub io: CostModel,
    pub lookup_per_cluster: f64,
    pub build_per_vector: f64,
    /// Seconds per candidate per dimension of distance computation.
    pub distance_per_dim: f64,
    /// Seconds per pairwise similarity during grouping.
    pub group_per_pair: f64,
}

impl Default for VirtualCosts {
    fn default() -> Self {
        VirtualCosts {
            io: CostModel::default(),
            lookup_per_cluster: 1e-6,
            build_per_vector: 1e-8,
            distance_per_dim: 1e-9,
            group_per_pair: 2e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Virtual(VirtualCosts),
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub metric: Metric,
    pub threads: usize,
    pub theta: f64,
    pub kernel: SimilarityKernel,
    pub scheduler: SchedulerMode,
    pub prefetch: bool,
    pub prefetch_trigger: PrefetchTrigger,
    /// Seconds a group head waits for its prefetch before loading on demand.
    pub await_timeout: f64,
    /// Overrides the scheduler's default load ordering.
    pub load_ordering: Option<LoadOrdering>,
    pub periodic_prefetch: Option<PeriodicPrefetch>,
    /// Concurrent searches per batch. Above 1 needs the real clock and no
    /// group prefetch.
    pub search_threads: usize,
    pub clock: ClockMode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            metric: Metric::L2,
            threads: crate::loader::DEFAULT_THREADS,
            theta: crate::grouping::DEFAULT_THETA,
            kernel: SimilarityKernel::Bitmap,
            scheduler: SchedulerMode::Call,
            prefetch: true,
            prefetch_trigger: PrefetchTrigger::Dispatch,
            await_timeout: crate::prefetch::DEFAULT_AWAIT_TIMEOUT.as_secs_f64(),
            load_ordering: None,
            periodic_prefetch: None,
            search_threads: 1,
            clock: ClockMode::Virtual(VirtualCosts::default()),
        }
    }
}

impl EngineConfig {
    pub fn ordering(&self) -> LoadOrdering {
        self.load_ordering.unwrap_or(match self.scheduler {
            SchedulerMode::Call => LoadOrdering::Greedy,
            SchedulerMode::BaselineFifoOrder => LoadOrdering::RoundRobin,
        })
    }

    fn group_prefetch(&self) -> bool {
        self.prefetch && self.scheduler == SchedulerMode::Call
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 || self.search_threads == 0 {
            return Err(Error::invalid("thread counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::invalid("theta must be in [0, 1]"));
        }
        if !(self.await_timeout >= 0.0) {
            return Err(Error::invalid("await_timeout must be non-negative"));
        }
        if self.search_threads > 1 {
            if matches!(self.clock, ClockMode::Virtual(_)) {
                return Err(Error::invalid("multiple search threads need the real clock"));
            }
            if self.group_prefetch() {
                return Err(Error::invalid("multiple search threads need prefetch disabled"));
            }
        }
        if let Some(p) = self.periodic_prefetch {
            if !(p.period > 0.0) {
                return Err(Error::invalid("periodic prefetch period must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchRequest {
    pub query_id: QueryId,
    pub embedding: Embedding,
    pub k: usize,
    pub nprobe: usize,
    /// Arrival time on the engine clock, in seconds.
    pub arrival_time: f64,
}

impl SearchRequest {
    pub fn new(query_id: QueryId, embedding: Embedding, k: usize, nprobe: usize) -> Self {
        SearchRequest {
            query_id,
            embedding,
            k,
            nprobe,
            arrival_time: 0.0,
        }
    }

    pub fn at(mut self, arrival_time: f64) -> Self {
        self.arrival_time = arrival_time;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: u64,
    pub distance: f32,
}

/// Stage timings of one query, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub await_prefetch: f64,
    pub cache_lookup: f64,
    pub load: f64,
    pub index_build: f64,
    pub search: f64,
    /// From the query's turn on the dispatcher to its result.
    pub search_latency: f64,
    /// From arrival to result, including batching and queueing.
    pub total_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub query_id: QueryId,
    pub group_id: usize,
    pub exec_index: usize,
    pub head_of_group: bool,
    pub neighbors: Vec<Neighbor>,
    pub timing: StageTiming,
    pub cluster_hits: Vec<ClusterId>,
    pub cluster_misses: Vec<ClusterId>,
    /// Bytes this query read on demand.
    pub bytes_read: u64,
    /// Bytes read from storage by the cache so far, prefetch included.
    pub disk_bytes_total: u64,
    pub load_plan: Vec<ClusterId>,
    pub load_timing: LoadTiming,
    pub prefetch_timed_out: bool,
    pub arrival_time: f64,
    pub started_at: f64,
    pub completed_at: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    /// Results in execution order.
    pub results: Vec<SearchResult>,
    pub groups: Vec<QueryGroup>,
    pub order: Vec<QueryId>,
    pub grouping_secs: f64,
    pub prefetches_issued: usize,
    pub prefetch_timeouts: usize,
    pub started_at: f64,
    pub finished_at: f64,
    /// Largest total size of partial indexes alive at the same time.
    pub peak_partial_bytes: u64,
}

/// Candidate vectors of one query: the concatenated contents of its clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialIndex {
    pub clusters: Vec<ClusterId>,
    ids: Vec<u64>,
    vectors: VectorSet,
}

impl PartialIndex {
    pub fn build(dim: usize, clusters: &[Arc<ClusterData>]) -> Result<Self> {
        let total = clusters.iter().map(|c| c.len()).sum();
        let mut ids = Vec::with_capacity(total);
        let mut flat = Vec::with_capacity(total * dim);
        for c in clusters {
            if c.vectors.dim() != dim {
                return Err(Error::invalid(format!(
                    "cluster {} has dim {}, index has {dim}",
                    c.cluster_id,
                    c.vectors.dim()
                )));
            }
            ids.extend_from_slice(&c.ids);
            flat.extend_from_slice(c.vectors.as_flat());
        }
        Ok(PartialIndex {
            clusters: clusters.iter().map(|c| c.cluster_id).collect(),
            ids,
            vectors: VectorSet::from_flat(dim, flat)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vectors(&self) -> &VectorSet {
        &self.vectors
    }

    pub fn bytes(&self) -> u64 {
        (self.ids.len() * 8 + self.vectors.as_flat().len() * 4) as u64
    }
}

#[derive(PartialEq)]
struct Ranked(f32, u64);

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Exact top-k over the candidates, ascending by distance, ties by lower id.
pub fn topk_search(query: &[f32], partial: &PartialIndex, k: usize, metric: Metric) -> Vec<Neighbor> {
    if k == 0 {
        return Vec::new();
    }
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for (v, id) in partial.vectors.rows().zip(&partial.ids) {
        let cand = Ranked(metric.distance(query, v), *id);
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().expect("heap holds k items") {
            heap.pop();
            heap.push(cand);
        }
    }
    heap.into_sorted_vec()
        .into_iter()
        .map(|Ranked(distance, id)| Neighbor { id, distance })
        .collect()
}

enum Clock {
    Virtual {
        now: f64,
        pool: VirtualPool,
        costs: VirtualCosts,
    },
    Real {
        epoch: Stopwatch,
        pool: LoaderPool,
    },
}

enum Wave {
    Virtual {
        handle: VirtualWave,
        data: Vec<(Arc<ClusterData>, f64)>,
    },
    Real(LoadTicket),
}

struct PendingHead {
    fqset: Vec<ClusterId>,
    ids: HashSet<ClusterId>,
    waves: Vec<Wave>,
}

enum Background {
    Virtual {
        ready_at: f64,
        data: Vec<(Arc<ClusterData>, f64)>,
    },
    Real(LoadTicket),
}

struct DemandLoad {
    loaded: Vec<(Arc<ClusterData>, f64)>,
    failed: Vec<(ClusterId, Error)>,
    timing: LoadTiming,
    plan: LoadPlan,
    secs: f64,
}

pub struct SearchEngine {
    index: CentroidIndex,
    store: Arc<dyn ClusterStore>,
    cache: Mutex<ClusterCache>,
    config: EngineConfig,
    clock: Clock,
    next_periodic: f64,
    background: Vec<Background>,
}

impl std::fmt::Debug for SearchEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SearchEngine")
            .field("clusters", &self.index.num_clusters())
            .field("config", &self.config)
            .finish()
    }
}

impl SearchEngine {
    pub fn new(
        index: CentroidIndex,
        store: Arc<dyn ClusterStore>,
        cache: ClusterCache,
        config: EngineConfig,
    ) -> Result<Self> {
        config.validate()?;
        if store.num_clusters() != index.num_clusters() {
            return Err(Error::invalid(format!(
                "store has {} clusters, index has {}",
                store.num_clusters(),
                index.num_clusters()
            )));
        }
        let clock = match config.clock {
            ClockMode::Virtual(costs) => Clock::Virtual {
                now: 0.0,
                pool: VirtualPool::new(config.threads)?,
                costs,
            },
            ClockMode::Real => Clock::Real {
                epoch: Stopwatch::start(),
                pool: LoaderPool::new(store.clone(), config.threads)?,
            },
        };
        Ok(SearchEngine {
            index,
            store,
            cache: Mutex::new(cache),
            next_periodic: config.periodic_prefetch.map_or(f64::INFINITY, |p| p.period),
            config,
            clock,
            background: Vec::new(),
        })
    }

    pub fn index(&self) -> &CentroidIndex {
        &self.index
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn cache(&self) -> MutexGuard<'_, ClusterCache> {
        self.cache.lock().expect("cache poisoned")
    }

    pub fn set_policy(&mut self, policy: CachePolicy) -> Result<()> {
        self.cache().set_policy(policy)
    }

    pub fn set_scheduler(&mut self, mode: SchedulerMode) -> Result<()> {
        let mut next = self.config.clone();
        next.scheduler = mode;
        next.validate()?;
        self.config = next;
        Ok(())
    }

    /// Current time on the engine clock, in seconds.
    pub fn now(&self) -> f64 {
        match &self.clock {
            Clock::Virtual { now, .. } => *now,
            Clock::Real { epoch, .. } => epoch.elapsed_secs(),
        }
    }

    fn advance(&mut self, secs: f64) {
        if let Clock::Virtual { now, .. } = &mut self.clock {
            *now += secs.max(0.0);
        }
    }

    /// Waits (or jumps, in virtual time) until `t`.
    pub fn advance_to(&mut self, t: f64) {
        match &mut self.clock {
            Clock::Virtual { now, .. } => *now = now.max(t),
            Clock::Real { epoch, .. } => {
                let wait = t - epoch.elapsed_secs();
                if wait > 0.0 {
                    std::thread::sleep(Duration::from_secs_f64(wait));
                }
            }
        }
    }

    fn size_of(&self) -> impl Fn(ClusterId) -> u64 + '_ {
        |id| self.store.byte_size(id).unwrap_or(0)
    }

    fn validate_batch(&self, requests: &[SearchRequest]) -> Result<()> {
        let mut seen = HashSet::new();
        for r in requests {
            if r.embedding.dim() != self.index.dim() {
                return Err(Error::invalid(format!(
                    "query {} has dim {}, index has {}",
                    r.query_id,
                    r.embedding.dim(),
                    self.index.dim()
                )));
            }
            if r.k == 0 {
                return Err(Error::invalid(format!("query {}: k must be positive", r.query_id)));
            }
            if !seen.insert(r.query_id) {
                return Err(Error::invalid(format!("query id {} repeated in batch", r.query_id)));
            }
        }
        Ok(())
    }

    /// Runs one batch released at `release_time` (or now, if later).
    pub fn submit_batch(&mut self, requests: &[SearchRequest], release_time: f64) -> Result<BatchOutcome> {
        self.validate_batch(requests)?;
        self.advance_to(release_time);
        let started_at = self.now();

        let k = self.index.num_clusters();
        let records = requests
            .iter()
            .map(|r| {
                let probe = self.index.probe_with(r.embedding.as_slice(), r.nprobe, self.config.metric)?;
                QueryRecord::new(r.query_id, r.arrival_time, probe, k)
            })
            .collect::<Result<Vec<_>>>()?;

        let (groups, grouping_secs) = match self.config.scheduler {
            SchedulerMode::Call => {
                let sw = Stopwatch::start();
                let groups = form_groups_with(&records, self.config.theta, self.config.kernel)?;
                let secs = match &self.clock {
                    Clock::Virtual { costs, .. } => {
                        let n = records.len() as f64;
                        costs.group_per_pair * n * (n - 1.0) / 2.0
                    }
                    Clock::Real { .. } => sw.elapsed_secs(),
                };
                (groups, secs)
            }
            SchedulerMode::BaselineFifoOrder => {
                let all = QueryGroup {
                    group_id: 0,
                    members: records.iter().map(|r| r.query_id).collect(),
                    member_indices: (0..records.len()).collect(),
                    union_clusters: Vec::new(),
                    prefetch: None,
                };
                (if records.is_empty() { Vec::new() } else { vec![all] }, 0.0)
            }
        };
        self.advance(grouping_secs);
        let batch = reorder_batch(groups, &records)?;

        let by_id: HashMap<QueryId, usize> = requests.iter().enumerate().map(|(i, r)| (r.query_id, i)).collect();
        let group_of: HashMap<QueryId, usize> = batch
            .groups
            .iter()
            .flat_map(|g| g.members.iter().map(move |q| (*q, g.group_id)))
            .collect();

        if self.config.search_threads > 1 {
            return self.run_parallel(requests, &records, batch, &by_id, &group_of, grouping_secs, started_at);
        }

        let mut tracker = self
            .config
            .group_prefetch()
            .then(|| PrefetchTracker::new(&batch.groups, self.config.prefetch_trigger));
        let mut pending: HashMap<usize, PendingHead> = HashMap::new();
        let mut timeouts = 0;
        let mut peak = 0;
        let mut results = Vec::with_capacity(requests.len());

        for (exec_index, qid) in batch.order.iter().enumerate() {
            let req = &requests[by_id[qid]];
            let rec = &records[by_id[qid]];
            let gid = group_of[qid];
            let group = &batch.groups[gid];
            let head = group.members[0] == *qid;
            let start = self.now();

            self.poll_background();
            self.periodic_prefetch();
            let window_now = self.now();
            self.cache().window_tick(window_now);

            let mut await_secs = 0.0;
            let mut timed_out = false;
            if head {
                if let Some(p) = pending.remove(&gid) {
                    let (w, t) = self.await_head(p);
                    await_secs = w;
                    timed_out = t;
                    timeouts += usize::from(t);
                }
                if let Some(tr) = tracker.as_mut() {
                    if let Some(prev) = tr.predecessor(gid).map(|g| g.group_id) {
                        tr.mark_complete(prev)?;
                    }
                }
            }

            if let Some(tr) = tracker.as_mut() {
                if let PrefetchAction::Fire(m) = tr.on_query_dispatch(*qid, gid)? {
                    let own: HashSet<ClusterId> = rec.cluster_set.iter().copied().collect();
                    let ids: Vec<ClusterId> = {
                        let c = self.cache();
                        m.fqset.iter().copied().filter(|id| !c.contains(*id) && !own.contains(id)).collect()
                    };
                    let wave = self.fire_wave(&ids)?;
                    pending.insert(
                        gid + 1,
                        PendingHead {
                            fqset: m.fqset.clone(),
                            ids: ids.into_iter().collect(),
                            waves: vec![wave],
                        },
                    );
                }
            }

            let dispatched = self.now();
            let mut result = self.execute(req, rec, gid, exec_index, head)?;
            peak = peak.max(result.1);
            let r = &mut result.0;
            r.prefetch_timed_out = timed_out;
            r.timing.await_prefetch = await_secs;
            let done = self.now();
            r.started_at = start;
            r.completed_at = done;
            r.timing.search_latency = done - start;
            r.timing.total_latency = done - req.arrival_time;
            debug_assert!(done - dispatched >= 0.0);

            if let Some(tr) = tracker.as_mut() {
                match tr.on_query_complete(*qid, gid)? {
                    PrefetchAction::Fire(m) => {
                        let ids: Vec<ClusterId> = {
                            let c = self.cache();
                            m.fqset.iter().copied().filter(|id| !c.contains(*id)).collect()
                        };
                        let wave = self.fire_wave(&ids)?;
                        pending.insert(
                            gid + 1,
                            PendingHead {
                                fqset: m.fqset.clone(),
                                ids: ids.into_iter().collect(),
                                waves: vec![wave],
                            },
                        );
                    }
                    PrefetchAction::Reconcile(m) => {
                        let ids: Vec<ClusterId> = {
                            let c = self.cache();
                            let p = pending.get(&(gid + 1));
                            m.fqset
                                .iter()
                                .copied()
                                .filter(|id| !c.contains(*id) && !p.is_some_and(|p| p.ids.contains(id)))
                                .collect()
                        };
                        if !ids.is_empty() {
                            let wave = self.fire_wave(&ids)?;
                            if let Some(p) = pending.get_mut(&(gid + 1)) {
                                p.ids.extend(ids);
                                p.waves.push(wave);
                            }
                        }
                    }
                    PrefetchAction::None => {}
                }
            }
            results.push(result.0);
        }

        let prefetches_issued = tracker.as_ref().map_or(0, PrefetchTracker::prefetches_issued);
        if let Some(tr) = &tracker {
            debug_assert!(tr.groups().iter().all(|g| g.prefetch_state != PrefetchState::InFlight
                || g.group_id + 1 == batch.groups.len()));
        }
        Ok(BatchOutcome {
            results,
            order: batch.order,
            groups: batch.groups,
            grouping_secs,
            prefetches_issued,
            prefetch_timeouts: timeouts,
            started_at,
            finished_at: self.now(),
            peak_partial_bytes: peak,
        })
    }

    fn fire_wave(&mut self, ids: &[ClusterId]) -> Result<Wave> {
        let missing: Vec<(ClusterId, u64)> = ids.iter().map(|id| (*id, self.size_of()(*id))).collect();
        let plan = make_plan(self.config.ordering(), &missing, self.config.threads)?;
        let store = self.store.clone();
        let size_of = |id| store.byte_size(id).unwrap_or(0);
        Ok(match &mut self.clock {
            Clock::Virtual { now, pool, costs } => {
                let handle = pool.prefetch(*now, &plan, size_of, &costs.io);
                let data = read_all(store.as_ref(), &handle.costs);
                Wave::Virtual { handle, data }
            }
            Clock::Real { pool, .. } => Wave::Real(pool.submit(&plan, Priority::Prefetch)),
        })
    }

    /// Blocks until the head's prefetch lands or the timeout passes, then
    /// admits whatever arrived. Returns (seconds waited, timed out).
    fn await_head(&mut self, p: PendingHead) -> (f64, bool) {
        let timeout = self.config.await_timeout;
        let mut loaded = Vec::new();
        let mut timed_out = false;
        let waited;
        match &mut self.clock {
            Clock::Virtual { now, pool, .. } => {
                let deadline = *now + timeout;
                let mut until = *now;
                for w in p.waves {
                    if let Wave::Virtual { handle, data } = w {
                        let end = pool.wave_end(&handle);
                        if end <= deadline {
                            until = until.max(end);
                            loaded.extend(data);
                        } else {
                            timed_out = true;
                        }
                    }
                }
                if timed_out {
                    until = deadline;
                }
                waited = until - *now;
                *now = until;
            }
            Clock::Real { .. } => {
                let sw = Stopwatch::start();
                for w in p.waves {
                    if let Wave::Real(ticket) = w {
                        let left = (timeout - sw.elapsed_secs()).max(0.0);
                        match ticket.wait_timeout(Duration::from_secs_f64(left)) {
                            Ok(out) => {
                                for (id, e) in out.failed {
                                    log::warn!("prefetch of cluster {id} failed: {e}");
                                }
                                loaded.extend(out.loaded);
                            }
                            Err(_) => timed_out = true,
                        }
                    }
                }
                waited = sw.elapsed_secs();
            }
        }
        admit_prefetched(&mut self.cache(), &p.fqset, loaded);
        (waited, timed_out)
    }

    fn poll_background(&mut self) {
        let now = self.now();
        let mut ready = Vec::new();
        self.background.retain_mut(|b| match b {
            Background::Virtual { ready_at, data } if *ready_at <= now => {
                ready.append(data);
                false
            }
            Background::Real(t) if t.is_done() => {
                let t = std::mem::replace(t, LoadTicket::done());
                ready.extend(t.wait().loaded);
                false
            }
            _ => true,
        });
        if !ready.is_empty() {
            let ids: Vec<ClusterId> = ready.iter().map(|(d, _)| d.cluster_id).collect();
            admit_prefetched(&mut self.cache(), &ids, ready);
        }
    }

    fn periodic_prefetch(&mut self) {
        let Some(p) = self.config.periodic_prefetch else { return };
        let now = self.now();
        if now < self.next_periodic {
            return;
        }
        while self.next_periodic <= now {
            self.next_periodic += p.period;
        }
        let ids: Vec<ClusterId> = {
            let c = self.cache();
            let ranked = match p.ranking {
                PeriodicRanking::Frequency => c.frequency_ranking(p.degree),
                PeriodicRanking::LoadCost => c.load_cost_ranking(p.degree),
            };
            ranked.into_iter().filter(|id| !c.contains(*id)).collect()
        };
        if ids.is_empty() {
            return;
        }
        let missing: Vec<(ClusterId, u64)> = ids.iter().map(|id| (*id, self.size_of()(*id))).collect();
        let Ok(plan) = make_plan(self.config.ordering(), &missing, self.config.threads) else { return };
        let store = self.store.clone();
        let bg = match &mut self.clock {
            Clock::Virtual { now, pool, costs } => {
                let handle = pool.prefetch(*now, &plan, |id| store.byte_size(id).unwrap_or(0), &costs.io);
                Background::Virtual {
                    ready_at: pool.wave_end(&handle),
                    data: read_all(store.as_ref(), &handle.costs),
                }
            }
            Clock::Real { pool, .. } => Background::Real(pool.submit(&plan, Priority::Prefetch)),
        };
        self.background.push(bg);
    }

    fn demand_load(&mut self, misses: &[ClusterId]) -> Result<DemandLoad> {
        let missing: Vec<(ClusterId, u64)> = misses.iter().map(|id| (*id, self.size_of()(*id))).collect();
        let plan = make_plan(self.config.ordering(), &missing, self.config.threads)?;
        let store = self.store.clone();
        Ok(match &mut self.clock {
            Clock::Virtual { now, pool, costs } => {
                let (timing, per_cluster) = pool.demand(*now, &plan, |id| store.byte_size(id).unwrap_or(0), &costs.io);
                let mut loaded = Vec::with_capacity(per_cluster.len());
                let mut failed = Vec::new();
                for (id, c) in per_cluster {
                    match store.read(id) {
                        Ok(d) => loaded.push((d, c)),
                        Err(e) => failed.push((id, e)),
                    }
                }
                let secs = timing.makespan;
                *now += secs;
                DemandLoad {
                    loaded,
                    failed,
                    timing,
                    plan,
                    secs,
                }
            }
            Clock::Real { pool, .. } => real_load(pool, plan),
        })
    }

    /// Lookup, load, build and search for one query. Returns the result and
    /// the size of its partial index.
    fn execute(
        &mut self,
        req: &SearchRequest,
        rec: &QueryRecord,
        group_id: usize,
        exec_index: usize,
        head: bool,
    ) -> Result<(SearchResult, u64)> {
        let virtual_costs = match &self.clock {
            Clock::Virtual { costs, .. } => Some(*costs),
            Clock::Real { .. } => None,
        };
        let mut timing = StageTiming::default();

        let sw = Stopwatch::start();
        let lookup = self.cache().lookup_and_pin(&rec.cluster_set);
        timing.cache_lookup = match virtual_costs {
            Some(c) => c.lookup_per_cluster * rec.cluster_set.len() as f64,
            None => sw.elapsed_secs(),
        };
        self.advance(timing.cache_lookup);

        let load = self.demand_load(&lookup.misses)?;
        timing.load = load.secs;
        let bytes_read = load.loaded.iter().map(|(d, _)| d.encoded_len()).sum();
        let error = load
            .failed
            .first()
            .map(|(id, e)| format!("cluster {id}: {e}"));
        let loaded_data: HashMap<ClusterId, Arc<ClusterData>> =
            load.loaded.iter().map(|(d, _)| (d.cluster_id, d.clone())).collect();
        let hit_data: Vec<Arc<ClusterData>> = {
            let mut c = self.cache();
            let hits: Vec<_> = lookup.hits.iter().filter_map(|id| c.get(*id)).collect();
            if !load.loaded.is_empty() {
                if let Err(e) = c.admit(load.loaded, AdmitOrigin::Demand) {
                    log::warn!("query {}: loaded clusters not cached: {e}", req.query_id);
                }
            }
            hits
        };

        let mut result = SearchResult {
            query_id: req.query_id,
            group_id,
            exec_index,
            head_of_group: head,
            neighbors: Vec::new(),
            timing,
            cluster_hits: lookup.hits.clone(),
            cluster_misses: lookup.misses.clone(),
            bytes_read,
            disk_bytes_total: 0,
            load_plan: load.plan.order,
            load_timing: load.timing,
            prefetch_timed_out: false,
            arrival_time: req.arrival_time,
            started_at: 0.0,
            completed_at: 0.0,
            error,
        };
        let mut partial_bytes = 0;
        if result.error.is_none() {
            // probe order, so candidate order does not depend on cache state
            let clusters: Vec<Arc<ClusterData>> = rec
                .cluster_set
                .iter()
                .map(|id| {
                    loaded_data
                        .get(id)
                        .cloned()
                        .or_else(|| hit_data.iter().find(|d| d.cluster_id == *id).cloned())
                        .ok_or_else(|| Error::Protocol(format!("cluster {id} neither hit nor loaded")))
                })
                .collect::<Result<_>>()?;
            let sw = Stopwatch::start();
            let partial = PartialIndex::build(self.index.dim(), &clusters)?;
            let built = sw.elapsed_secs();
            let sw = Stopwatch::start();
            result.neighbors = topk_search(req.embedding.as_slice(), &partial, req.k, self.config.metric);
            let searched = sw.elapsed_secs();
            partial_bytes = partial.bytes();
            match virtual_costs {
                Some(c) => {
                    result.timing.index_build = c.build_per_vector * partial.len() as f64;
                    result.timing.search = c.distance_per_dim * (partial.len() * self.index.dim()) as f64;
                }
                None => {
                    result.timing.index_build = built;
                    result.timing.search = searched;
                }
            }
            self.advance(result.timing.index_build + result.timing.search);
        }
        {
            let mut c = self.cache();
            c.unpin(&lookup.hits);
            result.disk_bytes_total = c.stats_ref().bytes_read_from_disk;
        }
        Ok((result, partial_bytes))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_parallel(
        &mut self,
        requests: &[SearchRequest],
        records: &[QueryRecord],
        batch: crate::grouping::ScheduledBatch,
        by_id: &HashMap<QueryId, usize>,
        group_of: &HashMap<QueryId, usize>,
        grouping_secs: f64,
        started_at: f64,
    ) -> Result<BatchOutcome> {
        let Clock::Real { epoch, pool } = &self.clock else {
            return Err(Error::invalid("multiple search threads need the real clock"));
        };
        let next = AtomicUsize::new(0);
        let live = AtomicU64::new(0);
        let peak = AtomicU64::new(0);
        let slots: Mutex<Vec<Option<SearchResult>>> = Mutex::new(vec![None; batch.order.len()]);
        let heads: HashSet<QueryId> = batch.groups.iter().map(|g| g.members[0]).collect();
        let ordering = self.config.ordering();
        let threads = self.config.threads;
        let metric = self.config.metric;
        let dim = self.index.dim();
        let cache = &self.cache;
        let store = self.store.as_ref();

        std::thread::scope(|s| {
            for _ in 0..self.config.search_threads {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, AtomicOrdering::Relaxed);
                    let Some(qid) = batch.order.get(i) else { break };
                    let req = &requests[by_id[qid]];
                    let rec = &records[by_id[qid]];
                    let start = epoch.elapsed_secs();
                    let mut timing = StageTiming::default();

                    let sw = Stopwatch::start();
                    let lookup = cache.lock().expect("cache poisoned").lookup_and_pin(&rec.cluster_set);
                    timing.cache_lookup = sw.elapsed_secs();

                    let missing: Vec<(ClusterId, u64)> = lookup
                        .misses
                        .iter()
                        .map(|id| (*id, store.byte_size(*id).unwrap_or(0)))
                        .collect();
                    let plan = make_plan(ordering, &missing, threads).expect("threads validated");
                    let load = real_load(pool, plan);
                    timing.load = load.secs;
                    let bytes_read = load.loaded.iter().map(|(d, _)| d.encoded_len()).sum();
                    let error = load.failed.first().map(|(id, e)| format!("cluster {id}: {e}"));
                    let mut by_cluster: HashMap<ClusterId, Arc<ClusterData>> =
                        load.loaded.iter().map(|(d, _)| (d.cluster_id, d.clone())).collect();
                    {
                        let mut c = cache.lock().expect("cache poisoned");
                        for id in &lookup.hits {
                            if let Some(d) = c.get(*id) {
                                by_cluster.insert(*id, d);
                            }
                        }
                        if !load.loaded.is_empty() {
                            if let Err(e) = c.admit(load.loaded, AdmitOrigin::Demand) {
                                log::warn!("query {}: loaded clusters not cached: {e}", req.query_id);
                            }
                        }
                    }

                    let mut neighbors = Vec::new();
                    if error.is_none() {
                        let clusters: Vec<Arc<ClusterData>> =
                            rec.cluster_set.iter().filter_map(|id| by_cluster.get(id).cloned()).collect();
                        let sw = Stopwatch::start();
                        if let Ok(partial) = PartialIndex::build(dim, &clusters) {
                            timing.index_build = sw.elapsed_secs();
                            let bytes = partial.bytes();
                            let now_live = live.fetch_add(bytes, AtomicOrdering::SeqCst) + bytes;
                            peak.fetch_max(now_live, AtomicOrdering::SeqCst);
                            let sw = Stopwatch::start();
                            neighbors = topk_search(req.embedding.as_slice(), &partial, req.k, metric);
                            timing.search = sw.elapsed_secs();
                            live.fetch_sub(bytes, AtomicOrdering::SeqCst);
                        }
                    }
                    let disk_bytes_total = {
                        let mut c = cache.lock().expect("cache poisoned");
                        c.unpin(&lookup.hits);
                        c.stats_ref().bytes_read_from_disk
                    };
                    let done = epoch.elapsed_secs();
                    timing.search_latency = done - start;
                    timing.total_latency = done - req.arrival_time;
                    let r = SearchResult {
                        query_id: *qid,
                        group_id: group_of[qid],
                        exec_index: i,
                        head_of_group: heads.contains(qid),
                        neighbors,
                        timing,
                        cluster_hits: lookup.hits,
                        cluster_misses: lookup.misses,
                        bytes_read,
                        disk_bytes_total,
                        load_plan: load.plan.order,
                        load_timing: load.timing,
                        prefetch_timed_out: false,
                        arrival_time: req.arrival_time,
                        started_at: start,
                        completed_at: done,
                        error,
                    };
                    slots.lock().expect("results poisoned")[i] = Some(r);
                });
            }
        });

        let results = slots
            .into_inner()
            .expect("results poisoned")
            .into_iter()
            .map(|r| r.ok_or_else(|| Error::Protocol("search thread produced no result".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchOutcome {
            results,
            order: batch.order,
            groups: batch.groups,
            grouping_secs,
            prefetches_issued: 0,
            prefetch_timeouts: 0,
            started_at,
            finished_at: self.now(),
            peak_partial_bytes: peak.into_inner(),
        })
    }
}

fn real_load(pool: &LoaderPool, plan: LoadPlan) -> DemandLoad {
    let sw = Stopwatch::start();
    let out = pool.load(&plan);
    DemandLoad {
        loaded: out.loaded,
        failed: out.failed,
        timing: out.timing,
        plan,
        secs: sw.elapsed_secs(),
    }
}

fn read_all(store: &dyn ClusterStore, costs: &[(ClusterId, f64)]) -> Vec<(Arc<ClusterData>, f64)> {
    costs
        .iter()
        .filter_map(|(id, c)| match store.read(*id) {
            Ok(d) => Some((d, *c)),
            Err(e) => {
                log::warn!("prefetch of cluster {id} failed: {e}");
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn partial(rows: &[(u64, [f32; 1])]) -> PartialIndex {
        let vs = VectorSet::from_rows(1, rows.iter().map(|r| r.1)).unwrap();
        let c = ClusterData::new(0, rows.iter().map(|r| r.0).collect(), vs).unwrap();
        PartialIndex::build(1, &[Arc::new(c)]).unwrap()
    }

    #[test]
    fn topk_orders_by_distance_then_id() {
        let p = partial(&[(5, [1.0]), (2, [-1.0]), (9, [0.5]), (1, [3.0])]);
        let got = topk_search(&[0.0], &p, 3, Metric::L2);
        let ids: Vec<u64> = got.iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![9, 2, 5]);
        assert_eq!(got[0].distance, 0.25);
    }

    #[test]
    fn topk_short_and_empty() {
        let p = partial(&[(1, [1.0])]);
        assert_eq!(topk_search(&[0.0], &p, 5, Metric::L2).len(), 1);
        let empty = PartialIndex::build(1, &[]).unwrap();
        assert!(topk_search(&[0.0], &empty, 5, Metric::L2).is_empty());
    }

    #[test]
    fn scheduler_names_parse() {
        assert_eq!("call".parse::<SchedulerMode>().unwrap(), SchedulerMode::Call);
        assert_eq!(
            "baseline_fifo_order".parse::<SchedulerMode>().unwrap(),
            SchedulerMode::BaselineFifoOrder
        );
        assert!("x".parse::<SchedulerMode>().is_err());
    }

    #[test]
    fn config_rejects_parallel_virtual_search() {
        let cfg = EngineConfig {
            search_threads: 2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
