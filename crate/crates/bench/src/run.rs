//! `gen`, `build` and `run`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use call_core::cache::ClusterCache;
use call_core::clock::Stopwatch;
use call_core::embedding::{read_embeddings, write_embeddings, Embedding};
use call_core::engine::{SearchEngine, SearchRequest};
use call_core::index::{
    assign_vectors, train_kmeans_with, write_index, CentroidIndex, ClusterManifest, ClusterStore,
    DiskStore, KMeansConfig, MemoryStore, CENTROID_FILE,
};
use call_core::workload::{gen_traffic, read_trace, synth_corpus, synth_queries, write_trace, WorkloadTrace};

use crate::config::{BenchConfig, ClockKind};
use crate::error::{BenchError, Result};
use crate::report::{aggregate, write_all, BatchLog, ByteTotals, QueryLog, Report};

/// Writes a synthetic corpus to `corpus_path` and a trace to `trace_dir`.
/// Returns (corpus vectors, trace events).
pub fn cmd_gen(cfg: &BenchConfig) -> Result<(usize, usize)> {
    let params = cfg.corpus_params();
    let corpus = synth_corpus(&params)?;
    if let Some(dir) = cfg.corpus_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_embeddings(&cfg.corpus_path, &corpus)?;
    let arrivals = gen_traffic(&cfg.traffic_config())?;
    let queries = synth_queries(&params, arrivals.len(), &cfg.overlap_profile(), cfg.query_seed())?;
    let trace = WorkloadTrace::new(&arrivals, queries)?;
    write_trace(&trace, &cfg.trace_dir)?;
    log::info!(
        "wrote {} vectors to {} and {} events to {}",
        corpus.len(),
        cfg.corpus_path.display(),
        trace.len(),
        cfg.trace_dir.display()
    );
    Ok((corpus.len(), trace.len()))
}

/// Trains the centroids on the corpus file and writes the cluster files.
pub fn cmd_build(cfg: &BenchConfig) -> Result<ClusterManifest> {
    let corpus = read_embeddings(&cfg.corpus_path).map_err(BenchError::data)?;
    if corpus.dim() != cfg.dim {
        return Err(BenchError::Data(format!(
            "corpus {} has dim {}, config says {}",
            cfg.corpus_path.display(),
            corpus.dim(),
            cfg.dim
        )));
    }
    let kmeans = KMeansConfig {
        max_iterations: cfg.kmeans_iterations,
        ..KMeansConfig::default()
    };
    let index = train_kmeans_with(&corpus, cfg.clusters, cfg.seed, kmeans)?;
    let assignments = assign_vectors(&corpus, &index)?;
    let manifest = write_index(&corpus, &assignments, &index, &cfg.index_dir)?;
    log::info!(
        "built {} clusters over {} vectors in {}",
        manifest.num_clusters(),
        corpus.len(),
        cfg.index_dir.display()
    );
    Ok(manifest)
}

/// Index, store and trace for a run.
pub struct Artifacts {
    pub index: CentroidIndex,
    pub store: Arc<dyn ClusterStore>,
    pub trace: WorkloadTrace,
}

pub fn load_artifacts(cfg: &BenchConfig) -> Result<Artifacts> {
    let manifest = ClusterManifest::load(&cfg.index_dir).map_err(BenchError::data)?;
    let index = CentroidIndex::load(&cfg.index_dir.join(CENTROID_FILE)).map_err(BenchError::data)?;
    let trace = read_trace(&cfg.trace_dir).map_err(BenchError::data)?;
    if index.num_clusters() != cfg.clusters {
        return Err(BenchError::Data(format!(
            "index has {} clusters, config says {}",
            index.num_clusters(),
            cfg.clusters
        )));
    }
    if trace.queries.dim() != index.dim() {
        return Err(BenchError::Data(format!(
            "trace queries have dim {}, index has {}",
            trace.queries.dim(),
            index.dim()
        )));
    }
    // Virtual runs charge I/O from the cost model, so clusters can stay in memory.
    let store: Arc<dyn ClusterStore> = match cfg.clock {
        ClockKind::Virtual => Arc::new(MemoryStore::load(&manifest).map_err(BenchError::data)?),
        ClockKind::Real => Arc::new(DiskStore::new(manifest).with_direct_io(cfg.direct_io)),
    };
    Ok(Artifacts { index, store, trace })
}

pub fn make_engine(cfg: &BenchConfig, index: CentroidIndex, store: Arc<dyn ClusterStore>) -> Result<SearchEngine> {
    let cache = ClusterCache::new(cfg.cache_capacity(), cfg.cache_policy())?;
    Ok(SearchEngine::new(index, store, cache, cfg.engine_config())?)
}

/// Everything a replay produced.
#[derive(Debug, Clone)]
pub struct Replay {
    pub records: Vec<QueryLog>,
    pub batches: Vec<BatchLog>,
    pub bytes: ByteTotals,
    pub wall_secs: f64,
}

/// Feeds the trace to the engine in buffer windows.
///
/// A batch holds the arrivals of one window and is released at the window's
/// end. When the engine is still busy at that point, the batch is released
/// when it becomes free and takes everything that has arrived by then.
pub fn replay(engine: &mut SearchEngine, trace: &WorkloadTrace, cfg: &BenchConfig) -> Result<Replay> {
    let sw = Stopwatch::start();
    let w = cfg.buffer_window;
    let events = &trace.events;
    let mut records = Vec::with_capacity(events.len());
    let mut batches = Vec::new();
    let mut next = 0;
    let mut release = w;
    while next < events.len() {
        if events[next].t >= release {
            release = ((events[next].t / w).floor() + 1.0) * w;
        }
        release = release.max(engine.now());
        let end = next + events[next..].partition_point(|e| e.t < release);
        let requests = events[next..end]
            .iter()
            .map(|e| {
                let row = trace.queries.row(e.qid as usize);
                Ok(SearchRequest::new(e.qid, Embedding::new(row.to_vec())?, cfg.top_k, cfg.nprobe).at(e.t))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = engine.submit_batch(&requests, release)?;
        let batch = batches.len();
        records.extend(out.results.iter().map(|r| QueryLog::from_result(r, batch, cfg.warmup)));
        batches.push(BatchLog {
            batch,
            release,
            size: requests.len(),
            group_sizes: out.groups.iter().map(|g| g.members.len()).collect(),
            grouping_secs: out.grouping_secs,
            prefetches_issued: out.prefetches_issued,
            prefetch_timeouts: out.prefetch_timeouts,
            started_at: out.started_at,
            finished_at: out.finished_at,
        });
        next = end;
        release = ((release / w).floor() + 1.0) * w;
    }
    let stats = engine.cache().stats();
    Ok(Replay {
        records,
        batches,
        bytes: ByteTotals {
            total: stats.bytes_read_from_disk,
            demand: stats.bytes_read_demand,
            prefetch: stats.bytes_read_prefetch,
        },
        wall_secs: sw.elapsed_secs(),
    })
}

pub fn config_map(cfg: &BenchConfig) -> BTreeMap<String, String> {
    cfg.pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Replays with already loaded artifacts and writes the report files to
/// `out_dir`.
pub fn run_with(cfg: &BenchConfig, variant: &str, artifacts: &Artifacts, out_dir: &Path) -> Result<Report> {
    let mut engine = make_engine(cfg, artifacts.index.clone(), artifacts.store.clone())?;
    let replay = replay(&mut engine, &artifacts.trace, cfg)?;
    let report = aggregate(
        variant,
        config_map(cfg),
        cfg.warmup,
        &replay.records,
        &replay.batches,
        replay.bytes,
        replay.wall_secs,
    );
    write_all(out_dir, &report, &replay.records)?;
    Ok(report)
}

pub fn cmd_run(cfg: &BenchConfig) -> Result<Report> {
    let artifacts = load_artifacts(cfg)?;
    let variant = format!("{}_{}", cfg.scheduler.name(), cfg.policy.name());
    run_with(cfg, &variant, &artifacts, &cfg.output_dir)
}
