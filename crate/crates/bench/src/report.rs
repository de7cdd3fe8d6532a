//! Per-query records, aggregates and the report files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use call_core::engine::{SearchResult, StageTiming};
use call_core::index::ClusterId;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

pub const REPORT_FILE: &str = "report.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const TIMESERIES_FILE: &str = "timeseries.csv";

/// Defaults the reader should know were chosen here rather than measured.
pub const ASSUMPTIONS: &[&str] = &[
    "weibull_shape defaults to 1.0 (exponential inter-arrivals); the source gives no value",
    "burst length is uniform in [burst_min, burst_max] seconds, default [1, 5]",
    "the burst coin is flipped every burst_interval seconds, default 1",
    "normalized latencies divide by the baseline_variant run at equal traffic",
    "virtual-time runs charge I/O as bytes / io_throughput + io_file_overhead per file",
];

/// One executed query as written to `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLog {
    pub query_id: u64,
    pub batch: usize,
    pub group_id: usize,
    pub exec_index: usize,
    pub head_of_group: bool,
    /// Arrived before the warm-up ended; kept out of aggregates.
    pub warmup: bool,
    pub arrival: f64,
    pub started_at: f64,
    pub completed_at: f64,
    pub hits: Vec<ClusterId>,
    pub misses: Vec<ClusterId>,
    pub load_plan: Vec<ClusterId>,
    /// Cluster ids each loader worker handled for this query.
    pub load_threads: Vec<Vec<ClusterId>>,
    pub thread_seconds: Vec<f64>,
    pub load_makespan: f64,
    pub bytes_read: u64,
    pub disk_bytes_total: u64,
    pub neighbors: Vec<u64>,
    pub distances: Vec<f32>,
    pub timing: StageTiming,
    pub prefetch_timed_out: bool,
    pub error: Option<String>,
}

impl QueryLog {
    pub fn from_result(r: &SearchResult, batch: usize, warmup: f64) -> Self {
        QueryLog {
            query_id: r.query_id,
            batch,
            group_id: r.group_id,
            exec_index: r.exec_index,
            head_of_group: r.head_of_group,
            warmup: r.arrival_time < warmup,
            arrival: r.arrival_time,
            started_at: r.started_at,
            completed_at: r.completed_at,
            hits: r.cluster_hits.clone(),
            misses: r.cluster_misses.clone(),
            load_plan: r.load_plan.clone(),
            load_threads: r.load_timing.threads.iter().map(|t| t.ids.clone()).collect(),
            thread_seconds: r.load_timing.threads.iter().map(|t| t.seconds).collect(),
            load_makespan: r.load_timing.makespan,
            bytes_read: r.bytes_read,
            disk_bytes_total: r.disk_bytes_total,
            neighbors: r.neighbors.iter().map(|n| n.id).collect(),
            distances: r.neighbors.iter().map(|n| n.distance).collect(),
            timing: r.timing,
            prefetch_timed_out: r.prefetch_timed_out,
            error: r.error.clone(),
        }
    }

    /// Fields decided by scheduling logic alone, without timings.
    pub fn logical(&self) -> LogicalRecord {
        LogicalRecord {
            query_id: self.query_id,
            batch: self.batch,
            group_id: self.group_id,
            exec_index: self.exec_index,
            hits: self.hits.clone(),
            misses: self.misses.clone(),
            load_plan: self.load_plan.clone(),
            load_threads: self.load_threads.clone(),
            neighbors: self.neighbors.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogicalRecord {
    pub query_id: u64,
    pub batch: usize,
    pub group_id: usize,
    pub exec_index: usize,
    pub hits: Vec<ClusterId>,
    pub misses: Vec<ClusterId>,
    pub load_plan: Vec<ClusterId>,
    pub load_threads: Vec<Vec<ClusterId>>,
    pub neighbors: Vec<u64>,
}

/// One replayed batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub batch: usize,
    pub release: f64,
    pub size: usize,
    pub group_sizes: Vec<usize>,
    pub grouping_secs: f64,
    pub prefetches_issued: usize,
    pub prefetch_timeouts: usize,
    pub started_at: f64,
    pub finished_at: f64,
}

/// Nearest-rank percentile: the smallest value with at least `p` percent of
/// the population at or below it. `sorted` must be ascending.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Percentiles {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub p100: f64,
}

impl Percentiles {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Percentiles::default();
        }
        v.sort_by(f64::total_cmp);
        let at = |p| nearest_rank(&v, p).unwrap_or(0.0);
        Percentiles {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: at(50.0),
            p95: at(95.0),
            p99: at(99.0),
            p100: at(100.0),
        }
    }

    pub fn ratio(&self, base: &Percentiles) -> Percentiles {
        let r = |a: f64, b: f64| if b > 0.0 { a / b } else { f64::NAN };
        Percentiles {
            mean: r(self.mean, base.mean),
            p50: r(self.p50, base.p50),
            p95: r(self.p95, base.p95),
            p99: r(self.p99, base.p99),
            p100: r(self.p100, base.p100),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupingSummary {
    pub batches: usize,
    pub mean_batch_size: f64,
    pub mean_groups: f64,
    pub mean_group_size: f64,
    pub grouping_secs: Percentiles,
    pub per_batch: Vec<BatchLog>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoadSummary {
    /// Queries that loaded at least one cluster.
    pub loads: usize,
    pub makespan: Percentiles,
    /// Mean of slowest-worker time over mean worker time, per load.
    pub mean_imbalance: f64,
    /// Total seconds each worker spent on demand loads.
    pub thread_busy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variant: String,
    pub assumptions: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub queries_total: usize,
    pub queries_measured: usize,
    pub warmup: f64,
    pub hit_ratio: f64,
    pub hits: u64,
    pub misses: u64,
    pub search_latency: Percentiles,
    pub total_latency: Percentiles,
    pub bytes_read_total: u64,
    pub bytes_read_demand: u64,
    pub bytes_read_prefetch: u64,
    /// Share of measured group heads (after each batch's first group) that
    /// found every cluster resident.
    pub head_hit_rate: Option<f64>,
    pub heads_measured: usize,
    pub grouping: GroupingSummary,
    pub load: LoadSummary,
    pub prefetches_issued: usize,
    pub prefetch_timeouts: usize,
    pub errors: usize,
    pub wall_secs: f64,
}

/// Cache byte counters at the end of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ByteTotals {
    pub total: u64,
    pub demand: u64,
    pub prefetch: u64,
}

pub fn aggregate(
    variant: &str,
    config: BTreeMap<String, String>,
    warmup: f64,
    records: &[QueryLog],
    batches: &[BatchLog],
    bytes: ByteTotals,
    wall_secs: f64,
) -> Report {
    let measured: Vec<&QueryLog> = records.iter().filter(|r| !r.warmup).collect();
    let hits: u64 = measured.iter().map(|r| r.hits.len() as u64).sum();
    let misses: u64 = measured.iter().map(|r| r.misses.len() as u64).sum();

    let heads: Vec<&&QueryLog> = measured
        .iter()
        .filter(|r| r.head_of_group && r.exec_index > 0)
        .collect();
    let head_hits = heads.iter().filter(|r| r.misses.is_empty()).count();

    let loads: Vec<&&QueryLog> = measured.iter().filter(|r| !r.load_plan.is_empty()).collect();
    let workers = loads.iter().map(|r| r.thread_seconds.len()).max().unwrap_or(0);
    let mut thread_busy = vec![0.0; workers];
    let mut imbalance = 0.0;
    for r in &loads {
        for (w, s) in r.thread_seconds.iter().enumerate() {
            thread_busy[w] += s;
        }
        let mean = r.thread_seconds.iter().sum::<f64>() / r.thread_seconds.len().max(1) as f64;
        if mean > 0.0 {
            imbalance += r.load_makespan / mean;
        }
    }

    let nb = batches.len().max(1) as f64;
    let group_count: usize = batches.iter().map(|b| b.group_sizes.len()).sum();
    let batched: usize = batches.iter().map(|b| b.size).sum();

    Report {
        variant: variant.to_string(),
        assumptions: ASSUMPTIONS.iter().map(|s| s.to_string()).collect(),
        config,
        queries_total: records.len(),
        queries_measured: measured.len(),
        warmup,
        hit_ratio: hits as f64 / (hits + misses).max(1) as f64,
        hits,
        misses,
        search_latency: Percentiles::of(measured.iter().map(|r| r.timing.search_latency)),
        total_latency: Percentiles::of(measured.iter().map(|r| r.timing.total_latency)),
        bytes_read_total: bytes.total,
        bytes_read_demand: bytes.demand,
        bytes_read_prefetch: bytes.prefetch,
        head_hit_rate: (!heads.is_empty()).then(|| head_hits as f64 / heads.len() as f64),
        heads_measured: heads.len(),
        grouping: GroupingSummary {
            batches: batches.len(),
            mean_batch_size: batched as f64 / nb,
            mean_groups: group_count as f64 / nb,
            mean_group_size: batched as f64 / group_count.max(1) as f64,
            grouping_secs: Percentiles::of(batches.iter().map(|b| b.grouping_secs)),
            per_batch: batches.to_vec(),
        },
        load: LoadSummary {
            loads: loads.len(),
            makespan: Percentiles::of(loads.iter().map(|r| r.load_makespan)),
            mean_imbalance: imbalance / loads.len().max(1) as f64,
            thread_busy,
        },
        prefetches_issued: batches.iter().map(|b| b.prefetches_issued).sum(),
        prefetch_timeouts: batches.iter().map(|b| b.prefetch_timeouts).sum(),
        errors: records.iter().filter(|r| r.error.is_some()).count(),
        wall_secs,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| BenchError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn write_records(path: &Path, records: &[QueryLog]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| BenchError::Runtime(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<QueryLog>> {
    let file = File::open(path).map_err(|e| BenchError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(BenchError::data)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| BenchError::Data(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct SeriesRow {
    index: usize,
    query_id: u64,
    arrival: f64,
    warmup: bool,
    hit_ratio: f64,
    cumulative_hit_ratio: f64,
    disk_bytes_total: u64,
    search_latency: f64,
    total_latency: f64,
}

/// One row per executed query, in execution order.
pub fn write_timeseries(path: &Path, records: &[QueryLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let (mut hits, mut lookups) = (0usize, 0usize);
    for (index, r) in records.iter().enumerate() {
        let n = r.hits.len() + r.misses.len();
        hits += r.hits.len();
        lookups += n;
        w.serialize(SeriesRow {
            index,
            query_id: r.query_id,
            arrival: r.arrival,
            warmup: r.warmup,
            hit_ratio: if n == 0 { 1.0 } else { r.hits.len() as f64 / n as f64 },
            cumulative_hit_ratio: if lookups == 0 { 1.0 } else { hits as f64 / lookups as f64 },
            disk_bytes_total: r.disk_bytes_total,
            search_latency: r.timing.search_latency,
            total_latency: r.timing.total_latency,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.json`, `records.jsonl` and `timeseries.csv` into `dir`.
pub fn write_all(dir: &Path, report: &Report, records: &[QueryLog]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(REPORT_FILE), report)?;
    write_records(&dir.join(RECORDS_FILE), records)?;
    write_timeseries(&dir.join(TIMESERIES_FILE), records)
}
