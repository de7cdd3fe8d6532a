//! Grouping wall time of the bitmap and hash-set similarity kernels.

use std::path::Path;

use call_core::clock::Stopwatch;
use call_core::grouping::{form_groups_with, QueryGroup, QueryRecord, SimilarityKernel};
use call_core::index::{CentroidIndex, CENTROID_FILE};
use call_core::workload::synth_queries;
use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;
use crate::error::{BenchError, Result};

pub const GROUPTIME_FILE: &str = "grouptime.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTimeRow {
    pub n: usize,
    pub bitmap_secs: f64,
    pub hash_secs: f64,
    pub groups: usize,
    /// Both kernels produced the same partition.
    pub identical: bool,
}

/// Probes `n` synthetic queries into grouping records.
pub fn batch_records(cfg: &BenchConfig, index: &CentroidIndex, n: usize) -> Result<Vec<QueryRecord>> {
    let queries = synth_queries(&cfg.corpus_params(), n, &cfg.overlap_profile(), cfg.query_seed())?;
    queries
        .rows()
        .enumerate()
        .map(|(i, q)| {
            let set = index.probe_with(q, cfg.nprobe, cfg.metric)?;
            Ok(QueryRecord::new(i as u64, i as f64, set, index.num_clusters())?)
        })
        .collect()
}

fn timed(records: &[QueryRecord], theta: f64, kernel: SimilarityKernel, repeats: usize) -> Result<(f64, Vec<QueryGroup>)> {
    let mut best = f64::INFINITY;
    let mut groups = Vec::new();
    for _ in 0..repeats.max(1) {
        let sw = Stopwatch::start();
        groups = form_groups_with(records, theta, kernel)?;
        best = best.min(sw.elapsed_secs());
    }
    Ok((best, groups))
}

/// Best of `repeats` wall times per kernel for every batch size.
pub fn grouptime(cfg: &BenchConfig, index: &CentroidIndex, sizes: &[usize], repeats: usize) -> Result<Vec<GroupTimeRow>> {
    sizes
        .iter()
        .map(|&n| {
            let records = batch_records(cfg, index, n)?;
            let (bitmap_secs, a) = timed(&records, cfg.theta, SimilarityKernel::Bitmap, repeats)?;
            let (hash_secs, b) = timed(&records, cfg.theta, SimilarityKernel::HashSet, repeats)?;
            let members = |gs: &[QueryGroup]| gs.iter().map(|g| g.members.clone()).collect::<Vec<_>>();
            Ok(GroupTimeRow {
                n,
                bitmap_secs,
                hash_secs,
                groups: a.len(),
                identical: members(&a) == members(&b),
            })
        })
        .collect()
}

pub fn write_rows(path: &Path, rows: &[GroupTimeRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_table(rows: &[GroupTimeRow]) -> String {
    let mut s = format!("{:>6} {:>12} {:>12} {:>7} {:>9}\n", "n", "bitmap_s", "hash_s", "groups", "identical");
    for r in rows {
        s += &format!(
            "{:>6} {:>12.4} {:>12.4} {:>7} {:>9}\n",
            r.n, r.bitmap_secs, r.hash_secs, r.groups, r.identical
        );
    }
    s
}

pub fn cmd_grouptime(cfg: &BenchConfig, sizes: &[usize], repeats: usize) -> Result<Vec<GroupTimeRow>> {
    let index = CentroidIndex::load(&cfg.index_dir.join(CENTROID_FILE)).map_err(BenchError::data)?;
    let rows = grouptime(cfg, &index, sizes, repeats)?;
    write_rows(&cfg.output_dir.join(GROUPTIME_FILE), &rows)?;
    Ok(rows)
}
