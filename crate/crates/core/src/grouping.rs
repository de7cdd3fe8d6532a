//! Context-aware query grouping.
//!
//! Each query's probed cluster set becomes a K-bit bitmap. Pairwise Jaccard
//! similarity is `popcount(a & b) / (|a| + |b| - popcount(a & b))`, computed
//! word by word with no per-cluster branching. Queries are then merged by
//! complete-linkage agglomerative clustering until no two groups have every
//! cross pair at similarity `>= theta`, so each group satisfies the pairwise
//! threshold for all of its members.
//!
//! A hash-set implementation of the same similarity is kept as an oracle and
//! as the slow path for timing comparisons.

use std::collections::{HashMap, HashSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::ClusterId;

pub type QueryId = u64;

/// Default similarity threshold. A Jaccard *distance* threshold of 0.5 is the
/// same cut, since `1 - 0.5 = 0.5`.
pub const DEFAULT_THETA: f64 = 0.5;

/// Fixed-width K-bit set of cluster ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClusterBitmap {
    words: Vec<u64>,
    k: usize,
}

impl ClusterBitmap {
    pub fn empty(k: usize) -> Self {
        ClusterBitmap {
            words: vec![0; k.div_ceil(64)],
            k,
        }
    }

    pub fn from_ids(k: usize, ids: &[ClusterId]) -> Result<Self> {
        let mut bm = ClusterBitmap::empty(k);
        for &id in ids {
            if id as usize >= k {
                return Err(Error::invalid(format!("cluster id {id} outside 0..{k}")));
            }
            bm.words[id as usize / 64] |= 1 << (id % 64);
        }
        Ok(bm)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn count(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn contains(&self, id: ClusterId) -> bool {
        (id as usize) < self.k && self.words[id as usize / 64] >> (id % 64) & 1 == 1
    }

    pub fn ids(&self) -> Vec<ClusterId> {
        (0..self.k as ClusterId).filter(|id| self.contains(*id)).collect()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    fn intersection_count(&self, other: &ClusterBitmap) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }
}

/// `|a ∩ b| / |a ∪ b|`; two empty sets are identical (1.0).
pub fn jaccard_hash(a: &HashSet<ClusterId>, b: &HashSet<ClusterId>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|id| large.contains(id)).count();
    ratio(inter as u32, (a.len() + b.len() - inter) as u32)
}

pub fn jaccard_bitmap(a: &ClusterBitmap, b: &ClusterBitmap) -> Result<f64> {
    if a.k != b.k {
        return Err(Error::invalid(format!(
            "bitmap widths differ: {} vs {}",
            a.k, b.k
        )));
    }
    Ok(bitmap_similarity(a, a.count(), b, b.count()))
}

#[inline]
fn bitmap_similarity(a: &ClusterBitmap, a_count: u32, b: &ClusterBitmap, b_count: u32) -> f64 {
    let inter = a.intersection_count(b);
    ratio(inter, a_count + b_count - inter)
}

#[inline]
fn ratio(inter: u32, union: u32) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// One query of a batch, with its probed cluster set.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub query_id: QueryId,
    pub arrival_time: f64,
    /// Probe order (nearest first).
    pub cluster_set: Vec<ClusterId>,
    pub bitmap: ClusterBitmap,
}

impl QueryRecord {
    pub fn new(query_id: QueryId, arrival_time: f64, cluster_set: Vec<ClusterId>, k: usize) -> Result<Self> {
        let bitmap = ClusterBitmap::from_ids(k, &cluster_set)?;
        if bitmap.count() as usize != cluster_set.len() {
            return Err(Error::invalid(format!(
                "query {query_id}: cluster set has duplicates"
            )));
        }
        Ok(QueryRecord {
            query_id,
            arrival_time,
            cluster_set,
            bitmap,
        })
    }

    pub fn hash_set(&self) -> HashSet<ClusterId> {
        self.cluster_set.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKernel {
    #[default]
    Bitmap,
    HashSet,
}

impl FromStr for SimilarityKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bitmap" => Ok(SimilarityKernel::Bitmap),
            "hash" | "hash_set" | "hashset" => Ok(SimilarityKernel::HashSet),
            other => Err(Error::invalid(format!("unknown similarity kernel {other:?}"))),
        }
    }
}

/// Symmetric N x N similarity matrix stored as its strict upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    upper: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    fn offset(n: usize, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < n);
        i * (2 * n - i - 1) / 2 + (j - i - 1)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => self.upper[Self::offset(self.n, i, j)],
            std::cmp::Ordering::Greater => self.upper[Self::offset(self.n, j, i)],
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j)).collect())
            .collect()
    }

    /// Counts of off-diagonal pairs per similarity bin over `[0, 1]`.
    pub fn histogram(&self, bins: usize) -> Vec<u64> {
        let bins = bins.max(1);
        let mut h = vec![0u64; bins];
        for s in &self.upper {
            let b = ((s * bins as f64) as usize).min(bins - 1);
            h[b] += 1;
        }
        h
    }
}

fn check_width(records: &[QueryRecord]) -> Result<()> {
    if let Some(first) = records.first() {
        if let Some(bad) = records.iter().find(|r| r.bitmap.k() != first.bitmap.k()) {
            return Err(Error::invalid(format!(
                "query {} has K = {}, batch uses {}",
                bad.query_id,
                bad.bitmap.k(),
                first.bitmap.k()
            )));
        }
    }
    Ok(())
}

pub fn pairwise_similarity(records: &[QueryRecord], kernel: SimilarityKernel) -> Result<SimilarityMatrix> {
    check_width(records)?;
    let n = records.len();
    let mut upper = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    match kernel {
        SimilarityKernel::Bitmap => {
            let counts: Vec<u32> = records.iter().map(|r| r.bitmap.count()).collect();
            for i in 0..n {
                let (a, ca) = (&records[i].bitmap, counts[i]);
                for j in i + 1..n {
                    upper.push(bitmap_similarity(a, ca, &records[j].bitmap, counts[j]));
                }
            }
        }
        SimilarityKernel::HashSet => {
            let sets: Vec<HashSet<ClusterId>> = records.iter().map(QueryRecord::hash_set).collect();
            for i in 0..n {
                for j in i + 1..n {
                    upper.push(jaccard_hash(&sets[i], &sets[j]));
                }
            }
        }
    }
    Ok(SimilarityMatrix { n, upper })
}

/// Next group's first query and the clusters it will probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefetchMetadata {
    pub fq: QueryId,
    pub fqset: Vec<ClusterId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGroup {
    pub group_id: usize,
    /// Query ids in arrival order.
    pub members: Vec<QueryId>,
    /// Positions of the members in the input batch.
    pub member_indices: Vec<usize>,
    pub union_clusters: Vec<ClusterId>,
    pub prefetch: Option<PrefetchMetadata>,
}

/// Groups a batch (given in arrival order) with the bitmap kernel.
pub fn form_groups(records: &[QueryRecord], theta: f64) -> Result<Vec<QueryGroup>> {
    form_groups_with(records, theta, SimilarityKernel::Bitmap)
}

pub fn form_groups_with(
    records: &[QueryRecord],
    theta: f64,
    kernel: SimilarityKernel,
) -> Result<Vec<QueryGroup>> {
    let matrix = pairwise_similarity(records, kernel)?;
    groups_from_matrix(records, &matrix, theta)
}

/// Complete-linkage agglomeration over a precomputed similarity matrix.
///
/// Repeatedly merges the pair of groups with the highest complete-linkage
/// similarity (the minimum over cross pairs), ties to the lexicographically
/// smallest pair of group indices, while that similarity is `>= theta`.
/// A group's index is the batch position of its earliest member.
pub fn groups_from_matrix(
    records: &[QueryRecord],
    matrix: &SimilarityMatrix,
    theta: f64,
) -> Result<Vec<QueryGroup>> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid(format!("theta must be in [0, 1], got {theta}")));
    }
    let n = records.len();
    if matrix.len() != n {
        return Err(Error::invalid("similarity matrix does not match the batch"));
    }

    let empty: Vec<bool> = records.iter().map(|r| r.cluster_set.is_empty()).collect();
    let mut sim = matrix.upper.clone();
    // empty probe sets never join a group
    for i in 0..n {
        for j in i + 1..n {
            if empty[i] || empty[j] {
                sim[SimilarityMatrix::offset(n, i, j)] = f64::NEG_INFINITY;
            }
        }
    }
    let at = |sim: &[f64], i: usize, j: usize| {
        if i < j {
            sim[SimilarityMatrix::offset(n, i, j)]
        } else {
            sim[SimilarityMatrix::offset(n, j, i)]
        }
    };

    let mut active = vec![true; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut best: Vec<(f64, usize)> = vec![(f64::NEG_INFINITY, usize::MAX); n];
    let rescan = |sim: &[f64], active: &[bool], i: usize| -> (f64, usize) {
        let mut b = (f64::NEG_INFINITY, usize::MAX);
        for j in i + 1..n {
            if active[j] {
                let s = sim[SimilarityMatrix::offset(n, i, j)];
                if s > b.0 {
                    b = (s, j);
                }
            }
        }
        b
    };
    for i in 0..n {
        best[i] = rescan(&sim, &active, i);
    }

    loop {
        let mut pick: Option<(f64, usize)> = None;
        for i in 0..n {
            if active[i] && best[i].1 != usize::MAX && pick.is_none_or(|(s, _)| best[i].0 > s) {
                pick = Some((best[i].0, i));
            }
        }
        let Some((s, i)) = pick else { break };
        if s < theta {
            break;
        }
        let j = best[i].1;

        for k in 0..n {
            if active[k] && k != i && k != j {
                let merged = at(&sim, i, k).min(at(&sim, j, k));
                let off = if i < k {
                    SimilarityMatrix::offset(n, i, k)
                } else {
                    SimilarityMatrix::offset(n, k, i)
                };
                sim[off] = merged;
            }
        }
        active[j] = false;
        let moved = std::mem::take(&mut members[j]);
        members[i].extend(moved);

        best[i] = rescan(&sim, &active, i);
        for k in 0..j {
            if active[k] && k != i && (best[k].1 == i || best[k].1 == j) {
                best[k] = rescan(&sim, &active, k);
            }
        }
    }

    let mut groups = Vec::new();
    for (slot, mut idx) in members.into_iter().enumerate() {
        if !active[slot] {
            continue;
        }
        idx.sort_unstable();
        let mut union: Vec<ClusterId> = idx
            .iter()
            .flat_map(|&m| records[m].cluster_set.iter().copied())
            .collect();
        union.sort_unstable();
        union.dedup();
        groups.push(QueryGroup {
            group_id: groups.len(),
            members: idx.iter().map(|&m| records[m].query_id).collect(),
            member_indices: idx,
            union_clusters: union,
            prefetch: None,
        });
    }
    Ok(groups)
}

/// Execution order for a grouped batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledBatch {
    pub order: Vec<QueryId>,
    pub groups: Vec<QueryGroup>,
}

/// Concatenates the groups' members and attaches to every group but the
/// last the first query of its successor and that query's cluster set.
pub fn reorder_batch(mut groups: Vec<QueryGroup>, records: &[QueryRecord]) -> Result<ScheduledBatch> {
    let by_id: HashMap<QueryId, &QueryRecord> = records.iter().map(|r| (r.query_id, r)).collect();
    let mut seen = HashSet::new();
    for g in &groups {
        if g.members.is_empty() {
            return Err(Error::invalid(format!("group {} is empty", g.group_id)));
        }
        for q in &g.members {
            if !by_id.contains_key(q) || !seen.insert(*q) {
                return Err(Error::invalid(format!(
                    "query {q} is unknown or appears in more than one group"
                )));
            }
        }
    }
    if seen.len() != records.len() {
        return Err(Error::invalid("groups do not cover the whole batch"));
    }

    let heads: Vec<QueryId> = groups.iter().map(|g| g.members[0]).collect();
    for (i, g) in groups.iter_mut().enumerate() {
        g.prefetch = heads.get(i + 1).map(|fq| PrefetchMetadata {
            fq: *fq,
            fqset: by_id[fq].cluster_set.clone(),
        });
    }
    let order = groups.iter().flat_map(|g| g.members.iter().copied()).collect();
    Ok(ScheduledBatch { order, groups })
}
