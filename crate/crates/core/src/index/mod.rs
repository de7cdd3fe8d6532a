//! Two-level IVF index: an in-memory centroid table plus one file per
//! cluster on disk.

mod format;
mod kmeans;
mod store;

use std::cmp::Ordering;
use std::path::Path;

pub use format::{
    cluster_file_size, decode_cluster, encode_cluster, read_centroids, read_cluster, write_centroids,
    write_index, ClusterData, ClusterManifest, ManifestEntry, CENTROID_FILE, CENTROID_MAGIC,
    CLUSTER_MAGIC, MANIFEST_FILE,
};
pub use kmeans::{train_kmeans, train_kmeans_with, KMeansConfig};
pub use store::{ClusterStore, DiskStore, MemoryStore};

use crate::embedding::{Metric, VectorSet};
use crate::error::{Error, Result};

pub type ClusterId = u32;

/// First-level index: K centroids, resident in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidIndex {
    centroids: VectorSet,
}

impl CentroidIndex {
    pub fn new(centroids: VectorSet) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::invalid("centroid index needs at least one centroid"));
        }
        centroids.check_finite()?;
        Ok(CentroidIndex { centroids })
    }

    /// Number of clusters K.
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    pub fn centroids(&self) -> &VectorSet {
        &self.centroids
    }

    pub fn centroid(&self, id: ClusterId) -> &[f32] {
        self.centroids.row(id as usize)
    }

    /// The `nprobe` closest clusters under squared L2, nearest first, ties
    /// broken by lower cluster id.
    pub fn probe(&self, query: &[f32], nprobe: usize) -> Result<Vec<ClusterId>> {
        self.probe_with(query, nprobe, Metric::L2)
    }

    pub fn probe_with(&self, query: &[f32], nprobe: usize, metric: Metric) -> Result<Vec<ClusterId>> {
        let k = self.num_clusters();
        if nprobe == 0 || nprobe > k {
            return Err(Error::invalid(format!("nprobe must be in 1..={k}, got {nprobe}")));
        }
        self.check_dim(query.len())?;
        let mut scored: Vec<(f32, ClusterId)> = self
            .centroids
            .rows()
            .enumerate()
            .map(|(id, c)| (metric.distance(query, c), id as ClusterId))
            .collect();
        let by_rank = |a: &(f32, ClusterId), b: &(f32, ClusterId)| -> Ordering {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        if nprobe < k {
            scored.select_nth_unstable_by(nprobe - 1, by_rank);
            scored.truncate(nprobe);
        }
        scored.sort_unstable_by(by_rank);
        Ok(scored.into_iter().map(|(_, id)| id).collect())
    }

    /// Nearest centroid under squared L2, ties to the lowest id.
    pub fn nearest(&self, v: &[f32]) -> ClusterId {
        nearest_centroid(&self.centroids, v).0 as ClusterId
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim() {
            return Err(Error::invalid(format!(
                "vector dim {dim} does not match index dim {}",
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_centroids(path, &self.centroids)
    }

    pub fn load(path: &Path) -> Result<Self> {
        CentroidIndex::new(read_centroids(path)?)
    }
}

/// Assigns every corpus vector to its nearest centroid.
pub fn assign_vectors(corpus: &VectorSet, index: &CentroidIndex) -> Result<Vec<ClusterId>> {
    if corpus.is_empty() {
        return Ok(Vec::new());
    }
    index.check_dim(corpus.dim())?;
    Ok(corpus.rows().map(|v| index.nearest(v)).collect())
}

pub(crate) fn nearest_centroid(centroids: &VectorSet, v: &[f32]) -> (usize, f32) {
    let mut best = (0usize, f32::INFINITY);
    for (i, c) in centroids.rows().enumerate() {
        let d = crate::embedding::l2_squared(v, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_index(points: &[f32]) -> CentroidIndex {
        CentroidIndex::new(VectorSet::from_rows(1, points.iter().map(|p| [*p])).unwrap()).unwrap()
    }

    #[test]
    fn probe_full_scan_returns_every_cluster() {
        let idx = line_index(&[5.0, 1.0, 3.0, 0.0]);
        let mut got = idx.probe(&[0.0], 4).unwrap();
        assert_eq!(got, vec![3, 1, 2, 0]);
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn probe_exact_centroid() {
        let idx = line_index(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(idx.probe(&[7.0], 1).unwrap(), vec![7]);
    }

    #[test]
    fn probe_ties_prefer_lower_id() {
        let idx = line_index(&[2.0, -1.0, 1.0, -2.0]);
        assert_eq!(idx.probe(&[0.0], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn probe_rejects_bad_nprobe_and_dim() {
        let idx = line_index(&[0.0, 1.0]);
        assert!(matches!(idx.probe(&[0.0], 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(idx.probe(&[0.0], 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(idx.probe(&[0.0, 1.0], 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn assign_exact_and_tie_break() {
        let idx = line_index(&[0.0, 10.0, -4.0, 20.0, 4.0, 30.0]);
        let corpus = VectorSet::from_rows(1, [[20.0], [0.0]]).unwrap();
        assert_eq!(assign_vectors(&corpus, &idx).unwrap(), vec![3, 0]);
        // 0.0 is equidistant to clusters 2 and 5
        let idx = line_index(&[100.0, 100.0, -1.0, 100.0, 100.0, 1.0]);
        let corpus = VectorSet::from_rows(1, [[0.0]]).unwrap();
        assert_eq!(assign_vectors(&corpus, &idx).unwrap(), vec![2]);
    }

    #[test]
    fn assign_rejects_dim_mismatch() {
        let idx = line_index(&[0.0]);
        let corpus = VectorSet::from_rows(2, [[0.0, 1.0]]).unwrap();
        assert!(assign_vectors(&corpus, &idx).is_err());
    }
}
