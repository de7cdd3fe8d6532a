use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use super::format::{check_cluster_bytes, cluster_file_size};
use super::{assign_vectors, CentroidIndex, ClusterData, ClusterId, ClusterManifest};
use crate::embedding::VectorSet;
use crate::error::{Error, Result};

/// Source of cluster images. Implementations must be reentrant.
pub trait ClusterStore: Send + Sync {
    fn read(&self, id: ClusterId) -> Result<Arc<ClusterData>>;

    /// Size of the cluster's file in bytes, used for load planning.
    fn byte_size(&self, id: ClusterId) -> Option<u64>;

    fn num_clusters(&self) -> usize;
}

/// Reads cluster files named by a manifest, one whole-file read per call.
#[derive(Debug)]
pub struct DiskStore {
    manifest: ClusterManifest,
    direct_io: bool,
    direct_io_warned: AtomicBool,
}

impl DiskStore {
    pub fn new(manifest: ClusterManifest) -> Self {
        DiskStore {
            manifest,
            direct_io: false,
            direct_io_warned: AtomicBool::new(false),
        }
    }

    /// Bypass the page cache with `O_DIRECT` where the platform and
    /// filesystem allow it; otherwise falls back to buffered reads.
    pub fn with_direct_io(mut self, on: bool) -> Self {
        self.direct_io = on;
        self
    }

    pub fn manifest(&self) -> &ClusterManifest {
        &self.manifest
    }

    fn read_bytes(&self, path: &Path, len: usize) -> std::io::Result<Vec<u8>> {
        if self.direct_io {
            match read_direct(path, len) {
                Ok(bytes) => return Ok(bytes),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(e),
                Err(e) => {
                    if !self.direct_io_warned.swap(true, Ordering::Relaxed) {
                        log::warn!("direct I/O unavailable ({e}); using buffered reads");
                    }
                }
            }
        }
        fs::read(path)
    }
}

impl ClusterStore for DiskStore {
    fn read(&self, id: ClusterId) -> Result<Arc<ClusterData>> {
        let entry = self
            .manifest
            .entry(id)
            .ok_or_else(|| Error::invalid(format!("cluster {id} not in manifest")))?;
        let path = self.manifest.root().join(&entry.path);
        let bytes = self
            .read_bytes(&path, entry.byte_size as usize)
            .map_err(|e| Error::storage(&path, e))?;
        check_cluster_bytes(&self.manifest, entry, &bytes, &path).map(Arc::new)
    }

    fn byte_size(&self, id: ClusterId) -> Option<u64> {
        self.manifest.entry(id).map(|e| e.byte_size)
    }

    fn num_clusters(&self) -> usize {
        self.manifest.num_clusters()
    }
}

#[cfg(target_os = "linux")]
fn read_direct(path: &Path, len: usize) -> std::io::Result<Vec<u8>> {
    use std::io::Read;
    use std::os::unix::fs::OpenOptionsExt;

    const ALIGN: usize = 4096;
    let mut file = fs::OpenOptions::new()
        .read(true)
        .custom_flags(libc::O_DIRECT)
        .open(path)?;
    let cap = len.div_ceil(ALIGN).max(1) * ALIGN;
    let mut raw = vec![0u8; cap + ALIGN];
    let off = raw.as_ptr().align_offset(ALIGN);
    let buf = &mut raw[off..off + cap];
    let mut done = 0;
    loop {
        let n = file.read(&mut buf[done..])?;
        done += n;
        if n == 0 || done == cap {
            break;
        }
    }
    Ok(buf[..done].to_vec())
}

#[cfg(not(target_os = "linux"))]
fn read_direct(_path: &Path, _len: usize) -> std::io::Result<Vec<u8>> {
    Err(std::io::Error::new(
        std::io::ErrorKind::Unsupported,
        "O_DIRECT is linux-only",
    ))
}

/// All clusters held in memory. Used for virtual-time replays and tests;
/// reported byte sizes are those the cluster files would have.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    clusters: Vec<Arc<ClusterData>>,
}

impl MemoryStore {
    pub fn new(clusters: Vec<ClusterData>) -> Result<Self> {
        for (i, c) in clusters.iter().enumerate() {
            if c.cluster_id as usize != i {
                return Err(Error::invalid(format!(
                    "cluster at position {i} has id {}",
                    c.cluster_id
                )));
            }
        }
        Ok(MemoryStore {
            clusters: clusters.into_iter().map(Arc::new).collect(),
        })
    }

    /// Partitions `corpus` by nearest centroid, ids being row indices.
    pub fn from_corpus(corpus: &VectorSet, index: &CentroidIndex) -> Result<Self> {
        let assignments = assign_vectors(corpus, index)?;
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); index.num_clusters()];
        for (r, c) in assignments.iter().enumerate() {
            rows[*c as usize].push(r);
        }
        let clusters = rows
            .into_iter()
            .enumerate()
            .map(|(id, rows)| {
                let vectors = VectorSet::from_rows(index.dim(), rows.iter().map(|&r| corpus.row(r)))?;
                ClusterData::new(id as ClusterId, rows.iter().map(|&r| r as u64).collect(), vectors)
            })
            .collect::<Result<Vec<_>>>()?;
        MemoryStore::new(clusters)
    }

    /// Reads every cluster file of an index into memory.
    pub fn load(manifest: &ClusterManifest) -> Result<Self> {
        let disk = DiskStore::new(manifest.clone());
        let clusters = (0..manifest.num_clusters() as ClusterId)
            .map(|id| disk.read(id).map(|c| (*c).clone()))
            .collect::<Result<Vec<_>>>()?;
        MemoryStore::new(clusters)
    }

    pub fn clusters(&self) -> &[Arc<ClusterData>] {
        &self.clusters
    }
}

impl ClusterStore for MemoryStore {
    fn read(&self, id: ClusterId) -> Result<Arc<ClusterData>> {
        self.clusters
            .get(id as usize)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("cluster {id} not in store")))
    }

    fn byte_size(&self, id: ClusterId) -> Option<u64> {
        self.clusters
            .get(id as usize)
            .map(|c| cluster_file_size(c.len(), c.vectors.dim()))
    }

    fn num_clusters(&self) -> usize {
        self.clusters.len()
    }
}
