//! On-disk layout of an index directory.
//!
//! ```text
//! cluster_NNNNN.bin  CALLCLU1 | cluster_id u32 | vector_count u32 | dim u32 | 0u32
//!                    | vector_count x u64 ids | vector_count x dim x f32
//! centroids.bin      CALLCEN1 | K u32 | dim u32 | K x dim x f32
//! manifest.jsonl     {"cluster_id", "path", "vector_count", "byte_size"} per line
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CentroidIndex, ClusterId};
use crate::embedding::{decode_f32s, read_u32, write_f32s, VectorSet};
use crate::error::{Error, Result};

pub const CLUSTER_MAGIC: &[u8; 8] = b"CALLCLU1";
pub const CENTROID_MAGIC: &[u8; 8] = b"CALLCEN1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CENTROID_FILE: &str = "centroids.bin";

const CLUSTER_HEADER: usize = 24;

/// In-memory image of one cluster file.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterData {
    pub cluster_id: ClusterId,
    pub ids: Vec<u64>,
    pub vectors: VectorSet,
}

impl ClusterData {
    pub fn new(cluster_id: ClusterId, ids: Vec<u64>, vectors: VectorSet) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::invalid(format!(
                "cluster {cluster_id}: {} ids for {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::invalid(format!(
                "cluster {cluster_id}: duplicate vector id {dup}"
            )));
        }
        Ok(ClusterData {
            cluster_id,
            ids,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Size of this cluster's file in bytes.
    pub fn encoded_len(&self) -> u64 {
        cluster_file_size(self.len(), self.vectors.dim())
    }
}

pub fn cluster_file_size(vector_count: usize, dim: usize) -> u64 {
    (CLUSTER_HEADER + vector_count * 8 + vector_count * dim * 4) as u64
}

pub fn encode_cluster(cluster: &ClusterData) -> Vec<u8> {
    let mut out = Vec::with_capacity(cluster.encoded_len() as usize);
    out.extend_from_slice(CLUSTER_MAGIC);
    out.extend_from_slice(&cluster.cluster_id.to_le_bytes());
    out.extend_from_slice(&(cluster.len() as u32).to_le_bytes());
    out.extend_from_slice(&(cluster.vectors.dim() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for id in &cluster.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    write_f32s(&mut out, cluster.vectors.as_flat()).expect("writing to a Vec cannot fail");
    out
}

/// Parses a cluster file image; `path` is only used for error messages.
pub fn decode_cluster(bytes: &[u8], path: &Path) -> Result<ClusterData> {
    if bytes.len() < CLUSTER_HEADER || &bytes[..8] != CLUSTER_MAGIC {
        return Err(Error::corrupt(path, "bad cluster magic"));
    }
    let cluster_id = read_u32(bytes, 8);
    let count = read_u32(bytes, 12) as usize;
    let dim = read_u32(bytes, 16) as usize;
    if read_u32(bytes, 20) != 0 {
        return Err(Error::corrupt(path, "reserved header field is not zero"));
    }
    if dim == 0 {
        return Err(Error::corrupt(path, "dim is zero"));
    }
    let expected = cluster_file_size(count, dim) as usize;
    if bytes.len() != expected {
        return Err(Error::corrupt(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let ids_end = CLUSTER_HEADER + count * 8;
    let ids = bytes[CLUSTER_HEADER..ids_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let vectors = VectorSet::from_flat(dim, decode_f32s(&bytes[ids_end..]))
        .map_err(|e| Error::corrupt(path, e.to_string()))?;
    ClusterData::new(cluster_id, ids, vectors).map_err(|e| Error::corrupt(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cluster_id: ClusterId,
    /// File name relative to the index directory.
    pub path: String,
    pub vector_count: u64,
    pub byte_size: u64,
}

/// Cluster file metadata for an index directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterManifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    dim: usize,
}

impl ClusterManifest {
    /// Loads `manifest.jsonl`, taking dim from the centroid file header.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let file = File::open(&path).map_err(|e| Error::storage(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::storage(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::corrupt(&path, format!("line {}: {e}", n + 1)))?;
            entries.push(entry);
        }
        entries.sort_by_key(|e| e.cluster_id);
        let (_, dim) = read_centroid_header(&dir.join(CENTROID_FILE))?;
        let manifest = ClusterManifest {
            root: dir.to_path_buf(),
            entries,
            dim,
        };
        manifest.validate().map_err(|e| Error::corrupt(&path, e.to_string()))?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.cluster_id as usize != i {
                return Err(Error::invalid(format!(
                    "cluster ids must be exactly 0..{}, found {} at position {i}",
                    self.entries.len(),
                    e.cluster_id
                )));
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn num_clusters(&self) -> usize {
        self.entries.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, id: ClusterId) -> Option<&ManifestEntry> {
        self.entries.get(id as usize)
    }

    pub fn path_of(&self, id: ClusterId) -> Option<PathBuf> {
        self.entry(id).map(|e| self.root.join(&e.path))
    }

    pub fn total_vectors(&self) -> u64 {
        self.entries.iter().map(|e| e.vector_count).sum()
    }
}

fn cluster_file_name(id: ClusterId) -> String {
    format!("cluster_{id:05}.bin")
}

/// Writes one file per cluster (empty clusters included), the centroid file
/// and the manifest. Vector ids are corpus row indices.
pub fn write_index(
    corpus: &VectorSet,
    assignments: &[ClusterId],
    index: &CentroidIndex,
    dir: &Path,
) -> Result<ClusterManifest> {
    if assignments.len() != corpus.len() {
        return Err(Error::invalid(format!(
            "{} assignments for {} vectors",
            assignments.len(),
            corpus.len()
        )));
    }
    if !corpus.is_empty() && corpus.dim() != index.dim() {
        return Err(Error::invalid("corpus dim does not match centroid dim"));
    }
    let k = index.num_clusters();
    if let Some(bad) = assignments.iter().find(|c| **c as usize >= k) {
        return Err(Error::invalid(format!("assignment to unknown cluster {bad}")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;

    let dim = index.dim();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (row, &c) in assignments.iter().enumerate() {
        members[c as usize].push(row);
    }

    let mut entries = Vec::with_capacity(k);
    for (id, rows) in members.iter().enumerate() {
        let id = id as ClusterId;
        let vectors = VectorSet::from_rows(dim, rows.iter().map(|&r| corpus.row(r)))?;
        let data = ClusterData::new(id, rows.iter().map(|&r| r as u64).collect(), vectors)?;
        let name = cluster_file_name(id);
        let path = dir.join(&name);
        let bytes = encode_cluster(&data);
        fs::write(&path, &bytes).map_err(|e| Error::storage(&path, e))?;
        entries.push(ManifestEntry {
            cluster_id: id,
            path: name,
            vector_count: data.len() as u64,
            byte_size: bytes.len() as u64,
        });
    }

    index.save(&dir.join(CENTROID_FILE))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let file = File::create(&manifest_path).map_err(|e| Error::storage(&manifest_path, e))?;
    let mut w = BufWriter::new(file);
    for e in &entries {
        let line = serde_json::to_string(e).expect("manifest entries serialize");
        writeln!(w, "{line}").map_err(|e| Error::storage(&manifest_path, e))?;
    }
    w.flush().map_err(|e| Error::storage(&manifest_path, e))?;

    Ok(ClusterManifest {
        root: dir.to_path_buf(),
        entries,
        dim,
    })
}

/// Reads and validates one cluster file named by the manifest.
pub fn read_cluster(manifest: &ClusterManifest, id: ClusterId) -> Result<ClusterData> {
    let entry = manifest
        .entry(id)
        .ok_or_else(|| Error::invalid(format!("cluster {id} not in manifest")))?;
    let path = manifest.root.join(&entry.path);
    let bytes = fs::read(&path).map_err(|e| Error::storage(&path, e))?;
    check_cluster_bytes(manifest, entry, &bytes, &path)
}

pub(super) fn check_cluster_bytes(
    manifest: &ClusterManifest,
    entry: &ManifestEntry,
    bytes: &[u8],
    path: &Path,
) -> Result<ClusterData> {
    if bytes.len() as u64 != entry.byte_size {
        return Err(Error::corrupt(
            path,
            format!(
                "file is {} bytes but manifest says {}",
                bytes.len(),
                entry.byte_size
            ),
        ));
    }
    let data = decode_cluster(bytes, path)?;
    if data.cluster_id != entry.cluster_id {
        return Err(Error::corrupt(
            path,
            format!("header names cluster {}, expected {}", data.cluster_id, entry.cluster_id),
        ));
    }
    if data.vectors.dim() != manifest.dim {
        return Err(Error::corrupt(path, "cluster dim differs from index dim"));
    }
    Ok(data)
}

pub fn write_centroids(path: &Path, centroids: &VectorSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::storage(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| {
        w.write_all(CENTROID_MAGIC)?;
        w.write_all(&(centroids.len() as u32).to_le_bytes())?;
        w.write_all(&(centroids.dim() as u32).to_le_bytes())?;
        write_f32s(&mut w, centroids.as_flat())?;
        w.flush()
    })();
    res.map_err(|e| Error::storage(path, e))
}

fn read_centroid_header(path: &Path) -> Result<(usize, usize)> {
    let mut header = [0u8; 16];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut header))
        .map_err(|e| Error::storage(path, e))?;
    if &header[..8] != CENTROID_MAGIC {
        return Err(Error::corrupt(path, "bad centroid magic"));
    }
    Ok((read_u32(&header, 8) as usize, read_u32(&header, 12) as usize))
}

pub fn read_centroids(path: &Path) -> Result<VectorSet> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CENTROID_MAGIC {
        return Err(Error::corrupt(path, "bad centroid magic"));
    }
    let k = read_u32(&bytes, 8) as usize;
    let dim = read_u32(&bytes, 12) as usize;
    if k == 0 || dim == 0 || bytes.len() != 16 + k * dim * 4 {
        return Err(Error::corrupt(path, "centroid file length mismatch"));
    }
    VectorSet::from_flat(dim, decode_f32s(&bytes[16..])).map_err(|e| Error::corrupt(path, e.to_string()))
}
