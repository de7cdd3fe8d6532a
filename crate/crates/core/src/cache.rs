//! Fixed-capacity cluster cache with pluggable replacement.
//!
//! Victims are chosen at admission time. Pinned entries (in use by a running
//! search) and entries admitted in the same call are never victims.

use std::collections::{HashMap, HashSet};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{ClusterData, ClusterId};

/// Smoothing factor for the per-cluster load latency estimate.
pub const LATENCY_SMOOTHING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Least recently used.
    Lru,
    /// Cost-aware LRU: evicts the lowest `access_count x load_latency`.
    Clru,
    /// LRU that keeps only the most frequent clusters at every window boundary.
    Wlru,
    /// Evicts the longest-resident entry regardless of use.
    Fifo,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Lru => "lru",
            PolicyKind::Clru => "clru",
            PolicyKind::Wlru => "wlru",
            PolicyKind::Fifo => "fifo",
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lru" => Ok(PolicyKind::Lru),
            "clru" => Ok(PolicyKind::Clru),
            "wlru" => Ok(PolicyKind::Wlru),
            "fifo" => Ok(PolicyKind::Fifo),
            other => Err(Error::invalid(format!("unknown cache policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CachePolicy {
    pub kind: PolicyKind,
    /// WLRU window length in seconds.
    pub window_length: f64,
    /// Clusters WLRU retains at a window boundary.
    pub window_top_n: usize,
}

impl CachePolicy {
    pub fn new(kind: PolicyKind) -> Self {
        CachePolicy {
            kind,
            ..CachePolicy::default()
        }
    }
}

impl Default for CachePolicy {
    fn default() -> Self {
        CachePolicy {
            kind: PolicyKind::Lru,
            window_length: 60.0,
            window_top_n: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    Entries(usize),
    Bytes(u64),
}

impl Capacity {
    fn is_zero(self) -> bool {
        matches!(self, Capacity::Entries(0) | Capacity::Bytes(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmitOrigin {
    Demand,
    Prefetch,
}

#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub cluster_id: ClusterId,
    pub data: Arc<ClusterData>,
    pub last_access_seq: u64,
    pub insert_seq: u64,
    /// Requests for this cluster so far, counted across residencies.
    pub access_count: u64,
    /// Smoothed disk load time in seconds.
    pub load_latency: f64,
    pub bytes: u64,
    pub prefetched: bool,
    pins: u32,
}

impl CacheEntry {
    pub fn score(&self) -> f64 {
        self.access_count as f64 * self.load_latency
    }

    pub fn is_pinned(&self) -> bool {
        self.pins > 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    /// Cluster ids looked up (hits + misses).
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    pub bytes_read_from_disk: u64,
    pub bytes_read_demand: u64,
    pub bytes_read_prefetch: u64,
    pub prefetch_admissions: u64,
    pub evictions: u64,
    /// Hit ratio of every non-empty `lookup` call, in call order.
    pub hit_ratio_series: Vec<f64>,
}

impl CacheStats {
    pub fn hit_ratio(&self) -> f64 {
        self.hits as f64 / self.lookups.max(1) as f64
    }
}

/// Result of a lookup; both lists keep the requested order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lookup {
    pub hits: Vec<ClusterId>,
    pub misses: Vec<ClusterId>,
}

#[derive(Debug)]
pub struct ClusterCache {
    capacity: Capacity,
    policy: CachePolicy,
    entries: HashMap<ClusterId, CacheEntry>,
    used_bytes: u64,
    seq: u64,
    stats: CacheStats,
    latency_history: HashMap<ClusterId, f64>,
    /// Lookups per cluster over the cache's lifetime, resident or not.
    request_counts: HashMap<ClusterId, u64>,
    window_start: f64,
    window_counts: HashMap<ClusterId, u64>,
    last_window_counts: HashMap<ClusterId, u64>,
}

impl ClusterCache {
    pub fn new(capacity: Capacity, policy: CachePolicy) -> Result<Self> {
        if capacity.is_zero() {
            return Err(Error::invalid("cache capacity must be positive"));
        }
        Self::check_policy(capacity, &policy)?;
        Ok(ClusterCache {
            capacity,
            policy,
            entries: HashMap::new(),
            used_bytes: 0,
            seq: 0,
            stats: CacheStats::default(),
            latency_history: HashMap::new(),
            request_counts: HashMap::new(),
            window_start: 0.0,
            window_counts: HashMap::new(),
            last_window_counts: HashMap::new(),
        })
    }

    pub fn with_entries(capacity: usize, kind: PolicyKind) -> Result<Self> {
        Self::new(Capacity::Entries(capacity), CachePolicy::new(kind))
    }

    fn check_policy(capacity: Capacity, policy: &CachePolicy) -> Result<()> {
        if policy.kind == PolicyKind::Wlru {
            if policy.window_top_n == 0 || policy.window_length <= 0.0 {
                return Err(Error::invalid("WLRU needs a positive window and top-n"));
            }
            if let Capacity::Entries(n) = capacity {
                if policy.window_top_n > n {
                    return Err(Error::invalid(format!(
                        "window_top_n {} exceeds capacity {n}",
                        policy.window_top_n
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn set_policy(&mut self, policy: CachePolicy) -> Result<()> {
        Self::check_policy(self.capacity, &policy)?;
        self.policy = policy;
        Ok(())
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn capacity(&self) -> Capacity {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn contains(&self, id: ClusterId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn entry(&self, id: ClusterId) -> Option<&CacheEntry> {
        self.entries.get(&id)
    }

    /// Data of a resident cluster without touching recency or stats.
    pub fn get(&self, id: ClusterId) -> Option<Arc<ClusterData>> {
        self.entries.get(&id).map(|e| e.data.clone())
    }

    pub fn resident_ids(&self) -> Vec<ClusterId> {
        let mut ids: Vec<_> = self.entries.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    /// Splits `ids` into resident and missing clusters, refreshing recency and
    /// frequency of the hits.
    pub fn lookup(&mut self, ids: &[ClusterId]) -> Lookup {
        let mut out = Lookup::default();
        for &id in ids {
            *self.window_counts.entry(id).or_default() += 1;
            let count = self.request_counts.entry(id).or_default();
            *count += 1;
            let count = *count;
            let seq = self.next_seq();
            match self.entries.get_mut(&id) {
                Some(e) => {
                    e.last_access_seq = seq;
                    e.access_count = count;
                    out.hits.push(id);
                }
                None => out.misses.push(id),
            }
        }
        self.stats.lookups += ids.len() as u64;
        self.stats.hits += out.hits.len() as u64;
        self.stats.misses += out.misses.len() as u64;
        if !ids.is_empty() {
            self.stats
                .hit_ratio_series
                .push(out.hits.len() as f64 / ids.len() as f64);
        }
        out
    }

    /// `lookup` followed by pinning the hits, atomically.
    pub fn lookup_and_pin(&mut self, ids: &[ClusterId]) -> Lookup {
        let out = self.lookup(ids);
        self.pin(&out.hits);
        out
    }

    pub fn pin(&mut self, ids: &[ClusterId]) {
        for id in ids {
            if let Some(e) = self.entries.get_mut(id) {
                e.pins += 1;
            }
        }
    }

    pub fn unpin(&mut self, ids: &[ClusterId]) {
        for id in ids {
            if let Some(e) = self.entries.get_mut(id) {
                e.pins = e.pins.saturating_sub(1);
            }
        }
    }

    /// Inserts freshly loaded clusters, evicting policy-chosen victims first.
    /// Returns the evicted ids in eviction order.
    ///
    /// Clusters that are already resident are refreshed rather than duplicated.
    pub fn admit(
        &mut self,
        loaded: Vec<(Arc<ClusterData>, f64)>,
        origin: AdmitOrigin,
    ) -> Result<Vec<ClusterId>> {
        let batch: HashSet<ClusterId> = loaded.iter().map(|(d, _)| d.cluster_id).collect();
        let incoming: Vec<&(Arc<ClusterData>, f64)> = loaded
            .iter()
            .filter(|(d, _)| !self.entries.contains_key(&d.cluster_id))
            .collect();
        let new_bytes: u64 = incoming.iter().map(|(d, _)| d.encoded_len()).sum();
        match self.capacity {
            Capacity::Entries(n) if batch.len() > n => {
                return Err(Error::invalid(format!(
                    "admission of {} clusters exceeds capacity {n}",
                    batch.len()
                )));
            }
            Capacity::Bytes(b) if loaded.iter().map(|(d, _)| d.encoded_len()).sum::<u64>() > b => {
                return Err(Error::invalid(format!(
                    "admission batch larger than the {b}-byte budget"
                )));
            }
            _ => {}
        }

        let mut evicted = Vec::new();
        let new_count = {
            let mut ids = HashSet::new();
            incoming.iter().filter(|(d, _)| ids.insert(d.cluster_id)).count()
        };
        while self.overflows(new_count, new_bytes) {
            let victim = self.pick_victim(&batch).ok_or_else(|| {
                Error::Cache("no evictable entry: every candidate is pinned".into())
            })?;
            self.remove(victim);
            evicted.push(victim);
        }

        for (data, latency) in loaded {
            let bytes = data.encoded_len();
            self.stats.bytes_read_from_disk += bytes;
            match origin {
                AdmitOrigin::Demand => self.stats.bytes_read_demand += bytes,
                AdmitOrigin::Prefetch => self.stats.bytes_read_prefetch += bytes,
            }
            let id = data.cluster_id;
            let smoothed = match self.latency_history.get(&id) {
                Some(prev) => LATENCY_SMOOTHING * latency + (1.0 - LATENCY_SMOOTHING) * prev,
                None => latency,
            };
            self.latency_history.insert(id, smoothed);
            let seq = self.next_seq();
            if let Some(e) = self.entries.get_mut(&id) {
                e.last_access_seq = seq;
                e.load_latency = smoothed;
                continue;
            }
            if origin == AdmitOrigin::Prefetch {
                self.stats.prefetch_admissions += 1;
            }
            self.used_bytes += bytes;
            self.entries.insert(
                id,
                CacheEntry {
                    cluster_id: id,
                    data,
                    last_access_seq: seq,
                    insert_seq: seq,
                    access_count: self.request_counts.get(&id).copied().unwrap_or(0),
                    load_latency: smoothed,
                    bytes,
                    prefetched: origin == AdmitOrigin::Prefetch,
                    pins: 0,
                },
            );
        }
        self.stats.evictions += evicted.len() as u64;
        Ok(evicted)
    }

    fn overflows(&self, new_count: usize, new_bytes: u64) -> bool {
        match self.capacity {
            Capacity::Entries(n) => self.entries.len() + new_count > n,
            Capacity::Bytes(b) => self.used_bytes + new_bytes > b,
        }
    }

    fn pick_victim(&self, protected: &HashSet<ClusterId>) -> Option<ClusterId> {
        let candidates = self
            .entries
            .values()
            .filter(|e| !e.is_pinned() && !protected.contains(&e.cluster_id));
        let victim = match self.policy.kind {
            PolicyKind::Lru | PolicyKind::Wlru => candidates.min_by_key(|e| e.last_access_seq),
            PolicyKind::Fifo => candidates.min_by_key(|e| e.insert_seq),
            PolicyKind::Clru => candidates.min_by(|a, b| {
                a.score()
                    .total_cmp(&b.score())
                    .then(a.last_access_seq.cmp(&b.last_access_seq))
            }),
        };
        victim.map(|e| e.cluster_id)
    }

    fn remove(&mut self, id: ClusterId) {
        if let Some(e) = self.entries.remove(&id) {
            self.used_bytes -= e.bytes;
        }
    }

    /// Advances the frequency window. At every boundary WLRU keeps only the
    /// `window_top_n` most frequently requested clusters of the elapsed
    /// window (ties to the lower id). Returns the ids dropped.
    pub fn window_tick(&mut self, now: f64) -> Vec<ClusterId> {
        let len = self.policy.window_length;
        if len <= 0.0 || now < self.window_start + len {
            return Vec::new();
        }
        let elapsed = ((now - self.window_start) / len).floor();
        self.window_start += elapsed * len;

        let counts = std::mem::take(&mut self.window_counts);
        let mut dropped = Vec::new();
        if self.policy.kind == PolicyKind::Wlru {
            let keep: HashSet<ClusterId> = top_by_count(&counts, self.policy.window_top_n)
                .into_iter()
                .collect();
            let mut victims: Vec<ClusterId> = self
                .entries
                .values()
                .filter(|e| !e.is_pinned() && !keep.contains(&e.cluster_id))
                .map(|e| e.cluster_id)
                .collect();
            victims.sort_unstable();
            for id in &victims {
                self.remove(*id);
            }
            self.stats.evictions += victims.len() as u64;
            dropped = victims;
        }
        self.last_window_counts = counts;
        dropped
    }

    /// Most frequently requested clusters of the last complete window (the
    /// running window if none has closed yet).
    pub fn frequency_ranking(&self, n: usize) -> Vec<ClusterId> {
        let counts = if self.last_window_counts.is_empty() {
            &self.window_counts
        } else {
            &self.last_window_counts
        };
        top_by_count(counts, n)
    }

    /// Clusters with the highest smoothed load latency seen so far.
    pub fn load_cost_ranking(&self, n: usize) -> Vec<ClusterId> {
        let mut ranked: Vec<(ClusterId, f64)> =
            self.latency_history.iter().map(|(k, v)| (*k, *v)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.into_iter().take(n).map(|(id, _)| id).collect()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats.clone()
    }

    pub fn stats_ref(&self) -> &CacheStats {
        &self.stats
    }
}

fn top_by_count(counts: &HashMap<ClusterId, u64>, n: usize) -> Vec<ClusterId> {
    let mut ranked: Vec<(ClusterId, u64)> = counts.iter().map(|(k, v)| (*k, *v)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(n).map(|(id, _)| id).collect()
}
