//! Group-aware prefetch bookkeeping.
//!
//! The tracker follows dispatch and completion of every query of a scheduled
//! batch and says when to load the next group's head clusters. Each group
//! fires at most once.

use std::str::FromStr;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cache::{AdmitOrigin, ClusterCache};
use crate::clock::Stopwatch;
use crate::error::{Error, Result};
use crate::grouping::{PrefetchMetadata, QueryGroup, QueryId};
use crate::index::{ClusterId, ClusterStore};

pub const DEFAULT_AWAIT_TIMEOUT: Duration = Duration::from_secs(5);

/// When the next group's head clusters start loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefetchTrigger {
    /// As the group's last query is dispatched, overlapping its search.
    #[default]
    Dispatch,
    /// After the group's last query completes.
    Completion,
}

impl FromStr for PrefetchTrigger {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dispatch" => Ok(PrefetchTrigger::Dispatch),
            "completion" => Ok(PrefetchTrigger::Completion),
            other => Err(Error::invalid(format!("unknown prefetch trigger {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefetchState {
    Idle,
    InFlight,
    Complete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupProgress {
    pub group_id: usize,
    pub members: Vec<QueryId>,
    pub dispatched: usize,
    pub remaining: usize,
    pub metadata: Option<PrefetchMetadata>,
    pub prefetch_state: PrefetchState,
}

/// What the dispatcher should do after an event.
#[derive(Debug, Clone, PartialEq)]
pub enum PrefetchAction {
    None,
    /// Start loading the next head's clusters.
    Fire(PrefetchMetadata),
    /// The group's last query finished while its prefetch was in flight:
    /// top up any head clusters that have been evicted since it fired.
    Reconcile(PrefetchMetadata),
}

#[derive(Debug, Clone)]
pub struct PrefetchTracker {
    groups: Vec<GroupProgress>,
    trigger: PrefetchTrigger,
    fired: usize,
}

impl PrefetchTracker {
    pub fn new(groups: &[QueryGroup], trigger: PrefetchTrigger) -> Self {
        let groups = groups
            .iter()
            .map(|g| GroupProgress {
                group_id: g.group_id,
                members: g.members.clone(),
                dispatched: 0,
                remaining: g.members.len(),
                metadata: g.prefetch.clone(),
                prefetch_state: PrefetchState::Idle,
            })
            .collect();
        PrefetchTracker {
            groups,
            trigger,
            fired: 0,
        }
    }

    fn group_mut(&mut self, query_id: QueryId, group_id: usize) -> Result<&mut GroupProgress> {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.group_id == group_id)
            .ok_or_else(|| Error::Protocol(format!("unknown group {group_id}")))?;
        if !g.members.contains(&query_id) {
            return Err(Error::Protocol(format!(
                "query {query_id} is not a member of group {group_id}"
            )));
        }
        Ok(g)
    }

    pub fn on_query_dispatch(&mut self, query_id: QueryId, group_id: usize) -> Result<PrefetchAction> {
        let trigger = self.trigger;
        let g = self.group_mut(query_id, group_id)?;
        if g.dispatched == g.members.len() {
            return Err(Error::Protocol(format!("group {group_id} dispatched too often")));
        }
        g.dispatched += 1;
        let last = g.dispatched == g.members.len();
        let fire = last && trigger == PrefetchTrigger::Dispatch;
        Ok(self.try_fire(group_id, fire))
    }

    pub fn on_query_complete(&mut self, query_id: QueryId, group_id: usize) -> Result<PrefetchAction> {
        let trigger = self.trigger;
        let g = self.group_mut(query_id, group_id)?;
        if g.remaining == 0 {
            return Err(Error::Protocol(format!("group {group_id} completed too often")));
        }
        g.remaining -= 1;
        if g.remaining > 0 {
            return Ok(PrefetchAction::None);
        }
        match (trigger, g.prefetch_state, &g.metadata) {
            (PrefetchTrigger::Dispatch, PrefetchState::InFlight, Some(m)) => Ok(PrefetchAction::Reconcile(m.clone())),
            (PrefetchTrigger::Completion, _, _) => Ok(self.try_fire(group_id, true)),
            _ => Ok(PrefetchAction::None),
        }
    }

    fn try_fire(&mut self, group_id: usize, fire: bool) -> PrefetchAction {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.group_id == group_id)
            .expect("group checked by caller");
        match (&g.metadata, g.prefetch_state) {
            (Some(m), PrefetchState::Idle) if fire => {
                g.prefetch_state = PrefetchState::InFlight;
                self.fired += 1;
                PrefetchAction::Fire(m.clone())
            }
            _ => PrefetchAction::None,
        }
    }

    pub fn mark_complete(&mut self, group_id: usize) -> Result<()> {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.group_id == group_id)
            .ok_or_else(|| Error::Protocol(format!("unknown group {group_id}")))?;
        if g.prefetch_state == PrefetchState::InFlight {
            g.prefetch_state = PrefetchState::Complete;
        }
        Ok(())
    }

    /// The group whose prefetch targets `group_id`'s head, if any.
    pub fn predecessor(&self, group_id: usize) -> Option<&GroupProgress> {
        let pos = self.groups.iter().position(|g| g.group_id == group_id)?;
        pos.checked_sub(1).map(|p| &self.groups[p])
    }

    pub fn groups(&self) -> &[GroupProgress] {
        &self.groups
    }

    pub fn prefetches_issued(&self) -> usize {
        self.fired
    }
}

/// Synchronously loads the clusters of `fqset` that are not resident and
/// admits them as prefetched. Storage errors are logged and skipped.
/// Returns how many clusters were admitted.
pub fn execute_prefetch(fqset: &[ClusterId], cache: &Mutex<ClusterCache>, store: &dyn ClusterStore) -> usize {
    let missing: Vec<ClusterId> = {
        let c = cache.lock().expect("cache poisoned");
        fqset.iter().copied().filter(|id| !c.contains(*id)).collect()
    };
    let mut loaded = Vec::with_capacity(missing.len());
    for id in missing {
        let sw = Stopwatch::start();
        match store.read(id) {
            Ok(data) => loaded.push((data, sw.elapsed_secs())),
            Err(e) => log::warn!("prefetch of cluster {id} failed: {e}"),
        }
    }
    let mut c = cache.lock().expect("cache poisoned");
    admit_prefetched(&mut c, fqset, loaded)
}

/// Admits prefetched clusters while keeping the already-resident members of
/// `fqset` pinned, so the wave cannot evict part of the set it completes.
pub fn admit_prefetched(
    cache: &mut ClusterCache,
    fqset: &[ClusterId],
    loaded: Vec<(std::sync::Arc<crate::index::ClusterData>, f64)>,
) -> usize {
    let resident: Vec<ClusterId> = fqset.iter().copied().filter(|id| cache.contains(*id)).collect();
    let loaded: Vec<_> = loaded
        .into_iter()
        .filter(|(d, _)| !cache.contains(d.cluster_id))
        .collect();
    let n = loaded.len();
    cache.pin(&resident);
    let res = cache.admit(loaded, AdmitOrigin::Prefetch);
    cache.unpin(&resident);
    match res {
        Ok(_) => n,
        Err(e) => {
            log::warn!("prefetched clusters not admitted: {e}");
            0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::PolicyKind;
    use crate::embedding::VectorSet;
    use crate::index::{ClusterData, MemoryStore};

    fn group(id: usize, members: &[QueryId], next: Option<(QueryId, Vec<ClusterId>)>) -> QueryGroup {
        QueryGroup {
            group_id: id,
            members: members.to_vec(),
            member_indices: vec![],
            union_clusters: vec![],
            prefetch: next.map(|(fq, fqset)| PrefetchMetadata { fq, fqset }),
        }
    }

    #[test]
    fn fires_on_last_dispatch_only() {
        let gs = [group(0, &[1, 2, 3], Some((4, vec![7]))), group(1, &[4], None)];
        let mut t = PrefetchTracker::new(&gs, PrefetchTrigger::Dispatch);
        assert_eq!(t.on_query_dispatch(1, 0).unwrap(), PrefetchAction::None);
        assert_eq!(t.on_query_dispatch(2, 0).unwrap(), PrefetchAction::None);
        assert!(matches!(t.on_query_dispatch(3, 0).unwrap(), PrefetchAction::Fire(m) if m.fq == 4));
        t.on_query_complete(1, 0).unwrap();
        t.on_query_complete(2, 0).unwrap();
        assert!(matches!(t.on_query_complete(3, 0).unwrap(), PrefetchAction::Reconcile(_)));
        t.mark_complete(0).unwrap();
        assert_eq!(t.on_query_dispatch(4, 1).unwrap(), PrefetchAction::None);
        assert_eq!(t.prefetches_issued(), 1);
        assert_eq!(t.predecessor(1).unwrap().prefetch_state, PrefetchState::Complete);
    }

    #[test]
    fn completion_trigger_fires_once() {
        let gs = [group(0, &[1, 2], Some((3, vec![7]))), group(1, &[3], None)];
        let mut t = PrefetchTracker::new(&gs, PrefetchTrigger::Completion);
        assert_eq!(t.on_query_dispatch(1, 0).unwrap(), PrefetchAction::None);
        assert_eq!(t.on_query_dispatch(2, 0).unwrap(), PrefetchAction::None);
        assert_eq!(t.on_query_complete(1, 0).unwrap(), PrefetchAction::None);
        assert!(matches!(t.on_query_complete(2, 0).unwrap(), PrefetchAction::Fire(_)));
        assert!(t.on_query_complete(2, 0).is_err());
        assert_eq!(t.prefetches_issued(), 1);
    }

    #[test]
    fn unknown_group_is_a_protocol_error() {
        let mut t = PrefetchTracker::new(&[group(0, &[1], None)], PrefetchTrigger::Dispatch);
        assert!(matches!(t.on_query_dispatch(1, 9), Err(Error::Protocol(_))));
        assert!(matches!(t.on_query_dispatch(2, 0), Err(Error::Protocol(_))));
    }

    #[test]
    fn execute_loads_only_misses() {
        let clusters = (0..4)
            .map(|c| {
                let vs = VectorSet::from_rows(1, [[c as f32]]).unwrap();
                ClusterData::new(c, vec![c as u64], vs).unwrap()
            })
            .collect();
        let store = MemoryStore::new(clusters).unwrap();
        let cache = Mutex::new(ClusterCache::with_entries(3, PolicyKind::Lru).unwrap());
        {
            let mut c = cache.lock().unwrap();
            c.admit(vec![(store.read(0).unwrap(), 0.0)], AdmitOrigin::Demand).unwrap();
        }
        assert_eq!(execute_prefetch(&[0, 1, 2], &cache, &store), 2);
        let c = cache.lock().unwrap();
        assert_eq!(c.resident_ids(), vec![0, 1, 2]);
        assert_eq!(c.stats().prefetch_admissions, 2);
        assert_eq!(c.stats().misses, 0);
        drop(c);
        // storage failure is skipped
        assert_eq!(execute_prefetch(&[9], &cache, &store), 0);
    }
}
