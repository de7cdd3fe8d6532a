//! Parallel cluster loading.
//!
//! Missing clusters are sorted by size (largest first, ties by id) and cut
//! into chunks of `T`; worker `w` then loads `order[w]`, `order[w + T]`, ...
//! so every worker's `c`-th file is no larger than any file of chunk `c - 1`.
//! This keeps one oversized file from landing behind other large ones.
//!
//! [`LoaderPool`] runs plans on real threads with per-worker queues where
//! demand work jumps ahead of queued prefetch work. [`VirtualPool`] replays
//! the same dispatch rules against a [`CostModel`] in virtual time.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::Stopwatch;
use crate::error::{Error, Result};
use crate::index::{ClusterData, ClusterId, ClusterStore};

pub const DEFAULT_THREADS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadPlan {
    pub order: Vec<ClusterId>,
    /// `order` cut into consecutive chunks of at most `threads` ids.
    pub thread_groups: Vec<Vec<ClusterId>>,
    pub threads: usize,
}

impl LoadPlan {
    fn from_order(order: Vec<ClusterId>, threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::invalid("loader needs at least one thread"));
        }
        let thread_groups = order.chunks(threads).map(<[_]>::to_vec).collect();
        Ok(LoadPlan {
            order,
            thread_groups,
            threads,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Ids worker `w` loads, in sequence.
    pub fn worker_queue(&self, w: usize) -> Vec<ClusterId> {
        self.order
            .iter()
            .skip(w)
            .step_by(self.threads)
            .copied()
            .collect()
    }
}

/// Load-weighted greedy packing over `(cluster_id, byte_size)` pairs.
pub fn plan_load(missing: &[(ClusterId, u64)], threads: usize) -> Result<LoadPlan> {
    let mut sorted = missing.to_vec();
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    LoadPlan::from_order(sorted.into_iter().map(|(id, _)| id).collect(), threads)
}

/// Size-oblivious plan that keeps the input order.
pub fn baseline_round_robin(missing: &[(ClusterId, u64)], threads: usize) -> Result<LoadPlan> {
    LoadPlan::from_order(missing.iter().map(|(id, _)| *id).collect(), threads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadOrdering {
    #[default]
    Greedy,
    RoundRobin,
}

impl std::str::FromStr for LoadOrdering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(LoadOrdering::Greedy),
            "round_robin" | "rr" => Ok(LoadOrdering::RoundRobin),
            other => Err(Error::invalid(format!("unknown load ordering {other:?}"))),
        }
    }
}

pub fn make_plan(ordering: LoadOrdering, missing: &[(ClusterId, u64)], threads: usize) -> Result<LoadPlan> {
    match ordering {
        LoadOrdering::Greedy => plan_load(missing, threads),
        LoadOrdering::RoundRobin => baseline_round_robin(missing, threads),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ThreadTiming {
    pub worker: usize,
    pub ids: Vec<ClusterId>,
    pub bytes: u64,
    /// Seconds from the request's first task start to this worker's last
    /// task end.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoadTiming {
    pub threads: Vec<ThreadTiming>,
    pub makespan: f64,
}

impl LoadTiming {
    fn from_threads(threads: Vec<ThreadTiming>) -> Self {
        let makespan = threads.iter().map(|t| t.seconds).fold(0.0, f64::max);
        LoadTiming { threads, makespan }
    }
}

/// Modeled storage: `per_file_overhead + bytes / throughput` seconds per file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub throughput: f64,
    pub per_file_overhead: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            throughput: 100e6,
            per_file_overhead: 1e-3,
        }
    }
}

impl CostModel {
    pub fn cost(&self, bytes: u64) -> f64 {
        self.per_file_overhead + bytes as f64 / self.throughput
    }
}

/// Makespan of a plan when each worker runs its queue back to back from t=0.
pub fn simulate_static(plan: &LoadPlan, size_of: impl Fn(ClusterId) -> u64, cost: &CostModel) -> LoadTiming {
    let threads = (0..plan.threads.min(plan.len()))
        .map(|w| {
            let ids = plan.worker_queue(w);
            let bytes = ids.iter().map(|id| size_of(*id)).sum();
            let seconds = ids.iter().map(|id| cost.cost(size_of(*id))).sum();
            ThreadTiming {
                worker: w,
                ids,
                bytes,
                seconds,
            }
        })
        .collect();
    LoadTiming::from_threads(threads)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct VirtualTask {
    wave: Option<u64>,
    cost: f64,
    start: f64,
    end: f64,
}

/// Worker timelines in virtual time.
///
/// Prefetch waves queue behind whatever a worker already has. A demand load
/// issued at `t` runs right after the task each worker is executing at `t`
/// and pushes not-yet-started prefetch tasks back.
#[derive(Debug, Clone)]
pub struct VirtualPool {
    workers: Vec<Vec<VirtualTask>>,
    next_wave: u64,
}

impl VirtualPool {
    pub fn new(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::invalid("loader needs at least one thread"));
        }
        Ok(VirtualPool {
            workers: vec![Vec::new(); threads],
            next_wave: 0,
        })
    }

    pub fn threads(&self) -> usize {
        self.workers.len()
    }

    fn prune(&mut self, now: f64) {
        for tl in &mut self.workers {
            // keep the last task so its end time still bounds new work
            let keep_from = tl.iter().rposition(|t| t.end <= now).unwrap_or(0);
            tl.drain(..keep_from);
        }
    }

    /// Runs a demand plan issued at `now`; returns per-worker timings and
    /// the per-cluster load cost.
    pub fn demand(
        &mut self,
        now: f64,
        plan: &LoadPlan,
        size_of: impl Fn(ClusterId) -> u64,
        cost: &CostModel,
    ) -> (LoadTiming, Vec<(ClusterId, f64)>) {
        self.prune(now);
        let mut per_cluster = Vec::with_capacity(plan.len());
        let mut threads = Vec::new();
        let mut first_start = f64::INFINITY;
        let mut ends = Vec::new();
        for w in 0..plan.threads.min(plan.len()) {
            let ids = plan.worker_queue(w);
            let tl = &mut self.workers[w];
            let split = tl.iter().position(|t| t.wave.is_some() && t.start >= now).unwrap_or(tl.len());
            let deferred: Vec<VirtualTask> = tl.drain(split..).collect();
            let mut cursor = tl.last().map_or(now, |t| t.end.max(now));
            first_start = first_start.min(cursor);
            let mut bytes = 0;
            for id in &ids {
                let size = size_of(*id);
                let c = cost.cost(size);
                bytes += size;
                per_cluster.push((*id, c));
                tl.push(VirtualTask {
                    wave: None,
                    cost: c,
                    start: cursor,
                    end: cursor + c,
                });
                cursor += c;
            }
            ends.push(cursor);
            for mut t in deferred {
                t.start = cursor;
                t.end = cursor + t.cost;
                cursor = t.end;
                tl.push(t);
            }
            threads.push(ThreadTiming {
                worker: w,
                ids,
                bytes,
                seconds: 0.0,
            });
        }
        for (t, end) in threads.iter_mut().zip(ends) {
            t.seconds = end - first_start;
        }
        let mut timing = LoadTiming::from_threads(threads);
        // report the makespan as seen by the caller, including any wait for
        // in-progress tasks
        if first_start.is_finite() {
            timing.makespan += first_start - now;
        }
        (timing, per_cluster)
    }

    /// Queues a background wave at `now` and returns its handle.
    pub fn prefetch(
        &mut self,
        now: f64,
        plan: &LoadPlan,
        size_of: impl Fn(ClusterId) -> u64,
        cost: &CostModel,
    ) -> VirtualWave {
        self.prune(now);
        let wave = self.next_wave;
        self.next_wave += 1;
        let mut costs = Vec::with_capacity(plan.len());
        for w in 0..plan.threads.min(plan.len()) {
            let tl = &mut self.workers[w];
            let mut cursor = tl.last().map_or(now, |t| t.end.max(now));
            for id in plan.worker_queue(w) {
                let c = cost.cost(size_of(id));
                costs.push((id, c));
                tl.push(VirtualTask {
                    wave: Some(wave),
                    cost: c,
                    start: cursor,
                    end: cursor + c,
                });
                cursor += c;
            }
        }
        VirtualWave {
            id: wave,
            issued: now,
            costs,
        }
    }

    /// Completion time of a wave given the current timelines.
    pub fn wave_end(&self, wave: &VirtualWave) -> f64 {
        self.workers
            .iter()
            .flatten()
            .filter(|t| t.wave == Some(wave.id))
            .map(|t| t.end)
            .fold(wave.issued, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualWave {
    id: u64,
    issued: f64,
    /// Load cost per cluster of the wave.
    pub costs: Vec<(ClusterId, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Priority {
    Demand,
    Prefetch,
}

struct Task {
    id: ClusterId,
    slot: usize,
    ticket: Arc<TicketState>,
}

struct Queues {
    per_worker: Vec<VecDeque<Task>>,
    shutdown: bool,
}

struct PoolShared {
    queues: Mutex<Queues>,
    wake: Condvar,
}

/// Persistent pool of `T` loader threads.
pub struct LoaderPool {
    shared: Arc<PoolShared>,
    handles: Vec<JoinHandle<()>>,
    store: Arc<dyn ClusterStore>,
}

impl std::fmt::Debug for LoaderPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoaderPool")
            .field("threads", &self.handles.len())
            .finish()
    }
}

impl LoaderPool {
    pub fn new(store: Arc<dyn ClusterStore>, threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::invalid("loader needs at least one thread"));
        }
        let shared = Arc::new(PoolShared {
            queues: Mutex::new(Queues {
                per_worker: (0..threads).map(|_| VecDeque::new()).collect(),
                shutdown: false,
            }),
            wake: Condvar::new(),
        });
        let handles = (0..threads)
            .map(|w| {
                let shared = shared.clone();
                let store = store.clone();
                std::thread::Builder::new()
                    .name(format!("loader-{w}"))
                    .spawn(move || worker_loop(w, &shared, store.as_ref()))
                    .map_err(|e| Error::Protocol(format!("cannot spawn loader thread: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LoaderPool {
            shared,
            handles,
            store,
        })
    }

    pub fn threads(&self) -> usize {
        self.handles.len()
    }

    pub fn store(&self) -> &Arc<dyn ClusterStore> {
        &self.store
    }

    /// Enqueues a plan. Demand tasks go ahead of queued work, prefetch tasks
    /// behind it.
    pub fn submit(&self, plan: &LoadPlan, priority: Priority) -> LoadTicket {
        let ticket = Arc::new(TicketState::new(plan));
        let mut q = self.shared.queues.lock().expect("loader queue poisoned");
        let threads = q.per_worker.len();
        for w in 0..plan.threads.min(plan.len()) {
            let tasks: Vec<Task> = plan
                .order
                .iter()
                .enumerate()
                .skip(w)
                .step_by(plan.threads)
                .map(|(slot, id)| Task {
                    id: *id,
                    slot,
                    ticket: ticket.clone(),
                })
                .collect();
            let dq = &mut q.per_worker[w % threads];
            match priority {
                Priority::Demand => {
                    for t in tasks.into_iter().rev() {
                        dq.push_front(t);
                    }
                }
                Priority::Prefetch => dq.extend(tasks),
            }
        }
        drop(q);
        self.shared.wake.notify_all();
        LoadTicket { state: ticket }
    }

    /// Submits a demand plan and blocks until it finishes.
    pub fn load(&self, plan: &LoadPlan) -> LoadOutcome {
        self.submit(plan, Priority::Demand).wait()
    }
}

impl Drop for LoaderPool {
    fn drop(&mut self) {
        if let Ok(mut q) = self.shared.queues.lock() {
            q.shutdown = true;
        }
        self.shared.wake.notify_all();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

fn worker_loop(w: usize, shared: &PoolShared, store: &dyn ClusterStore) {
    loop {
        let task = {
            let mut q = shared.queues.lock().expect("loader queue poisoned");
            loop {
                if let Some(t) = q.per_worker[w].pop_front() {
                    break t;
                }
                if q.shutdown {
                    return;
                }
                q = shared.wake.wait(q).expect("loader queue poisoned");
            }
        };
        let start = task.ticket.clock.elapsed_secs();
        let result = store.read(task.id);
        let end = task.ticket.clock.elapsed_secs();
        task.ticket.finish(task.slot, w, start, end, result);
    }
}

struct Slot {
    id: ClusterId,
    worker: usize,
    start: f64,
    end: f64,
    result: Option<Result<Arc<ClusterData>>>,
}

struct TicketInner {
    slots: Vec<Slot>,
    remaining: usize,
}

struct TicketState {
    clock: Stopwatch,
    threads: usize,
    inner: Mutex<TicketInner>,
    done: Condvar,
}

impl TicketState {
    fn new(plan: &LoadPlan) -> Self {
        let slots = plan
            .order
            .iter()
            .enumerate()
            .map(|(i, id)| Slot {
                id: *id,
                worker: i % plan.threads,
                start: 0.0,
                end: 0.0,
                result: None,
            })
            .collect();
        TicketState {
            clock: Stopwatch::start(),
            threads: plan.threads,
            inner: Mutex::new(TicketInner {
                slots,
                remaining: plan.len(),
            }),
            done: Condvar::new(),
        }
    }

    fn finish(&self, slot: usize, worker: usize, start: f64, end: f64, result: Result<Arc<ClusterData>>) {
        let mut inner = self.inner.lock().expect("ticket poisoned");
        let s = &mut inner.slots[slot];
        s.worker = worker;
        s.start = start;
        s.end = end;
        s.result = Some(result);
        inner.remaining -= 1;
        if inner.remaining == 0 {
            self.done.notify_all();
        }
    }
}

/// Results of one submitted plan.
#[derive(Debug, Default)]
pub struct LoadOutcome {
    /// Loaded clusters with their individual load time, in plan order.
    pub loaded: Vec<(Arc<ClusterData>, f64)>,
    pub failed: Vec<(ClusterId, Error)>,
    pub timing: LoadTiming,
}

/// Handle to a submitted plan.
pub struct LoadTicket {
    state: Arc<TicketState>,
}

impl std::fmt::Debug for LoadTicket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadTicket").field("done", &self.is_done()).finish()
    }
}

impl LoadTicket {
    /// An already finished ticket with nothing in it.
    pub(crate) fn done() -> Self {
        let empty = LoadPlan {
            order: Vec::new(),
            thread_groups: Vec::new(),
            threads: 1,
        };
        LoadTicket {
            state: Arc::new(TicketState::new(&empty)),
        }
    }

    pub fn is_done(&self) -> bool {
        self.state.inner.lock().map(|i| i.remaining == 0).unwrap_or(true)
    }

    pub fn wait(self) -> LoadOutcome {
        let mut inner = self.state.inner.lock().expect("ticket poisoned");
        while inner.remaining > 0 {
            inner = self.state.done.wait(inner).expect("ticket poisoned");
        }
        Self::collect(&mut inner, self.state.threads)
    }

    /// Waits at most `timeout`; gives the ticket back if it is still running.
    pub fn wait_timeout(self, timeout: Duration) -> std::result::Result<LoadOutcome, LoadTicket> {
        let state = self.state.clone();
        let inner = state.inner.lock().expect("ticket poisoned");
        let (mut inner, _) = state
            .done
            .wait_timeout_while(inner, timeout, |i| i.remaining > 0)
            .expect("ticket poisoned");
        if inner.remaining > 0 {
            drop(inner);
            return Err(self);
        }
        Ok(Self::collect(&mut inner, state.threads))
    }

    fn collect(inner: &mut TicketInner, threads: usize) -> LoadOutcome {
        let t0 = inner.slots.iter().map(|s| s.start).fold(f64::INFINITY, f64::min);
        let mut per_thread: Vec<ThreadTiming> = (0..threads.min(inner.slots.len()))
            .map(|w| ThreadTiming {
                worker: w,
                ..Default::default()
            })
            .collect();
        let n = per_thread.len();
        let mut out = LoadOutcome::default();
        for s in &mut inner.slots {
            let t = &mut per_thread[s.worker % n];
            t.ids.push(s.id);
            t.seconds = t.seconds.max(s.end - t0);
            match s.result.take() {
                Some(Ok(data)) => {
                    t.bytes += data.encoded_len();
                    out.loaded.push((data, s.end - s.start));
                }
                Some(Err(e)) => out.failed.push((s.id, e)),
                None => out.failed.push((s.id, Error::Protocol("load result taken twice".into()))),
            }
        }
        out.timing = LoadTiming::from_threads(per_thread);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::VectorSet;
    use crate::index::MemoryStore;

    fn sized(sizes: &[u64]) -> Vec<(ClusterId, u64)> {
        sizes.iter().enumerate().map(|(i, s)| (i as ClusterId, *s)).collect()
    }

    #[test]
    fn greedy_example() {
        let missing = sized(&[3, 10, 4, 9, 5, 8, 6, 7]);
        let size_of = |id: ClusterId| missing[id as usize].1;
        let unit = CostModel {
            throughput: 1.0,
            per_file_overhead: 0.0,
        };
        let plan = plan_load(&missing, 2).unwrap();
        let groups: Vec<Vec<u64>> = plan
            .thread_groups
            .iter()
            .map(|g| g.iter().map(|id| size_of(*id)).collect())
            .collect();
        assert_eq!(groups, vec![vec![10, 9], vec![8, 7], vec![6, 5], vec![4, 3]]);
        assert_eq!(simulate_static(&plan, size_of, &unit).makespan, 28.0);
        let rr = baseline_round_robin(&missing, 2).unwrap();
        assert_eq!(simulate_static(&rr, size_of, &unit).makespan, 34.0);
    }

    #[test]
    fn ties_broken_by_id() {
        let plan = plan_load(&[(5, 1), (2, 1), (9, 3)], 4).unwrap();
        assert_eq!(plan.order, vec![9, 2, 5]);
        assert_eq!(plan.thread_groups.len(), 1);
    }

    #[test]
    fn empty_plan_and_zero_threads() {
        let plan = plan_load(&[], 3).unwrap();
        assert!(plan.is_empty());
        assert_eq!(simulate_static(&plan, |_| 0, &CostModel::default()).makespan, 0.0);
        assert!(plan_load(&[(0, 1)], 0).is_err());
    }

    #[test]
    fn virtual_demand_preempts_queued_prefetch() {
        let cost = CostModel {
            throughput: 1.0,
            per_file_overhead: 0.0,
        };
        let mut pool = VirtualPool::new(1).unwrap();
        let pf = baseline_round_robin(&[(1, 4), (2, 4)], 1).unwrap();
        let wave = pool.prefetch(0.0, &pf, |_| 4, &cost);
        assert_eq!(pool.wave_end(&wave), 8.0);
        // at t=1 the first prefetch task is running; the second is pushed back
        let d = baseline_round_robin(&[(7, 2)], 1).unwrap();
        let (timing, _) = pool.demand(1.0, &d, |_| 2, &cost);
        assert_eq!(timing.makespan, 5.0);
        assert_eq!(pool.wave_end(&wave), 10.0);
    }

    fn store(n: usize) -> Arc<dyn ClusterStore> {
        let clusters = (0..n)
            .map(|c| {
                let rows = (0..c + 1).map(|r| [r as f32, c as f32]);
                let vs = VectorSet::from_rows(2, rows).unwrap();
                ClusterData::new(c as ClusterId, (0..=c as u64).collect(), vs).unwrap()
            })
            .collect();
        Arc::new(MemoryStore::new(clusters).unwrap())
    }

    #[test]
    fn pool_loads_every_cluster() {
        let store = store(10);
        let pool = LoaderPool::new(store.clone(), 3).unwrap();
        let missing: Vec<_> = (0..10).map(|id| (id, store.byte_size(id).unwrap())).collect();
        let plan = plan_load(&missing, 3).unwrap();
        let out = pool.load(&plan);
        assert!(out.failed.is_empty());
        let mut got: Vec<ClusterId> = out.loaded.iter().map(|(d, _)| d.cluster_id).collect();
        got.sort_unstable();
        assert_eq!(got, (0..10).collect::<Vec<_>>());
        assert_eq!(out.timing.threads.len(), 3);
        let max = out.timing.threads.iter().map(|t| t.seconds).fold(0.0, f64::max);
        assert_eq!(out.timing.makespan, max);
    }

    #[test]
    fn pool_reports_failures_and_continues() {
        let pool = LoaderPool::new(store(2), 2).unwrap();
        let plan = baseline_round_robin(&[(0, 1), (9, 1), (1, 1)], 2).unwrap();
        let out = pool.submit(&plan, Priority::Prefetch).wait_timeout(Duration::from_secs(5)).unwrap();
        assert_eq!(out.loaded.len(), 2);
        assert_eq!(out.failed.len(), 1);
        assert_eq!(out.failed[0].0, 9);
    }

    #[test]
    fn empty_ticket_is_done() {
        let pool = LoaderPool::new(store(1), 1).unwrap();
        let plan = plan_load(&[], 1).unwrap();
        let t = pool.submit(&plan, Priority::Demand);
        assert!(t.is_done());
        assert_eq!(t.wait().timing.makespan, 0.0);
    }
}
