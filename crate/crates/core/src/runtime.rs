//! Simulated devices, per-device in-order command queues and fences.
//!
//! Each device is a worker thread owning a private memory arena. Commands
//! are submitted asynchronously to a device's FIFO queue and execute in
//! submission order; completion is observed through [`Fence`]s or
//! [`Environment::barrier_fence`]. Kernel failures (panics) are captured and
//! reported when the corresponding fence is waited on; no queue recovery is
//! attempted.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use crate::error::{Error, Result};
use crate::topology::{Topology, TransferLedger};

/// Device index within the environment.
pub type Rank = usize;

/// Contiguous range of device ranks actually used for computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DevGroup {
    first: Rank,
    last_exclusive: Rank,
}

impl DevGroup {
    /// Use devices `first..last_exclusive`.
    pub fn from_to(first: Rank, last_exclusive: Rank) -> DevGroup {
        DevGroup { first, last_exclusive }
    }

    pub fn all(device_count: usize) -> DevGroup {
        DevGroup { first: 0, last_exclusive: device_count }
    }

    pub fn first(&self) -> Rank {
        self.first
    }

    pub fn last_exclusive(&self) -> Rank {
        self.last_exclusive
    }

    pub fn len(&self) -> usize {
        self.last_exclusive - self.first
    }

    pub fn is_empty(&self) -> bool {
        self.first >= self.last_exclusive
    }

    pub fn contains(&self, rank: Rank) -> bool {
        rank >= self.first && rank < self.last_exclusive
    }

    pub fn ranks(&self) -> impl Iterator<Item = Rank> + Clone {
        self.first..self.last_exclusive
    }
}

#[derive(Debug, Default)]
struct TaskFailure {
    rank: Rank,
    message: String,
}

#[derive(Default)]
struct FenceState {
    pending: usize,
    failure: Option<TaskFailure>,
}

struct FenceInner {
    state: Mutex<FenceState>,
    done: Condvar,
}

/// Completion token for a set of submitted commands.
///
/// Cloning shares the token; waiting returns once every covered command has
/// finished, surfacing the first failure if any command panicked.
#[derive(Clone)]
pub struct Fence {
    inner: Arc<FenceInner>,
}

impl Fence {
    fn with_pending(pending: usize) -> Fence {
        Fence {
            inner: Arc::new(FenceInner {
                state: Mutex::new(FenceState { pending, failure: None }),
                done: Condvar::new(),
            }),
        }
    }

    /// A fence that is already complete.
    pub fn completed() -> Fence {
        Fence::with_pending(0)
    }

    fn add(&self, n: usize) {
        self.inner.state.lock().unwrap().pending += n;
    }

    fn complete(&self, result: std::result::Result<(), TaskFailure>) {
        let mut state = self.inner.state.lock().unwrap();
        state.pending -= 1;
        if let Err(failure) = result {
            state.failure.get_or_insert(failure);
        }
        if state.pending == 0 {
            self.inner.done.notify_all();
        }
    }

    /// Block until all covered commands completed.
    pub fn wait(&self) -> Result<()> {
        let mut state = self.inner.state.lock().unwrap();
        while state.pending > 0 {
            state = self.inner.done.wait(state).unwrap();
        }
        match &state.failure {
            None => Ok(()),
            Some(f) => Err(Error::Task { rank: f.rank, message: f.message.clone() }),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.inner.state.lock().unwrap().pending == 0
    }
}

impl std::fmt::Debug for Fence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fence")
            .field("complete", &self.is_complete())
            .finish()
    }
}

/// Execution context handed to a command running on a device.
pub struct KernelCtx {
    rank: Rank,
    group: DevGroup,
}

impl KernelCtx {
    /// Rank of the device executing this command.
    pub fn rank(&self) -> Rank {
        self.rank
    }

    /// Device group of the owning environment.
    pub fn group(&self) -> DevGroup {
        self.group
    }
}

type CommandFn = Box<dyn FnOnce(&mut KernelCtx) -> std::result::Result<(), String> + Send>;

struct WorkItem {
    deps: Vec<Fence>,
    run: CommandFn,
    fence: Fence,
}

/// Per-device allocation bookkeeping. Capacity is optional; without one the
/// arena is unbounded and creation never fails.
#[derive(Debug)]
pub(crate) struct ArenaAccounting {
    rank: Rank,
    used: Mutex<usize>,
    capacity: Option<usize>,
}

impl ArenaAccounting {
    fn lease(self: &Arc<Self>, bytes: usize) -> Result<ArenaLease> {
        let mut used = self.used.lock().unwrap();
        if let Some(cap) = self.capacity {
            let available = cap.saturating_sub(*used);
            if bytes > available {
                return Err(Error::Alloc { rank: self.rank, requested: bytes, available });
            }
        }
        *used += bytes;
        Ok(ArenaLease { accounting: Arc::clone(self), bytes })
    }

    pub(crate) fn used(&self) -> usize {
        *self.used.lock().unwrap()
    }
}

/// RAII lease on arena capacity; dropping it returns the bytes.
#[derive(Debug)]
pub(crate) struct ArenaLease {
    accounting: Arc<ArenaAccounting>,
    bytes: usize,
}

impl Drop for ArenaLease {
    fn drop(&mut self) {
        *self.accounting.used.lock().unwrap() -= self.bytes;
    }
}

struct QueueShared {
    sender: Option<Sender<WorkItem>>,
    tail: Fence,
}

struct DeviceWorker {
    queue: Mutex<QueueShared>,
    arena: Arc<ArenaAccounting>,
    handle: Option<JoinHandle<()>>,
}

/// Environment construction options.
#[derive(Debug, Clone, Default)]
pub struct EnvConfig {
    /// Number of simulated devices present in the node.
    pub devices: usize,
    /// Subset of devices used for computation; defaults to all.
    pub group: Option<DevGroup>,
    /// Interconnect layout; defaults to one PCIe domain under one IOH.
    pub topology: Option<Topology>,
    /// Per-device arena capacity in bytes; `None` means unbounded.
    pub arena_capacity: Option<usize>,
}

impl EnvConfig {
    pub fn new(devices: usize) -> EnvConfig {
        EnvConfig { devices, ..EnvConfig::default() }
    }
}

struct EnvInner {
    group: DevGroup,
    device_count: usize,
    workers: Vec<DeviceWorker>,
    topology: Topology,
    ledger: TransferLedger,
}

impl Drop for EnvInner {
    fn drop(&mut self) {
        for w in &self.workers {
            w.queue.lock().unwrap().sender = None;
        }
        // The last handle can be dropped from inside a worker (a queued
        // command owns containers that own the environment); in that case
        // the workers are detached and exit once their queues drain.
        let me = std::thread::current().id();
        let inside_worker = self
            .workers
            .iter()
            .any(|w| w.handle.as_ref().is_some_and(|h| h.thread().id() == me));
        for w in &mut self.workers {
            if let Some(handle) = w.handle.take() {
                if !inside_worker {
                    let _ = handle.join();
                }
            }
        }
    }
}

/// Handle to the simulated multi-device node.
///
/// Cheap to clone and shareable across host threads; per-rank command order
/// is defined by arrival order at that rank's queue.
#[derive(Clone)]
pub struct Environment {
    inner: Arc<EnvInner>,
}

impl std::fmt::Debug for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Environment")
            .field("devices", &self.inner.device_count)
            .field("group", &self.inner.group)
            .finish()
    }
}

impl Environment {
    /// Start workers for `device_count` simulated devices, optionally
    /// restricted to a [`DevGroup`].
    pub fn create(device_count: usize, group: Option<DevGroup>) -> Result<Environment> {
        Environment::with_config(EnvConfig { devices: device_count, group, ..EnvConfig::default() })
    }

    pub fn with_config(config: EnvConfig) -> Result<Environment> {
        if config.devices == 0 {
            return Err(Error::config("device count must be at least 1"));
        }
        let group = config.group.unwrap_or_else(|| DevGroup::all(config.devices));
        if group.is_empty() || group.last_exclusive() > config.devices {
            return Err(Error::config(format!(
                "device group [{}, {}) outside configured devices [0, {})",
                group.first(),
                group.last_exclusive(),
                config.devices
            )));
        }
        let topology = config.topology.unwrap_or_else(|| Topology::flat(config.devices));
        if topology.device_count() < config.devices {
            return Err(Error::config(format!(
                "topology describes {} devices, environment needs {}",
                topology.device_count(),
                config.devices
            )));
        }

        let mut workers = Vec::with_capacity(group.len());
        for rank in group.ranks() {
            let (sender, receiver) = channel::<WorkItem>();
            let handle = std::thread::Builder::new()
                .name(format!("segdev-dev{rank}"))
                .spawn(move || {
                    let mut ctx = KernelCtx { rank, group };
                    'queue: for item in receiver {
                        for dep in &item.deps {
                            if let Err(e) = dep.wait() {
                                item.fence.complete(Err(TaskFailure {
                                    rank,
                                    message: format!("dependency failed: {e}"),
                                }));
                                continue 'queue;
                            }
                        }
                        let result = catch_unwind(AssertUnwindSafe(|| (item.run)(&mut ctx)));
                        let outcome = match result {
                            Ok(Ok(())) => Ok(()),
                            Ok(Err(message)) => Err(TaskFailure { rank, message }),
                            Err(payload) => Err(TaskFailure { rank, message: panic_message(payload) }),
                        };
                        item.fence.complete(outcome);
                    }
                })
                .map_err(|e| Error::config(format!("failed to spawn device worker: {e}")))?;
            workers.push(DeviceWorker {
                queue: Mutex::new(QueueShared { sender: Some(sender), tail: Fence::completed() }),
                arena: Arc::new(ArenaAccounting {
                    rank,
                    used: Mutex::new(0),
                    capacity: config.arena_capacity,
                }),
                handle: Some(handle),
            });
        }

        Ok(Environment {
            inner: Arc::new(EnvInner {
                group,
                device_count: config.devices,
                workers,
                topology,
                ledger: TransferLedger::new(),
            }),
        })
    }

    pub fn group(&self) -> DevGroup {
        self.inner.group
    }

    pub fn device_count(&self) -> usize {
        self.inner.device_count
    }

    /// True when both handles refer to the same environment.
    pub fn ptr_eq(&self, other: &Environment) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn topology(&self) -> &Topology {
        &self.inner.topology
    }

    pub fn ledger(&self) -> &TransferLedger {
        &self.inner.ledger
    }

    fn worker(&self, rank: Rank) -> Result<&DeviceWorker> {
        if !self.inner.group.contains(rank) {
            return Err(Error::usage(format!(
                "rank {rank} outside device group [{}, {})",
                self.inner.group.first(),
                self.inner.group.last_exclusive()
            )));
        }
        Ok(&self.inner.workers[rank - self.inner.group.first()])
    }

    pub(crate) fn lease_arena(&self, rank: Rank, bytes: usize) -> Result<ArenaLease> {
        self.worker(rank)?.arena.lease(bytes)
    }

    /// Bytes currently leased from `rank`'s arena.
    pub fn arena_used(&self, rank: Rank) -> Result<usize> {
        Ok(self.worker(rank)?.arena.used())
    }

    /// Enqueue a command on `rank`'s queue, to run after the given
    /// dependencies complete, signalling `fence` when done.
    pub(crate) fn submit_raw(
        &self,
        rank: Rank,
        deps: Vec<Fence>,
        fence: &Fence,
        run: CommandFn,
    ) -> Result<()> {
        let worker = self.worker(rank)?;
        let mut queue = worker.queue.lock().unwrap();
        fence.add(1);
        let item = WorkItem { deps, run, fence: fence.clone() };
        match queue.sender.as_ref() {
            Some(sender) => sender.send(item).map_err(|_| {
                Error::usage(format!("device {rank} queue is shut down"))
            })?,
            None => return Err(Error::usage(format!("device {rank} queue is shut down"))),
        }
        queue.tail = fence.clone();
        Ok(())
    }

    /// Asynchronously run `command` on `rank`; returns immediately.
    pub fn submit<F>(&self, rank: Rank, command: F) -> Result<Fence>
    where
        F: FnOnce(&mut KernelCtx) + Send + 'static,
    {
        let fence = Fence::with_pending(0);
        self.submit_raw(
            rank,
            Vec::new(),
            &fence,
            Box::new(move |ctx| {
                command(ctx);
                Ok(())
            }),
        )?;
        Ok(fence)
    }

    /// Run `caller` once, in the context of device `rank`.
    ///
    /// Segmented containers are passed by capturing a clone in the closure:
    /// `container.local(ctx)` / `local_mut(ctx)` resolve to the executing
    /// device's range, while the captured handle itself is the pass-through
    /// form for kernels that need the whole container's descriptors.
    pub fn invoke_kernel<F>(&self, rank: Rank, caller: F) -> Result<Fence>
    where
        F: FnOnce(&mut KernelCtx) + Send + 'static,
    {
        self.submit(rank, caller)
    }

    /// Run `caller` once per device in the group; the returned fence covers
    /// all launches.
    pub fn invoke_kernel_all<F>(&self, caller: F) -> Result<Fence>
    where
        F: Fn(&mut KernelCtx) + Send + Sync + 'static,
    {
        self.invoke_kernel_ranks(self.inner.group.ranks(), caller)
    }

    /// Run `caller` once per listed rank under a single fence.
    pub fn invoke_kernel_ranks<I, F>(&self, ranks: I, caller: F) -> Result<Fence>
    where
        I: IntoIterator<Item = Rank>,
        F: Fn(&mut KernelCtx) + Send + Sync + 'static,
    {
        let caller = Arc::new(caller);
        let fence = Fence::with_pending(0);
        for rank in ranks {
            let caller = Arc::clone(&caller);
            self.submit_raw(
                rank,
                Vec::new(),
                &fence,
                Box::new(move |ctx| {
                    caller(ctx);
                    Ok(())
                }),
            )?;
        }
        Ok(fence)
    }

    /// Fence of the most recently submitted command on `rank`'s queue.
    pub(crate) fn queue_tail(&self, rank: Rank) -> Result<Fence> {
        Ok(self.worker(rank)?.queue.lock().unwrap().tail.clone())
    }

    /// Tails of every queue in the group, for cross-device dependencies.
    pub(crate) fn group_tails(&self) -> Vec<Fence> {
        self.inner
            .group
            .ranks()
            .map(|r| self.queue_tail(r).expect("group rank"))
            .collect()
    }

    /// Block until every queue in the group is drained. After return, host
    /// reads observe all effects of previously submitted commands.
    pub fn barrier_fence(&self) -> Result<()> {
        let tails = self.group_tails();
        let mut first_err = None;
        for tail in tails {
            if let Err(e) = tail.wait() {
                first_err.get_or_insert(e);
            }
        }
        match first_err {
            None => Ok(()),
            Some(e) => Err(e),
        }
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "kernel panicked".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn default_group_covers_all_devices() {
        let env = Environment::create(4, None).unwrap();
        assert_eq!(env.group(), DevGroup::all(4));
        assert_eq!(env.group().len(), 4);
    }

    #[test]
    fn explicit_group_limits_devices() {
        let env = Environment::create(8, Some(DevGroup::from_to(0, 2))).unwrap();
        assert_eq!(env.group().ranks().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn out_of_bounds_group_is_config_error() {
        let err = Environment::create(2, Some(DevGroup::from_to(1, 3))).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
        assert!(Environment::create(0, None).is_err());
        assert!(Environment::create(2, Some(DevGroup::from_to(1, 1))).is_err());
    }

    #[test]
    fn commands_run_in_submission_order() {
        let env = Environment::create(1, None).unwrap();
        let log = Arc::new(Mutex::new(Vec::new()));
        for i in 0..10 {
            let log = Arc::clone(&log);
            env.submit(0, move |_| log.lock().unwrap().push(i)).unwrap();
        }
        env.barrier_fence().unwrap();
        assert_eq!(*log.lock().unwrap(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn submit_outside_group_is_usage_error() {
        let env = Environment::create(2, None).unwrap();
        let err = env.submit(5, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "got {err:?}");
    }

    #[test]
    fn interleaved_submissions_preserve_per_rank_order() {
        let env = Environment::create(2, None).unwrap();
        let log = Arc::new(Mutex::new(Vec::new()));
        for i in 0..1000 {
            let rank = i % 2;
            let log = Arc::clone(&log);
            env.submit(rank, move |ctx| log.lock().unwrap().push((ctx.rank(), i)))
                .unwrap();
        }
        env.barrier_fence().unwrap();
        let log = log.lock().unwrap();
        assert_eq!(log.len(), 1000);
        for rank in 0..2 {
            let stamps: Vec<usize> = log.iter().filter(|(r, _)| *r == rank).map(|&(_, i)| i).collect();
            assert!(stamps.windows(2).all(|w| w[0] < w[1]), "rank {rank} order broken");
        }
    }

    #[test]
    fn barrier_with_no_pending_work_returns() {
        let env = Environment::create(3, None).unwrap();
        env.barrier_fence().unwrap();
    }

    #[test]
    fn barrier_establishes_visibility() {
        let env = Environment::create(3, None).unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        for rank in 0..3 {
            let hits = Arc::clone(&hits);
            env.submit(rank, move |_| {
                std::thread::sleep(std::time::Duration::from_millis(5));
                hits.fetch_add(1, Ordering::SeqCst);
            })
            .unwrap();
        }
        env.barrier_fence().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn submissions_from_many_host_threads_are_safe() {
        let env = Environment::create(2, None).unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let threads: Vec<_> = (0..4)
            .map(|t| {
                let env = env.clone();
                let hits = Arc::clone(&hits);
                std::thread::spawn(move || {
                    for i in 0..100 {
                        let hits = Arc::clone(&hits);
                        env.submit((t + i) % 2, move |_| {
                            hits.fetch_add(1, Ordering::SeqCst);
                        })
                        .unwrap();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        env.barrier_fence().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 400);
    }

    #[test]
    fn concurrent_barriers_do_not_deadlock() {
        let env = Environment::create(4, None).unwrap();
        for rank in 0..4 {
            env.submit(rank, |_| std::thread::sleep(std::time::Duration::from_millis(2)))
                .unwrap();
        }
        let a = {
            let env = env.clone();
            std::thread::spawn(move || env.barrier_fence())
        };
        let b = {
            let env = env.clone();
            std::thread::spawn(move || env.barrier_fence())
        };
        a.join().unwrap().unwrap();
        b.join().unwrap().unwrap();
    }

    #[test]
    fn invoke_kernel_all_runs_once_per_device() {
        let env = Environment::create(3, None).unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = Arc::clone(&seen);
        let fence = env
            .invoke_kernel_all(move |ctx| seen2.lock().unwrap().push(ctx.rank()))
            .unwrap();
        fence.wait().unwrap();
        let mut ranks = seen.lock().unwrap().clone();
        ranks.sort_unstable();
        assert_eq!(ranks, vec![0, 1, 2]);
    }

    #[test]
    fn panics_are_reported_at_fence_and_queue_survives() {
        let env = Environment::create(1, None).unwrap();
        let fence = env.submit(0, |_| panic!("boom")).unwrap();
        let err = fence.wait().unwrap_err();
        assert!(matches!(err, Error::Task { rank: 0, .. }), "got {err:?}");
        // Queue keeps serving commands afterwards.
        let ok = env.submit(0, |_| {}).unwrap();
        ok.wait().unwrap();
    }

    #[test]
    fn dependency_failure_propagates() {
        let env = Environment::create(2, None).unwrap();
        let bad = env.submit(0, |_| panic!("first")).unwrap();
        let fence = Fence::with_pending(0);
        env.submit_raw(1, vec![bad], &fence, Box::new(|_| Ok(()))).unwrap();
        assert!(fence.wait().is_err());
    }

    #[test]
    fn arena_capacity_is_enforced() {
        let env = Environment::with_config(EnvConfig {
            devices: 1,
            arena_capacity: Some(64),
            ..EnvConfig::default()
        })
        .unwrap();
        let lease = env.lease_arena(0, 48).unwrap();
        let err = env.lease_arena(0, 32).unwrap_err();
        assert!(matches!(err, Error::Alloc { rank: 0, requested: 32, available: 16 }), "got {err:?}");
        drop(lease);
        assert_eq!(env.arena_used(0).unwrap(), 0);
        let _ok = env.lease_arena(0, 64).unwrap();
    }
}
