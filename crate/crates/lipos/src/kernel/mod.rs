//! The kernel: runs inference programs as processes with cooperatively
//! scheduled threads on a discrete-event virtual clock.
//!
//! Program bodies are plain async Rust closures. Every await point is a
//! syscall on [`Ctx`]; the executor is single-threaded and polls a thread
//! only when it is at the front of the ready queue, so execution is
//! deterministic — a run is a pure function of (config, programs, injected
//! messages). Virtual time advances only between instants, driven by an
//! event heap: batch completions, I/O wakeups, pool deadlines, and
//! externally injected messages.
//!
//! Thread lifecycle: `Ready → Running` when polled; a syscall that must wait
//! parks the thread as `BlockedOnPred` (model batch) or `WaitingIo` (I/O
//! wait, message wait, join wait) and the matching completion event moves it
//! back to `Ready`; a body that returns goes to `Finished`. Any other
//! transition is a kernel bug and panics.
//!
//! During an `io_call` the kernel offloads the calling thread's
//! exclusively-owned device pages to host memory and restores them at wake;
//! the round trip is charged to the wait at `transfer_ns_per_page` per page
//! moved. Restore failure (device pool refilled by someone else meanwhile)
//! surfaces to the caller as [`SysError::RestoreFailed`]; the file's content
//! survives intact on the host tier.

pub mod trace;

use crate::kvfs::{Caller, FileId, KvError, KvStore, KvfsConfig, PoolStats, Sharing, Tier};
use crate::model::{compute_pred, Dist, ModelConfig};
use crate::scheduler::{CostModel, InferencePool, PredRequest, SchedConfig};
use crate::types::{Nanos, Pid, Position, Principal, Tid, TokenId};
use serde_json::Value;
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};
use thiserror::Error;
use trace::{BatchItem, TraceEvent, TraceRecord};

/// Sender pid seen by programs for messages injected with
/// [`Kernel::post_message`]. No process owns this pid; sending to it fails
/// with `NoSuchProcess`.
pub const EXTERNAL_CLIENT: Pid = Pid(0);

pub type SysResult<T> = Result<T, SysError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SysError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("no such thread {0}")]
    NoSuchThread(Tid),
    #[error("thread {0} belongs to a different process")]
    CrossProcessJoin(Tid),
    #[error("no such process {0}")]
    NoSuchProcess(Pid),
    #[error("no registered tool named {0:?}")]
    NoSuchTool(String),
    /// KV files offloaded for an I/O wait could not all return to the
    /// device at wake. The tool's result is discarded; file contents remain
    /// intact on the host tier.
    #[error("restore after I/O wait failed: {0}")]
    RestoreFailed(KvError),
    #[error("kernel is shutting down")]
    KernelShuttingDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ThreadState {
    Ready,
    Running,
    BlockedOnPred,
    WaitingIo,
    Finished,
}

impl ThreadState {
    fn name(self) -> &'static str {
        match self {
            ThreadState::Ready => "ready",
            ThreadState::Running => "running",
            ThreadState::BlockedOnPred => "blocked_on_pred",
            ThreadState::WaitingIo => "waiting_io",
            ThreadState::Finished => "finished",
        }
    }

    fn may_become(self, next: ThreadState) -> bool {
        use ThreadState::*;
        matches!(
            (self, next),
            (Ready, Running)
                | (Running, Ready)
                | (Running, BlockedOnPred)
                | (Running, WaitingIo)
                | (Running, Finished)
                | (BlockedOnPred, Ready)
                | (WaitingIo, Ready)
        )
    }
}

type BodyFuture = Pin<Box<dyn Future<Output = SysResult<i64>>>>;
type LipBody = Box<dyn FnOnce(Ctx) -> BodyFuture>;

/// Result a parked syscall is woken with.
enum Outcome {
    Pred(SysResult<Vec<Dist>>),
    Io(SysResult<Vec<u8>>),
    Recv(SysResult<(Pid, Vec<u8>)>),
    Join(SysResult<i64>),
}

struct Thread {
    pid: Pid,
    state: ThreadState,
    /// Deferred body; turned into `future` at first poll (the thread's own
    /// `Ctx` is built then, which needs the kernel's `Rc`).
    body: Option<LipBody>,
    future: Option<BodyFuture>,
    outcome: Option<Outcome>,
    /// Handles this thread created/opened; the offload-on-I/O set.
    open_files: BTreeSet<FileId>,
    /// Files offloaded for the current I/O wait, to restore at wake.
    restore_set: Vec<FileId>,
    io_tool: Option<String>,
    io_payload: Option<Vec<u8>>,
    join_waiters: Vec<Tid>,
    result: Option<SysResult<i64>>,
}

struct Process {
    principal: Principal,
    threads: Vec<Tid>,
    mailbox: VecDeque<(Pid, Vec<u8>)>,
    recv_waiters: VecDeque<Tid>,
    finished: bool,
}

struct Tool {
    latency_ns: Nanos,
    handler: Rc<dyn Fn(&[u8]) -> Vec<u8>>,
}

#[derive(Debug)]
enum EventKind {
    BatchDone,
    IoWake(Tid),
    /// Re-check the dispatch condition; fired at each request's deadline.
    /// May be stale (request already dispatched) — then it is a no-op.
    PoolDeadline,
    ExternalMessage { to: Pid, payload: Vec<u8> },
}

struct PendingEvent {
    at: Nanos,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for PendingEvent {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for PendingEvent {}
impl PartialOrd for PendingEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for PendingEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reversed so the BinaryHeap pops the earliest (then lowest-seq)
        // event first.
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// One planned request of an in-flight batch. `n_ctx` is the KV length the
/// file will have after this request's append (same-file requests earlier
/// in the batch included), which is what the cost model charges.
struct PlannedItem {
    req: PredRequest,
    n_new: u64,
    n_ctx: u64,
}

struct InFlightBatch {
    id: u64,
    formed_at: Nanos,
    cost_ns: Nanos,
    items: Vec<PlannedItem>,
}

struct Core {
    now: Nanos,
    store: Rc<KvStore>,
    model: ModelConfig,
    sched: SchedConfig,
    cost: CostModel,
    pool: InferencePool,
    in_flight: Option<InFlightBatch>,
    threads: BTreeMap<Tid, Thread>,
    procs: BTreeMap<Pid, Process>,
    ready: VecDeque<Tid>,
    events: BinaryHeap<PendingEvent>,
    /// Pool deadline an event has already been pushed for; dedups the
    /// re-arm in [`Core::arm_pool_deadline`].
    armed_deadline: Option<Nanos>,
    event_seq: u64,
    next_pid: u64,
    next_tid: u64,
    next_batch: u64,
    tools: BTreeMap<String, Tool>,
    trace: Vec<TraceRecord>,
    trace_transitions: bool,
    shutdown: bool,
}

impl Core {
    fn push_event(&mut self, at: Nanos, kind: EventKind) {
        debug_assert!(at >= self.now, "event scheduled in the past");
        let seq = self.event_seq;
        self.event_seq += 1;
        self.events.push(PendingEvent { at, seq, kind });
    }

    fn pop_due_event(&mut self) -> Option<EventKind> {
        if self.events.peek().is_some_and(|e| e.at == self.now) {
            Some(self.events.pop().unwrap().kind)
        } else {
            None
        }
    }

    /// Guarantee a wake-up by the pool's dispatch deadline. Must hold
    /// whenever the pool is nonempty, or stragglers below the target batch
    /// size would wait forever once the device idles.
    fn arm_pool_deadline(&mut self) {
        let Some(deadline) = self.pool.next_deadline() else {
            return;
        };
        if self.armed_deadline == Some(deadline) {
            return; // an event at (or past) it is already pending
        }
        self.armed_deadline = Some(deadline);
        let at = deadline.max(self.now);
        self.push_event(at, EventKind::PoolDeadline);
    }

    fn advance(&mut self) -> Option<EventKind> {
        let ev = self.events.pop()?;
        debug_assert!(ev.at >= self.now);
        self.now = ev.at;
        Some(ev.kind)
    }

    fn record(&mut self, pid: Option<Pid>, tid: Option<Tid>, event: TraceEvent) {
        self.trace.push(TraceRecord { virtual_time: self.now, pid, tid, event });
    }

    fn caller(&self, tid: Tid) -> Caller {
        let pid = self.threads[&tid].pid;
        Caller { principal: self.procs[&pid].principal, thread: tid }
    }

    fn set_state(&mut self, tid: Tid, to: ThreadState) {
        let th = self.threads.get_mut(&tid).expect("state change on unknown thread");
        let from = th.state;
        assert!(
            from.may_become(to),
            "illegal thread transition {} -> {} on {}",
            from.name(),
            to.name(),
            tid
        );
        th.state = to;
        let pid = th.pid;
        if self.trace_transitions {
            self.record(
                Some(pid),
                Some(tid),
                TraceEvent::ThreadTransition { from: from.name(), to: to.name() },
            );
        }
    }

    /// Hand a parked thread its syscall result and make it runnable.
    fn deliver(&mut self, tid: Tid, outcome: Outcome) {
        let th = self.threads.get_mut(&tid).expect("deliver to unknown thread");
        debug_assert!(th.outcome.is_none(), "clobbering an undelivered outcome");
        th.outcome = Some(outcome);
        self.set_state(tid, ThreadState::Ready);
        debug_assert!(!self.ready.contains(&tid), "thread readied twice");
        self.ready.push_back(tid);
    }

    fn spawn_thread(&mut self, pid: Pid, body: LipBody) -> Tid {
        let tid = Tid(self.next_tid);
        self.next_tid += 1;
        self.threads.insert(
            tid,
            Thread {
                pid,
                state: ThreadState::Ready,
                body: Some(body),
                future: None,
                outcome: None,
                open_files: BTreeSet::new(),
                restore_set: Vec::new(),
                io_tool: None,
                io_payload: None,
                join_waiters: Vec::new(),
                result: None,
            },
        );
        self.procs.get_mut(&pid).expect("spawn in unknown process").threads.push(tid);
        self.record(Some(pid), Some(tid), TraceEvent::ThreadSpawned);
        self.ready.push_back(tid);
        tid
    }

    fn finish_thread(&mut self, tid: Tid, result: SysResult<i64>) {
        self.set_state(tid, ThreadState::Finished);
        self.store.release_locks_of(tid);
        let pid = self.threads[&tid].pid;
        let waiters = std::mem::take(&mut self.threads.get_mut(&tid).unwrap().join_waiters);
        self.threads.get_mut(&tid).unwrap().result = Some(result.clone());
        for w in waiters {
            self.deliver(w, Outcome::Join(result.clone()));
        }
        let proc = &self.procs[&pid];
        let all_done = proc
            .threads
            .iter()
            .all(|t| self.threads[t].state == ThreadState::Finished);
        if all_done && !proc.finished {
            self.procs.get_mut(&pid).unwrap().finished = true;
            let main = self.procs[&pid].threads[0];
            let status = match self.threads[&main].result.as_ref().expect("main finished") {
                Ok(v) => *v,
                Err(_) => -1,
            };
            self.record(Some(pid), None, TraceEvent::LipFinished { status });
        }
    }

    /// Enqueue a message; if a thread of `to` is blocked in `recv`, deliver
    /// the mailbox head to it immediately.
    fn send_message(&mut self, from: Pid, to: Pid, payload: Vec<u8>) -> SysResult<()> {
        let proc = self.procs.get_mut(&to).ok_or(SysError::NoSuchProcess(to))?;
        proc.mailbox.push_back((from, payload));
        if let Some(w) = proc.recv_waiters.pop_front() {
            let (src, msg) = self.procs.get_mut(&to).unwrap().mailbox.pop_front().unwrap();
            let bytes = msg.len() as u64;
            self.record(Some(to), Some(w), TraceEvent::IpcDelivered { from: src, bytes });
            self.deliver(w, Outcome::Recv(Ok((src, msg))));
        }
        Ok(())
    }

    /// Dispatch a batch if the policy says so and the device is idle.
    /// Execution cost is fixed now from planned post-append lengths; the
    /// appends themselves happen at completion.
    fn try_dispatch(&mut self) -> bool {
        if self.in_flight.is_some() || !self.pool.should_dispatch(self.now) {
            self.arm_pool_deadline();
            return false;
        }
        let pool_before = self.pool.len() as u32;
        let target = self.pool.target_batch_size();
        let requests = self.pool.take_batch();
        let mut pending_len: BTreeMap<FileId, u64> = BTreeMap::new();
        let mut items = Vec::with_capacity(requests.len());
        for req in requests {
            let n_new = req.tokens.len() as u64;
            let caller = self.caller(req.tid);
            let base = match pending_len.get(&req.file) {
                Some(&l) => l,
                None => self.store.length(caller, req.file).unwrap_or(0),
            };
            let n_ctx = base + n_new;
            pending_len.insert(req.file, n_ctx);
            items.push(PlannedItem { req, n_new, n_ctx });
        }
        let cost_ns = self.cost.batch_cost(items.iter().map(|i| (i.n_new, i.n_ctx)));
        let id = self.next_batch;
        self.next_batch += 1;
        self.record(
            None,
            None,
            TraceEvent::BatchDispatched {
                batch: id,
                size: items.len() as u32,
                pool_before,
                target,
                cost_ns,
                items: items
                    .iter()
                    .map(|i| BatchItem {
                        req: i.req.req,
                        tid: i.req.tid,
                        n_new: i.n_new,
                        n_ctx: i.n_ctx,
                    })
                    .collect(),
            },
        );
        self.push_event(self.now + cost_ns, EventKind::BatchDone);
        self.in_flight = Some(InFlightBatch { id, formed_at: self.now, cost_ns, items });
        self.arm_pool_deadline(); // requests beyond B_max stay queued
        true
    }

    /// Execute the in-flight batch: run every request's model computation
    /// and append, deliver results FIFO, all at the completion instant.
    fn complete_batch(&mut self) {
        let batch = self.in_flight.take().expect("batch completion without a batch");
        debug_assert_eq!(self.now, batch.formed_at + batch.cost_ns);
        for item in &batch.items {
            let caller = self.caller(item.req.tid);
            let result = compute_pred(
                &self.store,
                caller,
                item.req.file,
                &item.req.tokens,
                &self.model,
            )
            .map_err(SysError::Kv);
            self.record(
                Some(item.req.pid),
                Some(item.req.tid),
                TraceEvent::PredCompleted {
                    req: item.req.req,
                    wait_ns: batch.formed_at - item.req.enqueued_at,
                    ok: result.is_ok(),
                },
            );
            self.deliver(item.req.tid, Outcome::Pred(result));
        }
        self.record(None, None, TraceEvent::BatchCompleted { batch: batch.id });
    }
}

/// Future a syscall parks on: pends until the kernel stores an outcome in
/// the thread slot, then resolves with it.
struct Parked {
    core: Rc<RefCell<Core>>,
    tid: Tid,
}

impl Future for Parked {
    type Output = Outcome;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Outcome> {
        let mut core = self.core.borrow_mut();
        match core.threads.get_mut(&self.tid).and_then(|t| t.outcome.take()) {
            Some(o) => Poll::Ready(o),
            None => Poll::Pending,
        }
    }
}

/// Per-thread syscall context handed to program bodies. Cheap to clone;
/// carries the thread's identity.
#[derive(Clone)]
pub struct Ctx {
    core: Rc<RefCell<Core>>,
    pid: Pid,
    tid: Tid,
}

impl Ctx {
    pub fn pid(&self) -> Pid {
        self.pid
    }

    pub fn tid(&self) -> Tid {
        self.tid
    }

    pub fn now(&self) -> Nanos {
        self.core.borrow().now
    }

    /// Device/host page-pool occupancy — programs use this to react to
    /// memory pressure themselves.
    pub fn pool_stats(&self) -> PoolStats {
        self.core.borrow().store.stats()
    }

    fn caller(&self) -> Caller {
        self.core.borrow().caller(self.tid)
    }

    fn store(&self) -> Rc<KvStore> {
        self.core.borrow().store.clone()
    }

    /// Append a free-form marker to the event trace.
    pub fn trace_note(&self, tag: &str, data: Value) {
        let mut c = self.core.borrow_mut();
        let (pid, tid) = (self.pid, self.tid);
        c.record(Some(pid), Some(tid), TraceEvent::Note { tag: tag.to_string(), data });
    }

    // -- model ------------------------------------------------------------

    /// Score `tokens` against `file`: blocks until the batch scheduler has
    /// executed the request, appends one KV entry per token to the file,
    /// and returns one next-token distribution per token. Empty `tokens`
    /// validates the handle and returns `[]` without blocking.
    ///
    /// Positions must be strictly increasing and beyond the file's last
    /// entry. Storage errors (pool exhaustion, position conflicts, lost
    /// races) surface as `Err`; the thread stays runnable and recovery is
    /// the program's policy.
    pub async fn pred(
        &self,
        file: FileId,
        tokens: Vec<(TokenId, Position)>,
    ) -> SysResult<Vec<Dist>> {
        {
            let mut c = self.core.borrow_mut();
            let caller = c.caller(self.tid);
            c.store.ensure_writable(caller, file)?;
            for w in tokens.windows(2) {
                if w[1].1 <= w[0].1 {
                    return Err(SysError::Kv(KvError::PositionConflict(w[1].1)));
                }
            }
            if tokens.is_empty() {
                return Ok(Vec::new());
            }
            c.set_state(self.tid, ThreadState::BlockedOnPred);
            let n_new = tokens.len() as u64;
            let now = c.now;
            let req = c.pool.enqueue(now, self.tid, self.pid, file, tokens);
            let (pid, tid, file_raw) = (self.pid, self.tid, file.0);
            c.record(
                Some(pid),
                Some(tid),
                TraceEvent::PredEnqueued { req, file: file_raw, n_new },
            );
            c.arm_pool_deadline();
        }
        match (Parked { core: self.core.clone(), tid: self.tid }).await {
            Outcome::Pred(r) => r,
            _ => unreachable!("pred woken with a foreign outcome"),
        }
    }

    // -- kv file system ---------------------------------------------------

    pub fn kv_create(&self, name: &str, sharing: Sharing) -> SysResult<FileId> {
        let id = self.store().create(self.caller(), name, sharing)?;
        self.track_open(id);
        Ok(id)
    }

    pub fn kv_open(&self, name: &str) -> SysResult<FileId> {
        let id = self.store().open(self.caller(), name)?;
        self.track_open(id);
        Ok(id)
    }

    /// Forget the handle (drops it from the offload set). Pages and the
    /// name are untouched; the file persists in the store.
    pub fn kv_close(&self, file: FileId) {
        let mut c = self.core.borrow_mut();
        if let Some(th) = c.threads.get_mut(&self.tid) {
            th.open_files.remove(&file);
        }
    }

    pub fn kv_remove(&self, file: FileId) -> SysResult<()> {
        self.store().remove(self.caller(), file)?;
        self.kv_close(file);
        Ok(())
    }

    pub fn kv_fork(&self, src: FileId) -> SysResult<FileId> {
        let id = self.store().fork(self.caller(), src)?;
        self.track_open(id);
        Ok(id)
    }

    pub fn kv_extract(&self, src: FileId, indices: &[u64], name: &str) -> SysResult<FileId> {
        let id = self.store().extract(self.caller(), src, indices, name)?;
        self.track_open(id);
        Ok(id)
    }

    pub fn kv_merge(&self, parts: &[FileId], name: &str) -> SysResult<FileId> {
        let id = self.store().merge(self.caller(), parts, name)?;
        self.track_open(id);
        Ok(id)
    }

    pub fn kv_length(&self, file: FileId) -> SysResult<u64> {
        Ok(self.store().length(self.caller(), file)?)
    }

    pub fn kv_entries(&self, file: FileId) -> SysResult<Vec<crate::kvfs::KvEntry>> {
        Ok(self.store().read_back(self.caller(), file)?)
    }

    pub fn kv_lock(&self, file: FileId) -> SysResult<()> {
        Ok(self.store().lock(self.caller(), file)?)
    }

    pub fn kv_unlock(&self, file: FileId) -> SysResult<()> {
        Ok(self.store().unlock(self.caller(), file)?)
    }

    pub fn kv_offload(&self, file: FileId) -> SysResult<u64> {
        Ok(self.store().offload(self.caller(), file)?)
    }

    pub fn kv_restore(&self, file: FileId) -> SysResult<u64> {
        Ok(self.store().restore(self.caller(), file)?)
    }

    fn track_open(&self, file: FileId) {
        let mut c = self.core.borrow_mut();
        if let Some(th) = c.threads.get_mut(&self.tid) {
            th.open_files.insert(file);
        }
    }

    // -- threads ----------------------------------------------------------

    /// Spawn a sibling thread in this process; it starts Ready.
    pub fn spawn<F, Fut>(&self, body: F) -> SysResult<Tid>
    where
        F: FnOnce(Ctx) -> Fut + 'static,
        Fut: Future<Output = SysResult<i64>> + 'static,
    {
        let mut c = self.core.borrow_mut();
        if c.shutdown {
            return Err(SysError::KernelShuttingDown);
        }
        Ok(c.spawn_thread(self.pid, Box::new(move |ctx| Box::pin(body(ctx)))))
    }

    /// Wait for `target` to finish and return its exit result (its own
    /// error if it failed). Joining a thread of another process is refused.
    /// Joining yourself parks forever (reported as a stuck thread).
    pub async fn join(&self, target: Tid) -> SysResult<i64> {
        {
            let mut c = self.core.borrow_mut();
            let th = c.threads.get(&target).ok_or(SysError::NoSuchThread(target))?;
            if th.pid != self.pid {
                return Err(SysError::CrossProcessJoin(target));
            }
            if let Some(res) = &th.result {
                return res.clone();
            }
            c.threads.get_mut(&target).unwrap().join_waiters.push(self.tid);
            c.set_state(self.tid, ThreadState::WaitingIo);
        }
        match (Parked { core: self.core.clone(), tid: self.tid }).await {
            Outcome::Join(r) => r,
            _ => unreachable!("join woken with a foreign outcome"),
        }
    }

    /// Join every sibling thread of this process that exists right now
    /// (threads spawned afterwards are not waited for). Body failures are
    /// the siblings' own business and are swallowed.
    pub async fn join_all(&self) -> SysResult<()> {
        let siblings: Vec<Tid> = {
            let c = self.core.borrow();
            c.procs[&self.pid]
                .threads
                .iter()
                .copied()
                .filter(|&t| t != self.tid)
                .collect()
        };
        for t in siblings {
            let _ = self.join(t).await;
        }
        Ok(())
    }

    // -- simulated external I/O -------------------------------------------

    /// Call a registered tool with the latency it declared at registration.
    pub async fn io_call(&self, tool: &str, payload: Vec<u8>) -> SysResult<Vec<u8>> {
        self.io_call_inner(tool, None, payload).await
    }

    /// Call a registered tool overriding its declared latency — also the
    /// idiom for a pure virtual sleep (echo tool + the sleep you want).
    pub async fn io_call_with_latency(
        &self,
        tool: &str,
        latency_ns: Nanos,
        payload: Vec<u8>,
    ) -> SysResult<Vec<u8>> {
        self.io_call_inner(tool, Some(latency_ns), payload).await
    }

    async fn io_call_inner(
        &self,
        tool: &str,
        latency_override: Option<Nanos>,
        payload: Vec<u8>,
    ) -> SysResult<Vec<u8>> {
        {
            let mut c = self.core.borrow_mut();
            let t = c.tools.get(tool).ok_or_else(|| SysError::NoSuchTool(tool.to_string()))?;
            let latency_ns = latency_override.unwrap_or(t.latency_ns);
            let caller = c.caller(self.tid);

            // Offload this thread's exclusively-owned device pages for the
            // duration of the wait. Shared pages stay (siblings may be
            // using them); files the thread cannot write are skipped.
            let mut moved = 0u64;
            let mut restore_set = Vec::new();
            if c.sched.offload_on_io {
                let open: Vec<FileId> =
                    c.threads[&self.tid].open_files.iter().copied().collect();
                for f in open {
                    match c.store.offload(caller, f) {
                        Ok(n) if n > 0 => {
                            moved += n;
                            restore_set.push(f);
                            let (pid, tid) = (self.pid, self.tid);
                            c.record(
                                Some(pid),
                                Some(tid),
                                TraceEvent::FileOffloaded { file: f.0, pages: n },
                            );
                        }
                        Ok(_) | Err(_) => {}
                    }
                }
            }
            let transfer_ns = 2 * moved * c.sched.transfer_ns_per_page;
            let wake_at = c.now + latency_ns + transfer_ns;
            {
                let th = c.threads.get_mut(&self.tid).unwrap();
                th.restore_set = restore_set;
                th.io_tool = Some(tool.to_string());
                th.io_payload = Some(payload);
            }
            c.set_state(self.tid, ThreadState::WaitingIo);
            let (pid, tid) = (self.pid, self.tid);
            c.record(
                Some(pid),
                Some(tid),
                TraceEvent::IoStarted {
                    tool: tool.to_string(),
                    latency_ns,
                    transfer_ns,
                    offloaded_pages: moved,
                },
            );
            c.push_event(wake_at, EventKind::IoWake(self.tid));
        }
        match (Parked { core: self.core.clone(), tid: self.tid }).await {
            Outcome::Io(r) => r,
            _ => unreachable!("io_call woken with a foreign outcome"),
        }
    }

    // -- IPC ----------------------------------------------------------------

    /// Send bytes to another process's mailbox. Delivery order is global
    /// FIFO per mailbox (so in particular per sender).
    pub fn send(&self, to: Pid, payload: Vec<u8>) -> SysResult<()> {
        let mut c = self.core.borrow_mut();
        let bytes = payload.len() as u64;
        c.send_message(self.pid, to, payload)?;
        let (pid, tid) = (self.pid, self.tid);
        c.record(Some(pid), Some(tid), TraceEvent::IpcSent { to, bytes });
        Ok(())
    }

    /// Take the next mailbox message, blocking until one arrives. Multiple
    /// waiting threads are served FIFO.
    pub async fn recv(&self) -> SysResult<(Pid, Vec<u8>)> {
        {
            let mut c = self.core.borrow_mut();
            let p = c.procs.get_mut(&self.pid).expect("recv from unknown process");
            if let Some((from, msg)) = p.mailbox.pop_front() {
                let bytes = msg.len() as u64;
                let (pid, tid) = (self.pid, self.tid);
                c.record(Some(pid), Some(tid), TraceEvent::IpcDelivered { from, bytes });
                return Ok((from, msg));
            }
            p.recv_waiters.push_back(self.tid);
            c.set_state(self.tid, ThreadState::WaitingIo);
        }
        match (Parked { core: self.core.clone(), tid: self.tid }).await {
            Outcome::Recv(r) => r,
            _ => unreachable!("recv woken with a foreign outcome"),
        }
    }
}

/// End-of-run summary from [`Kernel::run_until_quiescent`].
#[derive(Debug)]
pub struct RunReport {
    /// Virtual time when the event loop drained.
    pub finished_at: Nanos,
    pub processes: u64,
    pub finished_processes: u64,
    /// Threads not Finished when the loop drained (e.g. a `recv` nobody
    /// will answer), with their state names.
    pub stuck_threads: Vec<(Tid, &'static str)>,
    /// True when every process finished, the pool drained, and no batch was
    /// in flight.
    pub quiescent: bool,
}

/// The kernel instance: owns the store, the virtual clock, and all
/// processes. Single-threaded; see the module docs for the event loop.
pub struct Kernel {
    core: Rc<RefCell<Core>>,
    store: Rc<KvStore>,
}

impl Kernel {
    pub fn new(kvfs: KvfsConfig, model: ModelConfig, sched: SchedConfig) -> Kernel {
        let store = Rc::new(KvStore::new(kvfs, model.model_seed));
        let cost = CostModel::from_config(&sched);
        let pool = InferencePool::new(&sched);
        let core = Core {
            now: 0,
            store: store.clone(),
            model,
            sched,
            cost,
            pool,
            in_flight: None,
            threads: BTreeMap::new(),
            procs: BTreeMap::new(),
            ready: VecDeque::new(),
            events: BinaryHeap::new(),
            armed_deadline: None,
            event_seq: 0,
            next_pid: 1, // pid 0 is EXTERNAL_CLIENT
            next_tid: 1,
            next_batch: 0,
            tools: BTreeMap::new(),
            trace: Vec::new(),
            trace_transitions: true,
            shutdown: false,
        };
        Kernel { core: Rc::new(RefCell::new(core)), store }
    }

    /// The backing store; the host uses [`Caller::host`] to pre-seed files.
    pub fn store(&self) -> &KvStore {
        &self.store
    }

    pub fn now(&self) -> Nanos {
        self.core.borrow().now
    }

    /// Disable per-transition trace records (large runs; metrics do not
    /// need them).
    pub fn set_trace_transitions(&self, on: bool) {
        self.core.borrow_mut().trace_transitions = on;
    }

    pub fn register_tool(
        &self,
        name: &str,
        latency_ns: Nanos,
        handler: impl Fn(&[u8]) -> Vec<u8> + 'static,
    ) {
        self.core.borrow_mut().tools.insert(
            name.to_string(),
            Tool { latency_ns, handler: Rc::new(handler) },
        );
    }

    /// Start a program: one process whose main thread runs `body`.
    pub fn spawn_lip<F, Fut>(&self, body: F) -> SysResult<Pid>
    where
        F: FnOnce(Ctx) -> Fut + 'static,
        Fut: Future<Output = SysResult<i64>> + 'static,
    {
        let mut c = self.core.borrow_mut();
        if c.shutdown {
            return Err(SysError::KernelShuttingDown);
        }
        let pid = Pid(c.next_pid);
        c.next_pid += 1;
        c.procs.insert(
            pid,
            Process {
                principal: Principal(pid.0),
                threads: Vec::new(),
                mailbox: VecDeque::new(),
                recv_waiters: VecDeque::new(),
                finished: false,
            },
        );
        c.record(Some(pid), None, TraceEvent::LipSpawned);
        c.spawn_thread(pid, Box::new(move |ctx| Box::pin(body(ctx))));
        Ok(pid)
    }

    /// Inject a message from outside the kernel (a simulated client),
    /// delivered to `to`'s mailbox at virtual time `at`. Messages posted
    /// for the same instant deliver in post order.
    pub fn post_message(&self, at: Nanos, to: Pid, payload: Vec<u8>) {
        let mut c = self.core.borrow_mut();
        let at = at.max(c.now);
        c.push_event(at, EventKind::ExternalMessage { to, payload });
    }

    /// Refuse further spawns; running work is unaffected.
    pub fn shutdown(&self) {
        self.core.borrow_mut().shutdown = true;
    }

    pub fn process_finished(&self, pid: Pid) -> bool {
        self.core.borrow().procs.get(&pid).is_some_and(|p| p.finished)
    }

    /// Main thread's exit status: its Ok value, or -1 if it failed. None
    /// while still running.
    pub fn exit_status(&self, pid: Pid) -> Option<i64> {
        let c = self.core.borrow();
        let p = c.procs.get(&pid)?;
        if !p.finished {
            return None;
        }
        match c.threads[&p.threads[0]].result.as_ref()? {
            Ok(v) => Some(*v),
            Err(_) => Some(-1),
        }
    }

    pub fn with_trace<R>(&self, f: impl FnOnce(&[TraceRecord]) -> R) -> R {
        f(&self.core.borrow().trace)
    }

    pub fn take_trace(&self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.core.borrow_mut().trace)
    }

    /// Run the event loop until no thread is runnable, no event is pending,
    /// and nothing can be dispatched.
    pub fn run_until_quiescent(&self) -> RunReport {
        enum Step {
            Event(EventKind),
            Poll(Tid),
            Dispatched,
            Settled,
        }
        loop {
            // Settle the current instant: due events, runnable threads, and
            // dispatch decisions, until none of the three makes progress.
            loop {
                let step = {
                    let mut c = self.core.borrow_mut();
                    if let Some(k) = c.pop_due_event() {
                        Step::Event(k)
                    } else if let Some(t) = c.ready.pop_front() {
                        Step::Poll(t)
                    } else if c.try_dispatch() {
                        Step::Dispatched
                    } else {
                        Step::Settled
                    }
                };
                match step {
                    Step::Event(k) => self.handle_event(k),
                    Step::Poll(t) => self.poll_thread(t),
                    Step::Dispatched => {}
                    Step::Settled => break,
                }
            }
            let next = { self.core.borrow_mut().advance() };
            match next {
                Some(k) => self.handle_event(k),
                None => break,
            }
        }
        self.report()
    }

    fn report(&self) -> RunReport {
        let c = self.core.borrow();
        let stuck: Vec<(Tid, &'static str)> = c
            .threads
            .iter()
            .filter(|(_, t)| t.state != ThreadState::Finished)
            .map(|(tid, t)| (*tid, t.state.name()))
            .collect();
        let finished = c.procs.values().filter(|p| p.finished).count() as u64;
        let all_finished = finished == c.procs.len() as u64;
        let quiescent = all_finished && c.pool.is_empty() && c.in_flight.is_none();
        debug_assert!(
            !all_finished || quiescent,
            "all programs finished but requests remain queued"
        );
        RunReport {
            finished_at: c.now,
            processes: c.procs.len() as u64,
            finished_processes: finished,
            stuck_threads: stuck,
            quiescent,
        }
    }

    fn handle_event(&self, kind: EventKind) {
        match kind {
            EventKind::BatchDone => self.core.borrow_mut().complete_batch(),
            EventKind::PoolDeadline => {} // settle loop re-checks dispatch
            EventKind::ExternalMessage { to, payload } => {
                let mut c = self.core.borrow_mut();
                if c.send_message(EXTERNAL_CLIENT, to, payload).is_err() {
                    let now_pid = Some(to);
                    c.record(
                        now_pid,
                        None,
                        TraceEvent::Note {
                            tag: "external_send_dropped".into(),
                            data: Value::Null,
                        },
                    );
                }
            }
            EventKind::IoWake(tid) => self.complete_io(tid),
        }
    }

    fn complete_io(&self, tid: Tid) {
        // Phase 1: pull the handler and payload out, releasing the borrow
        // so the handler itself cannot alias the core.
        let (handler, payload, tool, restore_set, caller, pid) = {
            let mut c = self.core.borrow_mut();
            let caller = c.caller(tid);
            let th = c.threads.get_mut(&tid).unwrap();
            let tool = th.io_tool.take().expect("io wake without tool");
            let payload = th.io_payload.take().expect("io wake without payload");
            let restore_set = std::mem::take(&mut th.restore_set);
            let pid = th.pid;
            let handler = c.tools[&tool].handler.clone();
            (handler, payload, tool, restore_set, caller, pid)
        };
        let output = handler(&payload);
        // Phase 2: bring pages home and deliver.
        let mut c = self.core.borrow_mut();
        let mut failure: Option<KvError> = None;
        for f in restore_set {
            match c.store.restore(caller, f) {
                Ok(n) => c.record(
                    Some(pid),
                    Some(tid),
                    TraceEvent::FileRestored { file: f.0, pages: n, ok: true },
                ),
                // Removed while we waited: nothing left to restore.
                Err(KvError::NotFound) => {}
                Err(e) => {
                    c.record(
                        Some(pid),
                        Some(tid),
                        TraceEvent::FileRestored { file: f.0, pages: 0, ok: false },
                    );
                    failure.get_or_insert(e);
                }
            }
        }
        let result = match failure {
            None => Ok(output),
            Some(e) => Err(SysError::RestoreFailed(e)),
        };
        c.record(
            Some(pid),
            Some(tid),
            TraceEvent::IoCompleted { tool, ok: result.is_ok() },
        );
        c.deliver(tid, Outcome::Io(result));
    }

    fn poll_thread(&self, tid: Tid) {
        let mut fut = {
            let mut c = self.core.borrow_mut();
            c.set_state(tid, ThreadState::Running);
            let core_rc = self.core.clone();
            let th = c.threads.get_mut(&tid).unwrap();
            match th.future.take() {
                Some(f) => f,
                None => {
                    let body = th.body.take().expect("ready thread with no body");
                    let ctx = Ctx { core: core_rc, pid: th.pid, tid };
                    body(ctx)
                }
            }
        };
        let mut cx = Context::from_waker(Waker::noop());
        match fut.as_mut().poll(&mut cx) {
            Poll::Ready(result) => {
                self.core.borrow_mut().finish_thread(tid, result);
            }
            Poll::Pending => {
                let mut c = self.core.borrow_mut();
                let th = c.threads.get_mut(&tid).unwrap();
                assert_ne!(
                    th.state,
                    ThreadState::Running,
                    "{tid} pended outside a kernel syscall (foreign future awaited?)"
                );
                th.future = Some(fut);
            }
        }
    }
}

/// Read a file's content as (token, position) pairs via the host identity —
/// test/assertion helper.
pub fn host_read(store: &KvStore, file: FileId) -> Vec<(TokenId, Position)> {
    store
        .read_back(Caller::host(), file)
        .expect("host can read anything")
        .into_iter()
        .map(|e| (e.token, e.position))
        .collect()
}

/// Pre-seed a named file with a token sequence using the host identity;
/// returns the file id. Content is chained from the store's model seed.
pub fn host_seed_file(
    store: &KvStore,
    name: &str,
    sharing: Sharing,
    tokens: &[(TokenId, Position)],
) -> Result<FileId, KvError> {
    let caller = Caller::host();
    let id = store.create(caller, name, sharing)?;
    let entries = crate::model::build_entries(store.model_seed(), tokens);
    store.append(caller, id, &entries)?;
    Ok(id)
}

/// Count of a file's pages on `tier`, via the host identity.
pub fn host_pages_on(store: &KvStore, file: FileId, tier: Tier) -> u64 {
    store
        .page_info(Caller::host(), file)
        .expect("host can inspect anything")
        .iter()
        .filter(|p| p.tier == tier)
        .count() as u64
}
