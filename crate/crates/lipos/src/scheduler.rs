//! Batch-formation policy, request pool, cost model, rate estimation,
//! metrics, and trace auditors.
//!
//! This is the second level of the two-level scheduler. The first level —
//! which thread runs next — is the kernel's FIFO ready queue; this module
//! decides when the pool of blocked `pred` requests becomes a device batch
//! and how long that batch occupies the device.
//!
//! Policy: each enqueue updates an EWMA arrival-rate estimate λ̂. The target
//! batch size is B* = clamp(round(λ̂ · W_max), 1, B_max) — the expected
//! number of arrivals within one maximum wait, so under steady load a batch
//! fills to B* in about W_max. Dispatch happens as soon as the pool reaches
//! B*, or when the oldest request has waited W_max, whichever comes first.
//! Both premature dispatch (underfilled batches) and unbounded delay are
//! thereby bounded by the two knobs.

use crate::kernel::trace::{TraceEvent, TraceRecord};
use crate::kvfs::FileId;
use crate::types::{nanos_to_secs, Nanos, Pid, Position, Tid, TokenId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

/// Knobs for batch formation and the virtual cost model. Durations are
/// virtual nanoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedConfig {
    /// Longest a pred request may sit in the pool before dispatch.
    pub w_max_ns: Nanos,
    /// Hard cap on batch size.
    pub b_max: u32,
    /// EWMA decay for the arrival-rate estimate, in (0, 1].
    pub ewma_alpha: f64,
    /// Seeds the rate estimate: the first enqueue assumes one arrival per
    /// this interval.
    pub dt_default_ns: Nanos,
    /// Per-batch device overhead.
    pub c0_ns: Nanos,
    /// Per new token.
    pub c1_ns: Nanos,
    /// Per (new token × context length): the attention term that makes
    /// prefill expensive and cached decode cheap.
    pub c2_ns: Nanos,
    /// Per page moved by offload or restore around an I/O wait.
    pub transfer_ns_per_page: Nanos,
    /// Offload a waiting thread's exclusively-owned KV pages to host memory
    /// for the duration of `io_call`s.
    pub offload_on_io: bool,
}

impl Default for SchedConfig {
    fn default() -> Self {
        SchedConfig {
            w_max_ns: 10_000_000,
            b_max: 64,
            ewma_alpha: 0.2,
            dt_default_ns: 100_000_000,
            c0_ns: 1_000_000,
            c1_ns: 10_000,
            c2_ns: 1,
            transfer_ns_per_page: 10_000,
            offload_on_io: true,
        }
    }
}

/// EWMA estimate of the `pred` arrival rate, in requests per virtual
/// second: λ̂ ← (1−α)·λ̂ + α/Δt, updated once per enqueue. Δt is floored at
/// one nanosecond-equivalent so coincident arrivals push the estimate up
/// sharply instead of dividing by zero.
#[derive(Debug, Clone)]
pub struct RateEstimator {
    alpha: f64,
    dt_default_s: f64,
    lambda: f64,
    last: Option<Nanos>,
}

const DT_FLOOR_S: f64 = 1e-9;

impl RateEstimator {
    pub fn new(alpha: f64, dt_default_ns: Nanos) -> RateEstimator {
        RateEstimator {
            alpha,
            dt_default_s: nanos_to_secs(dt_default_ns).max(DT_FLOOR_S),
            lambda: 0.0,
            last: None,
        }
    }

    pub fn on_enqueue(&mut self, now: Nanos) {
        match self.last {
            None => self.lambda = 1.0 / self.dt_default_s,
            Some(prev) => {
                let dt = nanos_to_secs(now.saturating_sub(prev)).max(DT_FLOOR_S);
                self.lambda = (1.0 - self.alpha) * self.lambda + self.alpha / dt;
            }
        }
        self.last = Some(now);
    }

    /// Requests per virtual second; 0 before any enqueue.
    pub fn rate(&self) -> f64 {
        self.lambda
    }
}

/// Closed-form virtual execution cost of a batch:
/// `c0 + Σ_r (c1·n_new(r) + c2·n_new(r)·n_ctx(r))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub c0_ns: Nanos,
    pub c1_ns: Nanos,
    pub c2_ns: Nanos,
}

impl CostModel {
    pub fn from_config(cfg: &SchedConfig) -> CostModel {
        CostModel { c0_ns: cfg.c0_ns, c1_ns: cfg.c1_ns, c2_ns: cfg.c2_ns }
    }

    /// `items` yields `(n_new, n_ctx)` per request, where n_ctx is the KV
    /// length after the request's append.
    pub fn batch_cost(&self, items: impl IntoIterator<Item = (u64, u64)>) -> Nanos {
        let mut cost = self.c0_ns;
        for (n_new, n_ctx) in items {
            cost += self.c1_ns * n_new + self.c2_ns * n_new * n_ctx;
        }
        cost
    }
}

/// A blocked thread's model-computation request, waiting in the pool.
#[derive(Debug, Clone)]
pub struct PredRequest {
    pub req: u64,
    pub tid: Tid,
    pub pid: Pid,
    pub file: FileId,
    pub tokens: Vec<(TokenId, Position)>,
    pub enqueued_at: Nanos,
}

/// A dispatched batch occupying the device for `[formed_at, formed_at +
/// cost_ns)`. Requests are in enqueue order.
#[derive(Debug)]
pub struct Batch {
    pub id: u64,
    pub requests: Vec<PredRequest>,
    pub formed_at: Nanos,
    pub cost_ns: Nanos,
}

/// The inference pool: FIFO queue of pending [`PredRequest`]s plus the
/// dispatch policy state.
#[derive(Debug)]
pub struct InferencePool {
    w_max_ns: Nanos,
    b_max: u32,
    estimator: RateEstimator,
    queue: VecDeque<PredRequest>,
    next_req: u64,
}

impl InferencePool {
    pub fn new(cfg: &SchedConfig) -> InferencePool {
        InferencePool {
            w_max_ns: cfg.w_max_ns,
            b_max: cfg.b_max.max(1),
            estimator: RateEstimator::new(cfg.ewma_alpha, cfg.dt_default_ns),
            queue: VecDeque::new(),
            next_req: 0,
        }
    }

    /// Admit a request, updating the rate estimate. Returns its request id.
    pub fn enqueue(
        &mut self,
        now: Nanos,
        tid: Tid,
        pid: Pid,
        file: FileId,
        tokens: Vec<(TokenId, Position)>,
    ) -> u64 {
        let req = self.next_req;
        self.next_req += 1;
        self.estimator.on_enqueue(now);
        self.queue.push_back(PredRequest { req, tid, pid, file, tokens, enqueued_at: now });
        req
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn rate(&self) -> f64 {
        self.estimator.rate()
    }

    pub fn oldest_enqueue(&self) -> Option<Nanos> {
        self.queue.front().map(|r| r.enqueued_at)
    }

    /// B* = clamp(round(λ̂ · W_max), 1, B_max).
    pub fn target_batch_size(&self) -> u32 {
        let expected = self.estimator.rate() * nanos_to_secs(self.w_max_ns);
        (expected.round() as i64).clamp(1, i64::from(self.b_max)) as u32
    }

    /// True when the pool has filled to the adaptive target or the oldest
    /// request has exhausted its wait budget.
    pub fn should_dispatch(&self, now: Nanos) -> bool {
        match self.oldest_enqueue() {
            None => false,
            Some(oldest) => {
                self.queue.len() as u32 >= self.target_batch_size()
                    || now.saturating_sub(oldest) >= self.w_max_ns
            }
        }
    }

    /// When the oldest pending request must be dispatched at the latest.
    pub fn next_deadline(&self) -> Option<Nanos> {
        self.oldest_enqueue().map(|t| t + self.w_max_ns)
    }

    /// Remove and return the first `min(len, B_max)` requests, FIFO.
    pub fn take_batch(&mut self) -> Vec<PredRequest> {
        let n = self.queue.len().min(self.b_max as usize);
        self.queue.drain(..n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

/// Aggregate outcomes of one run, computed from its trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub completed_requests: u64,
    pub failed_requests: u64,
    pub generated_tokens: u64,
    /// Virtual time of the last trace record, in seconds.
    pub makespan_s: f64,
    /// Generated tokens per virtual second over the makespan.
    pub throughput_tps: f64,
    /// Mean end-to-end latency from request arrival to each generated
    /// token's delivery, in virtual seconds.
    pub mean_latency_per_token_s: f64,
    pub p95_latency_s: f64,
    /// Fraction of the makespan the device was executing batches.
    pub utilization: f64,
    pub batch_count: u64,
    pub mean_batch_size: f64,
    pub hits: u64,
    pub misses: u64,
    /// hits / (hits + misses); 0 when no request reported a cache probe.
    pub hit_rate: f64,
}

fn note_req(data: &serde_json::Value) -> Result<u64, MetricsError> {
    data.get("req").and_then(|v| v.as_u64()).ok_or_else(|| {
        MetricsError::MalformedTrace(format!("note without numeric req field: {data}"))
    })
}

/// Fold a trace into [`Metrics`].
///
/// Latency accounting keys off harness notes: `request_arrival` marks a
/// request entering the system, each `token` note is one generated token
/// (latency sample = note time − arrival time), `request_done` marks
/// completion and carries `hit: bool`, `request_failed` marks a permanent
/// failure. Device busy time comes from `batch_dispatched` records.
pub fn metrics_collect(trace: &[TraceRecord]) -> Result<Metrics, MetricsError> {
    let mut arrivals: BTreeMap<u64, Nanos> = BTreeMap::new();
    let mut latencies: Vec<Nanos> = Vec::new();
    let mut completed = 0u64;
    let mut failed = 0u64;
    let mut hits = 0u64;
    let mut misses = 0u64;
    let mut busy: u64 = 0;
    let mut batch_count = 0u64;
    let mut batched_requests = 0u64;
    let mut makespan: Nanos = 0;

    for r in trace {
        makespan = makespan.max(r.virtual_time);
        match &r.event {
            TraceEvent::BatchDispatched { size, cost_ns, .. } => {
                busy += cost_ns;
                batch_count += 1;
                batched_requests += u64::from(*size);
            }
            TraceEvent::Note { tag, data } => match tag.as_str() {
                "request_arrival" => {
                    arrivals.insert(note_req(data)?, r.virtual_time);
                }
                "token" => {
                    let req = note_req(data)?;
                    let t0 = arrivals.get(&req).ok_or_else(|| {
                        MetricsError::MalformedTrace(format!(
                            "token note for req {req} precedes its arrival"
                        ))
                    })?;
                    latencies.push(r.virtual_time - t0);
                }
                "request_done" => {
                    let _ = note_req(data)?;
                    completed += 1;
                    match data.get("hit").and_then(|v| v.as_bool()) {
                        Some(true) => hits += 1,
                        Some(false) => misses += 1,
                        None => {}
                    }
                }
                "request_failed" => {
                    let _ = note_req(data)?;
                    failed += 1;
                }
                _ => {}
            },
            _ => {}
        }
    }

    latencies.sort_unstable();
    let makespan_s = nanos_to_secs(makespan);
    let tokens = latencies.len() as u64;
    let mean_latency = if tokens == 0 {
        0.0
    } else {
        nanos_to_secs(latencies.iter().sum::<u64>()) / tokens as f64
    };
    let p95 = if tokens == 0 {
        0.0
    } else {
        let ix = ((tokens as f64 * 0.95).ceil() as usize).clamp(1, latencies.len()) - 1;
        nanos_to_secs(latencies[ix])
    };
    Ok(Metrics {
        completed_requests: completed,
        failed_requests: failed,
        generated_tokens: tokens,
        makespan_s,
        throughput_tps: if makespan_s > 0.0 { tokens as f64 / makespan_s } else { 0.0 },
        mean_latency_per_token_s: mean_latency,
        p95_latency_s: p95,
        utilization: if makespan_s > 0.0 { nanos_to_secs(busy) / makespan_s } else { 0.0 },
        batch_count,
        mean_batch_size: if batch_count > 0 {
            batched_requests as f64 / batch_count as f64
        } else {
            0.0
        },
        hits,
        misses,
        hit_rate: if hits + misses > 0 { hits as f64 / (hits + misses) as f64 } else { 0.0 },
    })
}

// ---------------------------------------------------------------------------
// Trace auditors. Each walks a complete trace and verifies one scheduler or
// kernel invariant, returning how many records/constraints it checked so
// callers can assert the audit actually saw work.

fn batches_of(trace: &[TraceRecord]) -> Vec<(Nanos, u64, u32, u32, Nanos, Vec<(u64, u64, u64)>)> {
    // (formed_at, batch id, size, target, cost, [(req, n_new, n_ctx)])
    trace
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::BatchDispatched { batch, size, target, cost_ns, items, .. } => Some((
                r.virtual_time,
                *batch,
                *size,
                *target,
                *cost_ns,
                items.iter().map(|i| (i.req, i.n_new, i.n_ctx)).collect(),
            )),
            _ => None,
        })
        .collect()
}

fn enqueue_times(trace: &[TraceRecord]) -> BTreeMap<u64, Nanos> {
    trace
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::PredEnqueued { req, .. } => Some((*req, r.virtual_time)),
            _ => None,
        })
        .collect()
}

/// No request waits longer than `W_max` plus the remaining cost of the
/// batch that was in flight when it arrived. Returns the number of requests
/// checked.
pub fn audit_wait_bounds(trace: &[TraceRecord], w_max_ns: Nanos) -> Result<u64, String> {
    let batches = batches_of(trace);
    let enq = enqueue_times(trace);
    // Busy intervals in dispatch order (the device is serial).
    let busy: Vec<(Nanos, Nanos)> =
        batches.iter().map(|&(t, _, _, _, cost, _)| (t, t + cost)).collect();
    let mut checked = 0u64;
    for (formed_at, batch, _, _, _, items) in &batches {
        for &(req, _, _) in items {
            let &enqueued = enq
                .get(&req)
                .ok_or_else(|| format!("req {req} dispatched but never enqueued"))?;
            if enqueued > *formed_at {
                return Err(format!(
                    "req {req} in batch {batch} enqueued at {enqueued} after dispatch at \
                     {formed_at}"
                ));
            }
            let in_flight_rem = busy
                .iter()
                .find(|&&(s, e)| s <= enqueued && enqueued < e)
                .map_or(0, |&(_, e)| e - enqueued);
            let wait = formed_at - enqueued;
            let bound = w_max_ns + in_flight_rem;
            if wait > bound {
                return Err(format!(
                    "req {req} waited {wait}ns > bound {bound}ns (W_max {w_max_ns} + \
                     in-flight remainder {in_flight_rem})"
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// The device never overlaps batches and never sits idle longer than
/// `W_max` while requests wait. Returns the number of batches checked.
pub fn audit_work_conservation(trace: &[TraceRecord], w_max_ns: Nanos) -> Result<u64, String> {
    let batches = batches_of(trace);
    let enq = enqueue_times(trace);
    let mut prev_end: Nanos = 0;
    let mut checked = 0u64;
    for (formed_at, batch, size, _, cost, items) in &batches {
        if *size == 0 || items.is_empty() {
            return Err(format!("batch {batch} is empty"));
        }
        if *formed_at < prev_end {
            return Err(format!(
                "batch {batch} dispatched at {formed_at} while device busy until {prev_end}"
            ));
        }
        let earliest = items
            .iter()
            .map(|&(req, _, _)| enq.get(&req).copied().unwrap_or(Nanos::MAX))
            .min()
            .unwrap();
        // Work existed from max(earliest arrival, device free); the gap to
        // dispatch is the policy's deliberate aggregation wait, capped by
        // the deadline rule.
        let idle_from = earliest.max(prev_end);
        let gap = formed_at.saturating_sub(idle_from);
        if gap > w_max_ns {
            return Err(format!(
                "batch {batch}: device idle {gap}ns with work pending (cap {w_max_ns}ns)"
            ));
        }
        prev_end = formed_at + cost;
        checked += 1;
    }
    Ok(checked)
}

/// Every dispatched batch's recorded cost equals the closed-form model on
/// its items. Returns the number of batches checked.
pub fn audit_cost_exactness(trace: &[TraceRecord], cost: &CostModel) -> Result<u64, String> {
    let batches = batches_of(trace);
    let mut checked = 0u64;
    for (_, batch, size, _, cost_ns, items) in &batches {
        if *size as usize != items.len() {
            return Err(format!(
                "batch {batch} size field {size} != {} items",
                items.len()
            ));
        }
        let expect = cost.batch_cost(items.iter().map(|&(_, n_new, n_ctx)| (n_new, n_ctx)));
        if expect != *cost_ns {
            return Err(format!(
                "batch {batch} cost {cost_ns}ns != model {expect}ns"
            ));
        }
        checked += 1;
    }
    Ok(checked)
}

/// Requests within each batch complete FIFO: `pred_completed` records
/// appear in enqueue order, all at the batch's completion instant.
pub fn audit_fifo_completion(trace: &[TraceRecord]) -> Result<u64, String> {
    let batches = batches_of(trace);
    let completions: Vec<(Nanos, u64, usize)> = trace
        .iter()
        .enumerate()
        .filter_map(|(ix, r)| match &r.event {
            TraceEvent::PredCompleted { req, .. } => Some((r.virtual_time, *req, ix)),
            _ => None,
        })
        .collect();
    let mut checked = 0u64;
    for (formed_at, batch, _, _, cost, items) in &batches {
        let done_at = formed_at + cost;
        let mut prev_ix = None;
        for &(req, _, _) in items {
            let &(t, _, ix) = completions
                .iter()
                .find(|&&(_, r, _)| r == req)
                .ok_or_else(|| format!("req {req} dispatched but never completed"))?;
            if t != done_at {
                return Err(format!(
                    "req {req} completed at {t}, batch {batch} finishes at {done_at}"
                ));
            }
            if let Some(p) = prev_ix {
                if ix <= p {
                    return Err(format!("req {req} completion out of enqueue order"));
                }
            }
            prev_ix = Some(ix);
            checked += 1;
        }
    }
    Ok(checked)
}

const LEGAL_TRANSITIONS: &[(&str, &str)] = &[
    ("ready", "running"),
    ("running", "ready"),
    ("running", "blocked_on_pred"),
    ("running", "waiting_io"),
    ("running", "finished"),
    ("blocked_on_pred", "ready"),
    ("waiting_io", "ready"),
];

/// Every observed thread transition is legal, chains continuously from
/// `ready`, and nothing transitions after `finished`. Returns the number of
/// transitions checked.
pub fn audit_thread_transitions(trace: &[TraceRecord]) -> Result<u64, String> {
    let mut state: BTreeMap<Tid, &str> = BTreeMap::new();
    let mut checked = 0u64;
    for r in trace {
        match &r.event {
            TraceEvent::ThreadSpawned => {
                let tid = r.tid.ok_or("thread_spawned without tid")?;
                if state.insert(tid, "ready").is_some() {
                    return Err(format!("{tid} spawned twice"));
                }
            }
            TraceEvent::ThreadTransition { from, to } => {
                let tid = r.tid.ok_or("thread_transition without tid")?;
                let cur = state.get(&tid).copied().unwrap_or("unspawned");
                if cur != *from {
                    return Err(format!(
                        "{tid} transition {from}->{to} but thread is {cur}"
                    ));
                }
                if !LEGAL_TRANSITIONS.contains(&(from, to)) {
                    return Err(format!("{tid} illegal transition {from}->{to}"));
                }
                state.insert(tid, to);
                checked += 1;
            }
            _ => {}
        }
    }
    Ok(checked)
}

/// Every I/O wait wakes exactly once: per thread, `io_started` and
/// `io_completed` records alternate strictly. Returns completed I/O count.
pub fn audit_io_pairing(trace: &[TraceRecord]) -> Result<u64, String> {
    let mut open: BTreeMap<Tid, &str> = BTreeMap::new();
    let mut checked = 0u64;
    for r in trace {
        match &r.event {
            TraceEvent::IoStarted { tool, .. } => {
                let tid = r.tid.ok_or("io_started without tid")?;
                if open.insert(tid, tool).is_some() {
                    return Err(format!("{tid} started I/O while one is in flight"));
                }
            }
            TraceEvent::IoCompleted { tool, .. } => {
                let tid = r.tid.ok_or("io_completed without tid")?;
                match open.remove(&tid) {
                    Some(started) if started == tool => checked += 1,
                    Some(started) => {
                        return Err(format!(
                            "{tid} completed tool {tool} but started {started}"
                        ))
                    }
                    None => return Err(format!("{tid} completed I/O it never started")),
                }
            }
            _ => {}
        }
    }
    if let Some((tid, tool)) = open.iter().next() {
        return Err(format!("{tid} still waiting on tool {tool} at end of trace"));
    }
    Ok(checked)
}
