//! Event trace: the kernel's append-only record of everything observable.
//!
//! Every scheduling decision, state transition, batch, I/O wait, and IPC
//! delivery lands here with its virtual timestamp. Metrics
//! ([`crate::scheduler::metrics_collect`]) and the invariant auditors are
//! pure functions over this log, and the JSON-lines serialization
//! ([`TraceRecord::to_json_line`]) is byte-deterministic so two seeded runs
//! can be compared with `cmp`.

use crate::types::{Nanos, Pid, Tid};
use serde_json::{json, Value};
use std::io::{self, Write};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub virtual_time: Nanos,
    pub pid: Option<Pid>,
    pub tid: Option<Tid>,
    pub event: TraceEvent,
}

/// One request's slot inside a dispatched batch. `n_ctx` is the planned
/// KV length after the request's tokens are appended — the quantity the
/// cost model charges for.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub req: u64,
    pub tid: Tid,
    pub n_new: u64,
    pub n_ctx: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    LipSpawned,
    LipFinished {
        status: i64,
    },
    ThreadSpawned,
    ThreadTransition {
        from: &'static str,
        to: &'static str,
    },
    PredEnqueued {
        req: u64,
        file: u64,
        n_new: u64,
    },
    BatchDispatched {
        batch: u64,
        size: u32,
        /// Pool occupancy immediately before the batch was taken.
        pool_before: u32,
        /// Adaptive target B* at dispatch time.
        target: u32,
        cost_ns: Nanos,
        items: Vec<BatchItem>,
    },
    BatchCompleted {
        batch: u64,
    },
    /// Emitted once per request at its batch's completion instant.
    PredCompleted {
        req: u64,
        wait_ns: Nanos,
        ok: bool,
    },
    IoStarted {
        tool: String,
        latency_ns: Nanos,
        transfer_ns: Nanos,
        offloaded_pages: u64,
    },
    IoCompleted {
        tool: String,
        ok: bool,
    },
    FileOffloaded {
        file: u64,
        pages: u64,
    },
    FileRestored {
        file: u64,
        pages: u64,
        ok: bool,
    },
    IpcSent {
        to: Pid,
        bytes: u64,
    },
    IpcDelivered {
        from: Pid,
        bytes: u64,
    },
    /// Program- or harness-authored marker; `tag` names the event kind and
    /// `data` is free-form. The workload harness uses `request_arrival`,
    /// `token`, `request_done`, `request_failed`, and `cell_start` tags.
    Note {
        tag: String,
        data: Value,
    },
}

impl TraceEvent {
    pub fn type_name(&self) -> &'static str {
        match self {
            TraceEvent::LipSpawned => "lip_spawned",
            TraceEvent::LipFinished { .. } => "lip_finished",
            TraceEvent::ThreadSpawned => "thread_spawned",
            TraceEvent::ThreadTransition { .. } => "thread_transition",
            TraceEvent::PredEnqueued { .. } => "pred_enqueued",
            TraceEvent::BatchDispatched { .. } => "batch_dispatched",
            TraceEvent::BatchCompleted { .. } => "batch_completed",
            TraceEvent::PredCompleted { .. } => "pred_completed",
            TraceEvent::IoStarted { .. } => "io_started",
            TraceEvent::IoCompleted { .. } => "io_completed",
            TraceEvent::FileOffloaded { .. } => "file_offloaded",
            TraceEvent::FileRestored { .. } => "file_restored",
            TraceEvent::IpcSent { .. } => "ipc_sent",
            TraceEvent::IpcDelivered { .. } => "ipc_delivered",
            TraceEvent::Note { .. } => "note",
        }
    }

    fn detail(&self) -> Value {
        match self {
            TraceEvent::LipSpawned | TraceEvent::ThreadSpawned => json!({}),
            TraceEvent::LipFinished { status } => json!({ "status": status }),
            TraceEvent::ThreadTransition { from, to } => json!({ "from": from, "to": to }),
            TraceEvent::PredEnqueued { req, file, n_new } => {
                json!({ "req": req, "file": file, "n_new": n_new })
            }
            TraceEvent::BatchDispatched { batch, size, pool_before, target, cost_ns, items } => {
                json!({
                    "batch": batch,
                    "size": size,
                    "pool_before": pool_before,
                    "target": target,
                    "cost_ns": cost_ns,
                    "items": items
                        .iter()
                        .map(|i| json!({
                            "req": i.req,
                            "tid": i.tid.0,
                            "n_new": i.n_new,
                            "n_ctx": i.n_ctx,
                        }))
                        .collect::<Vec<_>>(),
                })
            }
            TraceEvent::BatchCompleted { batch } => json!({ "batch": batch }),
            TraceEvent::PredCompleted { req, wait_ns, ok } => {
                json!({ "req": req, "wait_ns": wait_ns, "ok": ok })
            }
            TraceEvent::IoStarted { tool, latency_ns, transfer_ns, offloaded_pages } => json!({
                "tool": tool,
                "latency_ns": latency_ns,
                "transfer_ns": transfer_ns,
                "offloaded_pages": offloaded_pages,
            }),
            TraceEvent::IoCompleted { tool, ok } => json!({ "tool": tool, "ok": ok }),
            TraceEvent::FileOffloaded { file, pages } => {
                json!({ "file": file, "pages": pages })
            }
            TraceEvent::FileRestored { file, pages, ok } => {
                json!({ "file": file, "pages": pages, "ok": ok })
            }
            TraceEvent::IpcSent { to, bytes } => json!({ "to": to.0, "bytes": bytes }),
            TraceEvent::IpcDelivered { from, bytes } => {
                json!({ "from": from.0, "bytes": bytes })
            }
            TraceEvent::Note { tag, data } => json!({ "tag": tag, "data": data }),
        }
    }
}

impl TraceRecord {
    /// One JSON object, no trailing newline. Keys serialize in sorted order
    /// (serde_json maps are B-trees), so output is byte-deterministic.
    pub fn to_json_line(&self) -> String {
        json!({
            "virtual_time": self.virtual_time,
            "event_type": self.event.type_name(),
            "pid": self.pid.map(|p| p.0),
            "tid": self.tid.map(|t| t.0),
            "detail": self.event.detail(),
        })
        .to_string()
    }
}

/// Write records as JSON-lines.
pub fn write_jsonl(records: &[TraceRecord], w: &mut impl Write) -> io::Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_json_line())?;
    }
    Ok(())
}
