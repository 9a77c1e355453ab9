//! A desk-scale serving kernel for LLM inference programs (LIPs).
//!
//! Instead of a prompt-in/text-out endpoint, clients hand the kernel a small
//! *program*. The program runs as one process with cooperatively scheduled
//! threads and talks to the system through syscalls:
//!
//! * [`kernel::Ctx::pred`] — score a batch of tokens against a KV-cache file
//!   and get one next-token distribution per token,
//! * the `kv_*` family — open, fork, extract, merge, and persist KV-cache
//!   files managed by [`kvfs`], a paged copy-on-write store,
//! * [`kernel::Ctx::io_call`] — simulated external tool calls (the kernel
//!   offloads the caller's KV pages to host memory for the duration),
//! * [`kernel::Ctx::send`] / [`kernel::Ctx::recv`] — mailbox IPC between
//!   programs.
//!
//! The model behind `pred` is a mock: a fingerprint chain plus a hash-derived
//! softmax ([`model`]). It is bitwise deterministic, which makes cache reuse,
//! forking, pruning, and speculative rollback all testable by exact
//! comparison against a from-scratch oracle.
//!
//! Everything runs on a single-threaded discrete-event executor with a
//! virtual clock, so a run is a pure function of its configuration and seed.
//! [`scheduler`] batches pred requests with a Poisson-rate-informed policy;
//! [`sim`] generates workloads and reproduces a document-caching throughput
//! experiment end to end.
//!
//! Start with the `examples/` directory; each file is a runnable program
//! exercising one capability (`cargo run --example parallel_generation`).

pub mod config;
pub mod decoding;
pub mod kernel;
pub mod kvfs;
pub mod model;
pub mod scheduler;
pub mod sim;
pub mod types;

pub use config::SimConfig;
pub use types::{Nanos, Pid, Position, Principal, Tid, TokenId};
