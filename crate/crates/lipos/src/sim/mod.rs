//! Workload generation and the end-to-end document-caching experiment.
//!
//! The scenario: a corpus of documents with skewed popularity, a Poisson
//! stream of requests, each request = one document + a short query +
//! `gen_len` sampled continuation tokens. A caching service program keeps
//! the KV prefixes of popular documents as named files, so a repeat request
//! forks the cached prefix and prefills only the query; the baseline policy
//! retains nothing and prefills everything every time. [`run_experiment`]
//! sweeps (popularity skew x arrival rate x policy) and emits one CSV row
//! per cell.
//!
//! Randomness is split into independent, individually seeded streams
//! (arrival times, document picks, query content, document content), so
//! changing the skew parameter reorders *which* documents are requested but
//! leaves arrival times and query tokens bit-identical — cells differ only
//! in the dimension under study.

pub mod checks;
pub mod demos;

use crate::config::SimConfig;
use crate::decoding::{sample, SamplerSpec};
use crate::kernel::{Ctx, Kernel, SysError, SysResult};
use crate::kernel::trace::{TraceEvent, TraceRecord};
use crate::kvfs::{FileId, KvError, Sharing};
use crate::model::Dist;
use crate::scheduler::{metrics_collect, Metrics};
use crate::types::{secs_to_nanos, Nanos, Pid, Position, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

/// Message that stops a service program's accept loop.
pub const SHUTDOWN_SENTINEL: &[u8] = b"__done__";

// Seed-stream ids; each consumer gets its own ChaCha stream so streams
// stay independent and individually reproducible.
const STREAM_ARRIVALS: u64 = 1;
const STREAM_DOC_PICKS: u64 = 2;
const STREAM_QUERIES: u64 = 3;
const STREAM_DOC_CONTENT: u64 = 4;

/// Parameters of the synthetic request workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub num_docs: u32,
    /// Tokens per document.
    pub doc_len: u64,
    /// Popularity skew: document popularity is Pareto-distributed with this
    /// index, i.e. rank-frequency weight ∝ rank^(-1/pareto_alpha). Smaller
    /// values mean a few very hot documents; large values approach uniform.
    pub pareto_alpha: f64,
    /// Mean request arrivals per virtual second (Poisson).
    pub request_rate: f64,
    /// Virtual seconds of arrivals.
    pub duration: f64,
    /// Tokens per request query.
    pub query_len: u64,
    /// Tokens generated per request.
    pub gen_len: u64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            num_docs: 100,
            doc_len: 3000,
            pareto_alpha: 1.0,
            request_rate: 20.0,
            duration: 20.0,
            query_len: 32,
            gen_len: 64,
            seed: 42,
        }
    }
}

/// Normalized popularity weight per popularity rank (rank 0 = hottest).
///
/// A Pareto popularity distribution with index `alpha` has rank-frequency
/// weight rank^(-1/alpha): the index is the tail exponent, so *small*
/// `alpha` is the heavy-tailed regime where a handful of documents absorb
/// nearly all traffic, and `alpha -> inf` flattens toward uniform.
pub fn rank_weights(num_docs: u32, pareto_alpha: f64) -> Vec<f64> {
    assert!(pareto_alpha > 0.0, "pareto_alpha must be positive");
    let s = 1.0 / pareto_alpha;
    let raw: Vec<f64> = (0..num_docs).map(|r| f64::from(r + 1).powf(-s)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Combined weight of the `k` hottest ranks — the analytic ceiling on the
/// hit rate of a policy that retains the top `k` documents.
pub fn top_mass(weights: &[f64], k: usize) -> f64 {
    weights[..k.min(weights.len())].iter().sum()
}

/// One request as posted to the service program (JSON payload).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMsg {
    pub req: u64,
    pub doc: u32,
    pub query: Vec<TokenId>,
}

/// A request plus its Poisson arrival instant.
#[derive(Debug, Clone, PartialEq)]
pub struct GenRequest {
    pub at: Nanos,
    pub msg: RequestMsg,
}

/// Deterministic document contents: `num_docs` sequences of `doc_len`
/// non-EOS tokens at positions `0..doc_len`.
pub fn doc_corpus(spec: &WorkloadSpec, vocab_size: u32) -> Vec<Vec<(TokenId, Position)>> {
    assert!(vocab_size >= 2, "need at least one non-EOS token");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(STREAM_DOC_CONTENT);
    (0..spec.num_docs)
        .map(|_| {
            (0..spec.doc_len)
                .map(|p| (rng.gen_range(1..vocab_size), p as Position))
                .collect()
        })
        .collect()
}

fn pick_rank(cdf: &[f64], u: f64) -> u32 {
    let ix = cdf.partition_point(|&c| c <= u);
    ix.min(cdf.len() - 1) as u32
}

/// The full arrival schedule for a cell: Poisson arrivals over `duration`,
/// each with a rank-distributed document pick and a fresh random query.
pub fn gen_requests(spec: &WorkloadSpec, vocab_size: u32) -> Vec<GenRequest> {
    assert!(vocab_size >= 2, "need at least one non-EOS token");
    let weights = rank_weights(spec.num_docs, spec.pareto_alpha);
    let cdf: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let mut t_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    t_rng.set_stream(STREAM_ARRIVALS);
    let mut d_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    d_rng.set_stream(STREAM_DOC_PICKS);
    let mut q_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    q_rng.set_stream(STREAM_QUERIES);

    let mut out = Vec::new();
    let mut t = 0.0_f64;
    let mut req = 0_u64;
    loop {
        let u: f64 = t_rng.gen();
        t += -(1.0 - u).ln() / spec.request_rate;
        if t > spec.duration {
            break;
        }
        // Consume exactly one pick and query_len token draws per request so
        // the streams stay aligned across skew settings.
        let doc = pick_rank(&cdf, d_rng.gen());
        let query: Vec<TokenId> = (0..spec.query_len)
            .map(|_| q_rng.gen_range(1..vocab_size))
            .collect();
        out.push(GenRequest { at: secs_to_nanos(t), msg: RequestMsg { req, doc, query } });
        req += 1;
    }
    out
}

/// What the service does with a document's KV prefix after serving a miss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    /// Retain nothing: every request prefills from scratch (the stateless
    /// baseline).
    None,
    /// Retain at most `k` documents, ranked by running request count.
    TopK(u32),
    /// Retain a document once it has been requested this many times in a
    /// row (no retention cap).
    Consecutive(u32),
}

impl Default for CachePolicy {
    fn default() -> Self {
        CachePolicy::TopK(20)
    }
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CachePolicy::None => write!(f, "none"),
            CachePolicy::TopK(k) => write!(f, "topk:{k}"),
            CachePolicy::Consecutive(n) => write!(f, "consecutive:{n}"),
        }
    }
}

impl FromStr for CachePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "none" {
            return Ok(CachePolicy::None);
        }
        if let Some(k) = s.strip_prefix("topk:") {
            return k
                .parse()
                .map(CachePolicy::TopK)
                .map_err(|_| format!("bad top-k count in {s:?}"));
        }
        if let Some(n) = s.strip_prefix("consecutive:") {
            return n
                .parse()
                .map(CachePolicy::Consecutive)
                .map_err(|_| format!("bad threshold in {s:?}"));
        }
        Err(format!(
            "unknown policy {s:?}; expected none, topk:K, or consecutive:N"
        ))
    }
}

enum RetentionPlan {
    Skip,
    Retain { evict: Option<(u32, FileId)> },
}

/// Shared state of one service program: running popularity counts and the
/// set of documents whose KV prefix is currently retained as a named file.
struct ServiceState {
    policy: CachePolicy,
    counts: BTreeMap<u32, u64>,
    retained: BTreeMap<u32, FileId>,
    streak_doc: Option<u32>,
    streak: u32,
}

impl ServiceState {
    fn new(policy: CachePolicy) -> ServiceState {
        ServiceState {
            policy,
            counts: BTreeMap::new(),
            retained: BTreeMap::new(),
            streak_doc: None,
            streak: 0,
        }
    }

    /// Bump popularity and the consecutive-run tracker. Called once per
    /// request, in arrival order.
    fn on_request(&mut self, doc: u32) {
        *self.counts.entry(doc).or_insert(0) += 1;
        if self.streak_doc == Some(doc) {
            self.streak += 1;
        } else {
            self.streak_doc = Some(doc);
            self.streak = 1;
        }
    }

    fn retained_file(&self, doc: u32) -> Option<FileId> {
        self.retained.get(&doc).copied()
    }

    fn remember(&mut self, doc: u32, file: FileId) {
        self.retained.insert(doc, file);
    }

    fn forget(&mut self, doc: u32) {
        self.retained.remove(&doc);
    }

    fn count(&self, doc: u32) -> u64 {
        self.counts.get(&doc).copied().unwrap_or(0)
    }

    /// Weakest retained document: lowest running count, largest id on ties.
    fn weakest_retained(&self) -> Option<(u32, FileId)> {
        self.retained
            .iter()
            .map(|(&d, &f)| (d, f))
            .min_by_key(|&(d, _)| (self.count(d), std::cmp::Reverse(d)))
    }

    fn plan_retention(&mut self, doc: u32) -> RetentionPlan {
        if self.retained.contains_key(&doc) {
            return RetentionPlan::Skip;
        }
        match self.policy {
            CachePolicy::None => RetentionPlan::Skip,
            CachePolicy::Consecutive(n) => {
                if self.streak_doc == Some(doc) && self.streak >= n {
                    RetentionPlan::Retain { evict: None }
                } else {
                    RetentionPlan::Skip
                }
            }
            CachePolicy::TopK(k) => {
                if (self.retained.len() as u32) < k {
                    return RetentionPlan::Retain { evict: None };
                }
                let Some((w_doc, w_file)) = self.weakest_retained() else {
                    return RetentionPlan::Skip; // k == 0
                };
                if self.count(doc) > self.count(w_doc) {
                    self.forget(w_doc);
                    RetentionPlan::Retain { evict: Some((w_doc, w_file)) }
                } else {
                    RetentionPlan::Skip
                }
            }
        }
    }

    /// Drop the weakest retained entry from the plan (used under memory
    /// pressure); the caller removes the file itself.
    fn evict_least_popular(&mut self) -> Option<(u32, FileId)> {
        let victim = self.weakest_retained();
        if let Some((d, _)) = victim {
            self.forget(d);
        }
        victim
    }
}

fn doc_file_name(doc: u32) -> String {
    format!("doc{doc}.kv")
}

fn sampler_seed_for(workload_seed: u64, req: u64) -> u64 {
    crate::model::mix64(workload_seed ^ crate::model::GOLDEN.wrapping_mul(req.wrapping_add(1)))
}

/// Spawn the caching service: the main thread accepts request messages
/// ([`RequestMsg`] as JSON) until [`SHUTDOWN_SENTINEL`], handling each
/// request on its own thread. With [`CachePolicy::None`] this is the
/// stateless baseline.
pub fn spawn_service(
    kernel: &Kernel,
    policy: CachePolicy,
    docs: Rc<Vec<Vec<(TokenId, Position)>>>,
    spec: &WorkloadSpec,
) -> SysResult<Pid> {
    let doc_len = spec.doc_len;
    let gen_len = spec.gen_len;
    let seed = spec.seed;
    let st = Rc::new(RefCell::new(ServiceState::new(policy)));
    kernel.spawn_lip(move |ctx| async move {
        loop {
            let (_, msg) = ctx.recv().await?;
            if msg == SHUTDOWN_SENTINEL {
                break;
            }
            let Ok(rm) = serde_json::from_slice::<RequestMsg>(&msg) else {
                continue;
            };
            ctx.trace_note("request_arrival", json!({ "req": rm.req, "doc": rm.doc }));
            let st = st.clone();
            let docs = docs.clone();
            ctx.spawn(move |w| handle_request(w, st, docs, rm, doc_len, gen_len, seed))?;
        }
        ctx.join_all().await?;
        Ok(0)
    })
}

async fn handle_request(
    ctx: Ctx,
    st: Rc<RefCell<ServiceState>>,
    docs: Rc<Vec<Vec<(TokenId, Position)>>>,
    rm: RequestMsg,
    doc_len: u64,
    gen_len: u64,
    seed: u64,
) -> SysResult<i64> {
    st.borrow_mut().on_request(rm.doc);
    let outcome = match serve_once(&ctx, &st, &docs, &rm, doc_len, gen_len, seed).await {
        Err(SysError::Kv(KvError::PoolExhausted { .. })) => {
            // Shed the least-valuable retained prefix and retry once; a
            // second failure fails the request.
            if let Some((_, file)) = st.borrow_mut().evict_least_popular() {
                let _ = ctx.kv_remove(file);
            }
            serve_once(&ctx, &st, &docs, &rm, doc_len, gen_len, seed).await
        }
        other => other,
    };
    match outcome {
        Ok(hit) => {
            ctx.trace_note("request_done", json!({ "req": rm.req, "hit": hit }));
            Ok(1)
        }
        Err(_) => {
            ctx.trace_note("request_failed", json!({ "req": rm.req }));
            Ok(0)
        }
    }
}

/// One service attempt. `Ok(true)` = served from a retained prefix.
async fn serve_once(
    ctx: &Ctx,
    st: &Rc<RefCell<ServiceState>>,
    docs: &[Vec<(TokenId, Position)>],
    rm: &RequestMsg,
    doc_len: u64,
    gen_len: u64,
    seed: u64,
) -> SysResult<bool> {
    let sampler_seed = sampler_seed_for(seed, rm.req);
    let doc_end = doc_len as Position;
    let query: Vec<(TokenId, Position)> = rm
        .query
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, doc_end + i as Position))
        .collect();
    let gen_start = doc_end + query.len() as Position;

    let retained = st.borrow().retained_file(rm.doc);
    if let Some(src) = retained {
        // Hit: fork the retained prefix and prefill only the query.
        let f = ctx.kv_fork(src)?;
        let r = async {
            let dists = ctx.pred(f, query.clone()).await?;
            let last = dists.last().cloned().expect("query is nonempty");
            generate(ctx, f, last, gen_start, gen_len, sampler_seed, rm.req).await
        }
        .await;
        let _ = ctx.kv_remove(f);
        return r.map(|()| true);
    }

    // Miss: prefill document + query into a private scratch file.
    let doc_tokens = docs.get(rm.doc as usize).expect("doc id within corpus");
    let name = format!("req{}.kv", rm.req);
    let f = ctx.kv_create(&name, Sharing::PRIVATE)?;
    let r = async {
        let mut tokens = doc_tokens.clone();
        tokens.extend(query.iter().copied());
        let dists = ctx.pred(f, tokens).await?;
        let last = dists.last().cloned().expect("prefill is nonempty");
        // Retain as early as possible so concurrent requests for the same
        // document can already hit.
        try_retain(ctx, st, f, rm.doc, doc_len);
        generate(ctx, f, last, gen_start, gen_len, sampler_seed, rm.req).await
    }
    .await;
    let _ = ctx.kv_remove(f);
    r.map(|()| false)
}

/// Best-effort retention: pull the document prefix out of `prefill` into
/// the document's named file if the policy wants it kept. Failure leaves
/// the request itself untouched.
fn try_retain(ctx: &Ctx, st: &Rc<RefCell<ServiceState>>, prefill: FileId, doc: u32, doc_len: u64) {
    let plan = st.borrow_mut().plan_retention(doc);
    let RetentionPlan::Retain { evict } = plan else {
        return;
    };
    if let Some((_, file)) = evict {
        let _ = ctx.kv_remove(file);
    }
    let indices: Vec<u64> = (0..doc_len).collect();
    let name = doc_file_name(doc);
    match ctx.kv_extract(prefill, &indices, &name) {
        Ok(f) => {
            ctx.kv_close(f);
            st.borrow_mut().remember(doc, f);
        }
        Err(SysError::Kv(KvError::NameExists(_))) => {
            // Someone retained it between our plan and now; adopt theirs.
            if let Ok(f) = ctx.kv_open(&name) {
                ctx.kv_close(f);
                st.borrow_mut().remember(doc, f);
            }
        }
        Err(_) => {}
    }
}

/// Autoregressive tail: sample `gen_len` tokens starting from `dist`,
/// appending each sampled token (except the last) to drive the next
/// distribution. Emits one `token` trace note per sampled token.
async fn generate(
    ctx: &Ctx,
    f: FileId,
    mut dist: Dist,
    start: Position,
    gen_len: u64,
    sampler_seed: u64,
    req: u64,
) -> SysResult<()> {
    let spec = SamplerSpec::temperature(1.0, sampler_seed);
    for i in 0..gen_len {
        let tok = sample(&dist, &spec).expect("mock distributions are sampleable");
        ctx.trace_note("token", json!({ "req": req }));
        if i + 1 == gen_len {
            break;
        }
        let mut out = ctx.pred(f, vec![(tok, start + i as Position)]).await?;
        dist = out.pop().expect("one dist per appended token");
    }
    Ok(())
}

/// Everything produced by one grid cell.
pub struct CellOutput {
    pub metrics: Metrics,
    pub trace: Vec<TraceRecord>,
}

/// Run one workload cell end to end: build the corpus and schedule, drive a
/// fresh kernel to quiescence, and fold the trace into metrics.
pub fn run_cell(
    cfg: &SimConfig,
    policy: CachePolicy,
    trace_transitions: bool,
) -> Result<CellOutput, String> {
    cfg.validate().map_err(|e| e.to_string())?;
    let spec = &cfg.workload;
    let docs = Rc::new(doc_corpus(spec, cfg.model.vocab_size));
    let requests = gen_requests(spec, cfg.model.vocab_size);

    let kernel = Kernel::new(cfg.kvfs.clone(), cfg.model.clone(), cfg.scheduler.clone());
    kernel.set_trace_transitions(trace_transitions);
    let pid = spawn_service(&kernel, policy, docs, spec).map_err(|e| e.to_string())?;
    for r in &requests {
        let payload = serde_json::to_vec(&r.msg).expect("request serializes");
        kernel.post_message(r.at, pid, payload);
    }
    // Arrivals never exceed `duration`, and same-instant messages deliver
    // in post order, so the sentinel is always last.
    kernel.post_message(secs_to_nanos(spec.duration), pid, SHUTDOWN_SENTINEL.to_vec());

    let report = kernel.run_until_quiescent();
    if !report.quiescent {
        return Err(format!(
            "cell did not quiesce; stuck threads: {:?}",
            report.stuck_threads
        ));
    }
    let trace = kernel.take_trace();
    let metrics = metrics_collect(&trace).map_err(|e| e.to_string())?;
    Ok(CellOutput { metrics, trace })
}

/// One grid cell's result row.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub pareto_alpha: f64,
    pub request_rate: f64,
    pub policy: String,
    pub metrics: Metrics,
    /// Short content hash of the cell's full configuration.
    pub run_id: String,
    pub config: SimConfig,
}

pub struct ExperimentOutput {
    pub results: Vec<RunResult>,
    /// Plot-ready CSV, one row per successful cell, grid order.
    pub csv: String,
    /// JSON-lines trace of every cell, grid order (only when requested).
    pub trace_lines: Option<String>,
    /// Human-readable per-cell failures; failed cells emit no CSV row.
    pub errors: Vec<String>,
}

pub const CSV_HEADER: &str = "alpha,rate,policy,completed_requests,failed_requests,\
generated_tokens,makespan_s,throughput_tps,mean_latency_per_token_s,p95_latency_s,\
utilization,batch_count,mean_batch_size,hits,misses,hit_rate,run_id";

fn csv_row(r: &RunResult) -> String {
    let m = &r.metrics;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.pareto_alpha,
        r.request_rate,
        r.policy,
        m.completed_requests,
        m.failed_requests,
        m.generated_tokens,
        m.makespan_s,
        m.throughput_tps,
        m.mean_latency_per_token_s,
        m.p95_latency_s,
        m.utilization,
        m.batch_count,
        m.mean_batch_size,
        m.hits,
        m.misses,
        m.hit_rate,
        r.run_id,
    )
}

fn run_id_for(cfg: &SimConfig, policy: CachePolicy) -> String {
    let mut h = Sha256::new();
    h.update(cfg.to_toml_string().as_bytes());
    h.update(policy.to_string().as_bytes());
    let digest = h.finalize();
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

/// Sweep the grid (outer to inner: alpha, rate, policy), one kernel per
/// cell. Cell failures are reported in `errors` and skip their row; the
/// sweep continues.
pub fn run_experiment(
    base: &SimConfig,
    alphas: &[f64],
    rates: &[f64],
    policies: &[CachePolicy],
    collect_trace: bool,
) -> ExperimentOutput {
    let mut results = Vec::new();
    let mut errors = Vec::new();
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut trace_lines = collect_trace.then(String::new);

    for &alpha in alphas {
        for &rate in rates {
            for &policy in policies {
                let mut cfg = base.clone();
                cfg.workload.pareto_alpha = alpha;
                cfg.workload.request_rate = rate;
                match run_cell(&cfg, policy, false) {
                    Ok(mut out) => {
                        let cell_start = TraceRecord {
                            virtual_time: 0,
                            pid: None,
                            tid: None,
                            event: TraceEvent::Note {
                                tag: "cell_start".into(),
                                data: json!({
                                    "alpha": alpha,
                                    "rate": rate,
                                    "policy": policy.to_string(),
                                }),
                            },
                        };
                        out.trace.insert(0, cell_start);
                        if let Some(lines) = trace_lines.as_mut() {
                            for rec in &out.trace {
                                lines.push_str(&rec.to_json_line());
                                lines.push('\n');
                            }
                        }
                        let row = RunResult {
                            pareto_alpha: alpha,
                            request_rate: rate,
                            policy: policy.to_string(),
                            metrics: out.metrics,
                            run_id: run_id_for(&cfg, policy),
                            config: cfg,
                        };
                        csv.push_str(&csv_row(&row));
                        csv.push('\n');
                        results.push(row);
                    }
                    Err(e) => {
                        errors.push(format!("alpha={alpha} rate={rate} policy={policy}: {e}"));
                    }
                }
            }
        }
    }
    ExperimentOutput { results, csv, trace_lines, errors }
}

/// Minimal scheduler-focused workload: `n` single-token pred requests on
/// private one-page files, Poisson arrivals at `rate_per_s`. Returns the
/// full trace for the batching auditors.
pub fn pred_probe_run(rate_per_s: f64, n: u64, seed: u64) -> Result<Vec<TraceRecord>, String> {
    let cfg = SimConfig::default();
    let kernel = Kernel::new(cfg.kvfs.clone(), cfg.model.clone(), cfg.scheduler.clone());
    kernel.set_trace_transitions(false);
    let pid = kernel
        .spawn_lip(|ctx| async move {
            let mut served = 0_u64;
            loop {
                let (_, msg) = ctx.recv().await?;
                if msg == SHUTDOWN_SENTINEL {
                    break;
                }
                let req_no = served;
                served += 1;
                ctx.spawn(move |w| async move {
                    let f = w.kv_create(&format!("probe{req_no}.kv"), Sharing::PRIVATE)?;
                    w.pred(f, vec![(1, 0)]).await?;
                    w.kv_remove(f)?;
                    Ok(0)
                })?;
            }
            ctx.join_all().await?;
            Ok(0)
        })
        .map_err(|e| e.to_string())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_ARRIVALS);
    let mut t = 0.0_f64;
    for _ in 0..n {
        let u: f64 = rng.gen();
        t += -(1.0 - u).ln() / rate_per_s;
        kernel.post_message(secs_to_nanos(t), pid, b"go".to_vec());
    }
    kernel.post_message(secs_to_nanos(t) + 1, pid, SHUTDOWN_SENTINEL.to_vec());

    let report = kernel.run_until_quiescent();
    if !report.quiescent {
        return Err(format!(
            "probe run did not quiesce; stuck threads: {:?}",
            report.stuck_threads
        ));
    }
    Ok(kernel.take_trace())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SimConfig {
        let mut cfg = SimConfig::default();
        cfg.model.vocab_size = 16;
        cfg.workload = WorkloadSpec {
            num_docs: 3,
            doc_len: 40,
            pareto_alpha: 0.5,
            request_rate: 200.0,
            duration: 0.2,
            query_len: 4,
            gen_len: 6,
            seed: 7,
        };
        cfg
    }

    #[test]
    fn rank_weights_normalized_and_decreasing() {
        let w = rank_weights(100, 1.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for pair in w.windows(2) {
            assert!(pair[0] > pair[1]);
        }
    }

    #[test]
    fn small_alpha_concentrates_on_rank_one() {
        // Heavy-tail limit: at index 0.02 the exponent is 50, so rank 1
        // holds essentially all mass.
        let w = rank_weights(100, 0.02);
        assert!(w[0] > 0.99, "top-1 share {} too small", w[0]);
    }

    #[test]
    fn large_alpha_approaches_uniform() {
        let w = rank_weights(100, 50.0);
        assert!(w[0] < 0.02, "top-1 share {} too large for flat regime", w[0]);
        assert!(w[0] / w[99] < 1.2);
    }

    #[test]
    fn top_mass_is_monotone_in_alpha() {
        // The top-20 hit-rate ceiling must shrink as the index grows —
        // this ordering is what makes the caching advantage decay.
        let alphas = [0.2, 0.6, 1.0, 1.4, 2.0];
        let masses: Vec<f64> = alphas
            .iter()
            .map(|&a| top_mass(&rank_weights(100, a), 20))
            .collect();
        for pair in masses.windows(2) {
            assert!(pair[0] > pair[1], "masses not decreasing: {masses:?}");
        }
    }

    #[test]
    fn pick_rank_hits_boundaries() {
        let cdf = [0.5, 0.8, 1.0];
        assert_eq!(pick_rank(&cdf, 0.0), 0);
        assert_eq!(pick_rank(&cdf, 0.49), 0);
        assert_eq!(pick_rank(&cdf, 0.5), 1);
        assert_eq!(pick_rank(&cdf, 0.99), 2);
        assert_eq!(pick_rank(&cdf, 1.0), 2); // float-edge guard
    }

    #[test]
    fn arrival_count_matches_poisson_mean() {
        let spec = WorkloadSpec {
            request_rate: 50.0,
            duration: 20.0,
            ..WorkloadSpec::default()
        };
        let n = gen_requests(&spec, 64).len() as f64;
        let mean = 1000.0_f64;
        let sigma = mean.sqrt();
        assert!(
            (n - mean).abs() < 3.0 * sigma,
            "arrival count {n} outside 3-sigma of {mean}"
        );
    }

    #[test]
    fn skew_changes_only_doc_picks() {
        let mk = |alpha: f64| {
            let spec = WorkloadSpec {
                pareto_alpha: alpha,
                duration: 2.0,
                ..WorkloadSpec::default()
            };
            gen_requests(&spec, 64)
        };
        let a = mk(0.2);
        let b = mk(2.0);
        assert_eq!(a.len(), b.len());
        let mut some_pick_differs = false;
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.at, y.at, "arrival times must not depend on skew");
            assert_eq!(x.msg.query, y.msg.query, "queries must not depend on skew");
            some_pick_differs |= x.msg.doc != y.msg.doc;
        }
        assert!(some_pick_differs, "document picks should react to skew");
    }

    #[test]
    fn gen_requests_deterministic() {
        let spec = WorkloadSpec { duration: 1.0, ..WorkloadSpec::default() };
        assert_eq!(gen_requests(&spec, 64), gen_requests(&spec, 64));
        assert_eq!(doc_corpus(&spec, 64), doc_corpus(&spec, 64));
    }

    #[test]
    fn corpus_avoids_eos_and_is_positioned() {
        let spec = WorkloadSpec { num_docs: 4, doc_len: 50, ..WorkloadSpec::default() };
        for doc in doc_corpus(&spec, 16) {
            assert_eq!(doc.len(), 50);
            for (i, &(t, p)) in doc.iter().enumerate() {
                assert!(t >= 1 && t < 16);
                assert_eq!(p, i as Position);
            }
        }
    }

    #[test]
    fn policy_parsing_round_trips() {
        for p in [
            CachePolicy::None,
            CachePolicy::TopK(20),
            CachePolicy::Consecutive(3),
        ] {
            assert_eq!(p.to_string().parse::<CachePolicy>().unwrap(), p);
        }
        assert!("topk".parse::<CachePolicy>().is_err());
        assert!("topk:x".parse::<CachePolicy>().is_err());
        assert!("lru".parse::<CachePolicy>().is_err());
    }

    #[test]
    fn top_k_plan_fills_then_evicts_by_count() {
        let mut st = ServiceState::new(CachePolicy::TopK(2));
        let f = |n: u64| FileId(n);
        // doc 0 twice, doc 1 once, doc 2 once, doc 3 three times.
        for d in [0, 0, 1, 2, 3, 3, 3] {
            st.on_request(d);
        }
        assert!(matches!(st.plan_retention(0), RetentionPlan::Retain { evict: None }));
        st.remember(0, f(10));
        assert!(matches!(st.plan_retention(1), RetentionPlan::Retain { evict: None }));
        st.remember(1, f(11));
        // Full. doc 2 (count 1) does not beat doc 1 (count 1): skip.
        assert!(matches!(st.plan_retention(2), RetentionPlan::Skip));
        // doc 3 (count 3) beats doc 1 (count 1, the weakest).
        match st.plan_retention(3) {
            RetentionPlan::Retain { evict: Some((1, file)) } => assert_eq!(file, f(11)),
            _ => panic!("expected eviction of doc 1"),
        }
        st.remember(3, f(12));
        // Already retained: skip.
        assert!(matches!(st.plan_retention(3), RetentionPlan::Skip));
        // k = 0 never retains.
        let mut none_room = ServiceState::new(CachePolicy::TopK(0));
        none_room.on_request(5);
        assert!(matches!(none_room.plan_retention(5), RetentionPlan::Skip));
    }

    #[test]
    fn consecutive_plan_needs_a_streak() {
        let mut st = ServiceState::new(CachePolicy::Consecutive(2));
        st.on_request(4);
        assert!(matches!(st.plan_retention(4), RetentionPlan::Skip));
        st.on_request(4);
        assert!(matches!(st.plan_retention(4), RetentionPlan::Retain { evict: None }));
        st.on_request(5); // breaks the streak
        assert!(matches!(st.plan_retention(5), RetentionPlan::Skip));
    }

    #[test]
    fn weakest_retained_breaks_ties_toward_larger_id() {
        let mut st = ServiceState::new(CachePolicy::TopK(3));
        st.on_request(1);
        st.on_request(2);
        st.remember(1, FileId(21));
        st.remember(2, FileId(22));
        assert_eq!(st.evict_least_popular(), Some((2, FileId(22))));
    }

    #[test]
    fn tiny_cell_conserves_tokens_and_quiesces() {
        let cfg = tiny_cfg();
        let arrivals = gen_requests(&cfg.workload, cfg.model.vocab_size).len() as u64;
        assert!(arrivals > 5, "want a non-trivial request count");
        let out = run_cell(&cfg, CachePolicy::TopK(2), true).unwrap();
        let m = &out.metrics;
        assert_eq!(m.completed_requests + m.failed_requests, arrivals);
        assert_eq!(m.failed_requests, 0);
        assert_eq!(m.generated_tokens, m.completed_requests * cfg.workload.gen_len);
        assert_eq!(m.hits + m.misses, m.completed_requests);
        assert!(m.hits > 0, "skewed tiny corpus should produce repeat hits");
        assert!(m.throughput_tps > 0.0);
    }

    #[test]
    fn baseline_policy_never_hits() {
        let cfg = tiny_cfg();
        let out = run_cell(&cfg, CachePolicy::None, false).unwrap();
        assert_eq!(out.metrics.hits, 0);
        assert_eq!(out.metrics.hit_rate, 0.0);
        assert_eq!(out.metrics.failed_requests, 0);
    }

    #[test]
    fn cell_reruns_bit_identically() {
        let cfg = tiny_cfg();
        let a = run_cell(&cfg, CachePolicy::TopK(2), true).unwrap();
        let b = run_cell(&cfg, CachePolicy::TopK(2), true).unwrap();
        let lines = |o: &CellOutput| {
            o.trace.iter().map(|r| r.to_json_line()).collect::<Vec<_>>()
        };
        assert_eq!(lines(&a), lines(&b));
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn single_cell_grid_emits_one_row() {
        let cfg = tiny_cfg();
        let out = run_experiment(&cfg, &[0.5], &[200.0], &[CachePolicy::TopK(2)], true);
        assert!(out.errors.is_empty(), "{:?}", out.errors);
        assert_eq!(out.results.len(), 1);
        let mut lines = out.csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let row = lines.next().unwrap();
        assert!(row.starts_with("0.5,200,topk:2,"));
        assert_eq!(lines.next(), None);
        let trace = out.trace_lines.unwrap();
        assert!(trace.lines().next().unwrap().contains("cell_start"));
    }

    #[test]
    fn experiment_reruns_byte_identically() {
        let cfg = tiny_cfg();
        let grid = (
            [0.3, 1.5],
            [150.0],
            [CachePolicy::None, CachePolicy::TopK(2)],
        );
        let a = run_experiment(&cfg, &grid.0, &grid.1, &grid.2, true);
        let b = run_experiment(&cfg, &grid.0, &grid.1, &grid.2, true);
        assert_eq!(a.csv, b.csv);
        assert_eq!(a.trace_lines, b.trace_lines);
        assert_eq!(a.results.len(), 4);
    }

    #[test]
    fn invalid_cell_reports_error_and_grid_continues() {
        let mut cfg = tiny_cfg();
        cfg.workload.num_docs = 0; // invalid for every cell
        let out = run_experiment(&cfg, &[0.5], &[10.0], &[CachePolicy::None], false);
        assert_eq!(out.results.len(), 0);
        assert_eq!(out.errors.len(), 1);
        assert!(out.errors[0].contains("num_docs"));
    }

    #[test]
    fn probe_run_produces_batches() {
        let trace = pred_probe_run(500.0, 60, 11).unwrap();
        let batches = trace
            .iter()
            .filter(|r| matches!(r.event, TraceEvent::BatchDispatched { .. }))
            .count();
        assert!(batches > 0);
        let completec = trace
            .iter()
            .filter(|r| matches!(r.event, TraceEvent::PredCompleted { .. }))
            .count();
        assert_eq!(completec, 60);
    }
}
