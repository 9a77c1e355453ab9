//! Self-contained invariant audits behind the CLI `check` subcommand: each
//! check builds a fresh scenario, exercises the real implementation against
//! an independent oracle or auditor, and reports one pass/fail line.

use crate::config::SimConfig;
use crate::kvfs::shadow::ShadowStore;
use crate::kvfs::{Caller, FileId, KvEntry, KvError, KvStore, KvfsConfig};
use crate::model::{build_entries, compute_pred, oracle_from_scratch, ModelConfig};
use crate::scheduler::{
    audit_cost_exactness, audit_fifo_completion, audit_io_pairing, audit_thread_transitions,
    audit_wait_bounds, audit_work_conservation, CostModel,
};
use crate::sim::{pred_probe_run, run_cell, run_experiment, CachePolicy, WorkloadSpec};
use crate::types::{Position, Principal, Tid, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type CheckResult = Result<String, String>;

/// Drive the paged store and the deep-copy shadow with one random operation
/// sequence; any divergence in results, errors, contents, or name tables is
/// a failure. Returns the op count on success. Public so property tests can
/// sweep seeds beyond the fixed set the CLI check uses.
pub fn shadow_fuzz_one(seed: u64, ops: usize) -> Result<usize, String> {
    const MODEL_SEED: u64 = 99;
    let cfg = KvfsConfig {
        page_size: 4,
        device_capacity_pages: 1 << 20,
        host_capacity_pages: 16,
    };
    let store = KvStore::new(cfg, MODEL_SEED);
    let mut shadow = ShadowStore::new(MODEL_SEED);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Handles ever issued, including dangling ones (both sides allocate ids
    // in lockstep, so a single list serves both).
    let mut handles: Vec<FileId> = Vec::new();
    let names = ["a.kv", "b.kv", "c.kv", "d.kv", "e.kv", "f.kv"];

    let callers = [
        Caller { principal: Principal(1), thread: Tid(1) },
        Caller { principal: Principal(1), thread: Tid(2) },
        Caller { principal: Principal(2), thread: Tid(3) },
    ];

    fn fail<T>(step: usize, what: &str, a: String, b: String) -> Result<T, String> {
        Err(format!("step {step}: {what} diverged: store {a}, shadow {b}"))
    }
    fn cmp_new(
        step: usize,
        a: Result<FileId, KvError>,
        b: Result<FileId, KvError>,
        what: &str,
        handles: &mut Vec<FileId>,
    ) -> Result<(), String> {
        match (&a, &b) {
            (Ok(x), Ok(y)) if x == y => {
                handles.push(*x);
                Ok(())
            }
            (Err(x), Err(y)) if x == y => Ok(()),
            _ => fail(step, what, format!("{a:?}"), format!("{b:?}")),
        }
    }

    for step in 0..ops {
        let caller = callers[rng.gen_range(0..callers.len())];
        let pick = |rng: &mut ChaCha8Rng, hs: &[FileId]| hs[rng.gen_range(0..hs.len())];
        let op = rng.gen_range(0..11u32);
        match op {
            0 => {
                let name = names[rng.gen_range(0..names.len())];
                let sharing = crate::kvfs::Sharing {
                    readable_by_all: rng.gen_bool(0.5),
                    writable_by_all: rng.gen_bool(0.3),
                };
                let a = store.create(caller, name, sharing);
                let b = shadow.create(caller, name, sharing);
                cmp_new(step, a, b, "create", &mut handles)?;
            }
            1 if !handles.is_empty() => {
                let f = pick(&mut rng, &handles);
                let a = store.remove(caller, f);
                let b = shadow.remove(caller, f);
                if a != b {
                    return fail(step, "remove", format!("{a:?}"), format!("{b:?}"));
                }
            }
            2 if !handles.is_empty() => {
                // Append a short run continuing the chain; occasionally at a
                // deliberately conflicting position.
                let f = pick(&mut rng, &handles);
                let host = Caller::host();
                let (chain, last_pos) = match (store.chain_state(host, f), store.read_back(host, f))
                {
                    (Ok(c), Ok(es)) => (c, es.last().map_or(0, |e| e.position + 1)),
                    _ => (MODEL_SEED, 0), // dangling handle; append will NotFound
                };
                let start = if rng.gen_bool(0.15) && last_pos > 0 {
                    last_pos - 1 // conflict on purpose
                } else {
                    last_pos + rng.gen_range(0..2)
                };
                let toks: Vec<(TokenId, Position)> = (0..rng.gen_range(1..6u32))
                    .map(|i| (rng.gen_range(1..50u32), start + i))
                    .collect();
                let entries: Vec<KvEntry> = build_entries(chain, &toks);
                let a = store.append(caller, f, &entries);
                let b = shadow.append(caller, f, &entries);
                if a != b {
                    return fail(step, "append", format!("{a:?}"), format!("{b:?}"));
                }
            }
            3 if !handles.is_empty() => {
                let f = pick(&mut rng, &handles);
                let a = store.fork(caller, f);
                let b = shadow.fork(caller, f);
                cmp_new(step, a, b, "fork", &mut handles)?;
            }
            4 if !handles.is_empty() => {
                let f = pick(&mut rng, &handles);
                let len = store.length(Caller::host(), f).unwrap_or(0);
                let mut indices: Vec<u64> = (0..len).filter(|_| rng.gen_bool(0.4)).collect();
                if rng.gen_bool(0.1) {
                    indices.push(len + 3); // out of range on purpose
                }
                let name = names[rng.gen_range(0..names.len())];
                let a = store.extract(caller, f, &indices, name);
                let b = shadow.extract(caller, f, &indices, name);
                cmp_new(step, a, b, "extract", &mut handles)?;
            }
            5 if !handles.is_empty() => {
                let n = rng.gen_range(1..=3.min(handles.len()));
                let parts: Vec<FileId> = (0..n).map(|_| pick(&mut rng, &handles)).collect();
                let name = names[rng.gen_range(0..names.len())];
                let a = store.merge(caller, &parts, name);
                let b = shadow.merge(caller, &parts, name);
                cmp_new(step, a, b, "merge", &mut handles)?;
            }
            6 if !handles.is_empty() => {
                let f = pick(&mut rng, &handles);
                let a = store.lock(caller, f);
                let b = shadow.lock(caller, f);
                if a != b {
                    return fail(step, "lock", format!("{a:?}"), format!("{b:?}"));
                }
            }
            7 if !handles.is_empty() => {
                let f = pick(&mut rng, &handles);
                let a = store.unlock(caller, f);
                let b = shadow.unlock(caller, f);
                if a != b {
                    return fail(step, "unlock", format!("{a:?}"), format!("{b:?}"));
                }
            }
            8 => {
                let a = store.release_locks_of(caller.thread);
                let b = shadow.release_locks_of(caller.thread);
                if a != b {
                    return fail(step, "release_locks_of", format!("{a}"), format!("{b}"));
                }
            }
            9 => {
                let name = names[rng.gen_range(0..names.len())];
                let a = store.open(caller, name);
                let b = shadow.open(caller, name);
                if a != b {
                    return fail(step, "open", format!("{a:?}"), format!("{b:?}"));
                }
            }
            _ if !handles.is_empty() => {
                let f = pick(&mut rng, &handles);
                let a = store.read_back(caller, f);
                let b = shadow.read_back(caller, f);
                if a != b {
                    return fail(step, "read_back", format!("{a:?}"), format!("{b:?}"));
                }
            }
            _ => {}
        }
        if store.names() != shadow.names() {
            return fail(
                step,
                "name table",
                format!("{:?}", store.names()),
                format!("{:?}", shadow.names()),
            );
        }
        store.audit().map_err(|e| format!("step {step}: page audit: {e}"))?;
    }
    Ok(ops)
}

pub fn check_shadow_equivalence() -> CheckResult {
    const SEEDS: u64 = 20;
    const OPS: usize = 150;
    let mut total = 0;
    for seed in 0..SEEDS {
        total += shadow_fuzz_one(seed, OPS)?;
    }
    Ok(format!(
        "{total} randomized ops across {SEEDS} sequences, paged store == deep-copy reference"
    ))
}

/// Random token sequences split into random pred calls: the concatenated
/// incremental distributions must equal the from-scratch oracle bitwise.
pub fn check_model_oracle() -> CheckResult {
    let cfg = ModelConfig { vocab_size: 64, ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0u64;
    for case in 0..60 {
        let store = KvStore::new(
            KvfsConfig { page_size: 16, device_capacity_pages: 4096, host_capacity_pages: 64 },
            cfg.model_seed,
        );
        let host = Caller::host();
        let f = store
            .create(host, "seq.kv", crate::kvfs::Sharing::PRIVATE)
            .map_err(|e| e.to_string())?;
        let len = rng.gen_range(1..=96usize);
        let tokens: Vec<(TokenId, Position)> = (0..len)
            .map(|p| (rng.gen_range(0..cfg.vocab_size), p as Position))
            .collect();
        let mut got = Vec::with_capacity(len);
        let mut at = 0usize;
        while at < len {
            let take = rng.gen_range(1..=(len - at));
            let chunk = &tokens[at..at + take];
            got.extend(compute_pred(&store, host, f, chunk, &cfg).map_err(|e| e.to_string())?);
            at += take;
        }
        let want = oracle_from_scratch(&tokens, &cfg);
        if got != want {
            return Err(format!("case {case}: incremental dists != oracle"));
        }
        checked += len as u64;
    }
    Ok(format!("60 sequences, {checked} distributions bitwise equal to the oracle"))
}

/// Batch policy auditors over a Poisson probe run.
pub fn check_scheduler_policies() -> CheckResult {
    let trace = pred_probe_run(200.0, 500, 3)?;
    let cfg = SimConfig::default();
    let w = cfg.scheduler.w_max_ns;
    let cost = CostModel::from_config(&cfg.scheduler);
    let waits = audit_wait_bounds(&trace, w)?;
    let cons = audit_work_conservation(&trace, w)?;
    let costs = audit_cost_exactness(&trace, &cost)?;
    let fifo = audit_fifo_completion(&trace)?;
    Ok(format!(
        "{waits} waits bounded, {cons} busy intervals conserved, {costs} costs exact, {fifo} completions FIFO"
    ))
}

/// Thread lifecycle and I/O pairing audits over a full workload cell with
/// per-transition tracing on.
pub fn check_thread_discipline() -> CheckResult {
    let mut cfg = SimConfig::default();
    cfg.model.vocab_size = 16;
    cfg.workload = WorkloadSpec {
        num_docs: 3,
        doc_len: 40,
        pareto_alpha: 0.5,
        request_rate: 150.0,
        duration: 0.3,
        query_len: 4,
        gen_len: 6,
        seed: 11,
    };
    let out = run_cell(&cfg, CachePolicy::TopK(2), true)?;
    let transitions = audit_thread_transitions(&out.trace)?;
    let io = audit_io_pairing(&out.trace)?;
    Ok(format!("{transitions} transitions legal, {io} I/O waits paired"))
}

/// The experiment must be a pure function of its inputs: two runs of a
/// small grid, byte-identical CSV and trace.
pub fn check_determinism() -> CheckResult {
    let mut cfg = SimConfig::default();
    cfg.model.vocab_size = 16;
    cfg.workload = WorkloadSpec {
        num_docs: 4,
        doc_len: 60,
        pareto_alpha: 0.5,
        request_rate: 120.0,
        duration: 0.25,
        query_len: 4,
        gen_len: 6,
        seed: 21,
    };
    let grid = ([0.3, 1.2], [120.0], [CachePolicy::None, CachePolicy::TopK(2)]);
    let a = run_experiment(&cfg, &grid.0, &grid.1, &grid.2, true);
    let b = run_experiment(&cfg, &grid.0, &grid.1, &grid.2, true);
    if !a.errors.is_empty() {
        return Err(format!("cells failed: {:?}", a.errors));
    }
    if a.csv != b.csv {
        return Err("CSV outputs differ between identical runs".into());
    }
    if a.trace_lines != b.trace_lines {
        return Err("traces differ between identical runs".into());
    }
    let lines = a.trace_lines.map_or(0, |t| t.lines().count());
    Ok(format!(
        "two identical 4-cell runs byte-identical ({} trace lines, {} CSV bytes)",
        lines,
        a.csv.len()
    ))
}

/// Every invariant audit, in a stable order.
pub fn run_checks() -> Vec<(&'static str, CheckResult)> {
    vec![
        ("kvfs shadow equivalence", check_shadow_equivalence()),
        ("model oracle", check_model_oracle()),
        ("scheduler policies", check_scheduler_policies()),
        ("thread discipline", check_thread_discipline()),
        ("experiment determinism", check_determinism()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for (name, result) in run_checks() {
            if let Err(e) = result {
                panic!("check {name} failed: {e}");
            }
        }
    }
}
