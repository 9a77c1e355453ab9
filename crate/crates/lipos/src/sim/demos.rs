//! The bundled demonstration programs, one per system capability, each with
//! built-in assertions. `cargo run --example <name>` wraps these
//! one-to-one, and the CLI `examples` subcommand runs the whole set.

use crate::config::SimConfig;
use crate::decoding::{constrained_next, sample, speculative_verify, SamplerSpec, TokenAutomaton};
use crate::kernel::{host_read, host_seed_file, Ctx, Kernel, SysResult};
use crate::kvfs::{FileId, Sharing};
use crate::model::Dist;
use crate::types::{Pid, Position, TokenId};
use std::cell::RefCell;
use std::rc::Rc;

type FailBox = Rc<RefCell<Vec<String>>>;

/// Record a failed in-program assertion and bail out of the program body
/// with a nonzero exit status.
macro_rules! checked {
    ($fails:expr, $cond:expr, $($msg:tt)+) => {
        if !$cond {
            $fails.borrow_mut().push(format!($($msg)+));
            return Ok(1);
        }
    };
}

/// Drive the kernel dry and fold failures into one result.
fn finish(kernel: &Kernel, fails: &FailBox, pids: &[Pid]) -> Result<(), String> {
    let report = kernel.run_until_quiescent();
    if !report.quiescent {
        return Err(format!(
            "run did not quiesce; stuck threads: {:?}",
            report.stuck_threads
        ));
    }
    for &pid in pids {
        match kernel.exit_status(pid) {
            Some(0) => {}
            status => {
                let mut msgs = fails.borrow().join("; ");
                if msgs.is_empty() {
                    msgs = format!("{pid} exited with {status:?}");
                }
                return Err(msgs);
            }
        }
    }
    let msgs = fails.borrow();
    if msgs.is_empty() {
        Ok(())
    } else {
        Err(msgs.join("; "))
    }
}

/// Greedy continuation of `dist`: emit exactly `n` tokens, appending each
/// one except the last to `f` to obtain the next distribution.
async fn greedy_tail(
    ctx: &Ctx,
    f: FileId,
    mut dist: Dist,
    start: Position,
    n: usize,
) -> SysResult<Vec<TokenId>> {
    let mut toks = Vec::with_capacity(n);
    let mut pos = start;
    loop {
        let t = dist.argmax();
        toks.push(t);
        if toks.len() == n {
            return Ok(toks);
        }
        dist = ctx.pred(f, vec![(t, pos)]).await?.pop().expect("one dist per token");
        pos += 1;
    }
}

/// Several threads generate in parallel off one shared prefix: each forks
/// the prefix file, extends only its private fork, and the prefix itself
/// stays bit-identical.
pub fn demo_parallel_generation() -> Result<String, String> {
    let mut cfg = SimConfig::default();
    cfg.model.vocab_size = 16; // EOS lands quickly at temperature 1
    let kernel = Kernel::new(cfg.kvfs.clone(), cfg.model.clone(), cfg.scheduler.clone());

    let prefix_tokens: Vec<(TokenId, Position)> =
        (0..24u32).map(|i| (i % 15 + 1, i)).collect();
    let prefix = host_seed_file(kernel.store(), "prefix.kv", Sharing::READ_SHARED, &prefix_tokens)
        .map_err(|e| e.to_string())?;

    let n_branches = 4u32;
    let eos = cfg.model.eos_token;
    let outputs: Rc<RefCell<Vec<Vec<TokenId>>>> = Rc::new(RefCell::new(Vec::new()));
    let fails: FailBox = Rc::new(RefCell::new(Vec::new()));

    let pid = {
        let outputs = outputs.clone();
        let fails = fails.clone();
        kernel.spawn_lip(move |ctx| async move {
            for b in 0..n_branches {
                let outputs = outputs.clone();
                let fails = fails.clone();
                ctx.spawn(move |w| async move {
                    let f = w.kv_fork(prefix)?;
                    let mut dist = w
                        .pred(f, vec![(b + 1, 24)])
                        .await?
                        .pop()
                        .expect("one dist per token");
                    let mut toks = vec![b + 1];
                    let mut pos = 25u32;
                    loop {
                        let t = sample(&dist, &SamplerSpec::temperature(1.0, 1000 + u64::from(b)))
                            .expect("mock distributions are sampleable");
                        toks.push(t);
                        if t == eos {
                            break;
                        }
                        checked!(fails, toks.len() < 4096, "branch {b} never sampled EOS");
                        dist = w.pred(f, vec![(t, pos)]).await?.pop().expect("one dist");
                        pos += 1;
                    }
                    w.kv_remove(f)?;
                    outputs.borrow_mut().push(toks);
                    Ok(0)
                })?;
            }
            ctx.join_all().await?;
            checked!(
                fails,
                ctx.kv_length(prefix)? == 24,
                "prefix length changed under the forks"
            );
            Ok(0)
        })
    }
    .map_err(|e| e.to_string())?;

    finish(&kernel, &fails, &[pid])?;
    let outs = outputs.borrow();
    if outs.len() != n_branches as usize {
        return Err(format!("expected {n_branches} outputs, got {}", outs.len()));
    }
    for (i, o) in outs.iter().enumerate() {
        if o.last() != Some(&eos) {
            return Err(format!("branch {i} output does not end in EOS: {o:?}"));
        }
    }
    if host_read(kernel.store(), prefix) != prefix_tokens {
        return Err("prefix content changed".into());
    }
    let lens: Vec<usize> = outs.iter().map(Vec::len).collect();
    Ok(format!(
        "{n_branches} branches off one 24-token prefix, output lengths {lens:?}, prefix intact"
    ))
}

/// Decode under a token automaton: every sampled token must be allowed in
/// the current state, and EOS may only land in an accepting state.
pub fn demo_constrained_decoding() -> Result<String, String> {
    let mut cfg = SimConfig::default();
    cfg.model.vocab_size = 8;
    let kernel = Kernel::new(cfg.kvfs.clone(), cfg.model.clone(), cfg.scheduler.clone());

    // Strict a/b alternation; stopping is only legal after a complete pair.
    let aut = TokenAutomaton::new(
        &["want_a", "want_b", "done"],
        "want_a",
        &["done"],
        &[("want_a", 1, "want_b"), ("want_b", 2, "want_a"), ("want_a", 0, "done")],
    )
    .map_err(|e| e.to_string())?;

    let fails: FailBox = Rc::new(RefCell::new(Vec::new()));
    let emitted: Rc<RefCell<Vec<TokenId>>> = Rc::new(RefCell::new(Vec::new()));
    let pid = {
        let fails = fails.clone();
        let emitted = emitted.clone();
        kernel.spawn_lip(move |ctx| async move {
            let f = ctx.kv_create("constrained.kv", Sharing::PRIVATE)?;
            // Unconstrained prompt token; the automaton governs what follows.
            let mut dist = ctx.pred(f, vec![(3, 0)]).await?.pop().expect("one dist");
            let spec = SamplerSpec::temperature(1.0, 77);
            let mut state = aut.start();
            let mut pos = 1u32;
            loop {
                let (tok, next) = constrained_next(&dist, state, &aut, &spec)
                    .expect("alternation automaton has no dead states");
                checked!(
                    fails,
                    aut.step(state, tok).is_some(),
                    "token {tok} not allowed in state {}",
                    aut.state_name(state)
                );
                emitted.borrow_mut().push(tok);
                state = next;
                if tok == 0 {
                    checked!(
                        fails,
                        aut.is_accept(state),
                        "EOS landed in non-accepting state {}",
                        aut.state_name(state)
                    );
                    break;
                }
                checked!(fails, pos < 10_000, "automaton never reached EOS");
                dist = ctx.pred(f, vec![(tok, pos)]).await?.pop().expect("one dist");
                pos += 1;
            }
            ctx.kv_remove(f)?;
            Ok(0)
        })
    }
    .map_err(|e| e.to_string())?;

    finish(&kernel, &fails, &[pid])?;
    let toks = emitted.borrow();
    // Shape check: a b a b ... a-position EOS.
    for (i, &t) in toks.iter().enumerate() {
        let want = if i == toks.len() - 1 { 0 } else if i % 2 == 0 { 1 } else { 2 };
        if t != want {
            return Err(format!("position {i} emitted {t}, automaton requires {want}"));
        }
    }
    Ok(format!(
        "{} constrained tokens, zero violations, accepting finish",
        toks.len()
    ))
}

/// Speculative decoding with draft proposals, greedy verification, and
/// rollback via prefix extraction — output must equal plain greedy
/// decoding, token for token.
pub fn demo_speculative_decoding() -> Result<String, String> {
    let mut cfg = SimConfig::default();
    cfg.model.vocab_size = 16;
    const N: usize = 24;
    const LOOKAHEAD: usize = 4;

    let mut accepted_total = 0usize;
    let mut rounds_total = 0usize;
    for seed in 0..10u64 {
        let kernel = Kernel::new(cfg.kvfs.clone(), cfg.model.clone(), cfg.scheduler.clone());
        let fails: FailBox = Rc::new(RefCell::new(Vec::new()));
        let stats: Rc<RefCell<(usize, usize)>> = Rc::new(RefCell::new((0, 0)));
        let prompt_tok = (seed % 15) as TokenId + 1;

        let pid = {
            let fails = fails.clone();
            let stats = stats.clone();
            kernel.spawn_lip(move |ctx| async move {
                // Reference: plain greedy continuation.
                let rf = ctx.kv_create("greedy.kv", Sharing::PRIVATE)?;
                let d0 = ctx.pred(rf, vec![(prompt_tok, 0)]).await?.pop().expect("one dist");
                let reference = greedy_tail(&ctx, rf, d0.clone(), 1, N).await?;
                ctx.kv_remove(rf)?;

                // Speculative: draft on a throwaway fork, verify in one
                // pred, roll back rejected tokens by extracting the good
                // prefix into a fresh file.
                let draft_spec = SamplerSpec::temperature(1.3, 0xD12A_F7 ^ seed);
                let mut sf = ctx.kv_create("spec_r0.kv", Sharing::PRIVATE)?;
                let mut dist = ctx.pred(sf, vec![(prompt_tok, 0)]).await?.pop().expect("one dist");
                let mut out: Vec<TokenId> = Vec::new();
                let mut base_len = 1u64; // prompt entry
                let mut round = 0u32;
                while out.len() < N {
                    let k = LOOKAHEAD.min(N - out.len());
                    let pos0 = base_len as Position;

                    let df = ctx.kv_fork(sf)?;
                    let mut ddist = dist.clone();
                    let mut proposal = Vec::with_capacity(k);
                    for j in 0..k {
                        let t = sample(&ddist, &draft_spec)
                            .expect("mock distributions are sampleable");
                        proposal.push(t);
                        ddist = ctx
                            .pred(df, vec![(t, pos0 + j as Position)])
                            .await?
                            .pop()
                            .expect("one dist");
                    }
                    ctx.kv_remove(df)?;

                    // One target pass over the whole proposal.
                    let scored: Vec<(TokenId, Position)> = proposal
                        .iter()
                        .enumerate()
                        .map(|(j, &t)| (t, pos0 + j as Position))
                        .collect();
                    let ret = ctx.pred(sf, scored).await?;
                    let mut dists = Vec::with_capacity(k);
                    dists.push(dist.clone());
                    dists.extend(ret[..k - 1].iter().cloned());
                    let v = speculative_verify(&proposal, &dists, &SamplerSpec::greedy())
                        .expect("well-formed verification input");

                    out.extend(&proposal[..v.accepted]);
                    stats.borrow_mut().0 += v.accepted;
                    stats.borrow_mut().1 += 1;
                    match v.correction {
                        Some(c) => {
                            // Drop the rejected suffix, keep prompt + accepted.
                            let keep: Vec<u64> = (0..base_len + v.accepted as u64).collect();
                            round += 1;
                            let nf = ctx.kv_extract(sf, &keep, &format!("spec_r{round}.kv"))?;
                            ctx.kv_remove(sf)?;
                            sf = nf;
                            out.push(c);
                            base_len += v.accepted as u64;
                            if out.len() < N {
                                dist = ctx
                                    .pred(sf, vec![(c, base_len as Position)])
                                    .await?
                                    .pop()
                                    .expect("one dist");
                                base_len += 1;
                            }
                        }
                        None => {
                            dist = ret.last().cloned().expect("nonempty proposal");
                            base_len += k as u64;
                        }
                    }
                }
                ctx.kv_remove(sf)?;
                checked!(
                    fails,
                    out == reference,
                    "seed {seed}: speculative {out:?} != greedy {reference:?}"
                );
                Ok(0)
            })
        }
        .map_err(|e| e.to_string())?;

        finish(&kernel, &fails, &[pid])?;
        let (acc, rounds) = *stats.borrow();
        accepted_total += acc;
        rounds_total += rounds;
    }
    Ok(format!(
        "10 seeds x {N} tokens identical to plain greedy; {accepted_total} draft tokens \
         accepted over {rounds_total} verification rounds"
    ))
}

/// Call out to a registered tool mid-generation: KV pages are offloaded for
/// the wait, the clock advances by latency plus the page round trip, and
/// the file comes back bit-identical.
pub fn demo_function_calling() -> Result<String, String> {
    let cfg = SimConfig::default();
    let kernel = Kernel::new(cfg.kvfs.clone(), cfg.model.clone(), cfg.scheduler.clone());
    let tool_latency = 5_000_000u64; // 5 virtual ms
    kernel.register_tool("search", tool_latency, |payload| {
        let mut v = payload.to_vec();
        v.reverse();
        v
    });

    let transfer = cfg.scheduler.transfer_ns_per_page;
    let fails: FailBox = Rc::new(RefCell::new(Vec::new()));
    let pid = {
        let fails = fails.clone();
        kernel.spawn_lip(move |ctx| async move {
            let f = ctx.kv_create("agent.kv", Sharing::PRIVATE)?;
            let plan: Vec<(TokenId, Position)> = (0..5).map(|i| (i as TokenId + 2, i)).collect();
            ctx.pred(f, plan).await?;
            let before = ctx.kv_entries(f)?;

            let t0 = ctx.now();
            let reply = ctx.io_call("search", b"find the docs".to_vec()).await?;
            let waited = ctx.now() - t0;

            checked!(fails, reply == b"scod eht dnif", "tool reply was {reply:?}");
            // 5 entries = 1 device page, offloaded out and back.
            let expected = tool_latency + 2 * transfer;
            checked!(
                fails,
                waited == expected,
                "waited {waited} ns, expected {expected}"
            );
            checked!(
                fails,
                ctx.kv_entries(f)? == before,
                "KV content changed across the tool call"
            );

            // Condition continued generation on the tool result.
            let tok = TokenId::from(reply[0]) % 255 + 1;
            let dist = ctx.pred(f, vec![(tok, 5)]).await?.pop().expect("one dist");
            checked!(fails, dist.len() == 256, "continuation dist has wrong vocab");
            ctx.kv_remove(f)?;
            Ok(0)
        })
    }
    .map_err(|e| e.to_string())?;

    finish(&kernel, &fails, &[pid])?;
    Ok(format!(
        "tool round trip took exactly {}ns (latency {} + 1-page offload/restore), KV intact",
        tool_latency + 2 * transfer,
        tool_latency
    ))
}

/// Two programs cooperating over mailbox IPC: the asker sends a question,
/// the answerer generates a reply, and the asker re-derives the identical
/// reply from the deterministic model.
pub fn demo_multi_agent_ipc() -> Result<String, String> {
    let mut cfg = SimConfig::default();
    cfg.model.vocab_size = 16;
    let kernel = Kernel::new(cfg.kvfs.clone(), cfg.model.clone(), cfg.scheduler.clone());
    const REPLY_LEN: usize = 8;

    let fails: FailBox = Rc::new(RefCell::new(Vec::new()));
    let answerer = kernel
        .spawn_lip(move |ctx| async move {
            loop {
                let (from, msg) = ctx.recv().await?;
                if msg == b"__done__" {
                    return Ok(0);
                }
                let q: Vec<TokenId> =
                    serde_json::from_slice(&msg).expect("question is a token list");
                let f = ctx.kv_create("answer.kv", Sharing::PRIVATE)?;
                let toks: Vec<(TokenId, Position)> =
                    q.iter().enumerate().map(|(i, &t)| (t, i as Position)).collect();
                let qlen = toks.len() as Position;
                let dist = ctx.pred(f, toks).await?.pop().expect("one dist");
                let reply = greedy_tail(&ctx, f, dist, qlen, REPLY_LEN).await?;
                ctx.kv_remove(f)?;
                ctx.send(from, serde_json::to_vec(&reply).expect("reply serializes"))?;
            }
        })
        .map_err(|e| e.to_string())?;

    let asker = {
        let fails = fails.clone();
        kernel.spawn_lip(move |ctx| async move {
            let q: Vec<TokenId> = vec![3, 1, 4, 1, 5];
            ctx.send(answerer, serde_json::to_vec(&q).expect("question serializes"))?;
            let (from, msg) = ctx.recv().await?;
            checked!(fails, from == answerer, "reply came from {from}, not the answerer");
            let reply: Vec<TokenId> =
                serde_json::from_slice(&msg).expect("reply is a token list");

            // The model is deterministic, so the asker can recompute the
            // answer from its own copy of the question.
            let f = ctx.kv_create("check.kv", Sharing::PRIVATE)?;
            let toks: Vec<(TokenId, Position)> =
                q.iter().enumerate().map(|(i, &t)| (t, i as Position)).collect();
            let dist = ctx.pred(f, toks).await?.pop().expect("one dist");
            let expect = greedy_tail(&ctx, f, dist, q.len() as Position, REPLY_LEN).await?;
            ctx.kv_remove(f)?;
            checked!(
                fails,
                reply == expect,
                "answerer replied {reply:?}, asker derived {expect:?}"
            );
            ctx.send(answerer, b"__done__".to_vec())?;
            Ok(0)
        })
    }
    .map_err(|e| e.to_string())?;

    finish(&kernel, &fails, &[answerer, asker])?;
    Ok(format!(
        "asker verified the answerer's {REPLY_LEN}-token reply against its own derivation"
    ))
}

/// Run every bundled demo; each entry is (name, summary-or-failure).
pub fn run_examples() -> Vec<(&'static str, Result<String, String>)> {
    vec![
        ("parallel_generation", demo_parallel_generation()),
        ("constrained_decoding", demo_constrained_decoding()),
        ("speculative_decoding", demo_speculative_decoding()),
        ("function_calling", demo_function_calling()),
        ("multi_agent_ipc", demo_multi_agent_ipc()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_demos_pass() {
        for (name, result) in run_examples() {
            if let Err(e) = result {
                panic!("demo {name} failed: {e}");
            }
        }
    }
}
