//! Speculative decoding with KV rollback, checked against plain decoding.
//!
//! A cheap "draft" pass (here: the same model at a spicier temperature)
//! proposes a few tokens on a throwaway fork; one target `pred` over the
//! whole proposal then scores them all at once. Accepted prefix tokens are
//! kept; at the first disagreement the rejected suffix is dropped by
//! *extracting* the good prefix into a fresh KV file (fingerprints re-fold
//! automatically) and decoding continues from there.
//!
//! Because the model is deterministic, the speculative output must equal
//! greedy decoding token for token — and this example asserts exactly that.
//!
//! ```bash
//! cargo run --example speculative_decoding
//! ```

use lipos::config::SimConfig;
use lipos::decoding::{sample, speculative_verify, SamplerSpec};
use lipos::kernel::{Ctx, Kernel};
use lipos::kvfs::Sharing;
use lipos::model::Dist;
use lipos::types::{Position, TokenId};

const TARGET_LEN: usize = 24;
const LOOKAHEAD: usize = 4;

async fn plain_greedy(ctx: &Ctx, prompt: TokenId) -> Result<Vec<TokenId>, lipos::kernel::SysError> {
    let f = ctx.kv_create("reference.kv", Sharing::PRIVATE)?;
    let mut dist = ctx.pred(f, vec![(prompt, 0)]).await?.pop().unwrap();
    let mut toks = Vec::new();
    let mut pos = 1u32;
    while toks.len() < TARGET_LEN {
        let t = dist.argmax();
        toks.push(t);
        if toks.len() == TARGET_LEN {
            break;
        }
        dist = ctx.pred(f, vec![(t, pos)]).await?.pop().unwrap();
        pos += 1;
    }
    ctx.kv_remove(f)?;
    Ok(toks)
}

fn main() {
    let mut cfg = SimConfig::default();
    cfg.model.vocab_size = 16;
    let kernel = Kernel::new(cfg.kvfs.clone(), cfg.model.clone(), cfg.scheduler.clone());

    let pid = kernel
        .spawn_lip(|ctx| async move {
            let prompt: TokenId = 7;
            let reference = plain_greedy(&ctx, prompt).await?;

            let draft = SamplerSpec::temperature(1.3, 0xD12A);
            let mut sf = ctx.kv_create("speculative_r0.kv", Sharing::PRIVATE)?;
            let mut dist: Dist = ctx.pred(sf, vec![(prompt, 0)]).await?.pop().unwrap();
            let mut out: Vec<TokenId> = Vec::new();
            let mut base_len = 1u64; // entries currently in sf (prompt)
            let mut round = 0u32;
            let mut accepted_total = 0usize;

            while out.len() < TARGET_LEN {
                let k = LOOKAHEAD.min(TARGET_LEN - out.len());
                let pos0 = base_len as Position;

                // Draft k tokens on a fork we immediately throw away.
                let df = ctx.kv_fork(sf)?;
                let mut ddist = dist.clone();
                let mut proposal = Vec::with_capacity(k);
                for j in 0..k {
                    let t = sample(&ddist, &draft).unwrap();
                    proposal.push(t);
                    ddist = ctx.pred(df, vec![(t, pos0 + j as Position)]).await?.pop().unwrap();
                }
                ctx.kv_remove(df)?;

                // Verify the whole proposal with ONE target pred.
                let scored: Vec<(TokenId, Position)> = proposal
                    .iter()
                    .enumerate()
                    .map(|(j, &t)| (t, pos0 + j as Position))
                    .collect();
                let ret = ctx.pred(sf, scored).await?;
                let mut dists = vec![dist.clone()];
                dists.extend(ret[..k - 1].iter().cloned());
                let v = speculative_verify(&proposal, &dists, &SamplerSpec::greedy()).unwrap();

                out.extend(&proposal[..v.accepted]);
                accepted_total += v.accepted;
                match v.correction {
                    Some(c) => {
                        // Roll back: keep prompt + accepted, drop the rest.
                        let keep: Vec<u64> = (0..base_len + v.accepted as u64).collect();
                        round += 1;
                        let nf = ctx.kv_extract(sf, &keep, &format!("speculative_r{round}.kv"))?;
                        ctx.kv_remove(sf)?;
                        sf = nf;
                        out.push(c);
                        base_len += v.accepted as u64;
                        if out.len() < TARGET_LEN {
                            dist = ctx
                                .pred(sf, vec![(c, base_len as Position)])
                                .await?
                                .pop()
                                .unwrap();
                            base_len += 1;
                        }
                    }
                    None => {
                        dist = ret.last().cloned().unwrap();
                        base_len += k as u64;
                    }
                }
                println!(
                    "round: proposed {k}, accepted {}, corrected {}",
                    v.accepted,
                    v.correction.is_some()
                );
            }
            ctx.kv_remove(sf)?;

            assert_eq!(out, reference, "speculative output diverged from plain decoding");
            println!(
                "\n{TARGET_LEN} tokens identical to plain greedy; {accepted_total} draft tokens \
                 accepted, {round} rollbacks"
            );
            Ok(0)
        })
        .unwrap();

    let report = kernel.run_until_quiescent();
    assert!(report.quiescent && kernel.exit_status(pid) == Some(0));
}
