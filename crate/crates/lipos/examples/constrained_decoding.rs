//! Grammar-constrained sampling with a token automaton.
//!
//! The automaton encodes "emit token 1 and token 2 strictly alternating;
//! stopping (EOS = 0) is only legal after a complete pair". At each step the
//! sampler masks the model's distribution down to the automaton's allowed
//! set, renormalizes, and samples — so the output satisfies the grammar by
//! construction, whatever the model wanted to say.
//!
//! ```bash
//! cargo run --example constrained_decoding
//! ```

use lipos::config::SimConfig;
use lipos::decoding::{constrained_next, SamplerSpec, TokenAutomaton};
use lipos::kernel::Kernel;
use lipos::kvfs::Sharing;

fn main() {
    let mut cfg = SimConfig::default();
    cfg.model.vocab_size = 8;
    let kernel = Kernel::new(cfg.kvfs.clone(), cfg.model.clone(), cfg.scheduler.clone());

    let automaton = TokenAutomaton::new(
        &["want_a", "want_b", "done"],
        "want_a",
        &["done"],
        &[("want_a", 1, "want_b"), ("want_b", 2, "want_a"), ("want_a", 0, "done")],
    )
    .unwrap();
    println!("automaton: {}", automaton.to_json());

    let pid = kernel
        .spawn_lip(move |ctx| async move {
            let f = ctx.kv_create("constrained.kv", Sharing::PRIVATE)?;
            // The prompt token is unconstrained; the grammar governs output.
            let mut dist = ctx.pred(f, vec![(3, 0)]).await?.pop().unwrap();
            let sampler = SamplerSpec::temperature(1.0, 77);
            let mut state = automaton.start();
            let mut pos = 1u32;
            loop {
                let (tok, next) = constrained_next(&dist, state, &automaton, &sampler)
                    .expect("grammar has no dead ends");
                println!(
                    "  state {:7} -> token {tok} -> state {}",
                    automaton.state_name(state),
                    automaton.state_name(next)
                );
                state = next;
                if tok == 0 {
                    assert!(automaton.is_accept(state), "EOS outside an accepting state");
                    break;
                }
                dist = ctx.pred(f, vec![(tok, pos)]).await?.pop().unwrap();
                pos += 1;
            }
            ctx.kv_remove(f)?;
            Ok(0)
        })
        .unwrap();

    let report = kernel.run_until_quiescent();
    assert!(report.quiescent && kernel.exit_status(pid) == Some(0));
    println!("finished in an accepting state — zero grammar violations possible");
}
