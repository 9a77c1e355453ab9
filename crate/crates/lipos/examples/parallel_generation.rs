//! Four generation branches off one shared prompt.
//!
//! Each branch thread forks the prompt's KV file, seeds a distinct first
//! token, and samples until EOS. Forking shares full pages copy-on-write,
//! so the branches pay nothing for the common prefix — and the prompt file
//! itself is provably untouched at the end.
//!
//! ```bash
//! cargo run --example parallel_generation
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use lipos::config::SimConfig;
use lipos::decoding::{sample, SamplerSpec};
use lipos::kernel::{host_read, host_seed_file, Kernel};
use lipos::kvfs::Sharing;
use lipos::types::{Position, TokenId};

fn main() {
    let mut cfg = SimConfig::default();
    cfg.model.vocab_size = 16; // small vocab so EOS arrives quickly
    let kernel = Kernel::new(cfg.kvfs.clone(), cfg.model.clone(), cfg.scheduler.clone());

    // Seed a 24-token prompt from the host, readable by every program.
    let prompt: Vec<(TokenId, Position)> = (0..24u32).map(|i| (i % 15 + 1, i)).collect();
    let prompt_file =
        host_seed_file(kernel.store(), "prompt.kv", Sharing::READ_SHARED, &prompt).unwrap();

    let eos = cfg.model.eos_token;
    let outputs: Rc<RefCell<Vec<(u32, Vec<TokenId>)>>> = Rc::new(RefCell::new(Vec::new()));

    let pid = {
        let outputs = outputs.clone();
        kernel
            .spawn_lip(move |ctx| async move {
                for branch in 0..4u32 {
                    let outputs = outputs.clone();
                    ctx.spawn(move |w| async move {
                        let f = w.kv_fork(prompt_file)?;
                        // Distinct seed token per branch, then sample freely.
                        let mut dist = w
                            .pred(f, vec![(branch + 1, 24)])
                            .await?
                            .pop()
                            .expect("one distribution per scored token");
                        let sampler = SamplerSpec::temperature(1.0, 1000 + u64::from(branch));
                        let mut toks = vec![branch + 1];
                        let mut pos = 25u32;
                        loop {
                            let t = sample(&dist, &sampler).unwrap();
                            toks.push(t);
                            if t == eos {
                                break;
                            }
                            dist = w.pred(f, vec![(t, pos)]).await?.pop().unwrap();
                            pos += 1;
                        }
                        w.kv_remove(f)?;
                        outputs.borrow_mut().push((branch, toks));
                        Ok(0)
                    })?;
                }
                ctx.join_all().await?;
                Ok(0)
            })
            .unwrap()
    };

    let report = kernel.run_until_quiescent();
    assert!(report.quiescent, "run left threads stuck");
    assert_eq!(kernel.exit_status(pid), Some(0));

    let mut outs = outputs.borrow_mut();
    outs.sort_by_key(|(b, _)| *b);
    for (branch, toks) in outs.iter() {
        println!("branch {branch}: {} tokens {toks:?}", toks.len());
    }
    assert_eq!(host_read(kernel.store(), prompt_file), prompt);
    println!(
        "prompt intact after all forks; virtual time {:.3} ms",
        kernel.now() as f64 / 1e6
    );
}
