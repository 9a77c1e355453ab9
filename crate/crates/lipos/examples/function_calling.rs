//! A tool call in the middle of generation — and what it costs.
//!
//! `io_call` parks the thread for the tool's latency. While it waits, the
//! kernel offloads the caller's exclusively-owned KV pages from device to
//! host memory (freeing device space for other programs) and restores them
//! before the thread wakes, charging a per-page transfer cost each way.
//! The math is exact, so the example asserts the full round-trip duration.
//!
//! ```bash
//! cargo run --example function_calling
//! ```

use lipos::config::SimConfig;
use lipos::kernel::Kernel;
use lipos::kvfs::Sharing;
use lipos::types::{Position, TokenId};

fn main() {
    let cfg = SimConfig::default();
    let kernel = Kernel::new(cfg.kvfs.clone(), cfg.model.clone(), cfg.scheduler.clone());

    let tool_latency = 5_000_000; // 5 virtual ms
    kernel.register_tool("search", tool_latency, |payload| {
        let mut v = payload.to_vec();
        v.reverse(); // stand-in for a real retrieval backend
        v
    });

    let transfer = cfg.scheduler.transfer_ns_per_page;
    let pid = kernel
        .spawn_lip(move |ctx| async move {
            let f = ctx.kv_create("agent.kv", Sharing::PRIVATE)?;
            let plan: Vec<(TokenId, Position)> = (0..5).map(|i| (i + 2, i)).collect();
            ctx.pred(f, plan).await?;
            let before = ctx.kv_entries(f)?;
            println!("context before tool call: {} entries (1 device page)", before.len());

            let t0 = ctx.now();
            let reply = ctx.io_call("search", b"find the docs".to_vec()).await?;
            let waited = ctx.now() - t0;

            println!("tool replied {:?}", String::from_utf8_lossy(&reply));
            println!(
                "waited {waited} ns = {tool_latency} latency + 2 x {transfer}/page x 1 page"
            );
            assert_eq!(waited, tool_latency + 2 * transfer);
            assert_eq!(ctx.kv_entries(f)?, before, "KV changed across the call");

            // Feed the tool result back into generation.
            let continuation = TokenId::from(reply[0]) % 255 + 1;
            let dist = ctx.pred(f, vec![(continuation, 5)]).await?.pop().unwrap();
            println!("continued generation; next-token argmax = {}", dist.argmax());
            ctx.kv_remove(f)?;
            Ok(0)
        })
        .unwrap();

    let report = kernel.run_until_quiescent();
    assert!(report.quiescent && kernel.exit_status(pid) == Some(0));
}
