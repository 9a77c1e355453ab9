//! Kernel integration tests: thread lifecycle, batching behavior observable
//! through the trace, I/O waits with offload/restore, IPC ordering, advisory
//! locks, and end-of-run reporting.

use lipos::kernel::trace::TraceEvent;
use lipos::kernel::{Kernel, SysError, EXTERNAL_CLIENT};
use lipos::kvfs::{KvError, KvfsConfig, Sharing};
use lipos::model::{oracle_from_scratch, ModelConfig};
use lipos::scheduler::{
    audit_cost_exactness, audit_fifo_completion, audit_io_pairing, audit_thread_transitions,
    audit_wait_bounds, audit_work_conservation, CostModel, SchedConfig,
};
use lipos::types::{Position, Tid, TokenId};

fn kernel() -> Kernel {
    Kernel::new(KvfsConfig::default(), ModelConfig::default(), SchedConfig::default())
}

#[test]
fn spawn_join_returns_exit_value_and_propagates_errors() {
    let k = kernel();
    let pid = k
        .spawn_lip(|ctx| async move {
            let t = ctx.spawn(|_| async move { Ok(7) })?;
            assert_eq!(ctx.join(t).await?, 7);

            let bad = ctx.spawn(|ctx| async move {
                ctx.io_call("no-such-tool", Vec::new()).await?;
                Ok(0)
            })?;
            let err = ctx.join(bad).await.unwrap_err();
            assert!(matches!(err, SysError::NoSuchTool(_)), "got {err:?}");
            Ok(0)
        })
        .unwrap();
    let report = k.run_until_quiescent();
    assert!(report.quiescent);
    assert_eq!(k.exit_status(pid), Some(0));
}

#[test]
fn join_across_processes_is_refused() {
    let k = kernel();
    k.register_tool("sleep", 1_000_000, |_| Vec::new());
    let victim = k
        .spawn_lip(|ctx| async move {
            let (_, raw) = ctx.recv().await?;
            let other = Tid(u64::from_le_bytes(raw.try_into().unwrap()));
            let err = ctx.join(other).await.unwrap_err();
            assert!(matches!(err, SysError::CrossProcessJoin(_)), "got {err:?}");
            Ok(0)
        })
        .unwrap();
    let owner = k
        .spawn_lip(move |ctx| async move {
            let t = ctx.spawn(|ctx| async move {
                ctx.io_call("sleep", Vec::new()).await?;
                Ok(9)
            })?;
            ctx.send(victim, t.0.to_le_bytes().to_vec())?;
            assert_eq!(ctx.join(t).await?, 9);
            Ok(0)
        })
        .unwrap();
    let report = k.run_until_quiescent();
    assert!(report.quiescent);
    assert_eq!(k.exit_status(victim), Some(0));
    assert_eq!(k.exit_status(owner), Some(0));
}

/// Three threads issue single-token preds at the same instant. They all
/// enqueue before the dispatch phase runs, the burst drives the adaptive
/// target above the queue depth, and they leave together in one batch at
/// exactly the W_max deadline.
#[test]
fn coincident_preds_share_one_deadline_batch() {
    let k = kernel();
    let model = ModelConfig::default();
    let pid = k
        .spawn_lip(move |ctx| async move {
            for i in 0..3u32 {
                let cfg = model.clone();
                ctx.spawn(move |ctx| async move {
                    let f = ctx.kv_create(&format!("w{i}.kv"), Sharing::PRIVATE)?;
                    let plan = vec![(i as TokenId + 1, 0 as Position)];
                    let got = ctx.pred(f, plan.clone()).await?;
                    let want = oracle_from_scratch(&plan, &cfg);
                    assert_eq!(got.len(), 1);
                    assert_eq!(got[0].probs(), want[0].probs());
                    Ok(0)
                })?;
            }
            ctx.join_all().await?;
            Ok(0)
        })
        .unwrap();
    let report = k.run_until_quiescent();
    assert!(report.quiescent);
    assert_eq!(k.exit_status(pid), Some(0));

    let trace = k.take_trace();
    let batches: Vec<(u64, u32)> = trace
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::BatchDispatched { size, .. } => Some((r.virtual_time, *size)),
            _ => None,
        })
        .collect();
    let w_max = SchedConfig::default().w_max_ns;
    assert_eq!(batches, vec![(w_max, 3)], "one batch, released by the wait deadline");

    audit_wait_bounds(&trace, w_max).unwrap();
    audit_work_conservation(&trace, w_max).unwrap();
    audit_cost_exactness(&trace, &CostModel::from_config(&SchedConfig::default())).unwrap();
    audit_fifo_completion(&trace).unwrap();
}

/// An I/O wait charges latency plus two transfers per moved page, and moves
/// only exclusively-owned pages: a file whose pages are all shared with a
/// fork stays put.
#[test]
fn io_wait_offloads_only_exclusive_pages() {
    let k = kernel();
    k.register_tool("echo", 3_000_000, |p| p.to_vec());
    let transfer = SchedConfig::default().transfer_ns_per_page;
    let pid = k
        .spawn_lip(move |ctx| async move {
            // 16 entries = exactly one full page; the fork shares it, so
            // neither file owns a page exclusively.
            let shared = ctx.kv_create("shared.kv", Sharing::PRIVATE)?;
            let plan: Vec<_> = (0..16).map(|i| (i as TokenId + 1, i as Position)).collect();
            ctx.pred(shared, plan).await?;
            ctx.kv_fork(shared)?;

            let t0 = ctx.now();
            let out = ctx.io_call("echo", b"ab".to_vec()).await?;
            assert_eq!(out, b"ab");
            assert_eq!(ctx.now() - t0, 3_000_000, "no pages moved, latency only");

            // A private partial page is exclusively owned and does move.
            let own = ctx.kv_create("own.kv", Sharing::PRIVATE)?;
            ctx.pred(own, vec![(5, 0)]).await?;
            let before = ctx.kv_entries(own)?;
            let t0 = ctx.now();
            ctx.io_call("echo", Vec::new()).await?;
            assert_eq!(ctx.now() - t0, 3_000_000 + 2 * transfer);
            assert_eq!(ctx.kv_entries(own)?, before);
            Ok(0)
        })
        .unwrap();
    let report = k.run_until_quiescent();
    assert!(report.quiescent);
    assert_eq!(k.exit_status(pid), Some(0));

    let trace = k.take_trace();
    let offloads: Vec<u64> = trace
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::IoStarted { offloaded_pages, .. } => Some(*offloaded_pages),
            _ => None,
        })
        .collect();
    assert_eq!(offloads, vec![0, 1]);
    audit_io_pairing(&trace).unwrap();
}

/// If another program fills the device while a thread waits on I/O, the
/// wake-up restore fails, the call reports it, and the file survives intact
/// on the host tier.
#[test]
fn restore_failure_leaves_contents_intact_on_host() {
    let cfg = KvfsConfig { page_size: 4, device_capacity_pages: 4, host_capacity_pages: 64 };
    let k = Kernel::new(cfg, ModelConfig::default(), SchedConfig::default());
    k.register_tool("wait", 10_000_000, |_| Vec::new());

    let a = k
        .spawn_lip(|ctx| async move {
            let f = ctx.kv_create("a.kv", Sharing::PRIVATE)?;
            let plan: Vec<_> = (0..8).map(|i| (i as TokenId + 1, i as Position)).collect();
            ctx.pred(f, plan).await?; // 2 device pages
            let before = ctx.kv_entries(f)?;

            let err = ctx.io_call("wait", Vec::new()).await.unwrap_err();
            assert!(matches!(err, SysError::RestoreFailed(_)), "got {err:?}");
            assert_eq!(ctx.kv_entries(f)?, before, "contents must survive on host");
            Ok(0)
        })
        .unwrap();
    let c = k
        .spawn_lip(|ctx| async move {
            ctx.recv().await?; // wait until a.kv has left for the host
            let f = ctx.kv_create("c.kv", Sharing::PRIVATE)?;
            let plan: Vec<_> = (0..12).map(|i| (i as TokenId + 1, i as Position)).collect();
            ctx.pred(f, plan).await?; // 3 of the 4 device pages
            Ok(0)
        })
        .unwrap();
    k.post_message(2_000_000, c, b"go".to_vec());

    let report = k.run_until_quiescent();
    assert!(report.quiescent);
    assert_eq!(k.exit_status(a), Some(0));
    assert_eq!(k.exit_status(c), Some(0));

    let stats = k.store().stats();
    assert_eq!(stats.host_used, 2, "a.kv is stranded on the host");
    assert_eq!(stats.device_used, 3, "c.kv holds the device");
    assert!(k.with_trace(|t| t
        .iter()
        .any(|r| matches!(r.event, TraceEvent::FileRestored { ok: false, .. }))));
    k.store().audit().unwrap();
}

#[test]
fn mailboxes_are_fifo_and_external_posts_arrive_on_time() {
    let k = kernel();
    let consumer = k
        .spawn_lip(|ctx| async move {
            for want in [b"m1".as_slice(), b"m2", b"m3"] {
                let (_, got) = ctx.recv().await?;
                assert_eq!(got, want);
            }
            let (from, got) = ctx.recv().await?;
            assert_eq!(from, EXTERNAL_CLIENT);
            assert_eq!(got, b"ext");
            assert_eq!(ctx.now(), 5_000_000, "delivery at the posted instant");
            Ok(0)
        })
        .unwrap();
    let producer = k
        .spawn_lip(move |ctx| async move {
            for msg in [b"m1".as_slice(), b"m2", b"m3"] {
                ctx.send(consumer, msg.to_vec())?;
            }
            let err = ctx.send(lipos::types::Pid(4242), Vec::new()).unwrap_err();
            assert!(matches!(err, SysError::NoSuchProcess(_)));
            Ok(0)
        })
        .unwrap();
    k.post_message(5_000_000, consumer, b"ext".to_vec());

    let report = k.run_until_quiescent();
    assert!(report.quiescent);
    assert_eq!(k.exit_status(consumer), Some(0));
    assert_eq!(k.exit_status(producer), Some(0));
}

/// Locks are advisory, fail-fast, and die with their holder.
#[test]
fn locks_release_on_thread_exit_and_block_writers() {
    let k = kernel();
    let pid = k
        .spawn_lip(|ctx| async move {
            let f = ctx.kv_create("shared.kv", Sharing::PUBLIC)?;
            ctx.pred(f, vec![(3, 0)]).await?;

            // A child takes the lock and exits without unlocking.
            let t = ctx.spawn(move |ctx| async move {
                ctx.kv_lock(f)?;
                Ok(0)
            })?;
            ctx.join(t).await?;

            // The lock died with the child; now hold it ourselves.
            ctx.kv_lock(f)?;
            let t = ctx.spawn(move |ctx| async move {
                assert!(matches!(ctx.kv_lock(f), Err(SysError::Kv(KvError::Locked))));
                assert!(matches!(ctx.kv_unlock(f), Err(SysError::Kv(KvError::NotLockHolder))));
                let err = ctx.pred(f, vec![(4, 1)]).await.unwrap_err();
                assert!(matches!(err, SysError::Kv(KvError::Locked)));
                Ok(0)
            })?;
            ctx.join(t).await?;
            ctx.kv_unlock(f)?;
            Ok(0)
        })
        .unwrap();
    let report = k.run_until_quiescent();
    assert!(report.quiescent);
    assert_eq!(k.exit_status(pid), Some(0));
}

#[test]
fn shutdown_refuses_new_programs() {
    let k = kernel();
    k.shutdown();
    let err = k.spawn_lip(|_| async move { Ok(0) }).unwrap_err();
    assert!(matches!(err, SysError::KernelShuttingDown));
}

#[test]
fn unanswered_recv_is_reported_as_stuck() {
    let k = kernel();
    let pid = k
        .spawn_lip(|ctx| async move {
            ctx.recv().await?;
            Ok(0)
        })
        .unwrap();
    let report = k.run_until_quiescent();
    assert!(!report.quiescent);
    assert_eq!(report.stuck_threads.len(), 1);
    assert_eq!(report.finished_processes, 0);
    assert_eq!(k.exit_status(pid), None);
}

/// A run mixing preds, spawns, I/O, and IPC keeps every thread's state
/// machine legal and every I/O start paired with exactly one completion.
#[test]
fn transition_and_io_audits_hold_on_a_mixed_run() {
    let k = kernel();
    k.set_trace_transitions(true);
    k.register_tool("fetch", 2_000_000, |p| p.iter().rev().copied().collect());
    let consumer = k
        .spawn_lip(|ctx| async move {
            let (_, msg) = ctx.recv().await?;
            let f = ctx.kv_create("reply.kv", Sharing::PRIVATE)?;
            let plan: Vec<_> =
                msg.iter().take(4).enumerate().map(|(i, &b)| (b as TokenId, i as Position)).collect();
            ctx.pred(f, plan).await?;
            Ok(0)
        })
        .unwrap();
    let pid = k
        .spawn_lip(move |ctx| async move {
            let f = ctx.kv_create("main.kv", Sharing::PRIVATE)?;
            ctx.pred(f, vec![(1, 0), (2, 1)]).await?;
            let t = ctx.spawn(move |ctx| async move {
                let g = ctx.kv_fork(f)?;
                ctx.pred(g, vec![(3, 2)]).await?;
                Ok(0)
            })?;
            let data = ctx.io_call("fetch", b"abcd".to_vec()).await?;
            ctx.join(t).await?;
            ctx.send(consumer, data)?;
            Ok(0)
        })
        .unwrap();
    let report = k.run_until_quiescent();
    assert!(report.quiescent);
    assert_eq!(k.exit_status(pid), Some(0));
    assert_eq!(k.exit_status(consumer), Some(0));

    let trace = k.take_trace();
    audit_thread_transitions(&trace).unwrap();
    audit_io_pairing(&trace).unwrap();
}
