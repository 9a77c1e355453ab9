//! KV-cache files as files: fork, extract, merge, offload, snapshot.
//!
//! Runs against the store directly from the host (no programs involved) to
//! show the storage layer itself:
//!
//! * fork shares full pages copy-on-write — watch the page counters,
//! * extract pulls an index subsequence into a fresh file, re-folding the
//!   fingerprint chain over the survivors,
//! * merge stitches files back together by position,
//! * offload/restore move a file's exclusively-owned pages between device
//!   and host tiers,
//! * a snapshot directory (`manifest.json` + one `.kvf` per file) round-trips
//!   the whole store.
//!
//! ```bash
//! cargo run --example kv_surgery
//! ```

use lipos::kvfs::{load_snapshot, save_snapshot, Caller, KvStore, KvfsConfig, Sharing, Tier};
use lipos::kernel::{host_pages_on, host_read, host_seed_file};
use lipos::model::ModelConfig;
use lipos::types::{Position, TokenId};

fn main() {
    let model = ModelConfig::default();
    let store = KvStore::new(
        KvfsConfig { page_size: 8, device_capacity_pages: 64, host_capacity_pages: 64 },
        model.model_seed,
    );
    store.set_auto_audit(true); // walk every page after every op
    let host = Caller::host();

    // 20 entries = 2 full pages + a half-full tail.
    let tokens: Vec<(TokenId, Position)> = (0..20u32).map(|i| (i % 9 + 1, i)).collect();
    let base = host_seed_file(&store, "base.kv", Sharing::PRIVATE, &tokens).unwrap();
    let stats = store.stats();
    println!("seeded base.kv: 20 entries, {} device pages used", stats.device_used);

    // Fork: full pages shared, tail deep-copied. Cost = 1 page, not 3.
    let fork = store.fork(host, base).unwrap();
    println!("after fork: {} device pages (tail copy only)", store.stats().device_used);

    // Diverge the fork; the base must not see the change.
    let chain = store.chain_state(host, fork).unwrap();
    let more = lipos::model::build_entries(chain, &[(5, 20), (6, 21)]);
    store.append(host, fork, &more).unwrap();
    assert_eq!(store.length(host, base).unwrap(), 20);
    assert_eq!(store.length(host, fork).unwrap(), 22);
    println!("fork appended 2 entries; base still 20 — isolation holds");

    // Extract the even- and odd-indexed entries into two new files.
    // Positions survive; fingerprint chains re-fold over each survivor set.
    let evens: Vec<u64> = (0..20).step_by(2).collect();
    let odds: Vec<u64> = (1..20).step_by(2).collect();
    let ef = store.extract(host, base, &evens, "evens.kv").unwrap();
    let of = store.extract(host, base, &odds, "odds.kv").unwrap();
    println!(
        "split base into evens (positions {:?}...) and odds (positions {:?}...)",
        &host_read(&store, ef)[..3].iter().map(|e| e.1).collect::<Vec<_>>(),
        &host_read(&store, of)[..3].iter().map(|e| e.1).collect::<Vec<_>>(),
    );

    // Merge interleaves by position — and because the union re-folds to the
    // original sequence, the result is bit-identical to base.
    let merged = store.merge(host, &[ef, of], "merged.kv").unwrap();
    assert_eq!(
        store.read_back(host, merged).unwrap(),
        store.read_back(host, base).unwrap(),
    );
    println!("merge(evens, odds) == base, fingerprints included");

    // Offload the base to host memory and bring it back, bit-identical.
    let before = host_read(&store, base);
    let moved = store.offload(host, base).unwrap();
    println!(
        "offloaded {moved} page(s) — only the tail is exclusively owned; the 2 full \
         pages stay put because the fork still shares them ({} device / {} host)",
        host_pages_on(&store, base, Tier::Device),
        host_pages_on(&store, base, Tier::Host),
    );
    store.restore(host, base).unwrap();
    assert_eq!(host_read(&store, base), before);
    println!("restored; content bit-identical");

    // Snapshot the whole store and load it into a fresh one.
    let dir = std::env::temp_dir().join("lipos_kv_surgery_snapshot");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let n = save_snapshot(&store, &dir).unwrap();
    println!("saved {n} files to {} (manifest.json + .kvf blobs)", dir.display());

    let restored = KvStore::new(store.config(), model.model_seed);
    load_snapshot(&restored, &dir).unwrap();
    for name in store.names() {
        let a = host_read(&store, store.open(host, &name).unwrap());
        let b = host_read(&restored, restored.open(host, &name).unwrap());
        assert_eq!(a, b, "{name} differs after snapshot round-trip");
    }
    println!("snapshot round-trip verified for {:?}", store.names());
    store.audit().unwrap();
}
