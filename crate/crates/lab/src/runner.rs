//! Parallel replica execution with a thread-count independent merge order.
//!
//! Replicas are split into fixed-size chunks; each chunk is folded in replica
//! order and the chunk results are merged left to right. Neither the chunking
//! nor the merge order depends on the pool size.

use std::ops::Range;

use brwlab_core::rng::{replica_rng, ReplicaRng};
use rayon::prelude::*;

pub const CHUNK: u64 = 256;

/// Run `f` inside a pool of `threads` workers (`None` = rayon's default).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

fn chunks(range: Range<u64>) -> Vec<Range<u64>> {
    let mut out = Vec::new();
    let mut lo = range.start;
    while lo < range.end {
        let hi = (lo + CHUNK).min(range.end);
        out.push(lo..hi);
        lo = hi;
    }
    out
}

/// Fold replicas `range` into an accumulator. `step` receives the replica
/// index and its private stream.
pub fn fold_replicas<A, E, F, M>(master_seed: u64, range: Range<u64>, init: impl Fn() -> A + Sync, step: F, merge: M) -> Result<A, E>
where
    A: Send,
    E: Send,
    F: Fn(&mut A, u64, &mut ReplicaRng) -> Result<(), E> + Sync,
    M: Fn(&mut A, A),
{
    fold_replicas_with(master_seed, range, || (), init, |_, acc, r, rng| step(acc, r, rng), merge)
}

/// As [`fold_replicas`], with per-chunk scratch state built by `scratch` (for
/// caches that cannot be shared across threads).
pub fn fold_replicas_with<S, A, E, F, M>(
    master_seed: u64,
    range: Range<u64>,
    scratch: impl Fn() -> S + Sync,
    init: impl Fn() -> A + Sync,
    step: F,
    merge: M,
) -> Result<A, E>
where
    A: Send,
    E: Send,
    F: Fn(&mut S, &mut A, u64, &mut ReplicaRng) -> Result<(), E> + Sync,
    M: Fn(&mut A, A),
{
    let parts: Vec<Result<A, E>> = chunks(range)
        .into_par_iter()
        .map(|c| {
            let mut state = scratch();
            let mut acc = init();
            for r in c {
                let mut rng = replica_rng(master_seed, r);
                step(&mut state, &mut acc, r, &mut rng)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = init();
    for p in parts {
        merge(&mut total, p?);
    }
    Ok(total)
}

/// Map every replica to a value, returned in replica order.
pub fn map_replicas<T, E, F>(master_seed: u64, range: Range<u64>, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(u64, &mut ReplicaRng) -> Result<T, E> + Sync,
{
    fold_replicas(
        master_seed,
        range,
        Vec::new,
        |acc, r, rng| {
            acc.push(f(r, rng)?);
            Ok(())
        },
        |acc, mut part| acc.append(&mut part),
    )
}
