//! Batch schedulers: similarity grouping of queries into micro-batches and
//! cache-aware placement of micro-batches onto workers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ivf::{ClusterId, IvfIndex};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroBatch {
    pub id: usize,
    /// Positions into the global batch.
    pub queries: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerState {
    pub worker: usize,
    pub resident: BTreeSet<ClusterId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub batch: usize,
    pub worker: usize,
    pub overlap: usize,
}

fn sq_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (&x, &y)| {
        let d = x as f64 - y as f64;
        s + d * d
    })
}

/// Greedy grouping: the lowest unassigned query seeds a group and pulls in
/// its `m - 1` nearest unassigned neighbors by L2 (ties by lower position).
pub fn group_microbatches<Q: AsRef<[f32]>>(queries: &[Q], m: usize) -> Vec<MicroBatch> {
    let m = m.max(1);
    let n = queries.len();
    let mut assigned = vec![false; n];
    let mut batches = Vec::with_capacity(n.div_ceil(m));
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    for seed in 0..n {
        if assigned[seed] {
            continue;
        }
        assigned[seed] = true;
        let s = queries[seed].as_ref();
        scratch.clear();
        scratch.extend(
            (seed + 1..n)
                .filter(|&j| !assigned[j])
                .map(|j| (sq_l2(s, queries[j].as_ref()), j)),
        );
        let take = (m - 1).min(scratch.len());
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if take > 0 && take < scratch.len() {
            scratch.select_nth_unstable_by(take - 1, cmp);
        }
        scratch[..take].sort_unstable_by(cmp);
        let mut members = vec![seed];
        for &(_, j) in &scratch[..take] {
            assigned[j] = true;
            members.push(j);
        }
        batches.push(MicroBatch { id: batches.len(), queries: members });
    }
    batches
}

/// Consecutive chunks of size `m` in input order.
pub fn chunk_microbatches(n: usize, m: usize) -> Vec<MicroBatch> {
    let m = m.max(1);
    (0..n)
        .step_by(m)
        .enumerate()
        .map(|(id, start)| MicroBatch { id, queries: (start..(start + m).min(n)).collect() })
        .collect()
}

/// Batch `i` goes to worker `i mod W`.
pub fn assign_round_robin(
    n_batches: usize,
    probe_sets: &[BTreeSet<ClusterId>],
    workers: &[WorkerState],
) -> Vec<Assignment> {
    let w = workers.len().max(1);
    (0..n_batches)
        .map(|b| {
            let worker = b % w;
            let overlap = probe_sets
                .get(b)
                .zip(workers.get(worker))
                .map_or(0, |(p, ws)| p.intersection(&ws.resident).count());
            Assignment { batch: b, worker, overlap }
        })
        .collect()
}

/// Greedy cache-aware placement on precomputed per-batch probe unions.
///
/// Repeatedly takes the (batch, worker) pair with the largest overlap; ties
/// prefer the lower batch id, then the less loaded worker, then the lower
/// worker id. Each worker accepts at most `ceil(batches / workers)` batches.
/// Overlaps use the worker snapshots as given and are not updated as batches
/// are placed.
pub fn assign_by_overlap(
    probe_sets: &[BTreeSet<ClusterId>],
    workers: &[WorkerState],
) -> Vec<Assignment> {
    let nb = probe_sets.len();
    let nw = workers.len();
    if nw == 0 || nb == 0 {
        return Vec::new();
    }
    let cap = nb.div_ceil(nw);
    let overlap: Vec<Vec<usize>> = probe_sets
        .iter()
        .map(|p| workers.iter().map(|w| p.intersection(&w.resident).count()).collect())
        .collect();
    let mut load = vec![0usize; nw];
    let mut done = vec![false; nb];
    let mut out = Vec::with_capacity(nb);
    for _ in 0..nb {
        let mut best: Option<(usize, usize)> = None;
        for b in (0..nb).filter(|&b| !done[b]) {
            for w in (0..nw).filter(|&w| load[w] < cap) {
                let better = match best {
                    None => true,
                    Some((bb, bw)) => {
                        let (o, ob) = (overlap[b][w], overlap[bb][bw]);
                        o > ob
                            || (o == ob
                                && (b < bb || (b == bb && (load[w], w) < (load[bw], bw))))
                    }
                };
                if better {
                    best = Some((b, w));
                }
            }
        }
        let (b, w) = best.expect("capacity covers all batches");
        done[b] = true;
        load[w] += 1;
        out.push(Assignment { batch: b, worker: workers[w].worker, overlap: overlap[b][w] });
    }
    out
}

/// Union of the probe sets of every query in `batch`.
pub fn batch_probe_set<Q: AsRef<[f32]>>(
    ix: &IvfIndex,
    batch: &MicroBatch,
    queries: &[Q],
    nprobe: usize,
) -> Result<BTreeSet<ClusterId>> {
    let mut set = BTreeSet::new();
    for &q in &batch.queries {
        set.extend(ix.coarse_probe(queries[q].as_ref(), nprobe)?.cluster_ids);
    }
    Ok(set)
}

pub fn assign_cache_aware<Q: AsRef<[f32]>>(
    batches: &[MicroBatch],
    queries: &[Q],
    workers: &[WorkerState],
    ix: &IvfIndex,
    nprobe: usize,
) -> Result<Vec<Assignment>> {
    let sets = batches
        .iter()
        .map(|b| batch_probe_set(ix, b, queries, nprobe))
        .collect::<Result<Vec<_>>>()?;
    Ok(assign_by_overlap(&sets, workers))
}

/// Splits `total` bytes equally; the remainder goes one byte each to the
/// first queries.
pub fn split_budget(total: u64, n_queries: usize) -> Vec<u64> {
    if n_queries == 0 {
        return Vec::new();
    }
    let n = n_queries as u64;
    let (base, rem) = (total / n, total % n);
    (0..n).map(|i| base + u64::from(i < rem)).collect()
}
