//! Lookahead retrieval over a two-tier store.
//!
//! Clusters predicted from the pre-transformation query are staged into a
//! capacity-limited fast tier. At retrieval time the probed clusters are split
//! into the resident part (fast tier) and the rest (slow tier); both halves are
//! scanned and their candidate scores merged with one global sort, so the result
//! is identical to a monolithic IVF search.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::budget::CostModel;
use crate::error::{Error, Result};
use crate::ivf::{ClusterId, IvfIndex};
use crate::vectorstore::TopK;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Prefetched,
    Cached,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Residency {
    pub origin: Origin,
    pub bytes: u64,
}

/// The fast tier: which clusters are resident and how many bytes they occupy.
#[derive(Debug, Clone, PartialEq)]
pub struct TieredStore {
    capacity_bytes: u64,
    resident: BTreeMap<ClusterId, Residency>,
    used_bytes: u64,
}

impl TieredStore {
    pub fn new(capacity_bytes: u64) -> Self {
        TieredStore { capacity_bytes, resident: BTreeMap::new(), used_bytes: 0 }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity_bytes - self.used_bytes
    }

    pub fn len(&self) -> usize {
        self.resident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    pub fn contains(&self, c: ClusterId) -> bool {
        self.resident.contains_key(&c)
    }

    pub fn get(&self, c: ClusterId) -> Option<Residency> {
        self.resident.get(&c).copied()
    }

    /// Resident clusters in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (ClusterId, Residency)> + '_ {
        self.resident.iter().map(|(&c, &r)| (c, r))
    }

    pub fn resident_ids(&self) -> Vec<ClusterId> {
        self.resident.keys().copied().collect()
    }

    pub fn insert(&mut self, c: ClusterId, bytes: u64, origin: Origin) -> Result<()> {
        if self.resident.contains_key(&c) {
            return Err(Error::invalid(format!("cluster {c} is already resident")));
        }
        if bytes > self.free_bytes() {
            return Err(Error::CapacityExceeded { needed: bytes, available: self.free_bytes() });
        }
        self.resident.insert(c, Residency { origin, bytes });
        self.used_bytes += bytes;
        Ok(())
    }

    pub fn remove(&mut self, c: ClusterId) -> Option<Residency> {
        let r = self.resident.remove(&c)?;
        self.used_bytes -= r.bytes;
        Some(r)
    }

    pub fn clear(&mut self) {
        self.resident.clear();
        self.used_bytes = 0;
    }

    /// Re-tags every prefetched cluster as cached.
    pub fn demote_prefetched(&mut self) {
        for r in self.resident.values_mut() {
            r.origin = Origin::Cached;
        }
    }

    pub fn bytes_with_origin(&self, origin: Origin) -> u64 {
        self.resident.values().filter(|r| r.origin == origin).map(|r| r.bytes).sum()
    }

    /// Sum of resident sizes computed from scratch; must equal `used_bytes`.
    pub fn recomputed_used_bytes(&self) -> u64 {
        self.resident.values().map(|r| r.bytes).sum()
    }
}

/// Whole clusters chosen to fill a byte budget, in predictor-proximity order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefetchPlan {
    pub clusters: Vec<ClusterId>,
    pub cluster_bytes: Vec<u64>,
    pub planned_bytes: u64,
    pub skipped: Vec<ClusterId>,
}

impl PrefetchPlan {
    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = (ClusterId, u64)> + '_ {
        self.clusters.iter().copied().zip(self.cluster_bytes.iter().copied())
    }
}

/// Greedy budget fill: walk `candidates` in order, take each non-resident
/// cluster that fits the remaining budget and skip (but keep scanning past)
/// any that does not. Clusters are never split.
pub fn fill_budget<I, F>(candidates: I, budget_bytes: u64, is_resident: F) -> PrefetchPlan
where
    I: IntoIterator<Item = (ClusterId, u64)>,
    F: Fn(ClusterId) -> bool,
{
    let mut plan = PrefetchPlan::default();
    for (c, bytes) in candidates {
        if is_resident(c) {
            continue;
        }
        if plan.planned_bytes + bytes <= budget_bytes {
            plan.clusters.push(c);
            plan.cluster_bytes.push(bytes);
            plan.planned_bytes += bytes;
        } else {
            plan.skipped.push(c);
        }
    }
    plan
}

/// Plans a first-round prefetch over the full centroid ranking of `q_in`.
pub fn plan_prefetch<F>(
    ix: &IvfIndex,
    q_in: &[f32],
    budget_bytes: u64,
    is_resident: F,
) -> Result<PrefetchPlan>
where
    F: Fn(ClusterId) -> bool,
{
    let ranking = ix.centroid_ranking(q_in)?;
    Ok(fill_budget(
        ranking.into_iter().map(|c| (c, ix.cluster_bytes(c))),
        budget_bytes,
        is_resident,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    #[default]
    SimulatedClock,
    Measured,
}

/// Bandwidth-limited link between the slow and fast tiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferChannel {
    pub bandwidth_bytes_per_s: f64,
    pub mode: ClockMode,
}

/// Rate-limit quantum for measured transfers.
pub const COPY_QUANTUM: usize = 1 << 20;

impl TransferChannel {
    pub fn simulated(bandwidth_bytes_per_s: f64) -> Self {
        TransferChannel { bandwidth_bytes_per_s, mode: ClockMode::SimulatedClock }
    }

    /// `bytes / B`: a single correctly rounded division.
    pub fn transfer_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bandwidth_bytes_per_s
    }

    /// Copies `src` into `dst` in `COPY_QUANTUM` chunks, sleeping so that the
    /// cumulative rate never exceeds the channel bandwidth. Returns wall time.
    pub fn throttled_copy(&self, src: &[u8], dst: &mut Vec<u8>) -> Duration {
        let start = Instant::now();
        let mut copied = 0usize;
        for chunk in src.chunks(COPY_QUANTUM) {
            dst.extend_from_slice(chunk);
            copied += chunk.len();
            let due = Duration::from_secs_f64(copied as f64 / self.bandwidth_bytes_per_s);
            let elapsed = start.elapsed();
            if due > elapsed {
                std::thread::sleep(due - elapsed);
            }
        }
        start.elapsed()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub t_p: f64,
    pub transferred: Vec<ClusterId>,
    pub bytes: u64,
    /// Portion of `t_p` not hidden behind the overlap window.
    pub exposed_s: f64,
}

fn cluster_payload(ix: &IvfIndex, c: ClusterId) -> Vec<u8> {
    let list = ix.list(c).expect("planned cluster exists");
    let mut out = Vec::with_capacity(ix.cluster_bytes(c) as usize);
    for id in &list.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for x in &list.vectors {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Moves every planned cluster into the fast tier. Capacity is checked up
/// front so a failed transfer leaves the store unchanged.
pub fn execute_prefetch(
    store: &mut TieredStore,
    plan: &PrefetchPlan,
    chan: &TransferChannel,
    ix: &IvfIndex,
    overlap_window_s: f64,
) -> Result<TransferReport> {
    if plan.planned_bytes > store.free_bytes() {
        return Err(Error::CapacityExceeded {
            needed: plan.planned_bytes,
            available: store.free_bytes(),
        });
    }
    if let Some(c) = plan.clusters.iter().find(|&&c| store.contains(c)) {
        return Err(Error::invalid(format!("planned cluster {c} is already resident")));
    }
    let t_p = match chan.mode {
        ClockMode::SimulatedClock => chan.transfer_time(plan.planned_bytes),
        ClockMode::Measured => {
            let mut staging = Vec::with_capacity(plan.planned_bytes as usize);
            let mut total = Duration::ZERO;
            for &c in &plan.clusters {
                total += chan.throttled_copy(&cluster_payload(ix, c), &mut staging);
            }
            total.as_secs_f64()
        }
    };
    for (c, bytes) in plan.items() {
        store.insert(c, bytes, Origin::Prefetched)?;
    }
    Ok(TransferReport {
        t_p,
        transferred: plan.clusters.clone(),
        bytes: plan.planned_bytes,
        exposed_s: (t_p - overlap_window_s).max(0.0),
    })
}

/// Later-round prefetch: only clusters of the new predictor's probe set
/// that are not yet resident, under `budget_bytes`.
pub fn plan_incremental(
    store: &TieredStore,
    ix: &IvfIndex,
    q_round: &[f32],
    nprobe: usize,
    budget_bytes: u64,
) -> Result<PrefetchPlan> {
    let probe = ix.coarse_probe(q_round, nprobe)?;
    Ok(fill_budget(
        probe.cluster_ids.into_iter().map(|c| (c, ix.cluster_bytes(c))),
        budget_bytes,
        |c| store.contains(c),
    ))
}

pub fn incremental_prefetch(
    store: &mut TieredStore,
    ix: &IvfIndex,
    q_round: &[f32],
    nprobe: usize,
    budget_bytes: u64,
    chan: &TransferChannel,
    overlap_window_s: f64,
) -> Result<TransferReport> {
    let plan = plan_incremental(store, ix, q_round, nprobe, budget_bytes)?;
    execute_prefetch(store, &plan, chan, ix, overlap_window_s)
}

/// Simulated retrieval-stage time for a given fast/slow split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTiming {
    pub t_g: f64,
    pub t_c: f64,
    pub t_2: f64,
}

impl RetrievalTiming {
    /// `t_c = ceil(slow / P) * t_cc`, `t_g = fast * t_gc`, `t_2 = max(t_c, t_g)`.
    pub fn from_counts(fast_clusters: usize, slow_clusters: usize, cost: &CostModel) -> Self {
        let slots = cost.parallel_slots.max(1) as usize;
        let t_c = slow_clusters.div_ceil(slots) as f64 * cost.t_cc;
        let t_g = fast_clusters as f64 * cost.t_gc;
        RetrievalTiming { t_g, t_c, t_2: t_c.max(t_g) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridResult {
    pub topk: TopK,
    pub probed: Vec<ClusterId>,
    pub fast_clusters: Vec<ClusterId>,
    pub slow_clusters: Vec<ClusterId>,
    pub hit_rate: f64,
}

/// Searches the resident part of the probe on the fast tier and the rest on
/// the slow tier concurrently, then merges all candidate scores globally.
pub fn hybrid_search(
    ix: &IvfIndex,
    store: &TieredStore,
    q_out: &[f32],
    nprobe: usize,
    k: usize,
    cost: &CostModel,
) -> Result<(HybridResult, RetrievalTiming)> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let probe = ix.coarse_probe(q_out, nprobe)?;
    let (fast, slow): (Vec<ClusterId>, Vec<ClusterId>) =
        probe.cluster_ids.iter().partition(|&&c| store.contains(c));
    let scan = |clusters: &[ClusterId]| -> Result<Vec<_>> {
        let mut out = Vec::new();
        for &c in clusters {
            ix.scan_cluster(q_out, c, &mut out)?;
        }
        Ok(out)
    };
    let (fast_scores, slow_scores) = rayon::join(|| scan(&fast), || scan(&slow));
    let mut candidates = fast_scores?;
    candidates.extend(slow_scores?);
    let topk = TopK::from_candidates(k, ix.metric(), candidates);
    let hit_rate = if probe.is_empty() { 0.0 } else { fast.len() as f64 / probe.len() as f64 };
    let timing = RetrievalTiming::from_counts(fast.len(), slow.len(), cost);
    Ok((
        HybridResult {
            topk,
            probed: probe.cluster_ids,
            fast_clusters: fast,
            slow_clusters: slow,
            hit_rate,
        },
        timing,
    ))
}

/// Fraction of the `q_out` probe set that the `q_in` probe set of equal size
/// also selects. Normalized by the actual probe size.
pub fn coverage(ix: &IvfIndex, q_in: &[f32], q_out: &[f32], nprobe: usize) -> Result<f64> {
    let pin = ix.coarse_probe(q_in, nprobe)?.as_set();
    let pout = ix.coarse_probe(q_out, nprobe)?;
    if pout.is_empty() {
        return Ok(0.0);
    }
    let shared = pout.cluster_ids.iter().filter(|c| pin.contains(c)).count();
    Ok(shared as f64 / pout.len() as f64)
}
