//! Trace-driven simulator: replays recorded pipelines through lookahead
//! prefetching on one or more workers and records a simulated timeline.
//!
//! A micro-batch advances in lockstep, one stage index per step. A step costs
//! `max(llm, t_p) + t_2`: the slowest generation in the step, any transfer
//! not hidden behind it, and the batched retrieval.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::CostModel;
use crate::cache::{HotnessParams, HotnessTable};
use crate::error::{Error, Result};
use crate::ivf::{ClusterId, IvfIndex};
use crate::sched::{
    assign_cache_aware, assign_round_robin, chunk_microbatches, group_microbatches, split_budget,
    Assignment, MicroBatch, WorkerState,
};
use crate::tiered::{
    coverage, execute_prefetch, fill_budget, hybrid_search, ClockMode, RetrievalTiming,
    TieredStore, TransferChannel,
};
use crate::trace::{Pipeline, QueryTrace, StageKind, TraceSet};
use crate::vectorstore::TopK;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_probe: usize,
    pub top_k: usize,
    pub prefetch_budget_bytes: u64,
    pub capacity_bytes: u64,
    pub cache_fraction: f64,
    pub bandwidth_bytes_per_s: f64,
    pub t_cc: f64,
    pub t_gc: f64,
    pub parallel_slots: u32,
    pub workers: usize,
    pub micro_batch: usize,
    /// Leading traces served only to warm the caches; never measured.
    pub warmup_traces: usize,
    pub mode: ClockMode,
    pub prefetch_sched_on: bool,
    pub cache_sched_on: bool,
    pub cache_on: bool,
    pub lookahead_on: bool,
    pub h_init: f64,
    pub h_inc: f64,
    pub decay: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let h = HotnessParams::default();
        RunConfig {
            n_probe: 16,
            top_k: 3,
            prefetch_budget_bytes: 64 << 10,
            capacity_bytes: 256 << 10,
            cache_fraction: h.cache_fraction,
            bandwidth_bytes_per_s: 1e6,
            t_cc: 1e-3,
            t_gc: 1e-4,
            parallel_slots: 1,
            workers: 1,
            micro_batch: 1,
            warmup_traces: 0,
            mode: ClockMode::SimulatedClock,
            prefetch_sched_on: false,
            cache_sched_on: false,
            cache_on: false,
            lookahead_on: true,
            h_init: h.h_init,
            h_inc: h.h_inc,
            decay: h.decay,
        }
    }
}

impl RunConfig {
    pub fn cost(&self) -> CostModel {
        CostModel::new(self.bandwidth_bytes_per_s, self.t_cc, self.t_gc, self.parallel_slots)
    }

    pub fn hotness(&self) -> HotnessParams {
        HotnessParams {
            h_init: self.h_init,
            h_inc: self.h_inc,
            decay: self.decay,
            cache_fraction: self.cache_fraction,
        }
    }

    pub fn channel(&self) -> TransferChannel {
        TransferChannel { bandwidth_bytes_per_s: self.bandwidth_bytes_per_s, mode: self.mode }
    }

    /// Bytes a prefetch may use: capacity minus the reserved cache share.
    pub fn prefetch_room(&self) -> u64 {
        if self.cache_on {
            (self.capacity_bytes as f64 * (1.0 - self.cache_fraction)).floor() as u64
        } else {
            self.capacity_bytes
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_probe == 0 || self.top_k == 0 {
            return fail("n_probe and top_k must be at least 1");
        }
        if self.workers == 0 || self.micro_batch == 0 {
            return fail("workers and micro_batch must be at least 1");
        }
        self.cost().validate()?;
        if !(0.0..1.0).contains(&self.cache_fraction) {
            return fail("cache_fraction must be in [0, 1)");
        }
        if !(self.decay.is_finite() && self.decay > 1.0) {
            return fail("decay must be greater than 1");
        }
        if !(self.h_init.is_finite() && self.h_inc.is_finite() && self.h_init >= 0.0 && self.h_inc >= 0.0) {
            return fail("h_init and h_inc must be finite and non-negative");
        }
        if self.prefetch_budget_bytes > self.prefetch_room() {
            return Err(Error::Config(format!(
                "prefetch_budget_bytes {} exceeds the {} bytes left after the cache reserve",
                self.prefetch_budget_bytes,
                self.prefetch_room()
            )));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}

/// One step of a trace's timeline. Time fields are the step's values and are
/// shared by every trace in the micro-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub stage: usize,
    pub kind: StageKind,
    pub llm_s: f64,
    pub transfer_s: f64,
    /// Part of `transfer_s` not hidden behind `llm_s`.
    pub exposed_transfer_s: f64,
    pub retrieve_s: f64,
    pub total_s: f64,
    /// Bytes this trace's own plan contributed to the step's transfer.
    pub transfer_bytes: u64,
    /// One entry per retrieval query of this stage.
    pub hit_rates: Vec<f64>,
    pub coverages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trace_id: u64,
    pub pipeline: Pipeline,
    pub worker: usize,
    pub batch: usize,
    pub segments: Vec<Segment>,
    pub total_s: f64,
    pub llm_s: f64,
    pub exposed_transfer_s: f64,
    pub retrieve_s: f64,
    pub transfer_bytes: u64,
    pub retrievals: usize,
    /// Mean over this trace's retrievals (0 when there are none).
    pub hit_rate: f64,
    pub coverage: f64,
}

impl TraceRecord {
    fn from_segments(trace: &QueryTrace, segments: Vec<Segment>) -> Self {
        let sum = |f: fn(&Segment) -> f64| segments.iter().map(f).sum::<f64>();
        let hits: Vec<f64> = segments.iter().flat_map(|s| s.hit_rates.iter().copied()).collect();
        let covs: Vec<f64> = segments.iter().flat_map(|s| s.coverages.iter().copied()).collect();
        TraceRecord {
            trace_id: trace.trace_id,
            pipeline: trace.pipeline,
            worker: 0,
            batch: 0,
            total_s: sum(|s| s.total_s),
            llm_s: sum(|s| s.llm_s),
            exposed_transfer_s: sum(|s| s.exposed_transfer_s),
            retrieve_s: sum(|s| s.retrieve_s),
            transfer_bytes: segments.iter().map(|s| s.transfer_bytes).sum(),
            retrievals: hits.len(),
            hit_rate: mean(&hits),
            coverage: mean(&covs),
            segments,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub worker: usize,
    pub overlap: usize,
    pub trace_ids: Vec<u64>,
    pub start_s: f64,
    pub time_s: f64,
    pub transfer_bytes: u64,
    pub evicted: Vec<ClusterId>,
    pub resident_after: usize,
    pub exactness_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_traces: usize,
    pub n_retrievals: usize,
    pub makespan_s: f64,
    pub throughput_qps: f64,
    pub mean_latency_s: f64,
    pub mean_llm_s: f64,
    pub mean_exposed_transfer_s: f64,
    pub mean_retrieve_s: f64,
    /// Mean over all retrievals.
    pub mean_hit_rate: f64,
    pub mean_coverage: f64,
    pub transfer_bytes: u64,
    pub exactness_violations: u64,
    pub worker_clocks: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl Aggregates {
    pub fn from_rows(traces: &[TraceRecord], batches: &[BatchRecord], workers: usize) -> Self {
        let mut clocks = vec![0.0f64; workers];
        let mut ordered: Vec<&BatchRecord> = batches.iter().collect();
        ordered.sort_by_key(|b| b.batch);
        for b in ordered {
            if let Some(c) = clocks.get_mut(b.worker) {
                *c += b.time_s;
            }
        }
        let makespan_s = clocks.iter().copied().fold(0.0, f64::max);
        let per = |f: fn(&TraceRecord) -> f64| mean(&traces.iter().map(f).collect::<Vec<_>>());
        let hits: Vec<f64> = traces
            .iter()
            .flat_map(|t| t.segments.iter().flat_map(|s| s.hit_rates.iter().copied()))
            .collect();
        let covs: Vec<f64> = traces
            .iter()
            .flat_map(|t| t.segments.iter().flat_map(|s| s.coverages.iter().copied()))
            .collect();
        Aggregates {
            n_traces: traces.len(),
            n_retrievals: hits.len(),
            makespan_s,
            throughput_qps: if makespan_s > 0.0 { traces.len() as f64 / makespan_s } else { 0.0 },
            mean_latency_s: per(|t| t.total_s),
            mean_llm_s: per(|t| t.llm_s),
            mean_exposed_transfer_s: per(|t| t.exposed_transfer_s),
            mean_retrieve_s: per(|t| t.retrieve_s),
            mean_hit_rate: mean(&hits),
            mean_coverage: mean(&covs),
            transfer_bytes: batches.iter().map(|b| b.transfer_bytes).sum(),
            exactness_violations: batches.iter().map(|b| b.exactness_violations).sum(),
            worker_clocks: clocks,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub label: String,
    pub config: RunConfig,
    pub traces: Vec<TraceRecord>,
    pub batches: Vec<BatchRecord>,
    pub aggregates: Aggregates,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Config { label: String, config: RunConfig },
    Trace { trace: TraceRecord },
    Batch { batch: BatchRecord },
    Summary { summary: Aggregates },
}

impl RunRecord {
    /// Pipeline shared by every trace, if any.
    pub fn pipeline(&self) -> Option<Pipeline> {
        let first = self.traces.first()?.pipeline;
        self.traces.iter().all(|t| t.pipeline == first).then_some(first)
    }

    /// Returns a description of every violated invariant.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for t in &self.traces {
            let sum: f64 = t.segments.iter().map(|s| s.total_s).sum();
            if sum != t.total_s {
                bad.push(format!("trace {}: total {} != segment sum {sum}", t.trace_id, t.total_s));
            }
            for s in &t.segments {
                let parts = [s.llm_s, s.transfer_s, s.exposed_transfer_s, s.retrieve_s, s.total_s];
                if parts.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    bad.push(format!("trace {} stage {}: negative or non-finite segment", t.trace_id, s.stage));
                }
            }
        }
        let recomputed = Aggregates::from_rows(&self.traces, &self.batches, self.config.workers);
        if recomputed != self.aggregates {
            bad.push("aggregates do not match the per-trace and per-batch rows".into());
        }
        let mut clocks = vec![0.0f64; self.config.workers];
        let mut ordered: Vec<&BatchRecord> = self.batches.iter().collect();
        ordered.sort_by_key(|b| b.batch);
        for b in ordered {
            if let Some(c) = clocks.get_mut(b.worker) {
                if *c != b.start_s {
                    bad.push(format!("batch {} starts at {} but worker clock is {c}", b.batch, b.start_s));
                }
                *c += b.time_s;
            } else {
                bad.push(format!("batch {} on unknown worker {}", b.batch, b.worker));
            }
        }
        if self.aggregates.exactness_violations > 0 {
            bad.push(format!(
                "{} retrievals differ from the single-tier index search",
                self.aggregates.exactness_violations
            ));
        }
        bad
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut emit = |line: &Line| -> Result<()> {
            serde_json::to_writer(&mut w, line)?;
            w.write_all(b"\n")?;
            Ok(())
        };
        emit(&Line::Config { label: self.label.clone(), config: self.config.clone() })?;
        for t in &self.traces {
            emit(&Line::Trace { trace: t.clone() })?;
        }
        for b in &self.batches {
            emit(&Line::Batch { batch: b.clone() })?;
        }
        emit(&Line::Summary { summary: self.aggregates.clone() })?;
        w.flush()?;
        Ok(())
    }

    /// Reads every record in a stream written by `write_jsonl`.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<RunRecord>> {
        let mut out = Vec::new();
        let mut cur: Option<RunRecord> = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Trace { line: i + 1, msg };
            let parsed: Line = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            match parsed {
                Line::Config { label, config } => {
                    if cur.is_some() {
                        return Err(err("config line before the previous summary".into()));
                    }
                    cur = Some(RunRecord {
                        label,
                        config,
                        traces: Vec::new(),
                        batches: Vec::new(),
                        aggregates: Aggregates::from_rows(&[], &[], 0),
                    });
                }
                Line::Trace { trace } => {
                    cur.as_mut().ok_or_else(|| err("trace line outside a record".into()))?.traces.push(trace)
                }
                Line::Batch { batch } => {
                    cur.as_mut().ok_or_else(|| err("batch line outside a record".into()))?.batches.push(batch)
                }
                Line::Summary { summary } => {
                    let mut rec = cur.take().ok_or_else(|| err("summary line outside a record".into()))?;
                    rec.aggregates = summary;
                    out.push(rec);
                }
            }
        }
        if cur.is_some() {
            return Err(Error::Trace { line: 0, msg: "record without a summary line".into() });
        }
        Ok(out)
    }
}

/// Result of serving one micro-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub traces: Vec<TraceRecord>,
    pub time_s: f64,
    pub transfer_bytes: u64,
    /// Every cluster probed by a retrieval in the batch.
    pub used: BTreeSet<ClusterId>,
    pub exactness_violations: u64,
}

fn same_topk(a: &TopK, b: &TopK) -> bool {
    a.entries.len() == b.entries.len()
        && a.entries
            .iter()
            .zip(&b.entries)
            .all(|(x, y)| x.id == y.id && x.score.to_bits() == y.score.to_bits())
}

/// Replays `traces` as one lockstep micro-batch against `store`.
pub fn serve_microbatch(
    ix: &IvfIndex,
    set: &TraceSet,
    traces: &[&QueryTrace],
    store: &mut TieredStore,
    mut hotness: Option<&mut HotnessTable>,
    cfg: &RunConfig,
) -> Result<BatchOutcome> {
    if set.embeddings.dim() != ix.dim() {
        return Err(Error::DimensionMismatch { expected: ix.dim(), got: set.embeddings.dim() });
    }
    let cost = cfg.cost();
    let chan = cfg.channel();
    let n_steps = traces.iter().map(|t| t.stages.len()).max().unwrap_or(0);
    let mut segments: Vec<Vec<Segment>> = vec![Vec::new(); traces.len()];
    let mut last_query: Vec<Option<u64>> = vec![None; traces.len()];
    let mut used = BTreeSet::new();
    let mut time_s = 0.0;
    let mut transfer_bytes = 0;
    let mut violations = 0;

    for step in 0..n_steps {
        let active: Vec<usize> = (0..traces.len()).filter(|&t| step < traces[t].stages.len()).collect();
        let llm_s = active
            .iter()
            .map(|&t| &traces[t].stages[step])
            .filter(|s| s.kind != StageKind::Retrieve)
            .map(|s| s.duration_s)
            .fold(0.0, f64::max);

        // Predict and prefetch for every trace whose next stage retrieves.
        let mut own_bytes = vec![0u64; traces.len()];
        let mut transfer_s = 0.0;
        if cfg.lookahead_on {
            let prefetchers: Vec<usize> = active
                .iter()
                .copied()
                .filter(|&t| {
                    let st = &traces[t].stages;
                    st[step].kind == StageKind::Generate
                        && st.get(step + 1).is_some_and(|n| n.kind == StageKind::Retrieve)
                })
                .collect();
            if !prefetchers.is_empty() {
                let budgets = split_budget(cfg.prefetch_budget_bytes, prefetchers.len());
                let mut union: Vec<(ClusterId, u64)> = Vec::new();
                let mut owner: Vec<usize> = Vec::new();
                let mut planned: HashSet<ClusterId> = HashSet::new();
                for (&t, &b) in prefetchers.iter().zip(&budgets) {
                    let q = set.embedding(last_query[t].unwrap_or(traces[t].input_ref));
                    let candidates = match last_query[t] {
                        None => ix.centroid_ranking(q)?,
                        Some(_) => ix.coarse_probe(q, cfg.n_probe)?.cluster_ids,
                    };
                    let plan = fill_budget(
                        candidates.into_iter().map(|c| (c, ix.cluster_bytes(c))),
                        b,
                        |c| store.contains(c) || planned.contains(&c),
                    );
                    for (c, bytes) in plan.items() {
                        planned.insert(c);
                        union.push((c, bytes));
                        owner.push(t);
                    }
                }
                let clamped = fill_budget(union.iter().copied(), store.free_bytes(), |_| false);
                let kept: HashSet<ClusterId> = clamped.clusters.iter().copied().collect();
                for (i, &(c, bytes)) in union.iter().enumerate() {
                    if kept.contains(&c) {
                        own_bytes[owner[i]] += bytes;
                    }
                }
                let report = execute_prefetch(store, &clamped, &chan, ix, llm_s)?;
                if let Some(h) = hotness.as_deref_mut() {
                    for &c in &report.transferred {
                        h.on_fetch(c);
                    }
                }
                transfer_s = report.t_p;
                transfer_bytes += report.bytes;
            }
        }
        let exposed = (transfer_s - llm_s).max(0.0);

        // Batched retrieval.
        let mut hits: Vec<Vec<f64>> = vec![Vec::new(); traces.len()];
        let mut covs: Vec<Vec<f64>> = vec![Vec::new(); traces.len()];
        let (mut fast, mut slow) = (0usize, 0usize);
        let mut wall = 0.0;
        for &t in &active {
            let st = &traces[t].stages[step];
            if st.kind != StageKind::Retrieve {
                continue;
            }
            let predictor = set.embedding(last_query[t].unwrap_or(traces[t].input_ref));
            for r in st.refs() {
                let q = set.embedding(r);
                let expected = ix.search(q, cfg.n_probe, cfg.top_k)?;
                let start = Instant::now();
                let (topk, probed, hit) = if cfg.lookahead_on {
                    let (res, _) = hybrid_search(ix, store, q, cfg.n_probe, cfg.top_k, &cost)?;
                    fast += res.fast_clusters.len();
                    slow += res.slow_clusters.len();
                    (res.topk, res.probed, res.hit_rate)
                } else {
                    let probe = ix.coarse_probe(q, cfg.n_probe)?;
                    slow += probe.len();
                    (ix.search_clusters(q, &probe.cluster_ids, cfg.top_k)?, probe.cluster_ids, 0.0)
                };
                wall += start.elapsed().as_secs_f64();
                if !same_topk(&topk, &expected) {
                    violations += 1;
                }
                used.extend(probed);
                hits[t].push(hit);
                covs[t].push(coverage(ix, predictor, q, cfg.n_probe)?);
            }
            last_query[t] = st.refs().last().copied();
        }
        let retrieve_s = match cfg.mode {
            ClockMode::SimulatedClock => RetrievalTiming::from_counts(fast, slow, &cost).t_2,
            ClockMode::Measured => wall,
        };
        let total_s = llm_s + exposed + retrieve_s;
        time_s += total_s;
        for &t in &active {
            segments[t].push(Segment {
                stage: step,
                kind: traces[t].stages[step].kind,
                llm_s,
                transfer_s,
                exposed_transfer_s: exposed,
                retrieve_s,
                total_s,
                transfer_bytes: own_bytes[t],
                hit_rates: std::mem::take(&mut hits[t]),
                coverages: std::mem::take(&mut covs[t]),
            });
        }
    }

    let records = traces
        .iter()
        .zip(segments)
        .map(|(t, s)| TraceRecord::from_segments(t, s))
        .collect();
    Ok(BatchOutcome {
        traces: records,
        time_s,
        transfer_bytes,
        used,
        exactness_violations: violations,
    })
}

/// Serves one trace on its own against `store`.
pub fn run_single(
    trace: &QueryTrace,
    set: &TraceSet,
    ix: &IvfIndex,
    store: &mut TieredStore,
    cfg: &RunConfig,
) -> Result<TraceRecord> {
    let out = serve_microbatch(ix, set, &[trace], store, None, cfg)?;
    Ok(out.traces.into_iter().next().expect("one trace in, one record out"))
}

struct Worker {
    id: usize,
    store: TieredStore,
    hotness: HotnessTable,
    clock: f64,
}

struct Phase {
    traces: Vec<TraceRecord>,
    batches: Vec<BatchRecord>,
}

fn serve_phase(
    ix: &IvfIndex,
    set: &TraceSet,
    members: &[usize],
    workers: &mut [Worker],
    cfg: &RunConfig,
) -> Result<Phase> {
    let inputs: Vec<&[f32]> = members.iter().map(|&i| set.input(&set.traces[i])).collect();
    let batches: Vec<MicroBatch> = if cfg.prefetch_sched_on {
        group_microbatches(&inputs, cfg.micro_batch)
    } else {
        chunk_microbatches(members.len(), cfg.micro_batch)
    };
    let snapshot: Vec<WorkerState> = workers
        .iter()
        .map(|w| WorkerState { worker: w.id, resident: w.store.resident_ids().into_iter().collect() })
        .collect();
    let assignment: Vec<Assignment> = if cfg.cache_sched_on {
        assign_cache_aware(&batches, &inputs, &snapshot, ix, cfg.n_probe)?
    } else {
        let sets: Vec<BTreeSet<ClusterId>> = Vec::new();
        assign_round_robin(batches.len(), &sets, &snapshot)
    };
    for a in &assignment {
        log::debug!("batch {} -> worker {} (overlap {})", a.batch, a.worker, a.overlap);
    }

    let results: Vec<Result<Phase>> = workers
        .par_iter_mut()
        .map(|w| {
            let mut mine: Vec<&Assignment> = assignment.iter().filter(|a| a.worker == w.id).collect();
            mine.sort_by_key(|a| a.batch);
            let mut phase = Phase { traces: Vec::new(), batches: Vec::new() };
            for a in mine {
                let batch = &batches[a.batch];
                let traces: Vec<&QueryTrace> =
                    batch.queries.iter().map(|&q| &set.traces[members[q]]).collect();
                let hot = cfg.cache_on.then_some(&mut w.hotness);
                let out = serve_microbatch(ix, set, &traces, &mut w.store, hot, cfg)?;
                let evicted = if cfg.cache_on {
                    w.hotness.end_of_round(&out.used);
                    w.hotness.evict_to_fraction(&mut w.store)
                } else {
                    let gone = w.store.resident_ids();
                    w.store.clear();
                    gone
                };
                phase.batches.push(BatchRecord {
                    batch: a.batch,
                    worker: w.id,
                    overlap: a.overlap,
                    trace_ids: traces.iter().map(|t| t.trace_id).collect(),
                    start_s: w.clock,
                    time_s: out.time_s,
                    transfer_bytes: out.transfer_bytes,
                    evicted,
                    resident_after: w.store.len(),
                    exactness_violations: out.exactness_violations,
                });
                w.clock += out.time_s;
                phase.traces.extend(out.traces.into_iter().map(|mut r| {
                    r.worker = w.id;
                    r.batch = a.batch;
                    r
                }));
            }
            Ok(phase)
        })
        .collect();

    let mut all = Phase { traces: Vec::new(), batches: Vec::new() };
    for r in results {
        let p = r?;
        all.traces.extend(p.traces);
        all.batches.extend(p.batches);
    }
    all.batches.sort_by_key(|b| b.batch);
    let order: std::collections::HashMap<u64, usize> =
        members.iter().enumerate().map(|(pos, &i)| (set.traces[i].trace_id, pos)).collect();
    all.traces.sort_by_key(|t| order.get(&t.trace_id).copied().unwrap_or(usize::MAX));
    Ok(all)
}

/// Groups, assigns and serves every trace of `set` on `cfg.workers` workers.
/// With the cache on, the first `warmup_traces` traces warm the caches and
/// are left out of the record.
pub fn run_batch(set: &TraceSet, ix: &IvfIndex, cfg: &RunConfig, label: &str) -> Result<RunRecord> {
    cfg.validate()?;
    let n = set.traces.len();
    let warm = cfg.warmup_traces.min(n);
    if warm == n {
        return Err(Error::invalid("no traces left to measure after warm-up"));
    }
    let mut workers: Vec<Worker> = (0..cfg.workers)
        .map(|id| Worker {
            id,
            store: TieredStore::new(cfg.capacity_bytes),
            hotness: HotnessTable::new(cfg.hotness()),
            clock: 0.0,
        })
        .collect();
    if warm > 0 && cfg.cache_on {
        let members: Vec<usize> = (0..warm).collect();
        serve_phase(ix, set, &members, &mut workers, cfg)?;
        for w in &mut workers {
            w.clock = 0.0;
        }
    }
    let members: Vec<usize> = (warm..n).collect();
    let phase = serve_phase(ix, set, &members, &mut workers, cfg)?;
    let aggregates = Aggregates::from_rows(&phase.traces, &phase.batches, cfg.workers);
    Ok(RunRecord {
        label: label.to_string(),
        config: cfg.clone(),
        traces: phase.traces,
        batches: phase.batches,
        aggregates,
    })
}
