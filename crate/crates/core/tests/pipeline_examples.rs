use lookahead::ivf::InvertedList;
use lookahead::pipeline::{run_batch, run_single, RunConfig, RunRecord};
use lookahead::tiered::TieredStore;
use lookahead::trace::{
    synthesize_from_inputs, synthesize_traces, synthetic_datastore, DurationModel, Pipeline, QueryTrace, Stage,
    StageKind, SynthParams, TraceSet,
};
use lookahead::{EmbeddingMatrix, IvfIndex, IvfParams, Metric};

fn world() -> (EmbeddingMatrix, IvfIndex) {
    let db = synthetic_datastore(1200, 8, 6, 0.6, 21).unwrap();
    let ix = IvfIndex::build(&db, &IvfParams::new(24, Metric::InnerProduct, 4)).unwrap();
    (db, ix)
}

fn cfg() -> RunConfig {
    RunConfig {
        n_probe: 6,
        top_k: 3,
        prefetch_budget_bytes: 8_000,
        capacity_bytes: 200_000,
        bandwidth_bytes_per_s: 1e4,
        t_cc: 0.05,
        t_gc: 0.005,
        ..RunConfig::default()
    }
}

fn assert_clean(r: &RunRecord) {
    let bad = r.check_invariants();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn single_worker_unit_batches_compose_run_single() {
    let (db, ix) = world();
    let set = synthesize_traces(&db, 30, 0.05, &SynthParams::new(Pipeline::Iter, 0.2, 2)).unwrap();
    let rec = run_batch(&set, &ix, &cfg(), "batch").unwrap();
    assert_clean(&rec);
    let mut clock = 0.0;
    for (t, r) in set.traces.iter().zip(&rec.traces) {
        let mut store = TieredStore::new(cfg().capacity_bytes);
        let single = run_single(t, &set, &ix, &mut store, &cfg()).unwrap();
        assert_eq!(single.segments, r.segments);
        assert_eq!(single.total_s, r.total_s);
        clock += single.total_s;
    }
    assert_eq!(rec.aggregates.makespan_s, clock);
}

#[test]
fn two_workers_halve_a_symmetric_workload() {
    let (db, ix) = world();
    let mut params = SynthParams::new(Pipeline::HyDE, 0.1, 3);
    params.durations = DurationModel::for_pipeline(Pipeline::HyDE).fixed();
    let half = synthesize_traces(&db, 16, 0.05, &params).unwrap();
    // Interleave a copy so round-robin sends each worker one half.
    let mut rows: Vec<Vec<f32>> = (0..half.embeddings.len()).map(|i| half.embeddings.row(i).to_vec()).collect();
    rows.extend(rows.clone());
    let offset = half.embeddings.len() as u64;
    let mut traces = Vec::new();
    for t in &half.traces {
        traces.push(t.clone());
        let mut twin = t.clone();
        twin.trace_id += 1000;
        twin.input_ref += offset;
        for s in &mut twin.stages {
            s.embedding_ref = s.embedding_ref.map(|r| r + offset);
        }
        traces.push(twin);
    }
    let set = TraceSet { traces, embeddings: EmbeddingMatrix::from_rows(8, &rows).unwrap() };
    let one = run_batch(&set, &ix, &cfg(), "w1").unwrap();
    let two = run_batch(&set, &ix, &RunConfig { workers: 2, ..cfg() }, "w2").unwrap();
    assert_clean(&two);
    assert_eq!(two.aggregates.worker_clocks[0], two.aggregates.worker_clocks[1]);
    let ratio = two.aggregates.makespan_s / one.aggregates.makespan_s;
    assert!((ratio - 0.5).abs() < 1e-12, "{ratio}");
}

#[test]
fn identical_query_with_enough_budget_always_hits() {
    let (db, ix) = world();
    let set = synthesize_traces(&db, 20, 0.05, &SynthParams::new(Pipeline::SRag, 0.0, 5)).unwrap();
    let c = RunConfig { prefetch_budget_bytes: ix.total_bytes(), capacity_bytes: ix.total_bytes(), ..cfg() };
    let rec = run_batch(&set, &ix, &c, "hit").unwrap();
    assert_clean(&rec);
    for t in &rec.traces {
        for s in t.segments.iter().filter(|s| s.kind == StageKind::Retrieve) {
            assert!(s.hit_rates.iter().all(|&h| h == 1.0), "{:?}", s.hit_rates);
        }
    }
}

#[test]
fn zero_budget_equals_baseline() {
    let (db, ix) = world();
    for p in Pipeline::ALL {
        let set = synthesize_traces(&db, 12, 0.05, &SynthParams::new(p, 0.3, 6)).unwrap();
        let on = run_batch(&set, &ix, &RunConfig { prefetch_budget_bytes: 0, micro_batch: 3, ..cfg() }, "on").unwrap();
        let off = run_batch(&set, &ix, &RunConfig { lookahead_on: false, micro_batch: 3, ..cfg() }, "off").unwrap();
        let totals = |r: &RunRecord| r.traces.iter().map(|t| t.total_s).collect::<Vec<_>>();
        assert_eq!(totals(&on), totals(&off), "{p}");
    }
}

/// One-dimensional clusters at 0, 10, 20, ...; each holds `per` rows of 12 bytes.
fn line(n: usize, per: usize) -> IvfIndex {
    let cents: Vec<Vec<f32>> = (0..n).map(|c| vec![c as f32 * 10.0]).collect();
    let lists = (0..n)
        .map(|c| InvertedList {
            ids: (0..per).map(|i| (c * per + i) as u64).collect(),
            vectors: (0..per).map(|i| c as f32 * 10.0 + i as f32 * 0.01).collect(),
        })
        .collect();
    IvfIndex::from_parts(Metric::L2, EmbeddingMatrix::from_rows(1, &cents).unwrap(), lists).unwrap()
}

#[test]
fn closed_form_timeline_and_speedup() {
    // Two rounds: generation 2 s hides a 1 s transfer, every probe hits.
    let ix = line(6, 2);
    let embeddings = EmbeddingMatrix::from_rows(1, &[vec![0.0], vec![0.0], vec![0.0]]).unwrap();
    let trace = QueryTrace {
        trace_id: 0,
        pipeline: Pipeline::FLARE,
        input_ref: 0,
        stages: vec![
            Stage::generate(2.0, Some(1), 1),
            Stage::retrieve(1, 1),
            Stage::generate(2.0, Some(2), 1),
            Stage::retrieve(2, 1),
            Stage::generate(1.5, None, 1),
        ],
    };
    let set = TraceSet { traces: vec![trace], embeddings };
    let c = RunConfig {
        n_probe: 2,
        top_k: 1,
        prefetch_budget_bytes: 48,
        capacity_bytes: 1000,
        bandwidth_bytes_per_s: 48.0,
        t_cc: 1.0,
        t_gc: 0.25,
        ..RunConfig::default()
    };
    let on = run_single(&set.traces[0], &set, &ix, &mut TieredStore::new(1000), &c).unwrap();
    let off =
        run_single(&set.traces[0], &set, &ix, &mut TieredStore::new(1000), &RunConfig { lookahead_on: false, ..c.clone() })
            .unwrap();
    assert_eq!(on.hit_rate, 1.0);
    // Fast retrieval is 2 clusters x 0.25 s; the second round transfers nothing.
    assert_eq!(on.total_s, 2.0 + 0.5 + 2.0 + 0.5 + 1.5);
    assert_eq!(on.segments[2].transfer_s, 0.0);
    assert_eq!(off.total_s, 2.0 + 2.0 + 2.0 + 2.0 + 1.5);
    for (a, b) in on.segments.iter().zip(&off.segments).filter(|(a, _)| a.kind == StageKind::Retrieve) {
        assert_eq!(b.retrieve_s / a.retrieve_s, 4.0);
    }
}

#[test]
fn fanout_replays_every_subquery() {
    let (db, ix) = world();
    let set = synthesize_traces(&db, 10, 0.05, &SynthParams::new(Pipeline::SubQ, 0.2, 8)).unwrap();
    let rec = run_batch(&set, &ix, &cfg(), "subq").unwrap();
    for (t, r) in set.traces.iter().zip(&rec.traces) {
        let fanout = t.stages[1].fanout as usize;
        assert_eq!(r.segments[1].hit_rates.len(), fanout);
        assert_eq!(r.retrievals, fanout);
    }
}

#[test]
fn cache_hit_rate_grows_on_a_repeating_workload() {
    let (db, ix) = world();
    let base = synthesize_traces(&db, 4, 0.05, &SynthParams::new(Pipeline::HyDE, 0.2, 9)).unwrap();
    let inputs: Vec<Vec<f32>> = base.traces.iter().map(|t| base.input(t).to_vec()).collect();
    let repeated: Vec<Vec<f32>> = (0..6).flat_map(|_| inputs.clone()).collect();
    let mut params = SynthParams::new(Pipeline::HyDE, 0.0, 9);
    params.durations = params.durations.fixed();
    let set = synthesize_from_inputs(&repeated, &params).unwrap();
    let c = RunConfig {
        micro_batch: 4,
        cache_on: true,
        prefetch_budget_bytes: 10_000,
        capacity_bytes: 40_000,
        ..cfg()
    };
    let rec = run_batch(&set, &ix, &c, "repeat").unwrap();
    assert_clean(&rec);
    let per_batch: Vec<f64> = rec
        .batches
        .iter()
        .map(|b| {
            let hits: Vec<f64> = rec
                .traces
                .iter()
                .filter(|t| b.trace_ids.contains(&t.trace_id))
                .flat_map(|t| t.segments.iter().flat_map(|s| s.hit_rates.clone()))
                .collect();
            hits.iter().sum::<f64>() / hits.len() as f64
        })
        .collect();
    assert!(per_batch.windows(2).all(|w| w[1] >= w[0]), "{per_batch:?}");
    assert!(per_batch.last().unwrap() > per_batch.first().unwrap(), "{per_batch:?}");
}

#[test]
fn cache_off_leaves_nothing_behind() {
    let (db, ix) = world();
    let set = synthesize_traces(&db, 12, 0.05, &SynthParams::new(Pipeline::HyDE, 0.2, 1)).unwrap();
    let rec = run_batch(&set, &ix, &RunConfig { micro_batch: 4, ..cfg() }, "x").unwrap();
    assert!(rec.batches.iter().all(|b| b.resident_after == 0));
    let rec = run_batch(&set, &ix, &RunConfig { micro_batch: 4, cache_on: true, ..cfg() }, "x").unwrap();
    let smallest = (0..ix.num_clusters() as u32).map(|c| ix.cluster_bytes(c)).filter(|&b| b > 0).min().unwrap();
    let limit = (cfg().capacity_bytes as f64 * cfg().cache_fraction) as u64;
    assert!(rec.batches.iter().any(|b| b.resident_after > 0));
    assert!(rec.batches.iter().all(|b| b.resident_after as u64 * smallest <= limit));
}

#[test]
fn warmup_is_not_measured() {
    let (db, ix) = world();
    let set = synthesize_traces(&db, 20, 0.05, &SynthParams::new(Pipeline::HyDE, 0.2, 1)).unwrap();
    let c = RunConfig { cache_on: true, warmup_traces: 8, micro_batch: 2, ..cfg() };
    let rec = run_batch(&set, &ix, &c, "warm").unwrap();
    assert_clean(&rec);
    assert_eq!(rec.traces.len(), 12);
    assert_eq!(rec.traces[0].trace_id, 8);
    assert_eq!(rec.batches[0].start_s, 0.0);
    assert!(run_batch(&set, &ix, &RunConfig { warmup_traces: 20, ..c }, "all").is_err());
}

#[test]
fn records_survive_a_file_round_trip() {
    let (db, ix) = world();
    let set = synthesize_traces(&db, 8, 0.05, &SynthParams::new(Pipeline::IRG, 0.2, 1)).unwrap();
    let rec = run_batch(&set, &ix, &RunConfig { workers: 2, micro_batch: 2, ..cfg() }, "irg").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    rec.write_jsonl(std::fs::File::create(&path).unwrap()).unwrap();
    let back = RunRecord::read_jsonl(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(back, vec![rec]);
}

#[test]
fn traces_survive_a_file_round_trip() {
    let (db, _) = world();
    let set = synthesize_traces(&db, 15, 0.05, &SynthParams::new(Pipeline::SubQ, 0.2, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (t, s) = (dir.path().join("t.jsonl"), dir.path().join("t.laiv"));
    set.save(&t, &s).unwrap();
    assert_eq!(TraceSet::load(&t, &s).unwrap(), set);
    std::fs::write(&t, "").unwrap();
    assert!(TraceSet::load(&t, &s).unwrap().traces.is_empty());
}
