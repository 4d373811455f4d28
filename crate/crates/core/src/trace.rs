//! Recorded RAG pipeline traces and a seeded synthetic trace generator.
//!
//! A trace file holds one JSON record per line. Query embeddings live in a
//! separate `LAIV` sidecar and are referenced by row index.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::vectorstore::{normalized, EmbeddingMatrix};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pipeline {
    HyDE,
    SubQ,
    Iter,
    IRG,
    FLARE,
    #[serde(rename = "S-RAG")]
    SRag,
    #[serde(rename = "custom")]
    Custom,
}

impl Pipeline {
    pub const ALL: [Pipeline; 6] =
        [Pipeline::HyDE, Pipeline::SubQ, Pipeline::Iter, Pipeline::IRG, Pipeline::FLARE, Pipeline::SRag];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::HyDE => "HyDE",
            Pipeline::SubQ => "SubQ",
            Pipeline::Iter => "Iter",
            Pipeline::IRG => "IRG",
            Pipeline::FLARE => "FLARE",
            Pipeline::SRag => "S-RAG",
            Pipeline::Custom => "custom",
        }
    }

    pub fn is_multi_round(self) -> bool {
        matches!(self, Pipeline::Iter | Pipeline::IRG | Pipeline::FLARE | Pipeline::SRag)
    }
}

impl std::fmt::Display for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Pipeline::ALL
            .into_iter()
            .chain([Pipeline::Custom])
            .find(|p| p.name().to_ascii_lowercase() == lower)
            .or(match lower.as_str() {
                "srag" | "self-rag" => Some(Pipeline::SRag),
                "iter-retgen" => Some(Pipeline::IRG),
                _ => None,
            })
            .ok_or_else(|| Error::invalid(format!("unknown pipeline '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Generate,
    Retrieve,
    Judge,
}

/// One pipeline step. A stage with `fanout = f` and `embedding_ref = Some(r)`
/// refers to the `f` consecutive sidecar rows `r..r+f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub kind: StageKind,
    /// Generate: the emitted query (if any). Retrieve: the consumed query.
    pub embedding_ref: Option<u64>,
    pub duration_s: f64,
    pub fanout: u32,
}

impl Stage {
    pub fn generate(duration_s: f64, emits: Option<u64>, fanout: u32) -> Self {
        Stage { kind: StageKind::Generate, embedding_ref: emits, duration_s, fanout }
    }

    pub fn retrieve(query_ref: u64, fanout: u32) -> Self {
        Stage { kind: StageKind::Retrieve, embedding_ref: Some(query_ref), duration_s: 0.0, fanout }
    }

    pub fn judge(duration_s: f64) -> Self {
        Stage { kind: StageKind::Judge, embedding_ref: None, duration_s, fanout: 1 }
    }

    /// Sidecar rows this stage references.
    pub fn refs(&self) -> Vec<u64> {
        match self.embedding_ref {
            Some(r) => (r..r + self.fanout as u64).collect(),
            None => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub trace_id: u64,
    pub pipeline: Pipeline,
    /// Sidecar row of the user query entering the pipeline.
    pub input_ref: u64,
    pub stages: Vec<Stage>,
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    schema_version: u32,
    #[serde(flatten)]
    trace: QueryTrace,
}

impl QueryTrace {
    pub fn retrieve_count(&self) -> usize {
        self.stages.iter().filter(|s| s.kind == StageKind::Retrieve).count()
    }

    /// Checks references against a sidecar of `n_embeddings` rows and the
    /// stage walk against the pipeline's shape.
    pub fn validate(&self, n_embeddings: u64) -> std::result::Result<(), String> {
        if self.input_ref >= n_embeddings {
            return Err(format!("input_ref {} out of range ({n_embeddings} embeddings)", self.input_ref));
        }
        if self.stages.is_empty() {
            return Err("trace has no stages".into());
        }
        let mut current = (self.input_ref, 1u32);
        for (i, st) in self.stages.iter().enumerate() {
            if !(st.duration_s.is_finite() && st.duration_s >= 0.0) {
                return Err(format!("stage {i}: duration must be finite and >= 0"));
            }
            if st.fanout == 0 {
                return Err(format!("stage {i}: fanout must be positive"));
            }
            if let Some(r) = st.embedding_ref {
                if r + st.fanout as u64 > n_embeddings {
                    return Err(format!("stage {i}: dangling embedding_ref {r} (fanout {})", st.fanout));
                }
            }
            match st.kind {
                StageKind::Generate => {
                    if let Some(r) = st.embedding_ref {
                        current = (r, st.fanout);
                    }
                }
                StageKind::Retrieve => {
                    let r = st
                        .embedding_ref
                        .ok_or_else(|| format!("stage {i}: retrieve without a query embedding"))?;
                    let supplied = (r, st.fanout) == current || (r == self.input_ref && st.fanout == 1);
                    if !supplied {
                        return Err(format!(
                            "stage {i}: retrieve consumes {r} but no earlier stage supplied it"
                        ));
                    }
                }
                StageKind::Judge => {
                    if st.embedding_ref.is_some() {
                        return Err(format!("stage {i}: judge stages carry no embedding"));
                    }
                }
            }
        }
        let retrieves = self.retrieve_count();
        let shape_ok = match self.pipeline {
            Pipeline::HyDE => retrieves == 1,
            Pipeline::SubQ => {
                retrieves >= 1
                    && self
                        .stages
                        .iter()
                        .any(|s| s.kind == StageKind::Retrieve && s.fanout >= 2)
            }
            Pipeline::Iter | Pipeline::IRG | Pipeline::FLARE | Pipeline::SRag => retrieves >= 2,
            Pipeline::Custom => true,
        };
        if !shape_ok {
            return Err(format!(
                "{} trace has an invalid stage walk ({retrieves} retrieve stages)",
                self.pipeline
            ));
        }
        Ok(())
    }
}

/// Parses trace records, one per line. Blank lines are skipped.
pub fn load_traces<R: BufRead>(r: R, n_embeddings: u64) -> Result<Vec<QueryTrace>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let err = |msg: String| Error::Trace { line: lineno, msg };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(err(format!("schema_version {v} is not supported"))),
            None => return Err(err("missing schema_version".into())),
        }
        let rec: TraceLine = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
        rec.trace.validate(n_embeddings).map_err(err)?;
        out.push(rec.trace);
    }
    Ok(out)
}

pub fn save_traces<W: Write>(traces: &[QueryTrace], mut w: W) -> Result<()> {
    for t in traces {
        let line = TraceLine { schema_version: SCHEMA_VERSION, trace: t.clone() };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Traces together with their embedding sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub traces: Vec<QueryTrace>,
    pub embeddings: EmbeddingMatrix,
}

impl TraceSet {
    pub fn embedding(&self, r: u64) -> &[f32] {
        self.embeddings.row(r as usize)
    }

    pub fn input(&self, t: &QueryTrace) -> &[f32] {
        self.embedding(t.input_ref)
    }

    pub fn save(&self, trace_path: &Path, sidecar_path: &Path) -> Result<()> {
        save_traces(&self.traces, BufWriter::new(File::create(trace_path)?))?;
        self.embeddings.write_laiv(BufWriter::new(File::create(sidecar_path)?))
    }

    pub fn load(trace_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let embeddings = EmbeddingMatrix::read_laiv(BufReader::new(File::open(sidecar_path)?))?;
        if embeddings.ids().iter().enumerate().any(|(i, &id)| id != i as u64) {
            return Err(Error::invalid("sidecar ids must be 0..n in order"));
        }
        let traces = load_traces(BufReader::new(File::open(trace_path)?), embeddings.len() as u64)?;
        Ok(TraceSet { traces, embeddings })
    }
}

/// Lognormal stage durations with the given means and coefficient of variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationModel {
    /// Pre-retrieval generation (query rewriting, sub-questions, ...).
    pub query_gen_mean_s: f64,
    /// Post-retrieval answer generation.
    pub answer_gen_mean_s: f64,
    pub judge_mean_s: f64,
    pub cv: f64,
}

impl DurationModel {
    pub fn for_pipeline(p: Pipeline) -> Self {
        let query_gen_mean_s = match p {
            Pipeline::HyDE => 1.2,
            Pipeline::SubQ => 0.9,
            Pipeline::Iter => 0.6,
            Pipeline::IRG => 0.5,
            Pipeline::FLARE => 0.7,
            Pipeline::SRag => 0.4,
            Pipeline::Custom => 1.0,
        };
        DurationModel { query_gen_mean_s, answer_gen_mean_s: 1.0, judge_mean_s: 0.2, cv: 0.3 }
    }

    /// Every stage takes exactly its mean.
    pub fn fixed(mut self) -> Self {
        self.cv = 0.0;
        self
    }

    fn sample<R: Rng>(&self, mean: f64, rng: &mut R) -> f64 {
        if self.cv <= 0.0 || mean <= 0.0 {
            return mean.max(0.0);
        }
        let sigma2 = (1.0 + self.cv * self.cv).ln();
        let mu = mean.ln() - sigma2 / 2.0;
        LogNormal::new(mu, sigma2.sqrt()).expect("valid lognormal").sample(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub pipeline: Pipeline,
    /// Norm-scale of the perturbation turning `q_in` into `q_out`.
    pub sigma: f64,
    pub durations: DurationModel,
    pub seed: u64,
}

impl SynthParams {
    pub fn new(pipeline: Pipeline, sigma: f64, seed: u64) -> Self {
        SynthParams { pipeline, sigma, durations: DurationModel::for_pipeline(pipeline), seed }
    }
}

/// Gaussian noise with per-component standard deviation `scale / sqrt(dim)`.
fn gaussian<R: Rng>(dim: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    let s = scale / (dim as f64).sqrt();
    (0..dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `normalize(v + sigma * noise)`.
pub fn perturb<R: Rng>(v: &[f32], sigma: f64, rng: &mut R) -> Vec<f32> {
    if sigma == 0.0 {
        return normalized(v);
    }
    let noise = gaussian(v.len(), sigma, rng);
    let moved: Vec<f32> = v.iter().zip(noise).map(|(&x, n)| (x as f64 + n) as f32).collect();
    normalized(&moved)
}

/// Builds traces whose user queries are exactly `inputs`.
pub fn synthesize_from_inputs(inputs: &[Vec<f32>], params: &SynthParams) -> Result<TraceSet> {
    if !(params.sigma.is_finite() && params.sigma >= 0.0) {
        return Err(Error::invalid("sigma must be finite and non-negative"));
    }
    let dim = inputs.first().map_or(1, |v| v.len());
    let mut rng = rng_for(params.seed, &format!("traces/{}", params.pipeline));
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut traces = Vec::with_capacity(inputs.len());
    let d = params.durations;
    for (tid, q_in) in inputs.iter().enumerate() {
        let q_in = normalized(q_in);
        let input_ref = rows.len() as u64;
        rows.push(q_in.clone());
        let emit = |n: usize, rows: &mut Vec<Vec<f32>>, rng: &mut _| -> u64 {
            let first = rows.len() as u64;
            for _ in 0..n {
                let q = perturb(&q_in, params.sigma, rng);
                rows.push(q);
            }
            first
        };
        let mut stages = Vec::new();
        match params.pipeline {
            Pipeline::HyDE | Pipeline::Custom => {
                let r = emit(1, &mut rows, &mut rng);
                stages.push(Stage::generate(d.sample(d.query_gen_mean_s, &mut rng), Some(r), 1));
                stages.push(Stage::retrieve(r, 1));
                stages.push(Stage::generate(d.sample(d.answer_gen_mean_s, &mut rng), None, 1));
            }
            Pipeline::SubQ => {
                let f = rng.random_range(2..=4u32);
                let r = emit(f as usize, &mut rows, &mut rng);
                stages.push(Stage::generate(d.sample(d.query_gen_mean_s, &mut rng), Some(r), f));
                stages.push(Stage::retrieve(r, f));
                stages.push(Stage::generate(d.sample(d.answer_gen_mean_s, &mut rng), None, 1));
            }
            Pipeline::Iter => {
                let rounds = rng.random_range(2..=3);
                for _ in 0..rounds {
                    let r = emit(1, &mut rows, &mut rng);
                    stages.push(Stage::generate(d.sample(d.query_gen_mean_s, &mut rng), Some(r), 1));
                    stages.push(Stage::retrieve(r, 1));
                    stages.push(Stage::generate(d.sample(d.answer_gen_mean_s, &mut rng), None, 1));
                    stages.push(Stage::judge(d.sample(d.judge_mean_s, &mut rng)));
                }
            }
            Pipeline::IRG => {
                // First retrieval uses the user query; each generation feeds the next retrieval.
                stages.push(Stage::retrieve(input_ref, 1));
                for _ in 0..2 {
                    let r = emit(1, &mut rows, &mut rng);
                    stages.push(Stage::generate(d.sample(d.query_gen_mean_s, &mut rng), Some(r), 1));
                    stages.push(Stage::retrieve(r, 1));
                }
                stages.push(Stage::generate(d.sample(d.answer_gen_mean_s, &mut rng), None, 1));
            }
            Pipeline::FLARE => {
                let rounds = rng.random_range(2..=3);
                for _ in 0..rounds {
                    let r = emit(1, &mut rows, &mut rng);
                    stages.push(Stage::generate(d.sample(d.query_gen_mean_s, &mut rng), Some(r), 1));
                    stages.push(Stage::retrieve(r, 1));
                }
                stages.push(Stage::generate(d.sample(d.answer_gen_mean_s, &mut rng), None, 1));
            }
            Pipeline::SRag => {
                // No query transform: the retrieval query is the user query.
                for round in 0..2 {
                    if round > 0 {
                        stages.push(Stage::judge(d.sample(d.judge_mean_s, &mut rng)));
                    }
                    stages.push(Stage::generate(
                        d.sample(d.query_gen_mean_s, &mut rng),
                        Some(input_ref),
                        1,
                    ));
                    stages.push(Stage::retrieve(input_ref, 1));
                    stages.push(Stage::generate(d.sample(d.answer_gen_mean_s, &mut rng), None, 1));
                }
            }
        }
        traces.push(QueryTrace { trace_id: tid as u64, pipeline: params.pipeline, input_ref, stages });
    }
    let embeddings = EmbeddingMatrix::from_rows(dim, &rows)?;
    Ok(TraceSet { traces, embeddings })
}

/// Draws `n` user queries near random datastore rows (small jitter) and
/// builds traces for them.
pub fn synthesize_traces(
    db: &EmbeddingMatrix,
    n: usize,
    input_jitter: f64,
    params: &SynthParams,
) -> Result<TraceSet> {
    if db.is_empty() {
        return Err(Error::invalid("datastore is empty"));
    }
    let mut rng = rng_for(params.seed, "trace-inputs");
    let inputs: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let row = db.row(rng.random_range(0..db.len()));
            perturb(row, input_jitter, &mut rng)
        })
        .collect();
    synthesize_from_inputs(&inputs, params)
}

/// Unit-norm Gaussian-mixture datastore with `themes` centers.
pub fn synthetic_datastore(n: usize, dim: usize, themes: usize, spread: f64, seed: u64) -> Result<EmbeddingMatrix> {
    let mut rng = rng_for(seed, "datastore");
    let centers: Vec<Vec<f32>> = (0..themes.max(1))
        .map(|_| {
            let g = gaussian(dim, 1.0, &mut rng);
            normalized(&g.iter().map(|&x| x as f32).collect::<Vec<_>>())
        })
        .collect();
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let c = &centers[rng.random_range(0..centers.len())];
            perturb(c, spread, &mut rng)
        })
        .collect();
    EmbeddingMatrix::from_rows(dim, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyde() -> TraceSet {
        let db = synthetic_datastore(50, 8, 4, 0.5, 1).unwrap();
        synthesize_traces(&db, 1, 0.05, &SynthParams::new(Pipeline::HyDE, 0.2, 3)).unwrap()
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(load_traces(&b""[..], 0).unwrap().is_empty());
        assert!(load_traces(&b"\n\n"[..], 0).unwrap().is_empty());
    }

    #[test]
    fn hyde_round_trip_bit_exact() {
        let set = hyde();
        let t = &set.traces[0];
        assert_eq!(
            t.stages.iter().map(|s| s.kind).collect::<Vec<_>>(),
            vec![StageKind::Generate, StageKind::Retrieve, StageKind::Generate]
        );
        let mut buf = Vec::new();
        save_traces(&set.traces, &mut buf).unwrap();
        let back = load_traces(&buf[..], set.embeddings.len() as u64).unwrap();
        assert_eq!(back, set.traces);
        let mut again = Vec::new();
        save_traces(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn fanout_expands_refs() {
        let s = Stage::retrieve(4, 3);
        assert_eq!(s.refs(), vec![4, 5, 6]);
    }

    #[test]
    fn rejects_bad_records() {
        let set = hyde();
        let n = set.embeddings.len() as u64;
        let mut buf = Vec::new();
        save_traces(&set.traces, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();

        let wrong_version = text.replace("\"schema_version\":1", "\"schema_version\":9");
        assert!(matches!(load_traces(wrong_version.as_bytes(), n), Err(Error::Trace { line: 1, .. })));

        let two = format!("{text}{{\"garbage\":true}}\n");
        assert!(matches!(load_traces(two.as_bytes(), n), Err(Error::Trace { line: 2, .. })));

        // Sidecar too short for the emitted query.
        assert!(matches!(load_traces(text.as_bytes(), 1), Err(Error::Trace { line: 1, .. })));
    }

    #[test]
    fn retrieve_needs_a_supplier() {
        let t = QueryTrace {
            trace_id: 0,
            pipeline: Pipeline::Custom,
            input_ref: 0,
            stages: vec![Stage::retrieve(2, 1)],
        };
        assert!(t.validate(5).is_err());
        let ok = QueryTrace { stages: vec![Stage::retrieve(0, 1)], ..t };
        assert!(ok.validate(5).is_ok());
    }

    #[test]
    fn shapes_per_pipeline() {
        let db = synthetic_datastore(64, 8, 4, 0.5, 2).unwrap();
        for p in Pipeline::ALL {
            let set = synthesize_traces(&db, 20, 0.05, &SynthParams::new(p, 0.1, 5)).unwrap();
            for t in &set.traces {
                t.validate(set.embeddings.len() as u64).unwrap();
                let r = t.retrieve_count();
                match p {
                    Pipeline::HyDE => assert_eq!(r, 1),
                    Pipeline::SubQ => assert!(t.stages[1].fanout >= 2),
                    _ => assert!(r >= 2, "{p}: {r}"),
                }
            }
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let db = synthetic_datastore(64, 8, 4, 0.5, 2).unwrap();
        let p = SynthParams::new(Pipeline::FLARE, 0.3, 11);
        assert_eq!(synthesize_traces(&db, 10, 0.05, &p).unwrap(), synthesize_traces(&db, 10, 0.05, &p).unwrap());
    }

    #[test]
    fn pipeline_names_parse() {
        for p in Pipeline::ALL {
            assert_eq!(p.name().parse::<Pipeline>().unwrap(), p);
        }
        assert_eq!("self-rag".parse::<Pipeline>().unwrap(), Pipeline::SRag);
    }
}
