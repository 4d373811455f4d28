use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lookahead::budget::{calibrate_budget, StageSelector};
use lookahead::pipeline::{run_batch, RunConfig, RunRecord};
use lookahead::report::{render, Format};
use lookahead::seed::derive_seed;
use lookahead::trace::{synthesize_traces, synthetic_datastore, Pipeline, SynthParams, TraceSet};
use lookahead::{EmbeddingMatrix, IvfIndex, IvfParams, Metric};

#[derive(Parser)]
#[command(name = "lookahead", version, about = "Tiered IVF retrieval and RAG pipeline simulator")]
struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, env = "LOOKAHEAD_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, env = "LOOKAHEAD_FORMAT", value_enum, default_value_t = OutFormat::Table)]
    format: OutFormat,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Table,
    Csv,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Table => Format::Table,
            OutFormat::Csv => Format::Csv,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic unit-norm datastore in LAIV format.
    GenVectors {
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        themes: usize,
        #[arg(long, default_value_t = 0.6)]
        spread: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster a vector file into an IVF index.
    BuildIndex {
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long, default_value_t = 64)]
        clusters: usize,
        #[arg(long, default_value = "ip")]
        metric: String,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate recorded-style traces over a datastore.
    SynthTraces {
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value = "HyDE")]
        pipeline: String,
        /// Perturbation between the user query and the generated query.
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        /// Distance of user queries from datastore rows.
        #[arg(long, default_value_t = 0.05)]
        jitter: f64,
        #[arg(long)]
        out: PathBuf,
        /// Embedding sidecar; defaults to the trace path with a .laiv extension.
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Derive the prefetch budget from recorded generation times.
    Calibrate {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Only use traces of this pipeline.
        #[arg(long)]
        pipeline: Option<String>,
        #[arg(long)]
        bandwidth: f64,
        /// Clamp the budget to this many bytes.
        #[arg(long)]
        capacity: Option<u64>,
        /// Pre-retrieval stage to time: a 0-based retrieval index, or "all".
        #[arg(long, default_value = "0")]
        stage: String,
        /// Config to start from.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one configuration.
    Run {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "run")]
        label: String,
        /// Run record output (JSON lines).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep a grid of configurations.
    Bench {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        workers: Vec<usize>,
        #[arg(long = "micro-batch", value_delimiter = ',', default_value = "1")]
        micro_batch: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        nprobe: Vec<usize>,
        #[arg(long, value_delimiter = ',', value_enum, default_value = "on")]
        lookahead: Vec<Toggle>,
        /// Cache plus both schedulers.
        #[arg(long, value_delimiter = ',', value_enum, default_value = "off")]
        sched: Vec<Toggle>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize stored run records.
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct Overrides {
    #[arg(long, value_enum)]
    lookahead: Option<Toggle>,
    #[arg(long, value_enum)]
    cache: Option<Toggle>,
    #[arg(long, value_enum)]
    sched: Option<Toggle>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long = "micro-batch")]
    micro_batch: Option<usize>,
    #[arg(long)]
    nprobe: Option<usize>,
    #[arg(long)]
    budget: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(t) = self.lookahead {
            cfg.lookahead_on = t.on();
        }
        if let Some(t) = self.cache {
            cfg.cache_on = t.on();
        }
        if let Some(t) = self.sched {
            cfg.prefetch_sched_on = t.on();
            cfg.cache_sched_on = t.on();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(m) = self.micro_batch {
            cfg.micro_batch = m;
        }
        if let Some(l) = self.nprobe {
            cfg.n_probe = l;
        }
        if let Some(b) = self.budget {
            cfg.prefetch_budget_bytes = b;
        }
    }
}

fn sidecar_for(traces: &Path, sidecar: &Option<PathBuf>) -> PathBuf {
    sidecar.clone().unwrap_or_else(|| traces.with_extension("laiv"))
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(RunConfig::from_toml(&text).with_context(|| format!("invalid config {}", p.display()))?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn load_vectors(path: &Path) -> Result<EmbeddingMatrix> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    EmbeddingMatrix::read_laiv(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn load_inputs(inputs: &Inputs) -> Result<(IvfIndex, TraceSet)> {
    let f = File::open(&inputs.index).with_context(|| format!("opening {}", inputs.index.display()))?;
    let ix = IvfIndex::read_from(BufReader::new(f))
        .with_context(|| format!("reading {}", inputs.index.display()))?;
    let sidecar = sidecar_for(&inputs.traces, &inputs.sidecar);
    let set = TraceSet::load(&inputs.traces, &sidecar)
        .with_context(|| format!("loading traces {}", inputs.traces.display()))?;
    ensure!(
        set.embeddings.dim() == ix.dim(),
        "trace embeddings have dimension {} but the index has {}",
        set.embeddings.dim(),
        ix.dim()
    );
    ensure!(!set.traces.is_empty(), "trace file {} is empty", inputs.traces.display());
    Ok((ix, set))
}

fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        r.write_jsonl(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn check(records: &[RunRecord]) -> bool {
    let mut ok = true;
    for r in records {
        for v in r.check_invariants() {
            eprintln!("invariant violated in '{}': {v}", r.label);
            ok = false;
        }
    }
    ok
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let format: Format = cli.format.into();
    match cli.cmd {
        Command::GenVectors { n, dim, themes, spread, out } => {
            ensure!(n > 0 && dim > 0, "n and dim must be positive");
            let db = synthetic_datastore(n, dim, themes, spread, derive_seed(cli.seed, "gen-vectors"))?;
            db.write_laiv(BufWriter::new(File::create(&out)?))?;
            println!("wrote {} vectors of dimension {dim} to {}", db.len(), out.display());
        }
        Command::BuildIndex { vectors, clusters, metric, max_iters, out } => {
            let metric: Metric = metric.parse()?;
            let db = load_vectors(&vectors)?;
            let params = IvfParams {
                max_iters,
                ..IvfParams::new(clusters, metric, derive_seed(cli.seed, "build-index"))
            };
            let ix = IvfIndex::build(&db, &params)?;
            let mut w = BufWriter::new(File::create(&out)?);
            ix.write_to(&mut w)?;
            w.flush()?;
            println!(
                "wrote index with {} clusters over {} vectors to {}",
                ix.num_clusters(),
                ix.num_vectors(),
                out.display()
            );
        }
        Command::SynthTraces { vectors, n, pipeline, sigma, jitter, out, sidecar } => {
            ensure!(sigma >= 0.0 && jitter >= 0.0, "sigma and jitter must be non-negative");
            let pipeline: Pipeline = pipeline.parse()?;
            let db = load_vectors(&vectors)?;
            let params = SynthParams::new(pipeline, sigma, derive_seed(cli.seed, "synth-traces"));
            let set = synthesize_traces(&db, n, jitter, &params)?;
            let sidecar = sidecar_for(&out, &sidecar);
            set.save(&out, &sidecar)?;
            println!(
                "wrote {} {pipeline} traces to {} ({} embeddings in {})",
                set.traces.len(),
                out.display(),
                set.embeddings.len(),
                sidecar.display()
            );
        }
        Command::Calibrate { traces, sidecar, pipeline, bandwidth, capacity, stage, config, out } => {
            ensure!(bandwidth.is_finite() && bandwidth > 0.0, "bandwidth must be positive");
            let selector = match stage.as_str() {
                "all" => StageSelector::AllPreRetrieval,
                s => StageSelector::PreRetrieval(s.parse().context("--stage must be an index or 'all'")?),
            };
            let mut cfg = load_config(&config)?;
            let set = TraceSet::load(&traces, &sidecar_for(&traces, &sidecar))?;
            let mut chosen = set.traces;
            if let Some(p) = pipeline {
                let p: Pipeline = p.parse()?;
                chosen.retain(|t| t.pipeline == p);
            }
            ensure!(!chosen.is_empty(), "no traces to calibrate on");
            let mut budget = calibrate_budget(&chosen, selector, bandwidth)?;
            cfg.bandwidth_bytes_per_s = bandwidth;
            if let Some(cap) = capacity {
                cfg.capacity_bytes = cap;
            }
            let room = cfg.prefetch_room();
            if budget > room {
                eprintln!("warning: budget {budget} clamped to {room} bytes");
                budget = room;
            }
            cfg.prefetch_budget_bytes = budget;
            cfg.validate()?;
            std::fs::write(&out, cfg.to_toml())?;
            println!("prefetch_budget_bytes = {budget}");
        }
        Command::Run { inputs, config, overrides, label, out } => {
            let mut cfg = load_config(&config)?;
            overrides.apply(&mut cfg);
            cfg.validate()?;
            let (ix, set) = load_inputs(&inputs)?;
            let rec = run_batch(&set, &ix, &cfg, &label)?;
            let records = [rec];
            if let Some(path) = out {
                write_records(&path, &records)?;
            }
            print!("{}", render(&records, format)?);
            if !check(&records) {
                std::process::exit(1);
            }
        }
        Command::Bench { inputs, config, workers, micro_batch, nprobe, lookahead, sched, out } => {
            let base = load_config(&config)?;
            let (ix, set) = load_inputs(&inputs)?;
            let nprobe = if nprobe.is_empty() { vec![base.n_probe] } else { nprobe };
            let mut records = Vec::new();
            for &l in &nprobe {
                for &m in &micro_batch {
                    for &w in &workers {
                        for &la in &lookahead {
                            for &s in &sched {
                                let cfg = RunConfig {
                                    n_probe: l,
                                    micro_batch: m,
                                    workers: w,
                                    lookahead_on: la.on(),
                                    cache_on: s.on(),
                                    prefetch_sched_on: s.on(),
                                    cache_sched_on: s.on(),
                                    ..base.clone()
                                };
                                cfg.validate()
                                    .with_context(|| format!("grid point L={l} m={m} W={w}"))?;
                                let label = format!(
                                    "L{l}-m{m}-W{w}-la_{}-sched_{}",
                                    if la.on() { "on" } else { "off" },
                                    if s.on() { "on" } else { "off" }
                                );
                                records.push(run_batch(&set, &ix, &cfg, &label)?);
                            }
                        }
                    }
                }
            }
            if let Some(path) = out {
                write_records(&path, &records)?;
            }
            print!("{}", render(&records, format)?);
            if !check(&records) {
                std::process::exit(1);
            }
        }
        Command::Report { records } => {
            let mut all = Vec::new();
            for p in &records {
                let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
                all.extend(RunRecord::read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?);
            }
            if all.is_empty() {
                bail!("no data: the given files contain no run records");
            }
            print!("{}", render(&all, format)?);
        }
    }
    Ok(())
}
