//! Summary tables over run records.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::RunRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Table,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Format::Table),
            "csv" => Ok(Format::Csv),
            other => Err(Error::invalid(format!("unknown format '{other}' (expected csv or table)"))),
        }
    }
}

/// One rendered row. Config columns are empty on the mean row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub pipeline: String,
    pub workers: Option<usize>,
    pub micro_batch: Option<usize>,
    pub n_probe: Option<usize>,
    pub prefetch_budget_bytes: Option<u64>,
    pub lookahead_on: Option<bool>,
    pub cache_on: Option<bool>,
    pub prefetch_sched_on: Option<bool>,
    pub cache_sched_on: Option<bool>,
    pub n_traces: f64,
    pub mean_latency_s: f64,
    pub throughput_qps: f64,
    pub makespan_s: f64,
    pub mean_hit_rate: f64,
    pub mean_coverage: f64,
    pub mean_llm_s: f64,
    pub mean_exposed_transfer_s: f64,
    pub mean_retrieve_s: f64,
    pub transfer_bytes: f64,
}

const NUMERIC: usize = 10;

impl ReportRow {
    pub fn from_record(r: &RunRecord) -> Self {
        let a = &r.aggregates;
        let c = &r.config;
        ReportRow {
            label: r.label.clone(),
            pipeline: r.pipeline().map_or_else(|| "mixed".to_string(), |p| p.to_string()),
            workers: Some(c.workers),
            micro_batch: Some(c.micro_batch),
            n_probe: Some(c.n_probe),
            prefetch_budget_bytes: Some(c.prefetch_budget_bytes),
            lookahead_on: Some(c.lookahead_on),
            cache_on: Some(c.cache_on),
            prefetch_sched_on: Some(c.prefetch_sched_on),
            cache_sched_on: Some(c.cache_sched_on),
            n_traces: a.n_traces as f64,
            mean_latency_s: a.mean_latency_s,
            throughput_qps: a.throughput_qps,
            makespan_s: a.makespan_s,
            mean_hit_rate: a.mean_hit_rate,
            mean_coverage: a.mean_coverage,
            mean_llm_s: a.mean_llm_s,
            mean_exposed_transfer_s: a.mean_exposed_transfer_s,
            mean_retrieve_s: a.mean_retrieve_s,
            transfer_bytes: a.transfer_bytes as f64,
        }
    }

    fn numbers(&self) -> [f64; NUMERIC] {
        [
            self.n_traces,
            self.mean_latency_s,
            self.throughput_qps,
            self.makespan_s,
            self.mean_hit_rate,
            self.mean_coverage,
            self.mean_llm_s,
            self.mean_exposed_transfer_s,
            self.mean_retrieve_s,
            self.transfer_bytes,
        ]
    }

    fn mean_of(rows: &[ReportRow]) -> Self {
        let mut acc = [0.0; NUMERIC];
        for r in rows {
            for (a, x) in acc.iter_mut().zip(r.numbers()) {
                *a += x;
            }
        }
        let n = rows.len() as f64;
        let m = acc.map(|a| a / n);
        ReportRow {
            label: "mean".into(),
            pipeline: String::new(),
            workers: None,
            micro_batch: None,
            n_probe: None,
            prefetch_budget_bytes: None,
            lookahead_on: None,
            cache_on: None,
            prefetch_sched_on: None,
            cache_sched_on: None,
            n_traces: m[0],
            mean_latency_s: m[1],
            throughput_qps: m[2],
            makespan_s: m[3],
            mean_hit_rate: m[4],
            mean_coverage: m[5],
            mean_llm_s: m[6],
            mean_exposed_transfer_s: m[7],
            mean_retrieve_s: m[8],
            transfer_bytes: m[9],
        }
    }
}

/// One row per record in input order, then the mean row.
pub fn report_rows(records: &[RunRecord]) -> Result<Vec<ReportRow>> {
    if records.is_empty() {
        return Err(Error::invalid("no data"));
    }
    let mut rows: Vec<ReportRow> = records.iter().map(ReportRow::from_record).collect();
    rows.push(ReportRow::mean_of(&rows));
    Ok(rows)
}

pub fn render(records: &[RunRecord], format: Format) -> Result<String> {
    let rows = report_rows(records)?;
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.serialize(r)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        Format::Table => Ok(table(&rows)),
    }
}

fn flag(b: Option<bool>) -> &'static str {
    match b {
        Some(true) => "on",
        Some(false) => "off",
        None => "",
    }
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn table(rows: &[ReportRow]) -> String {
    let header = [
        "label", "pipeline", "W", "m", "L", "budget", "la", "cache", "grp", "csch", "n", "latency_s",
        "qps", "makespan_s", "hit", "cov", "llm_s", "xfer_s", "retr_s",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.pipeline.clone(),
                opt(r.workers),
                opt(r.micro_batch),
                opt(r.n_probe),
                opt(r.prefetch_budget_bytes),
                flag(r.lookahead_on).into(),
                flag(r.cache_on).into(),
                flag(r.prefetch_sched_on).into(),
                flag(r.cache_sched_on).into(),
                format!("{}", r.n_traces),
                format!("{:.4}", r.mean_latency_s),
                format!("{:.3}", r.throughput_qps),
                format!("{:.4}", r.makespan_s),
                format!("{:.4}", r.mean_hit_rate),
                format!("{:.4}", r.mean_coverage),
                format!("{:.4}", r.mean_llm_s),
                format!("{:.4}", r.mean_exposed_transfer_s),
                format!("{:.4}", r.mean_retrieve_s),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| body.iter().map(|row| row[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let mut line = |cells: &[&str]| {
        let parts: Vec<String> =
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}", w = *w)).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header);
    for row in &body {
        line(&row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
