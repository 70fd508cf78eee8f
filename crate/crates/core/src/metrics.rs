//! Metrics files: a JSON-lines record stream, a timings sidecar and a CSV
//! summary per run, plus table assembly across runs.
//!
//! The record stream holds only values that are fixed by the configuration
//! and seed, so two loopback runs with the same settings produce identical
//! bytes. Wall-clock measurements go to `<stem>.timings.jsonl`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetKind;
use crate::experiment::{ExperimentConfig, ExperimentError, ExperimentOutcome, Mode};
use crate::protocol::{DivisorMode, RoundRecord, RoundTimings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub test_accuracy: Option<f64>,
    pub messages: u64,
    pub bytes: u64,
    pub share_uploads: u64,
    pub sigma_broadcasts: u64,
    pub control_messages: u64,
    pub client_sends: Vec<u64>,
    pub server_sends: Vec<u64>,
}

impl From<&RoundRecord> for RoundMetrics {
    fn from(r: &RoundRecord) -> Self {
        Self {
            round: r.round,
            test_accuracy: r.test_accuracy,
            messages: r.messages,
            bytes: r.bytes,
            share_uploads: r.share_uploads,
            sigma_broadcasts: r.sigma_broadcasts,
            control_messages: r.control_messages,
            client_sends: r.client_sends.clone(),
            server_sends: r.server_sends.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: DatasetKind,
    pub mode: Mode,
    pub m: usize,
    pub n: usize,
    pub iter: usize,
    pub l: u32,
    pub l_f: u32,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub divisor_mode: DivisorMode,
    pub max_samples: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub rounds_completed: usize,
    pub final_accuracy: Option<f64>,
    pub total_messages: u64,
    pub total_bytes: u64,
    pub completed: bool,
    pub error: Option<String>,
}

impl RunSummary {
    pub fn new(cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> Self {
        Self {
            dataset: cfg.dataset,
            mode: cfg.mode,
            m: cfg.m,
            n: if cfg.mode == Mode::Protocol { cfg.n } else { 1 },
            iter: cfg.iter,
            l: cfg.l,
            l_f: cfg.l_f,
            lr: cfg.lr,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            divisor_mode: cfg.divisor_mode,
            max_samples: cfg.max_samples,
            train_samples: outcome.train_samples,
            test_samples: outcome.test_samples,
            rounds_completed: outcome.rounds.len(),
            final_accuracy: outcome.rounds.last().and_then(|r| r.test_accuracy),
            total_messages: outcome.rounds.iter().map(|r| r.messages).sum(),
            total_bytes: outcome.rounds.iter().map(|r| r.bytes).sum(),
            completed: outcome.error.is_none() && outcome.rounds.len() == cfg.iter,
            error: outcome.error.as_ref().map(|e| e.to_string()),
        }
    }
}

/// One line of the record stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum MetricsRecord {
    Round(RoundMetrics),
    Summary(RunSummary),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub round: u32,
    #[serde(flatten)]
    pub timings: RoundTimings,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricsPaths {
    pub records: PathBuf,
    pub timings: PathBuf,
    pub summary_csv: PathBuf,
}

impl MetricsPaths {
    /// `out.jsonl` gives `out.timings.jsonl` and `out.csv` beside it.
    pub fn for_output(output: &Path) -> Self {
        let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self {
            records: output.to_path_buf(),
            timings: output.with_file_name(format!("{stem}.timings.jsonl")),
            summary_csv: output.with_file_name(format!("{stem}.csv")),
        }
    }
}

const CSV_HEADER: &str =
    "dataset,mode,m,n,iter,l,l_f,seed,train_samples,rounds_completed,final_accuracy,total_messages,total_bytes";

fn fmt_accuracy(a: Option<f64>) -> String {
    a.map(|v| format!("{v:.4}")).unwrap_or_default()
}

pub fn summary_csv(s: &RunSummary) -> String {
    format!(
        "{CSV_HEADER}\n{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        s.dataset,
        serde_json::to_value(s.mode).expect("mode").as_str().expect("string"),
        s.m,
        s.n,
        s.iter,
        s.l,
        s.l_f,
        s.seed,
        s.train_samples,
        s.rounds_completed,
        fmt_accuracy(s.final_accuracy),
        s.total_messages,
        s.total_bytes
    )
}

pub fn render_records(rounds: &[RoundRecord], summary: &RunSummary) -> String {
    let mut out = String::new();
    let lines = rounds
        .iter()
        .map(|r| MetricsRecord::Round(r.into()))
        .chain(std::iter::once(MetricsRecord::Summary(summary.clone())));
    for rec in lines {
        out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn render_timings(rounds: &[RoundRecord]) -> String {
    rounds
        .iter()
        .map(|r| {
            let rec = TimingRecord {
                round: r.round,
                timings: r.timings.clone(),
            };
            serde_json::to_string(&rec).expect("timings serialize") + "\n"
        })
        .collect()
}

fn write(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes all three files for a finished (or failed) run.
pub fn write_metrics(cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<MetricsPaths, ExperimentError> {
    let paths = MetricsPaths::for_output(&cfg.output);
    let summary = RunSummary::new(cfg, outcome);
    write(&paths.records, &render_records(&outcome.rounds, &summary))?;
    write(&paths.timings, &render_timings(&outcome.rounds))?;
    write(&paths.summary_csv, &summary_csv(&summary))?;
    Ok(paths)
}

/// The summary record of a metrics file.
pub fn read_summary(path: &Path) -> Result<RunSummary, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .rev()
        .filter(|l| !l.trim().is_empty())
        .find_map(|l| match serde_json::from_str(l) {
            Ok(MetricsRecord::Summary(s)) => Some(s),
            _ => None,
        })
        .ok_or_else(|| ExperimentError::IncompatibleRuns(format!("{} has no summary record", path.display())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableLayout {
    /// Rows by client count, one column per dataset.
    Clients,
    /// Rows by precision, one column per client count.
    Precision,
    /// One row, one column per precision.
    Centralized,
}

impl std::str::FromStr for TableLayout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clients" => Ok(TableLayout::Clients),
            "precision" => Ok(TableLayout::Precision),
            "centralized" => Ok(TableLayout::Centralized),
            other => Err(format!("unknown table layout {other:?}")),
        }
    }
}

fn incompatible(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::IncompatibleRuns(msg.into())
}

fn require_same<T: PartialEq + std::fmt::Debug>(
    runs: &[RunSummary],
    name: &str,
    f: impl Fn(&RunSummary) -> T,
) -> Result<(), ExperimentError> {
    let first = f(&runs[0]);
    match runs.iter().map(&f).find(|v| *v != first) {
        Some(other) => Err(incompatible(format!("runs differ in {name}: {first:?} vs {other:?}"))),
        None => Ok(()),
    }
}

fn dataset_order(d: DatasetKind) -> u8 {
    match d {
        DatasetKind::Mnist => 0,
        DatasetKind::Emnist => 1,
        DatasetKind::Fmnist => 2,
        DatasetKind::Synthetic => 3,
    }
}

/// Builds a CSV table of final accuracies across runs.
pub fn emit_table(runs: &[RunSummary], layout: TableLayout) -> Result<String, ExperimentError> {
    if runs.is_empty() {
        return Err(incompatible("no runs given"));
    }
    require_same(runs, "iter", |r| r.iter)?;
    require_same(runs, "mode", |r| r.mode)?;
    let mut cells: BTreeMap<(u64, u64), Option<f64>> = BTreeMap::new();
    let (mut rows, mut cols) = (BTreeSet::new(), BTreeSet::new());
    let mut put = |row: u64, col: u64, acc: Option<f64>| -> Result<(), ExperimentError> {
        rows.insert(row);
        cols.insert(col);
        if cells.insert((row, col), acc).is_some() {
            return Err(incompatible("two runs fill the same table cell"));
        }
        Ok(())
    };
    let mut out = String::new();
    match layout {
        TableLayout::Clients => {
            require_same(runs, "n", |r| r.n)?;
            require_same(runs, "precision", |r| (r.l, r.l_f))?;
            for r in runs {
                put(r.m as u64, dataset_order(r.dataset) as u64, r.final_accuracy)?;
            }
            let names: BTreeMap<u64, DatasetKind> =
                runs.iter().map(|r| (dataset_order(r.dataset) as u64, r.dataset)).collect();
            out.push_str("clients");
            for c in &cols {
                write!(out, ",{}", names[c]).expect("string write");
            }
            out.push('\n');
            for row in &rows {
                write!(out, "{row}").expect("string write");
                for c in &cols {
                    write!(out, ",{}", fmt_accuracy(cells.get(&(*row, *c)).copied().flatten())).expect("string write");
                }
                out.push('\n');
            }
        }
        TableLayout::Precision => {
            require_same(runs, "dataset", |r| r.dataset)?;
            require_same(runs, "n", |r| r.n)?;
            for r in runs {
                put(r.l_f as u64, r.m as u64, r.final_accuracy)?;
            }
            out.push_str("precision");
            for c in &cols {
                write!(out, ",{c}").expect("string write");
            }
            out.push('\n');
            for row in &rows {
                write!(out, "{}-{row}", runs[0].dataset).expect("string write");
                for c in &cols {
                    write!(out, ",{}", fmt_accuracy(cells.get(&(*row, *c)).copied().flatten())).expect("string write");
                }
                out.push('\n');
            }
        }
        TableLayout::Centralized => {
            require_same(runs, "dataset", |r| r.dataset)?;
            require_same(runs, "m", |r| r.m)?;
            if runs[0].mode != Mode::Centralized {
                return Err(incompatible("the centralized layout needs centralized runs"));
            }
            for r in runs {
                put(0, r.l_f as u64, r.final_accuracy)?;
            }
            out.push_str("setting");
            for c in &cols {
                write!(out, ",{c}-bit").expect("string write");
            }
            out.push_str("\ncentralized");
            for c in &cols {
                write!(out, ",{}", fmt_accuracy(cells.get(&(0, *c)).copied().flatten())).expect("string write");
            }
            out.push('\n');
        }
    }
    Ok(out)
}
