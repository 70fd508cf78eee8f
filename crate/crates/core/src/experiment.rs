//! End-to-end experiments: configuration, data preparation and the
//! in-process runners behind the command-line tool.

use std::env;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_dir, partition_clients, split_train_test, synthetic_dataset, DataError, Dataset, DatasetKind, CLASSES};
use crate::nn::{evaluate_samples, ModelParams, TrainConfig};
use crate::oracle::{run_centralized, Aggregation, OracleError};
use crate::protocol::{
    DivisorMode, ProtocolError, RoundConfig, RoundRecord, RoundTimings, RunOptions, TransportKind,
};
use crate::ring::{FixedPointConfig, RingError};
use crate::seed::stream;
use crate::transport::TransportError;
use crate::Execution;

pub const DATA_DIR_ENV: &str = "SCOTCH_DATA_DIR";
pub const TRAIN_RATIO: f64 = 0.7;
pub const SYNTHETIC_SAMPLES: usize = 3000;

/// Which aggregation pipeline an experiment runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Secret-shared aggregation across `n` servers.
    #[default]
    Protocol,
    /// One aggregator averaging fixed-point encodings in the clear.
    Centralized,
    /// One aggregator averaging in `f64`.
    Float,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "protocol" => Ok(Mode::Protocol),
            "centralized" => Ok(Mode::Centralized),
            "float" => Ok(Mode::Float),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
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
    pub transport: TransportKind,
    pub listen_base_port: u16,
    pub timeout_ms: u64,
    pub output: PathBuf,
    /// Cap on training samples after the split; 0 keeps all of them.
    pub max_samples: usize,
    pub mode: Mode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            data_dir: None,
            m: 3,
            n: 3,
            iter: 4,
            l: 128,
            l_f: 32,
            lr: 0.01,
            epochs: 3,
            batch_size: 1,
            seed: 1,
            divisor_mode: DivisorMode::Clients,
            transport: TransportKind::Loopback,
            listen_base_port: 0,
            timeout_ms: 600_000,
            output: PathBuf::from("metrics.jsonl"),
            max_samples: 12_000,
            mode: Mode::Protocol,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset not found: {0}")]
    DataNotFound(String),
    #[error(transparent)]
    Data(DataError),
    #[error(transparent)]
    Protocol(ProtocolError),
    #[error(transparent)]
    Oracle(OracleError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("incompatible runs: {0}")]
    IncompatibleRuns(String),
    /// A failure reported by a participant running in another process.
    #[error("{message}")]
    Remote { message: String, exit_code: i32 },
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::IncompatibleRuns(_) => 2,
            ExperimentError::DataNotFound(_) => 3,
            ExperimentError::Protocol(
                ProtocolError::Transport(_) | ProtocolError::Frame(_) | ProtocolError::IncompleteRound { .. },
            ) => 4,
            ExperimentError::Protocol(ProtocolError::Config(_)) => 2,
            ExperimentError::Remote { exit_code, .. } => *exit_code,
            _ => 1,
        }
    }
}

impl From<DataError> for ExperimentError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::DataNotFound { .. } => ExperimentError::DataNotFound(e.to_string()),
            other => ExperimentError::Data(other),
        }
    }
}

impl From<ProtocolError> for ExperimentError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Data(d) => d.into(),
            ProtocolError::Config(msg) => ExperimentError::Config(msg),
            other => ExperimentError::Protocol(other),
        }
    }
}

impl From<OracleError> for ExperimentError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Protocol(p) => p.into(),
            other => ExperimentError::Oracle(other),
        }
    }
}

impl From<TransportError> for ExperimentError {
    fn from(e: TransportError) -> Self {
        ExperimentError::Protocol(e.into())
    }
}

impl From<RingError> for ExperimentError {
    fn from(e: RingError) -> Self {
        ExperimentError::Config(e.to_string())
    }
}

impl ExperimentConfig {
    pub fn fixed_point(&self) -> Result<FixedPointConfig, ExperimentError> {
        Ok(FixedPointConfig::new(self.l, self.l_f)?)
    }

    /// Protocol parameters for this experiment. Fails on any value the
    /// protocol would reject.
    pub fn round_config(&self) -> Result<RoundConfig, ExperimentError> {
        let mut rc = RoundConfig::new(self.m, self.n, self.iter, self.fixed_point()?, self.seed);
        rc.train = TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            exec: Execution::default(),
        };
        rc.divisor_mode = self.divisor_mode;
        rc.timeout = Duration::from_millis(self.timeout_ms);
        match self.mode {
            Mode::Protocol => rc.validate()?,
            Mode::Centralized | Mode::Float => {
                rc.n = 1;
                rc.validate()?;
            }
        }
        if self.timeout_ms == 0 {
            return Err(ExperimentError::Config("timeout-ms must be positive".into()));
        }
        Ok(rc)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.round_config().map(drop)
    }

    /// The configured directory, else `$SCOTCH_DATA_DIR`.
    pub fn resolved_data_dir(&self) -> Result<PathBuf, ExperimentError> {
        self.data_dir
            .clone()
            .or_else(|| env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| {
                ExperimentError::DataNotFound(format!("no data directory given and {DATA_DIR_ENV} is not set"))
            })
    }
}

/// Client partitions and the held-out test set.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub clients: Vec<Dataset>,
    pub test: Dataset,
}

impl PreparedData {
    pub fn train_samples(&self) -> usize {
        self.clients.iter().map(Dataset::len).sum()
    }
}

/// Loads (or generates) the dataset, splits it 70/30 under the run seed,
/// caps the training part at `max_samples` and partitions it across clients.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, ExperimentError> {
    let all = match cfg.dataset {
        DatasetKind::Synthetic => synthetic_dataset(cfg.seed, SYNTHETIC_SAMPLES, CLASSES)?,
        kind => load_dir(kind, &cfg.resolved_data_dir()?)?,
    };
    let (mut train, test) = split_train_test(&all, TRAIN_RATIO, &mut stream(cfg.seed, "split", &[]))?;
    if cfg.max_samples > 0 && train.len() > cfg.max_samples {
        train = train.head(cfg.max_samples);
    }
    if train.len() < cfg.m * cfg.iter {
        return Err(ExperimentError::Config(format!(
            "{} training samples cannot feed {} clients for {} rounds",
            train.len(),
            cfg.m,
            cfg.iter
        )));
    }
    Ok(PreparedData {
        clients: partition_clients(&train, cfg.m)?,
        test,
    })
}

/// Rounds completed by a run, plus the error that stopped it early.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub rounds: Vec<RoundRecord>,
    pub final_model: Option<ModelParams>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub error: Option<ExperimentError>,
}

/// Runs the experiment in this process. Socket transport here means one
/// thread per participant over real TCP connections.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    let rc = cfg.round_config()?;
    let data = prepare_data(cfg)?;
    let (train_samples, test_samples) = (data.train_samples(), data.test.len());
    let test = data.test;
    let eval = |p: &ModelParams| evaluate_samples(p, &test, rc.train.exec).unwrap_or(f64::NAN);
    let mut outcome = ExperimentOutcome {
        rounds: Vec::new(),
        final_model: None,
        train_samples,
        test_samples,
        error: None,
    };
    match cfg.mode {
        Mode::Protocol => {
            let opts = RunOptions {
                transport: cfg.transport,
                evaluator: Some(&eval),
                ..Default::default()
            };
            match crate::protocol::run_protocol(&rc, data.clients, &opts) {
                Ok(out) => {
                    outcome.rounds = out.rounds;
                    outcome.final_model = Some(out.final_model);
                }
                Err(e) => {
                    outcome.rounds = e.partial;
                    outcome.error = Some(e.source.into());
                }
            }
        }
        Mode::Centralized | Mode::Float => {
            let aggregation = match cfg.mode {
                Mode::Centralized => Aggregation::Quantized(rc.cfg),
                _ => Aggregation::Float,
            };
            let out = run_centralized(&rc, data.clients, aggregation, Some(&eval))?;
            outcome.rounds = out
                .accuracy
                .iter()
                .zip(&out.round_ms)
                .enumerate()
                .map(|(k, (&acc, &ms))| RoundRecord {
                    round: k as u32 + 1,
                    test_accuracy: Some(acc),
                    timings: RoundTimings {
                        wall_ms: ms,
                        ..Default::default()
                    },
                    ..Default::default()
                })
                .collect();
            outcome.final_model = Some(out.final_model);
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(m: usize, n: usize) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetKind::Synthetic,
            m,
            n,
            iter: 2,
            ..Default::default()
        }
    }

    #[test]
    fn prepares_disjoint_partitions() {
        let cfg = synthetic(3, 2);
        let d = prepare_data(&cfg).unwrap();
        assert_eq!(d.train_samples() + d.test.len(), SYNTHETIC_SAMPLES);
        assert_eq!(d.test.len(), 900);
        assert_eq!(d.clients.iter().map(Dataset::len).collect::<Vec<_>>(), vec![700, 700, 700]);
        let capped = prepare_data(&ExperimentConfig {
            max_samples: 300,
            ..cfg
        })
        .unwrap();
        assert_eq!(capped.train_samples(), 300);
        assert_eq!(capped.test.len(), 900);
    }

    #[test]
    fn config_errors_map_to_exit_codes() {
        let bad = ExperimentConfig {
            l: 64,
            ..synthetic(2, 2)
        };
        let e = bad.validate().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let missing = ExperimentConfig {
            data_dir: Some(PathBuf::from("/nonexistent/mnist")),
            ..Default::default()
        };
        assert_eq!(prepare_data(&missing).unwrap_err().exit_code(), 3);
        let centralized = ExperimentConfig {
            l: 64,
            l_f: 4,
            n: 0,
            mode: Mode::Centralized,
            ..synthetic(2, 2)
        };
        centralized.validate().unwrap();
    }

    #[test]
    fn synthetic_runs_learn_in_every_mode() {
        for mode in [Mode::Protocol, Mode::Centralized, Mode::Float] {
            let cfg = ExperimentConfig {
                mode,
                ..synthetic(2, 2)
            };
            let out = run_experiment(&cfg).unwrap();
            assert!(out.error.is_none());
            assert_eq!(out.rounds.len(), 2);
            assert!(out.rounds[1].test_accuracy.unwrap() > 0.8, "{mode:?}");
        }
    }
}
