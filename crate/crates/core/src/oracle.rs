//! Plaintext reference aggregation.
//!
//! [`fedavg_float`] is federated averaging in `f64`. [`fedavg_quantized`]
//! performs the servers' ring arithmetic on unshared encodings, so it
//! differs from the protocol only by the sharing layer.

use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::nn::{ModelParams, NnError};
use crate::protocol::{initial_weights, Evaluator, LocalTrainer, ProtocolError, RoundConfig};
use crate::ring::{encode, FixedPointConfig, RingError, RingVector};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("no models to average")]
    Empty,
    #[error("model shapes differ")]
    ShapeMismatch,
    #[error(transparent)]
    Overflow(#[from] RingError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

fn check_shapes(models: &[ModelParams]) -> Result<(), OracleError> {
    let first = models.first().ok_or(OracleError::Empty)?;
    if models.iter().any(|m| m.arch() != first.arch()) {
        return Err(OracleError::ShapeMismatch);
    }
    Ok(())
}

pub fn fedavg_float(models: &[ModelParams]) -> Result<ModelParams, OracleError> {
    check_shapes(models)?;
    let inv = 1.0 / models.len() as f64;
    let mut out = ModelParams::zeros(models[0].arch());
    for m in models {
        out.axpy(inv, m);
    }
    Ok(out)
}

pub fn fedavg_quantized(models: &[ModelParams], cfg: FixedPointConfig) -> Result<ModelParams, OracleError> {
    fedavg_quantized_with_divisor(models, cfg, models.len())
}

/// `decode(truncate(encode(1/divisor) * sum_i encode(model_i)))`.
pub fn fedavg_quantized_with_divisor(
    models: &[ModelParams],
    cfg: FixedPointConfig,
    divisor: usize,
) -> Result<ModelParams, OracleError> {
    check_shapes(models)?;
    let mut sum = RingVector::zeros(cfg, models[0].param_count());
    for m in models {
        sum.add_assign(&RingVector::encode(&m.flatten(), cfg)?)?;
    }
    let avg = sum.scale(encode(1.0 / divisor as f64, cfg)?)?.truncate();
    Ok(ModelParams::unflatten(&avg.decode(), models[0].arch())?)
}

/// How the centralized baseline combines local models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Float,
    Quantized(FixedPointConfig),
}

#[derive(Clone, Debug)]
pub struct CentralizedOutput {
    pub final_model: ModelParams,
    /// Accuracy of the aggregate after each round, when an evaluator was given.
    pub accuracy: Vec<f64>,
    pub round_ms: Vec<f64>,
}

/// Single-aggregator federated learning with the same clients, data
/// streams and initial weights as a protocol run under `rc`.
pub fn run_centralized(
    rc: &RoundConfig,
    datasets: Vec<Dataset>,
    aggregation: Aggregation,
    evaluator: Option<Evaluator<'_>>,
) -> Result<CentralizedOutput, OracleError> {
    rc.train.validate()?;
    let mut trainers = datasets
        .into_iter()
        .enumerate()
        .map(|(i, d)| LocalTrainer::new(i as u32 + 1, d, rc))
        .collect::<Result<Vec<_>, _>>()?;
    if trainers.is_empty() {
        return Err(OracleError::Empty);
    }
    let mut weights = initial_weights(rc);
    let (mut accuracy, mut round_ms) = (Vec::new(), Vec::new());
    for _ in 0..rc.iter {
        let start = Instant::now();
        let locals = thread::scope(|s| {
            let handles: Vec<_> = trainers
                .iter_mut()
                .map(|t| {
                    let w = &weights;
                    s.spawn(move || t.train_round(w, rc))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("trainer panicked"))
                .collect::<Result<Vec<_>, _>>()
        })?;
        weights = match aggregation {
            Aggregation::Float => fedavg_float(&locals)?,
            Aggregation::Quantized(cfg) => fedavg_quantized(&locals, cfg)?,
        };
        if let Some(f) = evaluator {
            accuracy.push(f(&weights));
        }
        round_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(CentralizedOutput {
        final_model: weights,
        accuracy,
        round_ms,
    })
}
