//! Experiment harness: RMSE evaluation, training loop, cross-validation
//! protocol, gradient checking, and COO file I/O.

pub mod coo;
pub mod experiment;
pub mod gradcheck;
pub mod train;

use std::path::Path;

use crate::cp::{reconstruct_entry, FactorMatrices};
use crate::error::{Error, Result};
use crate::model::{predict_entry, DecoderParams, VariationalState};
use crate::tensor::{NormalizationStats, ObservedEntrySet};

pub use coo::{load_coo, save_coo};
pub use experiment::{
    load_dataset, parse_csv_records, prepare_repeat, repeat_split_seed, run_experiment,
    DatasetSpec, ExperimentConfig, ExperimentReport, Method, MethodSummary, Phase,
    QuartileSummary, RepeatData, RepeatStats, RunRecord,
};
pub use gradcheck::gradcheck;
pub use train::{
    smoothed_trace, train_vaecp, train_vaecp_with_validation, TrainConfig, TrainOutcome,
    SMOOTHING_WINDOW,
};

/// Root mean squared error between two equal-length prediction lists.
pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch {
            expected: actual.len(),
            got: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::TooFewEntries { min: 1 });
    }
    let sse: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a) * (p - a))
        .sum();
    Ok((sse / predicted.len() as f64).sqrt())
}

/// A fitted model that can predict single entries.
pub enum FittedModel {
    Vaecp {
        decoder: DecoderParams,
        state: VariationalState,
    },
    Cp(FactorMatrices),
}

impl FittedModel {
    pub fn predict(&self, index: &crate::tensor::MultiIndex) -> Result<f64> {
        match self {
            FittedModel::Vaecp { decoder, state } => predict_entry(decoder, state, index),
            FittedModel::Cp(factors) => reconstruct_entry(factors, index),
        }
    }
}

/// Predicts every test entry and reports the RMSE in normalized units:
/// test values pass through `stats` (training-derived), predictions are
/// already on the normalized scale.
pub fn evaluate(
    model: &FittedModel,
    test: &ObservedEntrySet,
    stats: &NormalizationStats,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::TooFewEntries { min: 1 });
    }
    let predicted: Vec<f64> = test
        .entries()
        .iter()
        .map(|e| model.predict(&e.index))
        .collect::<Result<_>>()?;
    let actual: Vec<f64> = test.values().map(|v| stats.normalize_value(v)).collect();
    rmse(&predicted, &actual)
}

/// Serializes CP factors as JSON.
pub fn save_factors(path: impl AsRef<Path>, factors: &FactorMatrices) -> Result<()> {
    let json = serde_json::to_string(factors)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Loads CP factors saved by [`save_factors`].
pub fn load_factors(path: impl AsRef<Path>) -> Result<FactorMatrices> {
    let json = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&json)?)
}
