//! VAECP training loop: shuffled minibatches, Adam on the flattened
//! parameters, and a 100-step moving-average stopping rule.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::adam_init;
use crate::error::{Error, Result};
use crate::model::{
    elbo_with_grad, flatten_params, predict_entry, write_params, init_model, DecoderParams,
    VariationalState,
};
use crate::tensor::ObservedEntrySet;

use super::rmse;

/// Window of the smoothed-loss convergence rule, in optimizer steps.
pub const SMOOTHING_WINDOW: usize = 100;

/// Hyperparameters for one VAECP training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Latent factor length R.
    pub rank: usize,
    /// Decoder hidden width K.
    pub hidden: usize,
    /// Adam step size.
    pub alpha: f64,
    pub batch_size: usize,
    /// Monte Carlo samples per entry (L).
    pub mc_samples: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Relative change threshold between consecutive 100-step moving
    /// averages of the loss; 0 disables early stopping. Minibatch noise
    /// keeps the smoothed loss fluctuating at the percent level, so
    /// thresholds that large stop at the first plateau; prefer max_epochs
    /// or cross-validated stopping for stochastic runs.
    pub convergence: f64,
}

impl TrainConfig {
    pub fn new(rank: usize, hidden: usize) -> Self {
        TrainConfig {
            rank,
            hidden,
            alpha: 1e-4,
            batch_size: 30,
            mc_samples: 1,
            max_epochs: 300,
            seed: 0,
            convergence: 1e-12,
        }
    }

    fn validate(&self, train_len: usize) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::InvalidRank(self.rank));
        }
        if self.hidden < 1 {
            return Err(Error::InvalidHiddenWidth(self.hidden));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::InvalidStepSize(self.alpha));
        }
        if self.batch_size < 1 || self.mc_samples < 1 || self.max_epochs < 1 {
            return Err(Error::InvalidConfig(
                "batch_size, mc_samples and max_epochs must be >= 1".to_string(),
            ));
        }
        if self.batch_size > train_len {
            return Err(Error::BatchTooLarge {
                batch: self.batch_size,
                train: train_len,
            });
        }
        if self.convergence < 0.0 {
            return Err(Error::InvalidConfig("convergence must be >= 0".to_string()));
        }
        Ok(())
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub decoder: DecoderParams,
    pub state: VariationalState,
    /// Per-step loss (negative lower bound).
    pub loss_trace: Vec<f64>,
    /// Validation RMSE after each epoch, when a validation set was given.
    /// If the stopping rule fires mid-epoch the last entry covers the
    /// partial epoch.
    pub val_rmse: Vec<f64>,
    pub epochs_run: usize,
}

/// Trains on the observed entries; returns the fitted parameters and the
/// full loss trace. Deterministic for a fixed config.
pub fn train_vaecp(
    train: &ObservedEntrySet,
    config: &TrainConfig,
) -> Result<(DecoderParams, VariationalState, Vec<f64>)> {
    let out = train_vaecp_with_validation(train, config, None)?;
    Ok((out.decoder, out.state, out.loss_trace))
}

/// Training loop with optional per-epoch validation RMSE tracking;
/// cross-validation uses the validation trace to pick a stopping epoch.
pub fn train_vaecp_with_validation(
    train: &ObservedEntrySet,
    config: &TrainConfig,
    validation: Option<&ObservedEntrySet>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::TooFewEntries { min: 1 });
    }
    config.validate(train.len())?;

    let (mut theta, mut state) =
        init_model(train.dims(), config.rank, config.hidden, config.seed)?;
    let mut params = flatten_params(&theta, &state);
    let mut adam = adam_init(params.len(), config.alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let total = train.len();
    let mut order: Vec<usize> = (0..total).collect();
    let mut loss_trace: Vec<f64> = Vec::new();
    let mut loss_prefix: Vec<f64> = vec![0.0]; // cumulative sums for the moving average
    let mut val_trace = Vec::new();
    let mut converged = false;
    let mut epochs_run = 0;

    'epochs: for _epoch in 0..config.max_epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(config.batch_size) {
            let step = loss_trace.len();
            let at_step = |e: Error| Error::TrainingStep {
                step,
                source: Box::new(e),
            };
            let batch = train.subset_positions(chunk);
            let batch_seed = rng.next_u64();
            let (report, grads) = elbo_with_grad(
                &theta,
                &state,
                &batch,
                total,
                config.mc_samples,
                batch_seed,
            )
            .map_err(at_step)?;
            let loss = -report.total;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            // Descend the loss: flip the bound's gradients here, nowhere else.
            let step_grads: Vec<f64> = grads.flatten().iter().map(|g| -g).collect();
            adam.step(&mut params, &step_grads).map_err(at_step)?;
            write_params(&params, &mut theta, &mut state)?;

            loss_trace.push(loss);
            loss_prefix.push(loss_prefix.last().unwrap() + loss);

            let t = loss_trace.len();
            let w = SMOOTHING_WINDOW;
            if config.convergence > 0.0 && t >= 2 * w && t.is_multiple_of(w) {
                let ma_now = (loss_prefix[t] - loss_prefix[t - w]) / w as f64;
                let ma_prev = (loss_prefix[t - w] - loss_prefix[t - 2 * w]) / w as f64;
                let rel = (ma_now - ma_prev).abs() / ma_prev.abs().max(1e-12);
                if rel < config.convergence {
                    converged = true;
                }
            }
            if converged {
                epochs_run += 1;
                if let Some(val) = validation {
                    val_trace.push(validation_rmse(&theta, &state, val)?);
                }
                break 'epochs;
            }
        }
        epochs_run += 1;
        if let Some(val) = validation {
            val_trace.push(validation_rmse(&theta, &state, val)?);
        }
    }

    Ok(TrainOutcome {
        decoder: theta,
        state,
        loss_trace,
        val_rmse: val_trace,
        epochs_run,
    })
}

fn validation_rmse(
    theta: &DecoderParams,
    state: &VariationalState,
    val: &ObservedEntrySet,
) -> Result<f64> {
    let predicted: Vec<f64> = val
        .entries()
        .iter()
        .map(|e| predict_entry(theta, state, &e.index))
        .collect::<Result<_>>()?;
    let actual: Vec<f64> = val.values().collect();
    rmse(&predicted, &actual)
}

/// Moving average of `trace` over [`SMOOTHING_WINDOW`]-sized windows;
/// entry `i` covers steps `i .. i + window`.
pub fn smoothed_trace(trace: &[f64]) -> Vec<f64> {
    let w = SMOOTHING_WINDOW;
    if trace.len() < w {
        return vec![];
    }
    let mut prefix = vec![0.0];
    for v in trace {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..=trace.len() - w)
        .map(|i| (prefix[i + w] - prefix[i]) / w as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::elbo_minibatch;
    use crate::tensor::{generate_synthetic, normalize};

    fn small_training_set() -> ObservedEntrySet {
        let (tensor, _) = generate_synthetic(&[6, 6, 6], 2, 0.1, 11).unwrap();
        normalize(&tensor.to_observed()).unwrap().0
    }

    #[test]
    fn full_batch_kl_scale_is_one() {
        let train = small_training_set();
        let (theta, state) = init_model(train.dims(), 2, 4, 3).unwrap();
        let report = elbo_minibatch(&theta, &state, &train, train.len(), 1, 5).unwrap();
        assert_eq!(report.kl_term, state.kl_total());
    }

    #[test]
    fn training_reduces_smoothed_loss() {
        let train = small_training_set();
        let mut config = TrainConfig::new(2, 8);
        config.batch_size = 20;
        config.max_epochs = 40;
        config.alpha = 2e-3;
        config.seed = 7;
        config.convergence = 0.0;
        let (_, _, trace) = train_vaecp(&train, &config).unwrap();
        let smoothed = smoothed_trace(&trace);
        assert!(smoothed.len() > 2);
        let first = smoothed[0];
        let last = *smoothed.last().unwrap();
        assert!(
            last < first,
            "smoothed loss did not improve: first {first}, last {last}"
        );
        assert!(trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn training_is_deterministic() {
        let train = small_training_set();
        let mut config = TrainConfig::new(2, 4);
        config.max_epochs = 3;
        config.seed = 9;
        let (ta, sa, la) = train_vaecp(&train, &config).unwrap();
        let (tb, sb, lb) = train_vaecp(&train, &config).unwrap();
        assert_eq!(la, lb);
        assert_eq!(flatten_params(&ta, &sa), flatten_params(&tb, &sb));
    }

    #[test]
    fn batch_larger_than_train_is_rejected() {
        let train = small_training_set();
        let mut config = TrainConfig::new(2, 4);
        config.batch_size = train.len() + 1;
        assert!(matches!(
            train_vaecp(&train, &config).unwrap_err(),
            Error::BatchTooLarge { .. }
        ));
    }

    #[test]
    fn numeric_failures_carry_the_step_index() {
        // Values large enough to overflow the squared residual.
        let train = small_training_set().map_values(|v| v + 1e200);
        let mut config = TrainConfig::new(2, 4);
        config.max_epochs = 1;
        match train_vaecp(&train, &config).unwrap_err() {
            Error::TrainingStep { step, source } => {
                assert_eq!(step, 0);
                assert!(matches!(*source, Error::NonFiniteEntry { .. }));
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn validation_trace_has_one_value_per_epoch() {
        let train = small_training_set();
        let (tensor, _) = generate_synthetic(&[6, 6, 6], 2, 0.1, 12).unwrap();
        let val = normalize(&tensor.to_observed()).unwrap().0;
        let mut config = TrainConfig::new(2, 4);
        config.max_epochs = 5;
        config.convergence = 0.0;
        let out = train_vaecp_with_validation(&train, &config, Some(&val)).unwrap();
        assert_eq!(out.val_rmse.len(), 5);
        assert_eq!(out.epochs_run, 5);
        assert!(out.val_rmse.iter().all(|v| v.is_finite()));
    }
}
