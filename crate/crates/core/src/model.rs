//! The VAECP model: free-form Gaussian posteriors over CP factor rows, a
//! single learned prior shared by every row, a one-hidden-layer tanh
//! decoder producing a Gaussian mean and log-variance per tensor entry,
//! and the reparameterized evidence lower bound over minibatches of
//! observed entries.
//!
//! Precisions are stored and optimized in the log domain so that
//! unconstrained gradient updates keep them positive. Gradients are
//! hand-derived backpropagation through the decoder, the Gaussian
//! log-density, the reparameterization and the closed-form KL; finite
//! differences (see the harness gradcheck) are the arbiter of
//! correctness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mat::{dot, Matrix};
use crate::tensor::{MultiIndex, ObservedEntrySet};

/// Diagonal Gaussian posterior for one factor row: mean vector and
/// log-precision vector, both of length R.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPosterior {
    pub mean: Vec<f64>,
    pub log_precision: Vec<f64>,
}

impl RowPosterior {
    pub fn rank(&self) -> usize {
        self.mean.len()
    }

    /// Reparameterized draw: mean + exp(-log_precision/2) * epsilon.
    pub fn sample(&self, epsilon: &[f64]) -> Result<Vec<f64>> {
        if epsilon.len() != self.mean.len() {
            return Err(Error::LengthMismatch {
                expected: self.mean.len(),
                got: epsilon.len(),
            });
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_precision)
            .zip(epsilon)
            .map(|((&m, &lp), &e)| m + (-0.5 * lp).exp() * e)
            .collect())
    }
}

fn kl_diag(mean: &[f64], log_prec: &[f64], prior_mean: &[f64], prior_log_prec: &[f64]) -> f64 {
    let mut total = 0.0;
    for r in 0..mean.len() {
        let lam = log_prec[r].exp();
        let lam_p = prior_log_prec[r].exp();
        let dm = mean[r] - prior_mean[r];
        total += 0.5 * (lam_p / lam + lam_p * dm * dm - 1.0 + log_prec[r] - prior_log_prec[r]);
    }
    total
}

/// Closed-form KL divergence between diagonal Gaussians parameterized by
/// precisions: 0.5 * sum(prior_prec/prec + prior_prec*(dm)^2 - 1
/// + log prec - log prior_prec).
pub fn kl_row(post: &RowPosterior, prior_mean: &[f64], prior_log_precision: &[f64]) -> Result<f64> {
    let r = post.rank();
    if prior_mean.len() != r || prior_log_precision.len() != r || post.log_precision.len() != r {
        return Err(Error::LengthMismatch {
            expected: r,
            got: prior_mean.len().min(prior_log_precision.len()),
        });
    }
    Ok(kl_diag(&post.mean, &post.log_precision, prior_mean, prior_log_precision))
}

/// Per-mode, per-row posteriors plus the single learned prior shared by
/// all rows of all modes.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    dims: Vec<usize>,
    rank: usize,
    rows: Vec<Vec<RowPosterior>>,
    pub prior_mean: Vec<f64>,
    pub prior_log_precision: Vec<f64>,
}

impl VariationalState {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn modes(&self) -> usize {
        self.dims.len()
    }

    pub fn row(&self, mode: usize, index: usize) -> &RowPosterior {
        &self.rows[mode][index]
    }

    pub fn row_mut(&mut self, mode: usize, index: usize) -> &mut RowPosterior {
        &mut self.rows[mode][index]
    }

    /// Total row count across modes.
    pub fn num_rows(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Sum of [`kl_row`] over every posterior row against the shared prior.
    pub fn kl_total(&self) -> f64 {
        self.rows
            .iter()
            .flatten()
            .map(|row| {
                kl_diag(
                    &row.mean,
                    &row.log_precision,
                    &self.prior_mean,
                    &self.prior_log_precision,
                )
            })
            .sum()
    }

    /// Same shape, all values zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        VariationalState {
            dims: self.dims.clone(),
            rank: self.rank,
            rows: self
                .dims
                .iter()
                .map(|&n| {
                    (0..n)
                        .map(|_| RowPosterior {
                            mean: vec![0.0; self.rank],
                            log_precision: vec![0.0; self.rank],
                        })
                        .collect()
                })
                .collect(),
            prior_mean: vec![0.0; self.rank],
            prior_log_precision: vec![0.0; self.rank],
        }
    }
}

/// Decoder weights: shared tanh hidden layer of width K over the
/// concatenated factor rows, plus affine mean and log-variance heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    w: Matrix, // K x (modes * rank)
    b: Vec<f64>,
    w_mu: Vec<f64>,
    b_mu: f64,
    w_sigma: Vec<f64>,
    b_sigma: f64,
    modes: usize,
    rank: usize,
}

impl DecoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w: Matrix,
        b: Vec<f64>,
        w_mu: Vec<f64>,
        b_mu: f64,
        w_sigma: Vec<f64>,
        b_sigma: f64,
        modes: usize,
        rank: usize,
    ) -> Result<Self> {
        let hidden = w.rows();
        if hidden < 1 {
            return Err(Error::InvalidHiddenWidth(hidden));
        }
        if rank < 1 {
            return Err(Error::InvalidRank(rank));
        }
        if w.cols() != modes * rank {
            return Err(Error::LengthMismatch {
                expected: modes * rank,
                got: w.cols(),
            });
        }
        for len in [b.len(), w_mu.len(), w_sigma.len()] {
            if len != hidden {
                return Err(Error::LengthMismatch {
                    expected: hidden,
                    got: len,
                });
            }
        }
        Ok(DecoderParams {
            w,
            b,
            w_mu,
            b_mu,
            w_sigma,
            b_sigma,
            modes,
            rank,
        })
    }

    pub fn hidden(&self) -> usize {
        self.b.len()
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn input_len(&self) -> usize {
        self.modes * self.rank
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn w_mu(&self) -> &[f64] {
        &self.w_mu
    }

    pub fn b_mu(&self) -> f64 {
        self.b_mu
    }

    pub fn w_sigma(&self) -> &[f64] {
        &self.w_sigma
    }

    pub fn b_sigma(&self) -> f64 {
        self.b_sigma
    }

    fn zeros_like(&self) -> Self {
        DecoderParams {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: vec![0.0; self.b.len()],
            w_mu: vec![0.0; self.w_mu.len()],
            b_mu: 0.0,
            w_sigma: vec![0.0; self.w_sigma.len()],
            b_sigma: 0.0,
            modes: self.modes,
            rank: self.rank,
        }
    }

    fn hidden_activations(&self, u: &[f64]) -> Vec<f64> {
        let mut z = self.w.matvec(u);
        for (zk, bk) in z.iter_mut().zip(&self.b) {
            *zk = (*zk + bk).tanh();
        }
        z
    }

    /// Maps the concatenated factor rows to the entry's Gaussian
    /// parameters (mean, log variance).
    pub fn decode(&self, u: &[f64]) -> Result<(f64, f64)> {
        if u.len() != self.input_len() {
            return Err(Error::LengthMismatch {
                expected: self.input_len(),
                got: u.len(),
            });
        }
        let h = self.hidden_activations(u);
        Ok((
            dot(&self.w_mu, &h) + self.b_mu,
            dot(&self.w_sigma, &h) + self.b_sigma,
        ))
    }
}

/// Lower-bound value over one minibatch; `total = recon_term - kl_term`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboReport {
    pub total: f64,
    pub recon_term: f64,
    pub kl_term: f64,
    pub entry_count: usize,
}

/// Gradients of the lower bound with respect to every parameter, stored
/// in parameter-shaped containers. `state.prior_mean` holds the gradient
/// for the prior mean, row posteriors hold per-row gradients, and so on;
/// log-precision slots hold derivatives with respect to the log-domain
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradients {
    pub decoder: DecoderParams,
    pub state: VariationalState,
}

impl ElboGradients {
    pub fn flatten(&self) -> Vec<f64> {
        flatten_params(&self.decoder, &self.state)
    }
}

/// Standard-normal noise for one (entry, sample) pair, one vector per
/// mode. The derivation is deterministic: ChaCha8 seeded by `seed` on
/// stream `(entry_pos << 16) | sample`, so every batch entry gets
/// independent noise that both the bound and its gradients reproduce
/// exactly. `sample` must be below 2^16.
pub fn entry_epsilons(
    seed: u64,
    entry_pos: usize,
    sample: usize,
    modes: usize,
    rank: usize,
) -> Vec<Vec<f64>> {
    debug_assert!(sample < (1 << 16));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((entry_pos as u64) << 16) | (sample as u64 & 0xFFFF));
    (0..modes)
        .map(|_| (0..rank).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

fn check_batch(
    theta: &DecoderParams,
    state: &VariationalState,
    batch: &ObservedEntrySet,
    total_observed: usize,
    mc_samples: usize,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::TooFewEntries { min: 1 });
    }
    if mc_samples < 1 {
        return Err(Error::InvalidSampleCount);
    }
    if total_observed < batch.len() {
        return Err(Error::TotalSmallerThanBatch {
            total: total_observed,
            batch: batch.len(),
        });
    }
    if batch.dims() != state.dims() {
        return Err(Error::MismatchedDims {
            factor_dims: state.dims().to_vec(),
            dims: batch.dims().to_vec(),
        });
    }
    if theta.modes() != state.modes() || theta.rank() != state.rank() {
        return Err(Error::LengthMismatch {
            expected: state.modes() * state.rank(),
            got: theta.input_len(),
        });
    }
    Ok(())
}

fn elbo_core(
    theta: &DecoderParams,
    state: &VariationalState,
    batch: &ObservedEntrySet,
    total_observed: usize,
    mc_samples: usize,
    seed: u64,
    mut grads: Option<&mut ElboGradients>,
) -> Result<ElboReport> {
    check_batch(theta, state, batch, total_observed, mc_samples)?;
    let modes = state.modes();
    let rank = state.rank();
    let dr = modes * rank;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let inv_l = 1.0 / mc_samples as f64;

    let mut recon = 0.0;
    let mut u = vec![0.0; dr];
    let mut sample_scale = vec![0.0; dr]; // exp(-log_precision/2) per input slot

    for (pos, entry) in batch.entries().iter().enumerate() {
        let idx = entry.index.indices();
        for l in 0..mc_samples {
            let eps = entry_epsilons(seed, pos, l, modes, rank);
            for d in 0..modes {
                let row = state.row(d, idx[d]);
                for r in 0..rank {
                    let s = (-0.5 * row.log_precision[r]).exp();
                    sample_scale[d * rank + r] = s;
                    u[d * rank + r] = row.mean[r] + s * eps[d][r];
                }
            }
            let h = theta.hidden_activations(&u);
            let mu = dot(&theta.w_mu, &h) + theta.b_mu;
            let g = dot(&theta.w_sigma, &h) + theta.b_sigma;
            let sigma2 = g.exp();
            let diff = entry.value - mu;
            let ll = -0.5 * ln_2pi - 0.5 * g - diff * diff / (2.0 * sigma2);
            if !ll.is_finite() {
                return Err(Error::NonFiniteEntry {
                    quantity: "log-likelihood",
                    index: idx.to_vec(),
                    position: pos,
                });
            }
            recon += inv_l * ll;

            if let Some(acc) = grads.as_deref_mut() {
                let dmu = diff / sigma2;
                let dg = 0.5 * (diff * diff / sigma2 - 1.0);
                if !dmu.is_finite() || !dg.is_finite() {
                    return Err(Error::NonFiniteEntry {
                        quantity: "likelihood gradient",
                        index: idx.to_vec(),
                        position: pos,
                    });
                }
                let mut dz = vec![0.0; theta.hidden()];
                for k in 0..theta.hidden() {
                    let dh = dmu * theta.w_mu[k] + dg * theta.w_sigma[k];
                    dz[k] = dh * (1.0 - h[k] * h[k]);
                    acc.decoder.w_mu[k] += inv_l * dmu * h[k];
                    acc.decoder.w_sigma[k] += inv_l * dg * h[k];
                    acc.decoder.b[k] += inv_l * dz[k];
                }
                acc.decoder.b_mu += inv_l * dmu;
                acc.decoder.b_sigma += inv_l * dg;
                acc.decoder.w.add_scaled_outer(inv_l, &dz, &u);
                let du = theta.w.tr_matvec(&dz);
                for d in 0..modes {
                    let row_grad = acc.state.row_mut(d, idx[d]);
                    for r in 0..rank {
                        let slot = d * rank + r;
                        row_grad.mean[r] += inv_l * du[slot];
                        row_grad.log_precision[r] +=
                            inv_l * du[slot] * (-0.5) * sample_scale[slot] * eps[d][r];
                    }
                }
            }
        }
    }

    // Minibatch-scaled KL over every posterior row against the shared
    // prior; an unbiased estimator of the full-data objective.
    let scale = batch.len() as f64 / total_observed as f64;
    let prior_prec: Vec<f64> = state.prior_log_precision.iter().map(|lp| lp.exp()).collect();
    let mut kl_sum = 0.0;
    for d in 0..modes {
        for i in 0..state.dims()[d] {
            let row = state.row(d, i);
            let mut row_kl = 0.0;
            for r in 0..rank {
                let lam = row.log_precision[r].exp();
                let dm = row.mean[r] - state.prior_mean[r];
                row_kl += 0.5
                    * (prior_prec[r] / lam + prior_prec[r] * dm * dm - 1.0
                        + row.log_precision[r]
                        - state.prior_log_precision[r]);
                if let Some(acc) = grads.as_deref_mut() {
                    let row_grad = acc.state.row_mut(d, i);
                    row_grad.mean[r] -= scale * prior_prec[r] * dm;
                    row_grad.log_precision[r] -= scale * 0.5 * (1.0 - prior_prec[r] / lam);
                    acc.state.prior_mean[r] += scale * prior_prec[r] * dm;
                    acc.state.prior_log_precision[r] -=
                        scale * 0.5 * (prior_prec[r] / lam + prior_prec[r] * dm * dm - 1.0);
                }
            }
            kl_sum += row_kl;
        }
    }
    let kl_term = scale * kl_sum;
    let total = recon - kl_term;
    if !total.is_finite() {
        return Err(Error::NonFiniteEntry {
            quantity: "lower bound",
            index: vec![],
            position: 0,
        });
    }
    Ok(ElboReport {
        total,
        recon_term: recon,
        kl_term,
        entry_count: batch.len(),
    })
}

/// Reparameterized Monte Carlo lower bound over a minibatch:
/// per-entry expected log-likelihood (averaged over `mc_samples` draws)
/// minus the full-state KL scaled by `|batch| / total_observed`.
/// Deterministic for a fixed seed.
pub fn elbo_minibatch(
    theta: &DecoderParams,
    state: &VariationalState,
    batch: &ObservedEntrySet,
    total_observed: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<ElboReport> {
    elbo_core(theta, state, batch, total_observed, mc_samples, seed, None)
}

/// Analytic gradients of [`elbo_minibatch`] with respect to every
/// decoder, posterior and prior parameter, using the same frozen noise as
/// the bound itself for equal seeds.
pub fn grad_elbo_minibatch(
    theta: &DecoderParams,
    state: &VariationalState,
    batch: &ObservedEntrySet,
    total_observed: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<ElboGradients> {
    Ok(elbo_with_grad(theta, state, batch, total_observed, mc_samples, seed)?.1)
}

/// Bound and gradients in one pass; the training loop's workhorse.
pub fn elbo_with_grad(
    theta: &DecoderParams,
    state: &VariationalState,
    batch: &ObservedEntrySet,
    total_observed: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<(ElboReport, ElboGradients)> {
    let mut grads = ElboGradients {
        decoder: theta.zeros_like(),
        state: state.zeros_like(),
    };
    let report = elbo_core(
        theta,
        state,
        batch,
        total_observed,
        mc_samples,
        seed,
        Some(&mut grads),
    )?;
    Ok((report, grads))
}

/// Plug-in prediction: decode the concatenated posterior means and return
/// the decoder mean, ignoring the variance head.
pub fn predict_entry(
    theta: &DecoderParams,
    state: &VariationalState,
    index: &MultiIndex,
) -> Result<f64> {
    index.check(state.dims())?;
    let rank = state.rank();
    let mut u = vec![0.0; state.modes() * rank];
    for (d, &i) in index.indices().iter().enumerate() {
        u[d * rank..(d + 1) * rank].copy_from_slice(&state.row(d, i).mean);
    }
    Ok(theta.decode(&u)?.0)
}

/// Fresh model: fan-in scaled random decoder weights, zero biases,
/// standard normal posterior means, tight posterior variances, standard
/// normal prior. Deterministic for a fixed seed.
pub fn init_model(
    dims: &[usize],
    rank: usize,
    hidden: usize,
    seed: u64,
) -> Result<(DecoderParams, VariationalState)> {
    if rank < 1 {
        return Err(Error::InvalidRank(rank));
    }
    if hidden < 1 {
        return Err(Error::InvalidHiddenWidth(hidden));
    }
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidDims {
            dims: dims.to_vec(),
        });
    }
    let modes = dims.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fan-in scaled weights; tiny weights leave the mean head unable to
    // escape the predict-zero optimum under Adam at small step sizes.
    let hidden_std = 1.0 / ((modes * rank) as f64).sqrt();
    let head_std = 1.0 / (hidden as f64).sqrt();
    // Posteriors start tight (variance 0.01) so the decoder trains on
    // near-deterministic inputs; precisions relax through the KL term.
    let init_log_precision = 100.0f64.ln();
    let w = Matrix::from_fn(hidden, modes * rank, |_, _| {
        hidden_std * rng.sample::<f64, _>(StandardNormal)
    });
    let w_mu: Vec<f64> = (0..hidden)
        .map(|_| head_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let w_sigma: Vec<f64> = (0..hidden)
        .map(|_| head_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let theta = DecoderParams::new(
        w,
        vec![0.0; hidden],
        w_mu,
        0.0,
        w_sigma,
        0.0,
        modes,
        rank,
    )?;
    let rows = dims
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| RowPosterior {
                    mean: (0..rank).map(|_| rng.sample(StandardNormal)).collect(),
                    log_precision: vec![init_log_precision; rank],
                })
                .collect()
        })
        .collect();
    let state = VariationalState {
        dims: dims.to_vec(),
        rank,
        rows,
        prior_mean: vec![0.0; rank],
        prior_log_precision: vec![0.0; rank],
    };
    Ok((theta, state))
}

/// Builds a [`VariationalState`] from explicit parts; shapes validated.
pub fn variational_state_from_parts(
    dims: Vec<usize>,
    rank: usize,
    rows: Vec<Vec<RowPosterior>>,
    prior_mean: Vec<f64>,
    prior_log_precision: Vec<f64>,
) -> Result<VariationalState> {
    if rows.len() != dims.len() || rows.iter().zip(&dims) .any(|(m, &n)| m.len() != n) {
        return Err(Error::InvalidDims { dims });
    }
    for row in rows.iter().flatten() {
        if row.mean.len() != rank || row.log_precision.len() != rank {
            return Err(Error::LengthMismatch {
                expected: rank,
                got: row.mean.len(),
            });
        }
    }
    if prior_mean.len() != rank || prior_log_precision.len() != rank {
        return Err(Error::LengthMismatch {
            expected: rank,
            got: prior_mean.len(),
        });
    }
    Ok(VariationalState {
        dims,
        rank,
        rows,
        prior_mean,
        prior_log_precision,
    })
}

/// Number of scalar parameters in (theta, state).
pub fn param_count(theta: &DecoderParams, state: &VariationalState) -> usize {
    let k = theta.hidden();
    let dr = theta.input_len();
    k * dr + 3 * k + 2 + (state.num_rows() + 1) * 2 * state.rank()
}

/// Flattens all parameters into one vector. Layout: decoder weight matrix
/// row-major, hidden bias, mean head weights, mean head bias, variance
/// head weights, variance head bias; then per mode, per row: posterior
/// mean then log-precision; finally prior mean and prior log-precision.
pub fn flatten_params(theta: &DecoderParams, state: &VariationalState) -> Vec<f64> {
    let mut flat = Vec::with_capacity(param_count(theta, state));
    flat.extend_from_slice(theta.w.as_slice());
    flat.extend_from_slice(&theta.b);
    flat.extend_from_slice(&theta.w_mu);
    flat.push(theta.b_mu);
    flat.extend_from_slice(&theta.w_sigma);
    flat.push(theta.b_sigma);
    for mode_rows in &state.rows {
        for row in mode_rows {
            flat.extend_from_slice(&row.mean);
            flat.extend_from_slice(&row.log_precision);
        }
    }
    flat.extend_from_slice(&state.prior_mean);
    flat.extend_from_slice(&state.prior_log_precision);
    flat
}

/// Writes a flat vector produced by [`flatten_params`] back into the
/// parameter structures.
pub fn write_params(
    flat: &[f64],
    theta: &mut DecoderParams,
    state: &mut VariationalState,
) -> Result<()> {
    let expected = param_count(theta, state);
    if flat.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            got: flat.len(),
        });
    }
    let mut pos = 0;
    let mut take = |n: usize| {
        let slice = &flat[pos..pos + n];
        pos += n;
        slice
    };
    let wlen = theta.w.rows() * theta.w.cols();
    theta.w.as_mut_slice().copy_from_slice(take(wlen));
    let k = theta.hidden();
    theta.b.copy_from_slice(take(k));
    theta.w_mu.copy_from_slice(take(k));
    theta.b_mu = take(1)[0];
    theta.w_sigma.copy_from_slice(take(k));
    theta.b_sigma = take(1)[0];
    let rank = state.rank;
    for mode_rows in &mut state.rows {
        for row in mode_rows {
            row.mean.copy_from_slice(take(rank));
            row.log_precision.copy_from_slice(take(rank));
        }
    }
    state.prior_mean.copy_from_slice(take(rank));
    state.prior_log_precision.copy_from_slice(take(rank));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ObservedEntry, ObservedEntrySet};
    use proptest::prelude::*;

    fn single_entry_batch(dims: Vec<usize>, index: Vec<usize>, value: f64) -> ObservedEntrySet {
        ObservedEntrySet::new(
            dims,
            vec![ObservedEntry {
                index: MultiIndex::new(index),
                value,
            }],
        )
        .unwrap()
    }

    /// State whose every posterior equals the shared prior.
    fn prior_matched_state(dims: &[usize], rank: usize) -> VariationalState {
        let rows = dims
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| RowPosterior {
                        mean: vec![0.0; rank],
                        log_precision: vec![0.0; rank],
                    })
                    .collect()
            })
            .collect();
        variational_state_from_parts(dims.to_vec(), rank, rows, vec![0.0; rank], vec![0.0; rank])
            .unwrap()
    }

    fn constant_decoder(modes: usize, rank: usize, hidden: usize, b_mu: f64) -> DecoderParams {
        DecoderParams::new(
            Matrix::zeros(hidden, modes * rank),
            vec![0.0; hidden],
            vec![0.0; hidden],
            b_mu,
            vec![0.0; hidden],
            0.0,
            modes,
            rank,
        )
        .unwrap()
    }

    #[test]
    fn sample_with_zero_noise_returns_mean() {
        let post = RowPosterior {
            mean: vec![1.0, -2.0, 3.0],
            log_precision: vec![0.3, -0.7, 2.0],
        };
        assert_eq!(post.sample(&[0.0, 0.0, 0.0]).unwrap(), post.mean);
        assert!(post.sample(&[0.0]).is_err());
    }

    #[test]
    fn sample_scale_is_inverse_sqrt_precision() {
        let post = RowPosterior {
            mean: vec![1.0, 2.0],
            log_precision: vec![4.0f64.ln(), 4.0f64.ln()],
        };
        let out = post.sample(&[1.0, 1.0]).unwrap();
        assert!((out[0] - 1.5).abs() < 1e-15);
        assert!((out[1] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn sample_monte_carlo_moments() {
        let post = RowPosterior {
            mean: vec![0.7],
            log_precision: vec![1.2],
        };
        let var = (-1.2f64).exp();
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n {
            let eps = entry_epsilons(99, i, 0, 1, 1);
            let v = post.sample(&eps[0]).unwrap()[0];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let sample_var = sum_sq / n as f64 - mean * mean;
        let se_mean = (var / n as f64).sqrt();
        let se_var = var * (2.0 / n as f64).sqrt();
        assert!((mean - 0.7).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((sample_var - var).abs() < 3.0 * se_var, "var {sample_var}");
    }

    #[test]
    fn decode_zero_network() {
        let theta = constant_decoder(3, 2, 4, 0.0);
        let (mu, g) = theta.decode(&[1.0; 6]).unwrap();
        assert_eq!((mu, g), (0.0, 0.0));
    }

    #[test]
    fn decode_constant_head() {
        let theta = DecoderParams::new(
            Matrix::zeros(1, 1),
            vec![0.0],
            vec![2.0],
            0.5,
            vec![0.0],
            0.0,
            1,
            1,
        )
        .unwrap();
        for u in [-3.0, 0.0, 7.5] {
            assert_eq!(theta.decode(&[u]).unwrap().0, 0.5);
        }
    }

    #[test]
    fn decode_matches_scalar_reimplementation() {
        // Independent scalar evaluation with explicit loops.
        let (modes, rank, hidden) = (2usize, 2usize, 3usize);
        let w = Matrix::from_rows(vec![
            vec![0.1, -0.2, 0.3, 0.4],
            vec![-0.5, 0.6, -0.7, 0.8],
            vec![0.9, -1.0, 1.1, -1.2],
        ])
        .unwrap();
        let b = vec![0.05, -0.1, 0.15];
        let w_mu = vec![0.3, -0.4, 0.5];
        let w_sigma = vec![-0.6, 0.7, -0.8];
        let (b_mu, b_sigma) = (0.25, -0.35);
        let theta = DecoderParams::new(
            w.clone(),
            b.clone(),
            w_mu.clone(),
            b_mu,
            w_sigma.clone(),
            b_sigma,
            modes,
            rank,
        )
        .unwrap();
        let u = [0.9, -0.8, 0.7, -0.6];

        let mut mu_expected = b_mu;
        let mut g_expected = b_sigma;
        for k in 0..hidden {
            let mut z = b[k];
            for (j, &uj) in u.iter().enumerate() {
                z += w.get(k, j) * uj;
            }
            let hk = z.tanh();
            mu_expected += w_mu[k] * hk;
            g_expected += w_sigma[k] * hk;
        }
        let (mu, g) = theta.decode(&u).unwrap();
        assert!((mu - mu_expected).abs() < 1e-12);
        assert!((g - g_expected).abs() < 1e-12);
    }

    #[test]
    fn decode_invariant_under_hidden_permutation() {
        let (theta, _) = init_model(&[3, 3], 2, 5, 8).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let w = Matrix::from_fn(5, theta.input_len(), |i, j| theta.w().get(perm[i], j));
        let permute = |v: &[f64]| perm.iter().map(|&p| v[p]).collect::<Vec<f64>>();
        let permuted = DecoderParams::new(
            w,
            permute(theta.b()),
            permute(theta.w_mu()),
            theta.b_mu(),
            permute(theta.w_sigma()),
            theta.b_sigma(),
            theta.modes(),
            theta.rank(),
        )
        .unwrap();
        let u = [0.4, -1.2, 0.8, 2.0];
        let (mu_a, g_a) = theta.decode(&u).unwrap();
        let (mu_b, g_b) = permuted.decode(&u).unwrap();
        assert!((mu_a - mu_b).abs() < 1e-12);
        assert!((g_a - g_b).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_for_identical_distributions() {
        let post = RowPosterior {
            mean: vec![0.4, -1.5],
            log_precision: vec![0.9, -0.2],
        };
        let kl = kl_row(&post, &post.mean, &post.log_precision).unwrap();
        assert!(kl.abs() < 1e-15);
    }

    #[test]
    fn kl_unit_mean_shift() {
        let post = RowPosterior {
            mean: vec![1.0],
            log_precision: vec![0.0],
        };
        let kl = kl_row(&post, &[0.0], &[0.0]).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_variance_e_case() {
        // q = N(0, e) so log-precision is -1; KL to N(0,1) is (e - 2)/2.
        let post = RowPosterior {
            mean: vec![0.0],
            log_precision: vec![-1.0],
        };
        let kl = kl_row(&post, &[0.0], &[0.0]).unwrap();
        let expected = 0.5 * (std::f64::consts::E - 2.0);
        assert!((kl - expected).abs() < 1e-12, "kl {kl} expected {expected}");
    }

    #[test]
    fn elbo_perfect_reconstruction() {
        let x = 1.37;
        let dims = [3usize, 3, 3];
        let state = prior_matched_state(&dims, 2);
        let theta = constant_decoder(3, 2, 4, x);
        let batch = single_entry_batch(dims.to_vec(), vec![1, 2, 0], x);
        let report = elbo_minibatch(&theta, &state, &batch, 27, 1, 5).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((report.total - expected).abs() < 1e-9);
        assert!(report.kl_term.abs() < 1e-15);
    }

    #[test]
    fn elbo_matches_hand_scripted_pipeline() {
        let dims = [2usize, 3];
        let (theta, mut state) = init_model(&dims, 2, 3, 77).unwrap();
        state.prior_mean = vec![0.2, -0.1];
        state.prior_log_precision = vec![0.3, 0.1];
        state.row_mut(0, 1).log_precision = vec![0.5, -0.4];
        let x = 0.63;
        let batch = single_entry_batch(dims.to_vec(), vec![1, 2], x);
        let (total_observed, seed) = (6usize, 11u64);
        let report = elbo_minibatch(&theta, &state, &batch, total_observed, 1, seed).unwrap();

        // Scalar recomputation of the full pipeline.
        let eps = entry_epsilons(seed, 0, 0, 2, 2);
        let mut u = Vec::new();
        for (d, &i) in [1usize, 2].iter().enumerate() {
            let row = state.row(d, i);
            for r in 0..2 {
                u.push(row.mean[r] + (-0.5 * row.log_precision[r]).exp() * eps[d][r]);
            }
        }
        let mut mu = theta.b_mu();
        let mut g = theta.b_sigma();
        for k in 0..3 {
            let mut z = theta.b()[k];
            for (j, &uj) in u.iter().enumerate() {
                z += theta.w().get(k, j) * uj;
            }
            mu += theta.w_mu()[k] * z.tanh();
            g += theta.w_sigma()[k] * z.tanh();
        }
        let recon = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * g
            - (x - mu) * (x - mu) / (2.0 * g.exp());
        let mut kl = 0.0;
        for d in 0..2 {
            for i in 0..dims[d] {
                let row = state.row(d, i);
                for r in 0..2 {
                    let lam = row.log_precision[r].exp();
                    let lamp = state.prior_log_precision[r].exp();
                    let dm = row.mean[r] - state.prior_mean[r];
                    kl += 0.5
                        * (lamp / lam + lamp * dm * dm - 1.0 + row.log_precision[r]
                            - state.prior_log_precision[r]);
                }
            }
        }
        let expected_total = recon - kl / 6.0;
        assert!((report.recon_term - recon).abs() < 1e-10);
        assert!((report.kl_term - kl / 6.0).abs() < 1e-10);
        assert!((report.total - expected_total).abs() < 1e-10);
    }

    #[test]
    fn elbo_kl_scaling_is_exact() {
        let dims = [3usize, 4];
        let (theta, state) = init_model(&dims, 2, 3, 5).unwrap();
        let batch = single_entry_batch(dims.to_vec(), vec![0, 1], -0.4);
        let a = elbo_minibatch(&theta, &state, &batch, 6, 1, 3).unwrap();
        let b = elbo_minibatch(&theta, &state, &batch, 12, 1, 3).unwrap();
        assert_eq!(a.recon_term, b.recon_term);
        assert_eq!(b.kl_term, a.kl_term / 2.0);
        assert_eq!(a.entry_count, batch.len());
    }

    #[test]
    fn elbo_is_deterministic() {
        let dims = [4usize, 4, 4];
        let (theta, state) = init_model(&dims, 3, 5, 1).unwrap();
        let entries = vec![
            ObservedEntry { index: MultiIndex::new(vec![0, 1, 2]), value: 0.5 },
            ObservedEntry { index: MultiIndex::new(vec![3, 0, 1]), value: -1.2 },
        ];
        let batch = ObservedEntrySet::new(dims.to_vec(), entries).unwrap();
        let a = elbo_minibatch(&theta, &state, &batch, 64, 2, 9).unwrap();
        let b = elbo_minibatch(&theta, &state, &batch, 64, 2, 9).unwrap();
        assert_eq!(a, b);
        let ga = grad_elbo_minibatch(&theta, &state, &batch, 64, 2, 9).unwrap();
        let gb = grad_elbo_minibatch(&theta, &state, &batch, 64, 2, 9).unwrap();
        assert_eq!(ga.flatten(), gb.flatten());
    }

    #[test]
    fn elbo_rejects_bad_arguments() {
        let dims = [3usize, 3];
        let (theta, state) = init_model(&dims, 2, 3, 0).unwrap();
        let empty = ObservedEntrySet::new(dims.to_vec(), vec![]).unwrap();
        assert!(elbo_minibatch(&theta, &state, &empty, 9, 1, 0).is_err());
        let batch = single_entry_batch(dims.to_vec(), vec![0, 0], 1.0);
        assert!(elbo_minibatch(&theta, &state, &batch, 9, 0, 0).is_err());
        assert!(elbo_minibatch(&theta, &state, &batch, 0, 1, 0).is_err());
    }

    #[test]
    fn prior_mean_gradient_vanishes_at_fixed_point() {
        let dims = [3usize, 2, 4];
        let (theta, mut state) = init_model(&dims, 3, 4, 13).unwrap();
        state.prior_mean = vec![0.4, -0.2, 0.9];
        for d in 0..3 {
            for i in 0..dims[d] {
                state.row_mut(d, i).mean = state.prior_mean.clone();
            }
        }
        let batch = single_entry_batch(dims.to_vec(), vec![1, 0, 2], 0.7);
        let grads = grad_elbo_minibatch(&theta, &state, &batch, 24, 1, 2).unwrap();
        for g in &grads.state.prior_mean {
            assert!(g.abs() < 1e-15, "prior mean gradient {g}");
        }
    }

    #[test]
    fn zero_decoder_zero_batch_has_zero_mean_bias_gradient() {
        let dims = [2usize, 2];
        let state = prior_matched_state(&dims, 2);
        let theta = constant_decoder(2, 2, 3, 0.0);
        let batch = single_entry_batch(dims.to_vec(), vec![0, 1], 0.0);
        let grads = grad_elbo_minibatch(&theta, &state, &batch, 4, 1, 6).unwrap();
        assert_eq!(grads.decoder.b_mu(), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences_small_instance() {
        let dims = [3usize, 3, 3];
        let (mut theta, mut state) = init_model(&dims, 2, 3, 41).unwrap();
        theta.b = vec![0.05, -0.1, 0.2];
        theta.b_mu = 0.3;
        theta.b_sigma = -0.2;
        // Loosen the tight init posteriors so the noise-path gradients
        // carry weight in the check.
        for d in 0..3 {
            for i in 0..3 {
                state.row_mut(d, i).log_precision = vec![0.4 + 0.1 * (d + i) as f64; 2];
            }
        }
        let entries = vec![
            ObservedEntry { index: MultiIndex::new(vec![0, 1, 2]), value: 0.8 },
            ObservedEntry { index: MultiIndex::new(vec![1, 1, 0]), value: -0.3 },
            ObservedEntry { index: MultiIndex::new(vec![2, 0, 1]), value: 1.4 },
            ObservedEntry { index: MultiIndex::new(vec![0, 0, 0]), value: 0.1 },
        ];
        let batch = ObservedEntrySet::new(dims.to_vec(), entries).unwrap();
        let (total, seed) = (27usize, 3u64);
        let analytic =
            grad_elbo_minibatch(&theta, &state, &batch, total, 1, seed).unwrap().flatten();
        let mut flat = flatten_params(&theta, &state);
        let mut max_err: f64 = 0.0;
        for i in 0..flat.len() {
            let orig = flat[i];
            let h = 1e-5 * orig.abs().max(1.0);
            flat[i] = orig + h;
            write_params(&flat, &mut theta, &mut state).unwrap();
            let up = elbo_minibatch(&theta, &state, &batch, total, 1, seed).unwrap().total;
            flat[i] = orig - h;
            write_params(&flat, &mut theta, &mut state).unwrap();
            let down = elbo_minibatch(&theta, &state, &batch, total, 1, seed).unwrap().total;
            flat[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs());
            let err = if denom < 1e-8 {
                (analytic[i] - fd).abs()
            } else {
                (analytic[i] - fd).abs() / denom
            };
            max_err = max_err.max(err);
        }
        write_params(&flat, &mut theta, &mut state).unwrap();
        assert!(max_err < 1e-6, "max relative error {max_err}");
    }

    #[test]
    fn likelihood_strictly_decreases_with_residual() {
        let dims = [2usize, 2];
        let state = prior_matched_state(&dims, 1);
        let theta = constant_decoder(2, 1, 2, 0.0);
        let mut previous = f64::INFINITY;
        for x in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let batch = single_entry_batch(dims.to_vec(), vec![0, 0], x);
            let total = elbo_minibatch(&theta, &state, &batch, 4, 1, 0).unwrap().total;
            assert!(total < previous, "x={x}: {total} !< {previous}");
            previous = total;
        }
    }

    #[test]
    fn predict_entry_cases() {
        let dims = [3usize, 3];
        let (_, state) = init_model(&dims, 2, 3, 4).unwrap();
        let zero = constant_decoder(2, 2, 3, 0.0);
        let constant = constant_decoder(2, 2, 3, 2.5);
        for i in 0..3 {
            let idx = MultiIndex::new(vec![i, 2 - i]);
            assert_eq!(predict_entry(&zero, &state, &idx).unwrap(), 0.0);
            assert_eq!(predict_entry(&constant, &state, &idx).unwrap(), 2.5);
        }
        let (theta, state) = init_model(&dims, 2, 3, 4).unwrap();
        let idx = MultiIndex::new(vec![1, 2]);
        let mut u = Vec::new();
        u.extend_from_slice(&state.row(0, 1).mean);
        u.extend_from_slice(&state.row(1, 2).mean);
        assert_eq!(
            predict_entry(&theta, &state, &idx).unwrap(),
            theta.decode(&u).unwrap().0
        );
        assert!(predict_entry(&theta, &state, &MultiIndex::new(vec![3, 0])).is_err());
    }

    #[test]
    fn init_model_is_deterministic_and_sane() {
        let dims = [4usize, 5, 6];
        let (ta, sa) = init_model(&dims, 3, 7, 123).unwrap();
        let (tb, sb) = init_model(&dims, 3, 7, 123).unwrap();
        assert_eq!(flatten_params(&ta, &sa), flatten_params(&tb, &sb));
        assert!(init_model(&dims, 0, 7, 0).is_err());
        assert!(init_model(&dims, 3, 0, 0).is_err());

        // KL positive with nonzero posterior means.
        assert!(sa.kl_total() > 0.0);

        // Decode stays finite and tame for bounded inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let u: Vec<f64> = (0..ta.input_len())
                .map(|_| 10.0 * (rng.sample::<f64, _>(StandardNormal)).tanh())
                .collect();
            let (mu, g) = ta.decode(&u).unwrap();
            assert!(mu.is_finite() && g.is_finite());
            assert!(g.abs() < 10.0);
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let dims = [3usize, 4];
        let (theta, state) = init_model(&dims, 2, 5, 50).unwrap();
        let flat = flatten_params(&theta, &state);
        assert_eq!(flat.len(), param_count(&theta, &state));
        let (mut t2, mut s2) = init_model(&dims, 2, 5, 51).unwrap();
        write_params(&flat, &mut t2, &mut s2).unwrap();
        assert_eq!(flatten_params(&t2, &s2), flat);
        assert_eq!(t2, theta);
        assert_eq!(s2, state);
        assert!(write_params(&flat[1..], &mut t2, &mut s2).is_err());
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_iff_match(
            mean in proptest::collection::vec(-3.0f64..3.0, 3),
            log_prec in proptest::collection::vec(-2.0f64..2.0, 3),
            prior_mean in proptest::collection::vec(-3.0f64..3.0, 3),
            prior_log_prec in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let post = RowPosterior { mean: mean.clone(), log_precision: log_prec.clone() };
            let kl = kl_row(&post, &prior_mean, &prior_log_prec).unwrap();
            prop_assert!(kl >= -1e-12);
            let matched = kl_row(&post, &mean, &log_prec).unwrap();
            prop_assert!(matched.abs() <= 1e-12);
        }

        #[test]
        fn sample_is_affine_in_epsilon(
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            e1 in proptest::collection::vec(-3.0f64..3.0, 2),
            e2 in proptest::collection::vec(-3.0f64..3.0, 2),
        ) {
            let post = RowPosterior { mean: vec![0.5, -1.0], log_precision: vec![0.4, -0.8] };
            let combined: Vec<f64> = e1.iter().zip(&e2).map(|(x, y)| a * x + b * y).collect();
            let lhs = post.sample(&combined).unwrap();
            let s1 = post.sample(&e1).unwrap();
            let s2 = post.sample(&e2).unwrap();
            for r in 0..2 {
                let rhs = post.mean[r]
                    + a * (s1[r] - post.mean[r])
                    + b * (s2[r] - post.mean[r]);
                prop_assert!((lhs[r] - rhs).abs() < 1e-12);
            }
        }
    }
}
