//! Central-difference verification of the analytic ELBO gradients.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::mat::Matrix;
use crate::model::{
    elbo_minibatch, flatten_params, grad_elbo_minibatch, variational_state_from_parts,
    write_params, DecoderParams, RowPosterior,
};
use crate::tensor::{MultiIndex, ObservedEntry, ObservedEntrySet};

/// Below this magnitude the comparison falls back from relative to
/// absolute error.
const ABS_FALLBACK: f64 = 1e-8;

/// Builds a random model and batch, freezes the reparameterization noise,
/// and compares the analytic gradient of the minibatch bound against
/// central finite differences with relative step `h` coordinate by
/// coordinate. Returns the largest relative error (absolute error for
/// near-zero coordinates).
///
/// Unlike training initialization, the model here uses unit-scale random
/// weights so that every coordinate carries a well-conditioned gradient.
pub fn gradcheck(
    dims: &[usize],
    rank: usize,
    hidden: usize,
    batch_size: usize,
    seed: u64,
    h: f64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes = dims.len();
    let dr = modes * rank;
    let normal = |scale: f64, rng: &mut ChaCha8Rng| -> f64 {
        scale * rng.sample::<f64, _>(StandardNormal)
    };

    let w_scale = 1.0 / (dr as f64).sqrt();
    let head_scale = 1.0 / (hidden as f64).sqrt();
    let w = Matrix::from_fn(hidden, dr, |_, _| normal(w_scale, &mut rng));
    let b: Vec<f64> = (0..hidden).map(|_| normal(0.1, &mut rng)).collect();
    let w_mu: Vec<f64> = (0..hidden).map(|_| normal(head_scale, &mut rng)).collect();
    let b_mu = normal(0.1, &mut rng);
    let w_sigma: Vec<f64> = (0..hidden).map(|_| normal(head_scale, &mut rng)).collect();
    let b_sigma = normal(0.1, &mut rng);
    let mut theta = DecoderParams::new(w, b, w_mu, b_mu, w_sigma, b_sigma, modes, rank)?;

    let rows = dims
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| RowPosterior {
                    mean: (0..rank).map(|_| normal(1.0, &mut rng)).collect(),
                    log_precision: (0..rank).map(|_| normal(0.3, &mut rng)).collect(),
                })
                .collect()
        })
        .collect();
    let prior_mean: Vec<f64> = (0..rank).map(|_| normal(1.0, &mut rng)).collect();
    let prior_log_precision: Vec<f64> = (0..rank).map(|_| normal(0.3, &mut rng)).collect();
    let mut state =
        variational_state_from_parts(dims.to_vec(), rank, rows, prior_mean, prior_log_precision)?;

    // Distinct random indices with standard normal values.
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::with_capacity(batch_size);
    while entries.len() < batch_size {
        let index: Vec<usize> = dims
            .iter()
            .map(|&n| (rng.next_u64() % n as u64) as usize)
            .collect();
        if seen.insert(index.clone()) {
            entries.push(ObservedEntry {
                index: MultiIndex::new(index),
                value: normal(1.0, &mut rng),
            });
        }
    }
    let batch = ObservedEntrySet::new(dims.to_vec(), entries)?;
    let total_observed: usize = dims.iter().product();
    let noise_seed = rng.next_u64();

    let analytic =
        grad_elbo_minibatch(&theta, &state, &batch, total_observed, 1, noise_seed)?.flatten();
    let mut flat = flatten_params(&theta, &state);
    let mut max_err: f64 = 0.0;
    for i in 0..flat.len() {
        let orig = flat[i];
        let step = h * orig.abs().max(1.0);
        flat[i] = orig + step;
        write_params(&flat, &mut theta, &mut state)?;
        let up = elbo_minibatch(&theta, &state, &batch, total_observed, 1, noise_seed)?.total;
        flat[i] = orig - step;
        write_params(&flat, &mut theta, &mut state)?;
        let down = elbo_minibatch(&theta, &state, &batch, total_observed, 1, noise_seed)?.total;
        flat[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let denom = analytic[i].abs().max(fd.abs());
        let err = if denom < ABS_FALLBACK {
            (analytic[i] - fd).abs()
        } else {
            (analytic[i] - fd).abs() / denom
        };
        max_err = max_err.max(err);
    }
    write_params(&flat, &mut theta, &mut state)?;
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_instance_passes() {
        let err = gradcheck(&[3, 3, 3], 2, 4, 5, 12, 1e-5).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn halving_step_does_not_worsen_beyond_noise_floor() {
        let err = gradcheck(&[3, 3], 2, 3, 4, 7, 1e-5).unwrap();
        let err_half = gradcheck(&[3, 3], 2, 3, 4, 7, 5e-6).unwrap();
        assert!(
            err_half <= err.max(1e-7),
            "h/2 error {err_half} vs {err}"
        );
    }

    #[test]
    fn mean_bias_gradient_is_zero_for_zero_model_and_data() {
        use crate::mat::Matrix;
        use crate::model::grad_elbo_minibatch;

        let dims = [2usize, 2];
        let theta = DecoderParams::new(
            Matrix::zeros(3, 4),
            vec![0.0; 3],
            vec![0.0; 3],
            0.0,
            vec![0.0; 3],
            0.0,
            2,
            2,
        )
        .unwrap();
        let rows = dims
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| RowPosterior {
                        mean: vec![0.0; 2],
                        log_precision: vec![0.0; 2],
                    })
                    .collect()
            })
            .collect();
        let state =
            variational_state_from_parts(dims.to_vec(), 2, rows, vec![0.0; 2], vec![0.0; 2])
                .unwrap();
        let batch = ObservedEntrySet::new(
            dims.to_vec(),
            vec![ObservedEntry {
                index: MultiIndex::new(vec![0, 1]),
                value: 0.0,
            }],
        )
        .unwrap();
        let grads = grad_elbo_minibatch(&theta, &state, &batch, 4, 1, 3).unwrap();
        assert_eq!(grads.decoder.b_mu(), 0.0);

        // Finite differences agree: the bound is symmetric in b_mu here.
        let mut t = theta.clone();
        let mut s = state.clone();
        let mut flat = flatten_params(&t, &s);
        let b_mu_pos = 3 * 4 + 3 + 3; // after W, b, w_mu
        flat[b_mu_pos] = 1e-6;
        write_params(&flat, &mut t, &mut s).unwrap();
        let up = elbo_minibatch(&t, &s, &batch, 4, 1, 3).unwrap().total;
        flat[b_mu_pos] = -1e-6;
        write_params(&flat, &mut t, &mut s).unwrap();
        let down = elbo_minibatch(&t, &s, &batch, 4, 1, 3).unwrap().total;
        assert_eq!((up - down) / 2e-6, 0.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = gradcheck(&[3, 3], 2, 3, 4, 42, 1e-5).unwrap();
        let b = gradcheck(&[3, 3], 2, 3, 4, 42, 1e-5).unwrap();
        assert_eq!(a, b);
    }
}
