//! Classical CP decomposition: element-wise reconstruction and a masked
//! alternating-least-squares fitter trained on observed entries only.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Matrix;
use crate::tensor::{DenseTensor, MultiIndex, ObservedEntrySet};

/// Ridge added to each row's normal equations; guards rows with few
/// observations without perturbing exact-recovery accuracy.
const RIDGE: f64 = 1e-8;

/// One N_d x R matrix per mode, all sharing the column count R.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMatrices {
    factors: Vec<Matrix>,
    rank: usize,
}

impl FactorMatrices {
    pub fn new(factors: Vec<Matrix>) -> Result<Self> {
        let ranks: Vec<usize> = factors.iter().map(Matrix::cols).collect();
        let rank = *ranks.first().ok_or(Error::InvalidDims { dims: vec![] })?;
        if rank < 1 || ranks.iter().any(|&r| r != rank) {
            return Err(Error::MismatchedRank(ranks));
        }
        Ok(FactorMatrices { factors, rank })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn modes(&self) -> usize {
        self.factors.len()
    }

    /// Row counts per mode, i.e. the dims of the reconstructed tensor.
    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::rows).collect()
    }

    pub fn factor(&self, mode: usize) -> &Matrix {
        &self.factors[mode]
    }

    pub fn factor_mut(&mut self, mode: usize) -> &mut Matrix {
        &mut self.factors[mode]
    }
}

/// Element-wise CP value: sum over components of the product of the
/// selected factor rows.
pub fn reconstruct_entry(factors: &FactorMatrices, index: &MultiIndex) -> Result<f64> {
    let dims = factors.dims();
    index.check(&dims)?;
    let mut total = 0.0;
    for r in 0..factors.rank {
        let mut prod = 1.0;
        for (d, &i) in index.indices().iter().enumerate() {
            prod *= factors.factors[d].get(i, r);
        }
        total += prod;
    }
    Ok(total)
}

/// Dense tensor whose every entry is [`reconstruct_entry`].
pub fn reconstruct_full(factors: &FactorMatrices) -> Result<DenseTensor> {
    let mut tensor = DenseTensor::zeros(factors.dims())?;
    let indices: Vec<MultiIndex> = tensor.indices().collect();
    for index in indices {
        let v = reconstruct_entry(factors, &index)?;
        tensor.set(&index, v)?;
    }
    Ok(tensor)
}

fn train_rmse(factors: &FactorMatrices, train: &ObservedEntrySet) -> Result<f64> {
    let mut sse = 0.0;
    for entry in train.entries() {
        let diff = reconstruct_entry(factors, &entry.index)? - entry.value;
        sse += diff * diff;
    }
    Ok((sse / train.len() as f64).sqrt())
}

/// Masked ALS-CP fit. Cycles modes; each factor row is the exact
/// ridge-regularized least-squares minimizer over that row's observed
/// entries with the other factors fixed. Stops when the relative decrease
/// of training RMSE between sweeps falls below `tol` or after `max_iters`
/// sweeps.
pub fn als_fit(
    train: &ObservedEntrySet,
    dims: &[usize],
    rank: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<FactorMatrices> {
    Ok(als_fit_traced(train, dims, rank, max_iters, Some(tol), seed, None)?.factors)
}

/// Per-sweep diagnostics from [`als_fit_traced`].
pub struct AlsTrace {
    pub factors: FactorMatrices,
    /// Training RMSE after each completed sweep.
    pub train_rmse: Vec<f64>,
    /// Validation RMSE after each completed sweep (empty when no
    /// validation set was given).
    pub val_rmse: Vec<f64>,
}

/// ALS with per-sweep RMSE traces. `tol = None` runs exactly `max_iters`
/// sweeps, which cross-validation uses to refit at a selected sweep count.
pub fn als_fit_traced(
    train: &ObservedEntrySet,
    dims: &[usize],
    rank: usize,
    max_iters: usize,
    tol: Option<f64>,
    seed: u64,
    validation: Option<&ObservedEntrySet>,
) -> Result<AlsTrace> {
    if train.is_empty() {
        return Err(Error::TooFewEntries { min: 1 });
    }
    if rank < 1 {
        return Err(Error::InvalidRank(rank));
    }
    if train.dims() != dims {
        return Err(Error::MismatchedDims {
            factor_dims: dims.to_vec(),
            dims: train.dims().to_vec(),
        });
    }

    let n_modes = dims.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factors = FactorMatrices::new(
        dims.iter()
            .map(|&n| Matrix::from_fn(n, rank, |_, _| rng.sample(StandardNormal)))
            .collect(),
    )?;

    // Entry positions grouped by (mode, row); rows with no observations
    // keep their initialization.
    let mut obs: Vec<Vec<Vec<usize>>> = dims.iter().map(|&n| vec![Vec::new(); n]).collect();
    for (pos, entry) in train.entries().iter().enumerate() {
        for (d, &i) in entry.index.indices().iter().enumerate() {
            obs[d][i].push(pos);
        }
    }

    let mut rmse_trace = Vec::new();
    let mut val_trace = Vec::new();
    let mut prev_rmse = f64::INFINITY;

    for _sweep in 0..max_iters {
        for d in 0..n_modes {
            for i in 0..dims[d] {
                if obs[d][i].is_empty() {
                    continue;
                }
                // Normal equations over this row's observations.
                let mut gram = DMatrix::<f64>::zeros(rank, rank);
                let mut rhs = DVector::<f64>::zeros(rank);
                let mut design = vec![0.0; rank];
                for &pos in &obs[d][i] {
                    let entry = &train.entries()[pos];
                    for r in 0..rank {
                        let mut prod = 1.0;
                        for (dd, &ii) in entry.index.indices().iter().enumerate() {
                            if dd != d {
                                prod *= factors.factors[dd].get(ii, r);
                            }
                        }
                        design[r] = prod;
                    }
                    for a in 0..rank {
                        rhs[a] += design[a] * entry.value;
                        for b in 0..rank {
                            gram[(a, b)] += design[a] * design[b];
                        }
                    }
                }
                for r in 0..rank {
                    gram[(r, r)] += RIDGE;
                }
                let solution = gram
                    .clone()
                    .cholesky()
                    .map(|ch| ch.solve(&rhs))
                    .or_else(|| gram.lu().solve(&rhs));
                if let Some(sol) = solution {
                    factors.factors[d]
                        .row_mut(i)
                        .copy_from_slice(sol.as_slice());
                }
            }
        }

        let rmse = train_rmse(&factors, train)?;
        rmse_trace.push(rmse);
        if let Some(val) = validation {
            let mut sse = 0.0;
            for entry in val.entries() {
                let diff = reconstruct_entry(&factors, &entry.index)? - entry.value;
                sse += diff * diff;
            }
            val_trace.push((sse / val.len() as f64).sqrt());
        }

        if let Some(tol) = tol {
            let rel_decrease = (prev_rmse - rmse) / prev_rmse.max(f64::MIN_POSITIVE);
            if prev_rmse.is_finite() && rel_decrease < tol {
                break;
            }
        }
        prev_rmse = rmse;
    }

    Ok(AlsTrace {
        factors,
        train_rmse: rmse_trace,
        val_rmse: val_trace,
    })
}
