//! Dense tensor storage, synthetic data generation, observation
//! bookkeeping, normalization, and train/test splitting.
//!
//! Missing values never live inside [`DenseTensor`]; observation is tracked
//! exclusively by [`ObservedEntrySet`]. All randomized operations use
//! ChaCha8 seeded from a caller-supplied `u64`, so results are reproducible
//! for a fixed seed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cp::{reconstruct_entry, FactorMatrices};
use crate::error::{Error, Result};

/// 0-based index tuple into a D-way tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    pub fn new(indices: Vec<usize>) -> Self {
        MultiIndex(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check(&self, dims: &[usize]) -> Result<()> {
        if self.0.len() != dims.len() || self.0.iter().zip(dims).any(|(&i, &n)| i >= n) {
            return Err(Error::IndexOutOfRange {
                index: self.0.clone(),
                dims: dims.to_vec(),
            });
        }
        Ok(())
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidDims {
            dims: dims.to_vec(),
        });
    }
    Ok(())
}

/// Dense D-way tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        check_dims(&dims)?;
        let expected: usize = dims.iter().product();
        if values.len() != expected {
            return Err(Error::ValueLength {
                dims,
                expected,
                got: values.len(),
            });
        }
        Ok(DenseTensor { dims, values })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        check_dims(&dims)?;
        let len = dims.iter().product();
        Ok(DenseTensor {
            dims,
            values: vec![0.0; len],
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn linear(&self, index: &MultiIndex) -> Result<usize> {
        index.check(&self.dims)?;
        let mut lin = 0usize;
        for (i, n) in index.indices().iter().zip(&self.dims) {
            lin = lin * n + i;
        }
        Ok(lin)
    }

    pub fn get(&self, index: &MultiIndex) -> Result<f64> {
        Ok(self.values[self.linear(index)?])
    }

    pub fn set(&mut self, index: &MultiIndex, value: f64) -> Result<()> {
        let lin = self.linear(index)?;
        self.values[lin] = value;
        Ok(())
    }

    /// Iterates all multi-indices in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = MultiIndex> + '_ {
        let dims = self.dims.clone();
        (0..self.values.len()).map(move |mut lin| {
            let mut idx = vec![0usize; dims.len()];
            for d in (0..dims.len()).rev() {
                idx[d] = lin % dims[d];
                lin /= dims[d];
            }
            MultiIndex(idx)
        })
    }

    /// Every entry of the tensor as an observed set.
    pub fn to_observed(&self) -> ObservedEntrySet {
        let entries = self
            .indices()
            .zip(&self.values)
            .map(|(index, &value)| ObservedEntry { index, value })
            .collect();
        ObservedEntrySet {
            dims: self.dims.clone(),
            entries,
        }
    }
}

/// One known tensor entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedEntry {
    pub index: MultiIndex,
    pub value: f64,
}

/// Sparse list of known entries; the training/test unit.
///
/// Invariants enforced at construction: indices valid for `dims`, no
/// duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedEntrySet {
    dims: Vec<usize>,
    entries: Vec<ObservedEntry>,
}

impl ObservedEntrySet {
    pub fn new(dims: Vec<usize>, entries: Vec<ObservedEntry>) -> Result<Self> {
        check_dims(&dims)?;
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        for entry in &entries {
            entry.index.check(&dims)?;
            if !seen.insert(entry.index.indices().to_vec()) {
                return Err(Error::DuplicateIndex {
                    index: entry.index.indices().to_vec(),
                });
            }
        }
        Ok(ObservedEntrySet { dims, entries })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn entries(&self) -> &[ObservedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.value)
    }

    /// Same indices, values mapped through `f`.
    pub fn map_values(&self, mut f: impl FnMut(f64) -> f64) -> ObservedEntrySet {
        ObservedEntrySet {
            dims: self.dims.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ObservedEntry {
                    index: e.index.clone(),
                    value: f(e.value),
                })
                .collect(),
        }
    }

    /// New set holding the entries at `positions`, in that order.
    pub fn subset_positions(&self, positions: &[usize]) -> ObservedEntrySet {
        ObservedEntrySet {
            dims: self.dims.clone(),
            entries: positions.iter().map(|&p| self.entries[p].clone()).collect(),
        }
    }
}

/// Observed-set mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

impl NormalizationStats {
    /// Stats that leave values unchanged.
    pub fn identity() -> Self {
        NormalizationStats { mean: 0.0, std: 1.0 }
    }

    pub fn normalize_value(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize_value(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Applies the element-wise CP form at every index and adds i.i.d. Gaussian
/// noise of standard deviation `noise_std`.
pub fn generate_from_factors(
    factors: &FactorMatrices,
    noise_std: f64,
    seed: u64,
) -> Result<DenseTensor> {
    if !noise_std.is_finite() || noise_std < 0.0 {
        return Err(Error::InvalidNoiseStd(noise_std));
    }
    let dims = factors.dims();
    check_dims(&dims)?;
    let mut tensor = DenseTensor::zeros(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<MultiIndex> = tensor.indices().collect();
    for (lin, index) in indices.iter().enumerate() {
        let mut v = reconstruct_entry(factors, index)?;
        if noise_std > 0.0 {
            let eps: f64 = rng.sample(StandardNormal);
            v += noise_std * eps;
        }
        tensor.values[lin] = v;
    }
    Ok(tensor)
}

/// Draws each factor row i.i.d. standard normal of length `rank`, then
/// builds the noisy tensor. Returns the tensor together with the
/// ground-truth factors.
pub fn generate_synthetic(
    dims: &[usize],
    rank: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(DenseTensor, FactorMatrices)> {
    if rank < 1 {
        return Err(Error::InvalidRank(rank));
    }
    check_dims(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mats = dims
        .iter()
        .map(|&n| {
            crate::mat::Matrix::from_fn(n, rank, |_, _| rng.sample(StandardNormal))
        })
        .collect();
    let factors = FactorMatrices::new(mats)?;
    let noise_seed = rng.next_u64();
    let tensor = generate_from_factors(&factors, noise_std, noise_seed)?;
    Ok((tensor, factors))
}

/// Shifts and scales observed values to mean 0 and unit population
/// variance. Errors on constant input or fewer than 2 entries.
pub fn normalize(entries: &ObservedEntrySet) -> Result<(ObservedEntrySet, NormalizationStats)> {
    if entries.len() < 2 {
        return Err(Error::TooFewEntries { min: 2 });
    }
    let n = entries.len() as f64;
    let mean = entries.values().sum::<f64>() / n;
    let var = entries.values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return Err(Error::ConstantInput);
    }
    let stats = NormalizationStats { mean, std };
    Ok((entries.map_values(|v| (v - mean) / std), stats))
}

/// Uniform random partition with `|train| = floor(train_fraction * n)`.
pub fn split_observed(
    entries: &ObservedEntrySet,
    train_fraction: f64,
    seed: u64,
) -> Result<(ObservedEntrySet, ObservedEntrySet)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::InvalidTrainFraction(train_fraction));
    }
    if entries.is_empty() {
        return Err(Error::TooFewEntries { min: 1 });
    }
    let n = entries.len();
    let n_train = ((train_fraction * n as f64).floor() as usize).min(n);
    let mut positions: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates via rand's shuffle; deterministic for a fixed seed.
    rand::seq::SliceRandom::shuffle(positions.as_mut_slice(), &mut rng);
    let train = entries.subset_positions(&positions[..n_train]);
    let test = entries.subset_positions(&positions[n_train..]);
    Ok((train, test))
}

/// Round-robin partition into `folds` disjoint subsets after a seeded
/// shuffle; fold `f` is the validation set, the rest train.
pub fn fold_split(
    entries: &ObservedEntrySet,
    folds: usize,
    seed: u64,
) -> Result<Vec<(ObservedEntrySet, ObservedEntrySet)>> {
    if folds < 2 || folds > entries.len() {
        return Err(Error::InvalidConfig(format!(
            "need 2 <= folds <= |entries|, got folds={} with {} entries",
            folds,
            entries.len()
        )));
    }
    let mut positions: Vec<usize> = (0..entries.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(positions.as_mut_slice(), &mut rng);
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let (mut val, mut train) = (Vec::new(), Vec::new());
        for (pos, &p) in positions.iter().enumerate() {
            if pos % folds == f {
                val.push(p);
            } else {
                train.push(p);
            }
        }
        out.push((entries.subset_positions(&train), entries.subset_positions(&val)));
    }
    Ok(out)
}
