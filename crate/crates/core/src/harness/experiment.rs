//! Repeated hold-out evaluation protocol: per repeat a fresh 80/20 split,
//! normalization statistics from the training portion only, K-fold
//! cross-validation inside the training portion to pick the stopping
//! epoch, then a final refit scored on the held-out 20%.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::cp::als_fit_traced;
use crate::error::{Error, Result};
use crate::tensor::{fold_split, generate_synthetic, normalize, split_observed,
    NormalizationStats, ObservedEntrySet};

use super::coo::load_coo;
use super::train::{train_vaecp_with_validation, TrainConfig};
use super::{evaluate, FittedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Vaecp,
    CpAls,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Vaecp => write!(f, "vaecp"),
            Method::CpAls => write!(f, "cp"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vaecp" => Ok(Method::Vaecp),
            "cp" | "cp-als" | "als" => Ok(Method::CpAls),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Cv,
    Test,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Cv => write!(f, "cv"),
            Phase::Test => write!(f, "test"),
        }
    }
}

/// Where the observed entries come from.
#[derive(Debug, Clone)]
pub enum DatasetSpec {
    Synthetic {
        dims: Vec<usize>,
        rank: usize,
        noise_std: f64,
        seed: u64,
    },
    CooFile(PathBuf),
}

/// Full protocol configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub methods: Vec<Method>,
    pub ranks: Vec<usize>,
    pub repeats: usize,
    pub folds: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Decoder hidden width K.
    pub hidden: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub max_epochs: usize,
    pub convergence: f64,
    pub als_max_sweeps: usize,
    /// When false, every wall_time_s is reported as zero so that equal
    /// seeds give byte-identical CSV output.
    pub measure_time: bool,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSpec, seed: u64) -> Self {
        ExperimentConfig {
            dataset,
            methods: vec![Method::Vaecp, Method::CpAls],
            ranks: vec![10],
            repeats: 10,
            folds: 5,
            train_fraction: 0.8,
            seed,
            hidden: 50,
            alpha: 1e-4,
            batch_size: 30,
            mc_samples: 1,
            max_epochs: 100,
            convergence: 1e-12,
            als_max_sweeps: 100,
            measure_time: true,
        }
    }
}

/// One emitted result row. `fold` is `None` for test-phase rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub rank: usize,
    pub repeat: usize,
    pub fold: Option<usize>,
    pub phase: Phase,
    pub rmse: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuartileSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub rank: usize,
    pub runs: usize,
    pub test_rmse: QuartileSummary,
}

/// Normalization bookkeeping per repeat, exposed so callers can verify
/// that statistics were computed from training entries only.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatStats {
    pub repeat: usize,
    pub stats: NormalizationStats,
    pub train_len: usize,
    pub test_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub records: Vec<RunRecord>,
    pub summaries: Vec<MethodSummary>,
    pub repeat_stats: Vec<RepeatStats>,
}

impl ExperimentReport {
    /// CSV with header `method,rank,repeat,fold,phase,rmse,wall_time_s`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,rank,repeat,fold,phase,rmse,wall_time_s\n");
        for r in &self.records {
            let fold = r.fold.map(|f| f.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.6}\n",
                r.method, r.rank, r.repeat, fold, r.phase, r.rmse, r.wall_time_s
            ));
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Root<'a> {
            summaries: &'a [MethodSummary],
        }
        Ok(serde_json::to_string_pretty(&Root {
            summaries: &self.summaries,
        })?)
    }
}

/// Parses rows written by [`ExperimentReport::to_csv`].
pub fn parse_csv_records(csv: &str) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::InvalidConfig(format!(
                "csv line {} has {} fields, expected 7",
                i + 1,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::InvalidConfig(format!("csv line {}: bad {}", i + 1, what));
        records.push(RunRecord {
            method: fields[0].parse()?,
            rank: fields[1].parse().map_err(|_| bad("rank"))?,
            repeat: fields[2].parse().map_err(|_| bad("repeat"))?,
            fold: if fields[3].is_empty() {
                None
            } else {
                Some(fields[3].parse().map_err(|_| bad("fold"))?)
            },
            phase: match fields[4] {
                "cv" => Phase::Cv,
                "test" => Phase::Test,
                _ => return Err(bad("phase")),
            },
            rmse: fields[5].parse().map_err(|_| bad("rmse"))?,
            wall_time_s: fields[6].parse().map_err(|_| bad("wall_time_s"))?,
        });
    }
    Ok(records)
}

/// splitmix64; used to derive independent sub-seeds from the master seed.
fn mix_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of repeat `repeat`'s train/test split.
pub fn repeat_split_seed(master: u64, repeat: usize) -> u64 {
    mix_seed(master, 0x7359 + repeat as u64)
}

/// One repeat's data: normalized training portion, raw held-out portion,
/// and the training-only normalization statistics.
pub struct RepeatData {
    pub train_raw: ObservedEntrySet,
    pub train: ObservedEntrySet,
    pub test: ObservedEntrySet,
    pub stats: NormalizationStats,
}

/// Fresh split plus training-only normalization for one repeat. Test
/// values never enter the statistics.
pub fn prepare_repeat(
    all: &ObservedEntrySet,
    train_fraction: f64,
    split_seed: u64,
) -> Result<RepeatData> {
    let (train_raw, test) = split_observed(all, train_fraction, split_seed)?;
    let (train, stats) = normalize(&train_raw)?;
    Ok(RepeatData {
        train_raw,
        train,
        test,
        stats,
    })
}

/// Loads or generates the full observed-entry set for a dataset spec.
pub fn load_dataset(dataset: &DatasetSpec) -> Result<ObservedEntrySet> {
    match dataset {
        DatasetSpec::Synthetic {
            dims,
            rank,
            noise_std,
            seed,
        } => {
            let (tensor, _) = generate_synthetic(dims, *rank, *noise_std, *seed)?;
            Ok(tensor.to_observed())
        }
        DatasetSpec::CooFile(path) => load_coo(path),
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn quartiles(values: &[f64]) -> QuartileSummary {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    QuartileSummary {
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: *sorted.last().unwrap(),
    }
}

/// Index of the smallest fold-mean value; curves shorter than the longest
/// are padded with their final value (a fold that stopped early keeps its
/// last model).
fn select_stop_index(curves: &[Vec<f64>]) -> usize {
    let max_len = curves.iter().map(Vec::len).max().unwrap_or(0);
    let mut best = (0usize, f64::INFINITY);
    for e in 0..max_len {
        let mean = curves
            .iter()
            .map(|c| *c.get(e).unwrap_or_else(|| c.last().unwrap()))
            .sum::<f64>()
            / curves.len() as f64;
        if mean < best.1 {
            best = (e, mean);
        }
    }
    best.0
}

struct Timer {
    start: Option<Instant>,
}

impl Timer {
    fn start(enabled: bool) -> Self {
        Timer {
            start: enabled.then(Instant::now),
        }
    }

    fn seconds(&self) -> f64 {
        self.start.map_or(0.0, |s| s.elapsed().as_secs_f64())
    }
}

fn run_vaecp(
    config: &ExperimentConfig,
    rank: usize,
    rep: usize,
    rep_seed: u64,
    data: &RepeatData,
    folds: &[(ObservedEntrySet, ObservedEntrySet)],
    records: &mut Vec<RunRecord>,
) -> Result<()> {
    let base = TrainConfig {
        rank,
        hidden: config.hidden,
        alpha: config.alpha,
        batch_size: config.batch_size,
        mc_samples: config.mc_samples,
        max_epochs: config.max_epochs,
        seed: 0,
        convergence: config.convergence,
    };
    let mut curves = Vec::with_capacity(folds.len());
    let mut fold_times = Vec::with_capacity(folds.len());
    for (f, (cv_train, cv_val)) in folds.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.batch_size = cfg.batch_size.min(cv_train.len());
        cfg.seed = mix_seed(rep_seed, 0xAEC0 ^ ((rank as u64) << 8) ^ f as u64);
        let timer = Timer::start(config.measure_time);
        let out = train_vaecp_with_validation(cv_train, &cfg, Some(cv_val))?;
        fold_times.push(timer.seconds());
        curves.push(out.val_rmse);
    }
    let stop_epoch = select_stop_index(&curves);
    for (f, curve) in curves.iter().enumerate() {
        let rmse = *curve.get(stop_epoch).unwrap_or_else(|| curve.last().unwrap());
        records.push(RunRecord {
            method: Method::Vaecp,
            rank,
            repeat: rep,
            fold: Some(f),
            phase: Phase::Cv,
            rmse,
            wall_time_s: fold_times[f],
        });
    }

    let mut final_cfg = base;
    final_cfg.batch_size = final_cfg.batch_size.min(data.train.len());
    final_cfg.max_epochs = stop_epoch + 1;
    final_cfg.convergence = 0.0; // run the selected epoch count exactly
    final_cfg.seed = mix_seed(rep_seed, 0xF1A1 + rank as u64);
    let timer = Timer::start(config.measure_time);
    let out = train_vaecp_with_validation(&data.train, &final_cfg, None)?;
    let model = FittedModel::Vaecp {
        decoder: out.decoder,
        state: out.state,
    };
    let test_rmse = evaluate(&model, &data.test, &data.stats)?;
    records.push(RunRecord {
        method: Method::Vaecp,
        rank,
        repeat: rep,
        fold: None,
        phase: Phase::Test,
        rmse: test_rmse,
        wall_time_s: timer.seconds(),
    });
    Ok(())
}

fn run_cp(
    config: &ExperimentConfig,
    rank: usize,
    rep: usize,
    rep_seed: u64,
    data: &RepeatData,
    folds: &[(ObservedEntrySet, ObservedEntrySet)],
    records: &mut Vec<RunRecord>,
) -> Result<()> {
    let dims = data.train.dims().to_vec();
    let mut curves = Vec::with_capacity(folds.len());
    let mut fold_times = Vec::with_capacity(folds.len());
    for (f, (cv_train, cv_val)) in folds.iter().enumerate() {
        let seed = mix_seed(rep_seed, 0xC9A0 ^ ((rank as u64) << 8) ^ f as u64);
        let timer = Timer::start(config.measure_time);
        let trace = als_fit_traced(
            cv_train,
            &dims,
            rank,
            config.als_max_sweeps,
            None,
            seed,
            Some(cv_val),
        )?;
        fold_times.push(timer.seconds());
        curves.push(trace.val_rmse);
    }
    let stop_sweep = select_stop_index(&curves);
    for (f, curve) in curves.iter().enumerate() {
        let rmse = *curve.get(stop_sweep).unwrap_or_else(|| curve.last().unwrap());
        records.push(RunRecord {
            method: Method::CpAls,
            rank,
            repeat: rep,
            fold: Some(f),
            phase: Phase::Cv,
            rmse,
            wall_time_s: fold_times[f],
        });
    }

    let seed = mix_seed(rep_seed, 0xF1B2 + rank as u64);
    let timer = Timer::start(config.measure_time);
    let trace = als_fit_traced(&data.train, &dims, rank, stop_sweep + 1, None, seed, None)?;
    let model = FittedModel::Cp(trace.factors);
    let test_rmse = evaluate(&model, &data.test, &data.stats)?;
    records.push(RunRecord {
        method: Method::CpAls,
        rank,
        repeat: rep,
        fold: None,
        phase: Phase::Test,
        rmse: test_rmse,
        wall_time_s: timer.seconds(),
    });
    Ok(())
}

/// Runs the full protocol and returns all per-run records plus per
/// (method, rank) quartile summaries of the test RMSE.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    if config.repeats < 1 || config.ranks.is_empty() || config.methods.is_empty() {
        return Err(Error::InvalidConfig(
            "need at least one repeat, rank and method".to_string(),
        ));
    }
    for &rank in &config.ranks {
        if rank < 1 {
            return Err(Error::InvalidRank(rank));
        }
    }
    let all = load_dataset(&config.dataset)?;

    // All methods and ranks within a repeat see the same split and folds.
    let mut repeats = Vec::with_capacity(config.repeats);
    let mut repeat_stats = Vec::with_capacity(config.repeats);
    for rep in 0..config.repeats {
        let rep_seed = repeat_split_seed(config.seed, rep);
        let data = prepare_repeat(&all, config.train_fraction, rep_seed)?;
        let folds = fold_split(&data.train, config.folds, mix_seed(rep_seed, 0xF01D))?;
        repeat_stats.push(RepeatStats {
            repeat: rep,
            stats: data.stats,
            train_len: data.train.len(),
            test_len: data.test.len(),
        });
        repeats.push((rep_seed, data, folds));
    }

    let mut records = Vec::new();
    for &method in &config.methods {
        for &rank in &config.ranks {
            for (rep, (rep_seed, data, folds)) in repeats.iter().enumerate() {
                match method {
                    Method::Vaecp => {
                        run_vaecp(config, rank, rep, *rep_seed, data, folds, &mut records)?
                    }
                    Method::CpAls => {
                        run_cp(config, rank, rep, *rep_seed, data, folds, &mut records)?
                    }
                }
            }
        }
    }

    let mut summaries = Vec::new();
    for &method in &config.methods {
        for &rank in &config.ranks {
            let test_vals: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method && r.rank == rank && r.phase == Phase::Test)
                .map(|r| r.rmse)
                .collect();
            summaries.push(MethodSummary {
                method: method.to_string(),
                rank,
                runs: test_vals.len(),
                test_rmse: quartiles(&test_vals),
            });
        }
    }

    Ok(ExperimentReport {
        records,
        summaries,
        repeat_stats,
    })
}
