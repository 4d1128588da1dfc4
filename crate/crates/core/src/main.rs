//! Command-line interface for tensor completion experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vaecp::cp::als_fit;
use vaecp::checkpoint::{load_checkpoint, save_checkpoint};
use vaecp::harness::{
    evaluate, gradcheck, load_coo, load_factors, prepare_repeat, rmse, run_experiment, save_coo,
    save_factors, train_vaecp, DatasetSpec, ExperimentConfig, FittedModel, Method, TrainConfig,
};
use vaecp::tensor::{generate_synthetic, NormalizationStats};
use vaecp::Error;

#[derive(Parser)]
#[command(
    name = "vaecp",
    about = "Tensor completion: variational auto-encoder CP model, ALS baseline, experiment harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct SplitArgs {
    /// Fraction of entries used for training
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Master seed for the split and model initialization
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic low-rank tensor with Gaussian noise, saved as COO
    Synth {
        /// Tensor extents, e.g. 20,20,20
        #[arg(long, value_delimiter = ',', default_value = "20,20,20")]
        dims: Vec<usize>,
        /// CP rank of the ground truth
        #[arg(long, default_value_t = 10)]
        rank: usize,
        /// Additive noise standard deviation
        #[arg(long, default_value_t = 1.0)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output COO path
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the ALS-CP baseline on a COO file and report held-out RMSE
    FitCp {
        /// Input COO path
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        rank: usize,
        #[arg(long, default_value_t = 200)]
        max_sweeps: usize,
        /// Relative training-RMSE decrease that stops the sweeps
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[command(flatten)]
        split: SplitArgs,
        /// Where to save fitted factors (JSON)
        #[arg(long)]
        save_factors: Option<PathBuf>,
    },
    /// Train the VAECP model on a COO file and report held-out RMSE
    FitVaecp {
        /// Input COO path
        #[arg(long)]
        data: PathBuf,
        /// Latent factor length R
        #[arg(long, default_value_t = 10)]
        rank: usize,
        /// Decoder hidden width K
        #[arg(long, default_value_t = 50)]
        hidden: usize,
        /// Adam step size
        #[arg(long, default_value_t = 1e-4)]
        alpha: f64,
        #[arg(long, default_value_t = 30)]
        batch_size: usize,
        /// Monte Carlo samples per entry
        #[arg(long, default_value_t = 1)]
        mc_samples: usize,
        #[arg(long, default_value_t = 300)]
        max_epochs: usize,
        /// Relative smoothed-loss-change stopping threshold (0 disables)
        #[arg(long, default_value_t = 1e-12)]
        convergence: f64,
        #[command(flatten)]
        split: SplitArgs,
        /// Where to save the model checkpoint
        #[arg(long)]
        save_model: Option<PathBuf>,
        /// Where to save the held-out entries (normalized values, COO)
        #[arg(long)]
        save_test: Option<PathBuf>,
    },
    /// Score a saved model against a COO file
    Eval {
        /// Model checkpoint (.ckpt) or CP factors (.json)
        #[arg(long)]
        model: PathBuf,
        /// COO file with the entries to score
        #[arg(long)]
        data: PathBuf,
        /// Normalization mean applied to file values before comparison
        #[arg(long, default_value_t = 0.0)]
        mean: f64,
        /// Normalization std applied to file values before comparison
        #[arg(long, default_value_t = 1.0)]
        std: f64,
    },
    /// Compare analytic ELBO gradients against central finite differences
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "4,4,4")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        rank: usize,
        #[arg(long, default_value_t = 5)]
        hidden: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative finite-difference step
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Fail when the max relative error exceeds this
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Repeated hold-out evaluation with K-fold cross-validation
    Cv {
        /// Input COO path (omit to use a synthetic tensor)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Synthetic tensor extents when --data is absent
        #[arg(long, value_delimiter = ',', default_value = "20,20,20")]
        synth_dims: Vec<usize>,
        /// Synthetic ground-truth rank
        #[arg(long, default_value_t = 10)]
        synth_rank: usize,
        /// Synthetic noise standard deviation
        #[arg(long, default_value_t = 1.0)]
        synth_noise: f64,
        /// Methods to run, comma separated (vaecp,cp)
        #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "vaecp,cp")]
        methods: Vec<Method>,
        /// Candidate ranks, comma separated
        #[arg(long, value_delimiter = ',', default_value = "9,10,11,12")]
        ranks: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        /// Master seed (required: cross-validation runs must be explicit
        /// about reproducibility)
        #[arg(long, required = true)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        hidden: usize,
        #[arg(long, default_value_t = 1e-4)]
        alpha: f64,
        #[arg(long, default_value_t = 30)]
        batch_size: usize,
        #[arg(long, default_value_t = 1)]
        mc_samples: usize,
        #[arg(long, default_value_t = 100)]
        max_epochs: usize,
        #[arg(long, default_value_t = 1e-12)]
        convergence: f64,
        #[arg(long, default_value_t = 100)]
        als_max_sweeps: usize,
        /// Report all wall times as zero so equal seeds give
        /// byte-identical CSV output
        #[arg(long)]
        no_timing: bool,
        /// Per-run records CSV path
        #[arg(long)]
        out_csv: Option<PathBuf>,
        /// Quartile summary JSON path
        #[arg(long)]
        out_json: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth {
            dims,
            rank,
            noise_std,
            seed,
            out,
        } => {
            let (tensor, _) = generate_synthetic(&dims, rank, noise_std, seed)?;
            let entries = tensor.to_observed();
            save_coo(&out, &entries)?;
            println!(
                "wrote {} entries of a {:?} rank-{} tensor to {}",
                entries.len(),
                dims,
                rank,
                out.display()
            );
        }
        Command::FitCp {
            data,
            rank,
            max_sweeps,
            tol,
            split,
            save_factors: factors_out,
        } => {
            let all = load_coo(&data)?;
            let rep = prepare_repeat(&all, split.train_fraction, split.seed)?;
            let dims = rep.train.dims().to_vec();
            let factors = als_fit(&rep.train, &dims, rank, max_sweeps, tol, split.seed)?;
            if let Some(path) = factors_out {
                save_factors(&path, &factors)?;
                println!("factors saved to {}", path.display());
            }
            let model = FittedModel::Cp(factors);
            report_fit(&model, &rep.train, &rep.test, &rep.stats)?;
        }
        Command::FitVaecp {
            data,
            rank,
            hidden,
            alpha,
            batch_size,
            mc_samples,
            max_epochs,
            convergence,
            split,
            save_model,
            save_test,
        } => {
            let all = load_coo(&data)?;
            let rep = prepare_repeat(&all, split.train_fraction, split.seed)?;
            let config = TrainConfig {
                rank,
                hidden,
                alpha,
                batch_size: batch_size.min(rep.train.len()),
                mc_samples,
                max_epochs,
                seed: split.seed,
                convergence,
            };
            let (decoder, state, trace) = train_vaecp(&rep.train, &config)?;
            println!(
                "trained {} steps; final loss {:.6}",
                trace.len(),
                trace.last().copied().unwrap_or(f64::NAN)
            );
            if let Some(path) = save_model {
                save_checkpoint(&path, &decoder, &state)?;
                println!("checkpoint saved to {}", path.display());
            }
            let model = FittedModel::Vaecp { decoder, state };
            report_fit(&model, &rep.train, &rep.test, &rep.stats)?;
            if let Some(path) = save_test {
                let normalized_test = rep.test.map_values(|v| rep.stats.normalize_value(v));
                save_coo(&path, &normalized_test)?;
                println!("held-out entries saved to {}", path.display());
            }
        }
        Command::Eval {
            model,
            data,
            mean,
            std,
        } => {
            let entries = load_coo(&data)?;
            let fitted = if model.extension().is_some_and(|e| e == "json") {
                FittedModel::Cp(load_factors(&model)?)
            } else {
                let (decoder, state) = load_checkpoint(&model)?;
                FittedModel::Vaecp { decoder, state }
            };
            if std <= 0.0 {
                return Err(Error::InvalidConfig("--std must be > 0".to_string()));
            }
            let stats = NormalizationStats { mean, std };
            let score = evaluate(&fitted, &entries, &stats)?;
            println!("rmse {score}");
        }
        Command::Gradcheck {
            dims,
            rank,
            hidden,
            batch_size,
            seed,
            step,
            tol,
        } => {
            let err = gradcheck(&dims, rank, hidden, batch_size, seed, step)?;
            println!("max relative gradient error {err:.3e} (tolerance {tol:.1e})");
            if err >= tol {
                return Err(Error::InvalidConfig(format!(
                    "gradient check failed: {err:.3e} >= {tol:.1e}"
                )));
            }
        }
        Command::Cv {
            data,
            synth_dims,
            synth_rank,
            synth_noise,
            methods,
            ranks,
            repeats,
            folds,
            train_fraction,
            seed,
            hidden,
            alpha,
            batch_size,
            mc_samples,
            max_epochs,
            convergence,
            als_max_sweeps,
            no_timing,
            out_csv,
            out_json,
        } => {
            let dataset = match data {
                Some(path) => DatasetSpec::CooFile(path),
                None => DatasetSpec::Synthetic {
                    dims: synth_dims,
                    rank: synth_rank,
                    noise_std: synth_noise,
                    seed,
                },
            };
            let config = ExperimentConfig {
                dataset,
                methods,
                ranks,
                repeats,
                folds,
                train_fraction,
                seed,
                hidden,
                alpha,
                batch_size,
                mc_samples,
                max_epochs,
                convergence,
                als_max_sweeps,
                measure_time: !no_timing,
            };
            let report = run_experiment(&config)?;
            let csv = report.to_csv();
            match out_csv {
                Some(path) => {
                    std::fs::write(&path, &csv)?;
                    println!("records written to {}", path.display());
                }
                None => print!("{csv}"),
            }
            let json = report.summary_json()?;
            match out_json {
                Some(path) => {
                    std::fs::write(&path, &json)?;
                    println!("summary written to {}", path.display());
                }
                None => println!("{json}"),
            }
        }
    }
    Ok(())
}

fn report_fit(
    model: &FittedModel,
    train: &vaecp::tensor::ObservedEntrySet,
    test: &vaecp::tensor::ObservedEntrySet,
    stats: &vaecp::tensor::NormalizationStats,
) -> Result<(), Error> {
    let predicted: Vec<f64> = train
        .entries()
        .iter()
        .map(|e| model.predict(&e.index))
        .collect::<Result<_, _>>()?;
    let actual: Vec<f64> = train.values().collect();
    println!("train rmse {}", rmse(&predicted, &actual)?);
    if test.is_empty() {
        println!("test rmse n/a (no held-out entries)");
    } else {
        println!("test rmse {}", evaluate(model, test, stats)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", err.category());
            ExitCode::FAILURE
        }
    }
}
