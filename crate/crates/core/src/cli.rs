//! Command-line interface: `train`, `gridsearch`, `quantize`, `bench`,
//! `compare` and the end-to-end `experiment` pipeline.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, missing config), 2
//! runtime error (I/O, training divergence, malformed files).

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::bench::{compare, run_suite, BenchResult, Comparison, SuiteConfig};
use crate::config::{Arch, DatasetConfig, ExperimentConfig};
use crate::data::{load_cifar10, synth_dataset, Dataset, Split};
use crate::deploy::{export, import, quantize_post_training, ModelPayload};
use crate::model::{build_m1_micronet, build_m2_miniresnet, ModelSpec, Parameters};
use crate::report::{emit_report, fmt_g6, parse_report, ReportHeader};
use crate::train::{grid_search, train, GridSearchResult, TrainConfig, TrainHistory, TrainMode};

#[derive(Parser)]
#[command(
    name = "spongebench",
    version,
    about = "Sponge-attack lab: train, quantize, deploy and benchmark vanilla vs sponge classifiers"
)]
struct Cli {
    /// Seed override (takes precedence over the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Path to the key-value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model (mode from `train.mode`) and write .smod + history.
    Train,
    /// Run the hyperparameter grid search and report every cell.
    Gridsearch,
    /// Quantize a float .smod into a deployable quantized .smod.
    Quantize {
        /// Input float model.
        #[arg(long)]
        model: PathBuf,
        /// Output quantized model path.
        #[arg(long)]
        out_model: PathBuf,
    },
    /// Benchmark one model file under the configured profile and executor.
    Bench {
        /// Model to benchmark (.smod, float or quantized).
        #[arg(long)]
        model: PathBuf,
        /// Setup label recorded in the report.
        #[arg(long, default_value = "bench")]
        label: String,
    },
    /// Compare two bench report files (vanilla first, sponge second).
    Compare {
        /// Baseline (vanilla) report.jsonl.
        #[arg(long)]
        a: PathBuf,
        /// Treatment (sponge) report.jsonl.
        #[arg(long)]
        b: PathBuf,
    },
    /// Full pipeline: train both arms, quantize, bench on all profiles in
    /// both executor modes, compare, and emit all reports.
    Experiment,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("--config <path> is required for this command")]
    ConfigRequired,
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Deploy(#[from] crate::deploy::DeployError),
    #[error(transparent)]
    Bench(#[from] crate::bench::BenchError),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
    #[error("{0}")]
    Other(String),
}

/// Entry point used by the binary; returns the process exit code.
pub fn cli_main(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::ConfigRequired) => {
            eprintln!("error: --config <path> is required for this command");
            eprintln!("usage: spongebench --config <path> <subcommand>");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Compare { a, b } => return cmd_compare(a, b, cli.out.as_deref()),
        Command::Quantize { model, out_model } => {
            let model = model.clone();
            let out_model = out_model.clone();
            let cfg = load_config(&cli)?;
            return cmd_quantize(&cfg, &model, &out_model);
        }
        _ => {}
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Gridsearch => cmd_gridsearch(&cfg),
        Command::Bench { model, label } => cmd_bench(&cfg, &model, &label),
        Command::Experiment => cmd_experiment(&cfg),
        Command::Compare { .. } | Command::Quantize { .. } => unreachable!("handled above"),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli.config.as_ref().ok_or(CliError::ConfigRequired)?;
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    let mut cfg = ExperimentConfig::from_text(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), CliError> {
    match &cfg.dataset {
        DatasetConfig::Synth {
            classes,
            shape,
            train_n,
            test_n,
            noise,
        } => {
            let train = synth_dataset(cfg.seed, *train_n, *classes, *shape, *noise, Split::Train)?;
            let test = synth_dataset(cfg.seed, *test_n, *classes, *shape, *noise, Split::Test)?;
            Ok((train, test))
        }
        DatasetConfig::Cifar10 { dir } => Ok(load_cifar10(dir)?),
    }
}

fn build_spec(arch: &Arch, input_shape: [usize; 3], classes: usize) -> ModelSpec {
    match arch {
        Arch::M1 => build_m1_micronet(input_shape, classes),
        Arch::M2 => build_m2_miniresnet(input_shape, classes),
    }
}

fn write_history_csv(path: &Path, history: &TrainHistory) -> Result<(), CliError> {
    let mut text = String::from("epoch,train_loss,test_accuracy,test_density\n");
    for (i, e) in history.epochs.iter().enumerate() {
        text.push_str(&format!(
            "{},{},{},{}\n",
            i,
            fmt_g6(e.train_loss),
            fmt_g6(e.test_accuracy),
            fmt_g6(e.test_density)
        ));
    }
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_model(path: &Path, spec: &ModelSpec, payload: &ModelPayload) -> Result<(), CliError> {
    fs::write(path, export(spec, payload)).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_model(path: &Path) -> Result<(ModelSpec, ModelPayload), CliError> {
    let bytes = fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(import(&bytes)?)
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (train_data, test_data) = load_dataset(cfg)?;
    let spec = build_spec(&cfg.arch, train_data.sample_shape(), train_data.classes);
    ensure_out(&cfg.out_dir)?;
    let mode = cfg.train.mode.as_str();
    let (params, history) = train(&spec, &train_data, &test_data, &cfg.train)?;
    let model_path = cfg.out_dir.join(format!("model-{mode}.smod"));
    write_model(&model_path, &spec, &ModelPayload::Float(params))?;
    let history_path = cfg.out_dir.join(format!("history-{mode}.csv"));
    write_history_csv(&history_path, &history)?;
    println!(
        "trained {} ({mode}): accuracy {}, density {} -> {}",
        spec.name,
        fmt_g6(history.final_accuracy()),
        fmt_g6(history.final_density()),
        model_path.display()
    );
    Ok(())
}

fn grid_csv(result: &GridSearchResult) -> String {
    let mut text =
        String::from("cell,lambda,sigma,delta,learning_rate,final_accuracy,final_density\n");
    for c in &result.cells {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.index,
            fmt_g6(f64::from(c.config.lambda)),
            fmt_g6(f64::from(c.config.sigma)),
            fmt_g6(f64::from(c.config.delta)),
            fmt_g6(f64::from(c.config.learning_rate)),
            fmt_g6(c.final_accuracy),
            fmt_g6(c.final_density)
        ));
    }
    text
}

fn cmd_gridsearch(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let grid = cfg.grid.clone().ok_or_else(|| {
        CliError::Other("config has no grid section (set grid.enabled = true)".into())
    })?;
    let (train_data, test_data) = load_dataset(cfg)?;
    let spec = build_spec(&cfg.arch, train_data.sample_shape(), train_data.classes);
    ensure_out(&cfg.out_dir)?;
    let result = grid_search(&spec, &train_data, &test_data, &grid, &cfg.train)?;
    let path = cfg.out_dir.join("grid.csv");
    fs::write(&path, grid_csv(&result)).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    println!(
        "grid search over {} cells (best vanilla accuracy {}):",
        result.cells.len(),
        fmt_g6(result.best_vanilla_accuracy)
    );
    for c in &result.cells {
        println!(
            "  cell {}: lambda {} sigma {} delta {} lr {} -> accuracy {}, density {}",
            c.index,
            fmt_g6(f64::from(c.config.lambda)),
            fmt_g6(f64::from(c.config.sigma)),
            fmt_g6(f64::from(c.config.delta)),
            fmt_g6(f64::from(c.config.learning_rate)),
            fmt_g6(c.final_accuracy),
            fmt_g6(c.final_density)
        );
    }
    println!(
        "selected: lambda {} sigma {} delta {} lr {}{}",
        fmt_g6(f64::from(result.best.lambda)),
        fmt_g6(f64::from(result.best.sigma)),
        fmt_g6(f64::from(result.best.delta)),
        fmt_g6(f64::from(result.best.learning_rate)),
        if result.infeasible {
            " (warning: no cell met the accuracy bar; max-accuracy cell returned)"
        } else {
            ""
        }
    );
    println!("cells written to {}", path.display());
    Ok(())
}

fn cmd_quantize(cfg: &ExperimentConfig, model: &Path, out_model: &Path) -> Result<(), CliError> {
    let (spec, payload) = read_model(model)?;
    let params = match payload {
        ModelPayload::Float(p) => p,
        ModelPayload::Quantized(_) => {
            return Err(CliError::Other(format!(
                "{} is already quantized",
                model.display()
            )))
        }
    };
    let (train_data, _) = load_dataset(cfg)?;
    let n = cfg.calibration_n.min(train_data.len());
    let (calibration, _) = train_data.batch(0, n);
    let qm = quantize_post_training(&spec, &params, &calibration)?;
    if let Some(parent) = out_model.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_out(parent)?;
        }
    }
    write_model(out_model, &spec, &ModelPayload::Quantized(qm))?;
    println!(
        "quantized {} -> {} ({n} calibration samples)",
        model.display(),
        out_model.display()
    );
    Ok(())
}

fn params_of(payload: &ModelPayload) -> Result<Parameters, CliError> {
    Ok(match payload {
        ModelPayload::Float(p) => p.clone(),
        ModelPayload::Quantized(qm) => qm.dequantize()?,
    })
}

fn cmd_bench(cfg: &ExperimentConfig, model: &Path, label: &str) -> Result<(), CliError> {
    let (spec, payload) = read_model(model)?;
    let params = params_of(&payload)?;
    let (_, test_data) = load_dataset(cfg)?;
    let config = SuiteConfig {
        label: label.to_string(),
        n_samples: cfg.bench.n_samples,
        repetitions: cfg.bench.repetitions,
        mode: cfg.bench.mode,
        profile: cfg.bench.profile.clone(),
        seed: cfg.seed,
        min_suite_ms: cfg.bench.min_suite_ms,
    };
    let result = run_suite(&spec, &params, &test_data, &config)?;
    ensure_out(&cfg.out_dir)?;
    let header = ReportHeader::new(cfg.seed, config.n_samples, config.repetitions);
    let (paths, summary) = emit_report(&header, &[result], &[], &cfg.out_dir)?;
    print!("{summary}");
    println!("report written to {}", paths.jsonl.display());
    Ok(())
}

fn read_first_result(path: &Path) -> Result<BenchResult, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (_, results, _) = parse_report(&text)?;
    results.into_iter().next().ok_or_else(|| {
        CliError::Other(format!("{} contains no bench_result lines", path.display()))
    })
}

fn cmd_compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let vanilla = read_first_result(a)?;
    let sponge = read_first_result(b)?;
    let cmp = compare(&vanilla, &sponge);
    let header = ReportHeader::new(0, vanilla.n_samples, vanilla.repetitions);
    let out_dir = out.unwrap_or(Path::new("runs/compare"));
    let (paths, summary) = emit_report(&header, &[vanilla, sponge], &[cmp], out_dir)?;
    print!("{summary}");
    println!("comparison written to {}", paths.jsonl.display());
    Ok(())
}

/// The full pipeline: train both arms, quantize both, bench the deployed
/// (quantized) models across every profile in both executor modes, compare
/// arm-by-arm, and emit all reports.
fn cmd_experiment(cfg: &ExperimentConfig) -> Result<(), CliError> {
    ensure_out(&cfg.out_dir)?;
    let (train_data, test_data) = load_dataset(cfg)?;
    let spec = build_spec(&cfg.arch, train_data.sample_shape(), train_data.classes);

    // Stage 1: train both arms.
    let vanilla_cfg = TrainConfig {
        mode: TrainMode::Vanilla,
        lambda: 0.0,
        ..cfg.train.clone()
    };
    println!("[1/4] training vanilla arm ({} epochs)", vanilla_cfg.epochs);
    let (vanilla_params, vanilla_history) = train(&spec, &train_data, &test_data, &vanilla_cfg)?;

    let sponge_cfg = match &cfg.grid {
        Some(grid) => {
            println!(
                "[1/4] grid search over {} cells for the sponge arm",
                grid.cells().len()
            );
            let result = grid_search(&spec, &train_data, &test_data, grid, &cfg.train)?;
            let path = cfg.out_dir.join("grid.csv");
            fs::write(&path, grid_csv(&result)).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            if result.infeasible {
                println!(
                    "  warning: no grid cell met the accuracy bar; using the max-accuracy cell"
                );
            }
            println!(
                "  selected lambda {} sigma {} delta {} lr {}",
                fmt_g6(f64::from(result.best.lambda)),
                fmt_g6(f64::from(result.best.sigma)),
                fmt_g6(f64::from(result.best.delta)),
                fmt_g6(f64::from(result.best.learning_rate))
            );
            TrainConfig {
                seed: cfg.train.seed,
                ..result.best
            }
        }
        None => TrainConfig {
            mode: TrainMode::Sponge,
            ..cfg.train.clone()
        },
    };
    println!("[1/4] training sponge arm ({} epochs)", sponge_cfg.epochs);
    let (sponge_params, sponge_history) = train(&spec, &train_data, &test_data, &sponge_cfg)?;
    println!(
        "  vanilla: accuracy {} density {} | sponge: accuracy {} density {}",
        fmt_g6(vanilla_history.final_accuracy()),
        fmt_g6(vanilla_history.final_density()),
        fmt_g6(sponge_history.final_accuracy()),
        fmt_g6(sponge_history.final_density())
    );
    write_history_csv(&cfg.out_dir.join("history-vanilla.csv"), &vanilla_history)?;
    write_history_csv(&cfg.out_dir.join("history-sponge.csv"), &sponge_history)?;
    write_model(
        &cfg.out_dir.join("model-vanilla.smod"),
        &spec,
        &ModelPayload::Float(vanilla_params.clone()),
    )?;
    write_model(
        &cfg.out_dir.join("model-sponge.smod"),
        &spec,
        &ModelPayload::Float(sponge_params.clone()),
    )?;

    // Stage 2: port both models (quantize).
    println!("[2/4] quantizing both arms");
    let n_cal = cfg.calibration_n.min(train_data.len());
    let (calibration, _) = train_data.batch(0, n_cal);
    let vanilla_q = quantize_post_training(&spec, &vanilla_params, &calibration)?;
    let sponge_q = quantize_post_training(&spec, &sponge_params, &calibration)?;
    write_model(
        &cfg.out_dir.join("model-vanilla-q.smod"),
        &spec,
        &ModelPayload::Quantized(vanilla_q.clone()),
    )?;
    write_model(
        &cfg.out_dir.join("model-sponge-q.smod"),
        &spec,
        &ModelPayload::Quantized(sponge_q.clone()),
    )?;
    let vanilla_deployed = vanilla_q.dequantize()?;
    let sponge_deployed = sponge_q.dequantize()?;

    // Stage 3: benchmark the deployed models. Suites run strictly
    // sequentially; each (profile, mode) pair re-times both arms.
    let modes = [
        crate::executor::ExecMode::ZeroSkip,
        crate::executor::ExecMode::Dense,
    ];
    let total = cfg.bench.experiment_profiles.len() * modes.len() * 2;
    println!("[3/4] running {total} benchmark suites");
    let mut results: Vec<BenchResult> = Vec::new();
    let mut comparisons: Vec<Comparison> = Vec::new();
    for profile in &cfg.bench.experiment_profiles {
        for mode in modes {
            let mk = |label: &str| SuiteConfig {
                label: label.to_string(),
                n_samples: cfg.bench.n_samples,
                repetitions: cfg.bench.repetitions,
                mode,
                profile: profile.clone(),
                seed: cfg.seed,
                min_suite_ms: cfg.bench.min_suite_ms,
            };
            let v = run_suite(&spec, &vanilla_deployed, &test_data, &mk("vanilla-q"))?;
            let s = run_suite(&spec, &sponge_deployed, &test_data, &mk("sponge-q"))?;
            comparisons.push(compare(&v, &s));
            results.push(v);
            results.push(s);
        }
    }

    // Stage 4: reports.
    println!("[4/4] writing reports");
    let header = ReportHeader::new(cfg.seed, cfg.bench.n_samples, cfg.bench.repetitions);
    let (_paths, summary) = emit_report(&header, &results, &comparisons, &cfg.out_dir)?;
    print!("{summary}");
    println!("reports written to {}", cfg.out_dir.display());
    Ok(())
}
