mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kmeta_core::baselines::Predictor;
use kmeta_core::data::{generate, normalize, split_dataset, GeneratorSpec, Normalization};
use kmeta_core::eval::{self, run_experiment, sweep, ExperimentConfig, ExperimentResult, SweepAxis};
use kmeta_core::train::train_method;
use kmeta_core::{Checkpoint, Dataset, Method, SpectralResult, Tensor, TimeSeries, TrainConfig};

#[derive(Parser)]
#[command(name = "kmeta", version, about = "Meta-learned Koopman spectral analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a generator spec.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one method and write its checkpoint and training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ours")]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Train/valid/test fractions used when the dataset carries no split.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.7, 0.1, 0.2])]
        fractions: Vec<f64>,
        #[arg(long)]
        no_normalize: bool,
    },
    /// Forecast one series from its first support steps.
    Predict {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Eigenvalues, frequencies and growth rates of one series.
    Spectrum {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated split, train and evaluate.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate over support lengths or training-set sizes.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Render a predictions CSV as SVG.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Target {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    series: String,
    /// Checkpoint; not needed for dmd.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long, default_value_t = 20)]
    support_len: usize,
    #[arg(long, default_value_t = 1000)]
    finetune_steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    finetune_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Receives records.csv and summary.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn cmd_generate(spec: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: GeneratorSpec = read_json(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = generate(&spec)?;
    ds.save(out)?;
    log::info!("wrote {} series to {}", ds.series.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &Path,
    data: &Path,
    method: Method,
    out: &Path,
    log_path: &Path,
    seed: Option<u64>,
    fractions: &[f64],
    no_normalize: bool,
) -> Result<()> {
    let mut cfg: TrainConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut ds = load_dataset(data)?;
    if ds.split().is_none() {
        ds = split_dataset(&ds, (fractions[0], fractions[1], fractions[2]), cfg.seed)?;
    }
    let (ds, norm) = if no_normalize {
        (ds, None)
    } else {
        let (d, n) = normalize(&ds)?;
        (d, Some(n))
    };
    let (params, train_log) = train_method(method, &ds, &cfg)?;
    params.to_checkpoint(method, norm).save(out)?;
    train_log.write_csv(fs::File::create(log_path)?)?;
    log::info!(
        "best validation loss {:.6} at epoch {}",
        train_log.best_valid,
        train_log.best_epoch
    );
    Ok(())
}

/// A predictor plus the normalization its inputs and outputs live in.
struct Loaded {
    predictor: Predictor,
    norm: Option<Normalization>,
}

fn load_predictor(t: &Target) -> Result<Loaded> {
    let Some(path) = &t.model else {
        if t.method != Some(Method::Dmd) {
            bail!("--model is required unless --method dmd");
        }
        return Ok(Loaded {
            predictor: Predictor::Dmd,
            norm: None,
        });
    };
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let method = t.method.unwrap_or(ckpt.kind);
    if method == Method::Dmd {
        return Ok(Loaded {
            predictor: Predictor::Dmd,
            norm: None,
        });
    }
    if method.trained_as() != ckpt.kind.trained_as() {
        bail!("checkpoint holds a {} model, not {method}", ckpt.kind);
    }
    let params = ckpt.params()?;
    let predictor = if method == Method::Finetune {
        Predictor::Finetune {
            base: params,
            steps: t.finetune_steps,
            lr: t.finetune_lr,
            seed: t.seed,
        }
    } else {
        Predictor::Neural { method, params }
    };
    Ok(Loaded {
        predictor,
        norm: ckpt.normalization,
    })
}

fn find_series<'a>(ds: &'a Dataset, id: &str) -> Result<&'a TimeSeries> {
    ds.get(id)
        .with_context(|| format!("dataset has no series {id:?}"))
}

/// Forecast in original units plus the Koopman matrix.
fn forecast(t: &Target, horizon: usize) -> Result<(TimeSeries, Tensor, Tensor)> {
    let ds = load_dataset(&t.data)?;
    let series = find_series(&ds, &t.series)?.clone();
    if t.support_len < 2 || t.support_len > series.len() {
        bail!(
            "support length {} must be between 2 and the series length {}",
            t.support_len,
            series.len()
        );
    }
    let loaded = load_predictor(t)?;
    let support = series.window(0, t.support_len);
    let f = match &loaded.norm {
        Some(n) => {
            let mut f = loaded.predictor.forecast(&n.apply(&support)?, horizon)?;
            f.prediction = n.invert(&f.prediction)?;
            f
        }
        None => loaded.predictor.forecast(&support, horizon)?,
    };
    Ok((series, f.prediction, f.koopman))
}

fn cmd_predict(t: &Target, horizon: usize, out: &Path) -> Result<()> {
    if horizon == 0 {
        bail!("horizon must be at least 1");
    }
    let (series, pred, _) = forecast(t, horizon)?;
    let m = series.dim();
    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["step".to_string()];
    header.extend((0..m).map(|j| format!("true_{j}")));
    header.extend((0..m).map(|j| format!("pred_{j}")));
    w.write_record(&header)?;
    for h in 0..horizon {
        let step = t.support_len + h;
        let mut row = vec![step.to_string()];
        for j in 0..m {
            row.push(if step < series.len() {
                series.values.get(step, j).to_string()
            } else {
                String::new()
            });
        }
        row.extend((0..m).map(|j| pred.get(h, j).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_spectrum(t: &Target, out: &Path) -> Result<()> {
    let (series, _, koopman) = forecast(t, 1)?;
    let s = SpectralResult::from_matrix(&koopman, series.dt)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["re", "im", "frequency", "growth_rate"])?;
    for ((l, f), g) in s.eigenvalues.iter().zip(&s.frequency).zip(&s.growth_rate) {
        w.write_record([l.re.to_string(), l.im.to_string(), f.to_string(), g.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn load_run(run: &RunArgs) -> Result<(Dataset, ExperimentConfig)> {
    let mut cfg: ExperimentConfig = read_json(&run.config)?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    Ok((load_dataset(&run.data)?, cfg))
}

fn write_results(result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    eval::write_csv(&result.records, fs::File::create(dir.join("records.csv"))?)?;
    eval::write_csv(&result.summary, fs::File::create(dir.join("summary.csv"))?)?;
    for row in &result.summary {
        let fmt = |m: Option<f64>, se: Option<f64>| match (m, se) {
            (Some(m), Some(se)) => format!("{m:.4} ± {se:.4}"),
            _ => "-".into(),
        };
        println!(
            "{:<9} T={:<3} train={:<3} rmse {}  eig {}",
            row.method.as_str(),
            row.support_len,
            row.train_size,
            fmt(row.rmse_mean, row.rmse_se),
            fmt(row.eigenvalue_error_mean, row.eigenvalue_error_se)
        );
    }
    Ok(())
}

fn finish(result: ExperimentResult, dir: &Path) -> Result<ExitCode> {
    write_results(&result, dir)?;
    let failures = result.failures();
    if failures > 0 {
        eprintln!("{failures} evaluation(s) failed; see the error column of records.csv");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_plot(input: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let t = plot::read_predictions(&text)?;
    fs::write(out, plot::render_svg(&t))?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { spec, out, seed } => cmd_generate(&spec, &out, seed)?,
        Command::Train {
            config,
            data,
            method,
            out,
            log,
            seed,
            fractions,
            no_normalize,
        } => cmd_train(&config, &data, method, &out, &log, seed, &fractions, no_normalize)?,
        Command::Predict {
            target,
            horizon,
            out,
        } => cmd_predict(&target, horizon, &out)?,
        Command::Spectrum { target, out } => cmd_spectrum(&target, &out)?,
        Command::Evaluate { run } => {
            let (ds, cfg) = load_run(&run)?;
            return finish(run_experiment(&ds, &cfg)?, &run.out_dir);
        }
        Command::Sweep { run, axis, values } => {
            let (ds, cfg) = load_run(&run)?;
            return finish(sweep(&ds, &cfg, axis, &values)?, &run.out_dir);
        }
        Command::Plot { input, out } => cmd_plot(&input, &out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
