use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use metashift::calibrate::{apply_bcts, fit_bcts_report, CalibrationFitConfig, CalibrationParams};
use metashift::harness::run_sweep_with_threads;
use metashift::io;
use metashift::prob::{positive_class_scores, predict_class, softmax_rows, LogitsMatrix};
use metashift::synthdata::GaussianSpecRecord;
use metashift::{
    default_anchors, em_estimate_prior, group_accuracy, lambda_prior, predict_logits,
    reweight_posterior, roc_auc, sample_dataset, subsample_balanced, train_softmax, EmConfig,
    GaussianGenerativeSpec, JointPrior, LabeledDataset, LinearSoftmaxModel, PosteriorMatrix,
    TrainConfig, TrainingMode,
};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "metashift", version, about = "Test-time adaptation to (class, group) prior shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a labeled dataset from a Gaussian spec at a mixture prior
    Gen(GenArgs),
    /// Fit a linear softmax model over meta-labels
    Train(TrainArgs),
    /// Fit temperature and bias on held-out labeled data
    Calibrate(CalibrateArgs),
    /// Estimate the target prior on unlabeled data and reweight posteriors
    Adapt(AdaptArgs),
    /// Run the lambda sweep and write result tables
    Sweep(SweepArgs),
    /// Score posteriors against labels
    Eval(EvalArgs),
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Args)]
struct GenArgs {
    /// Builtin spec name (gauss-cmnist) or a JSON spec file
    #[arg(long)]
    spec: String,
    #[arg(long, value_parser = unit_interval)]
    prior_lambda: f64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled dataset CSV
    #[arg(long)]
    data: PathBuf,
    /// erm or la
    #[arg(long, default_value = "la")]
    mode: String,
    /// Train on a group-balanced subsample (SUBG)
    #[arg(long)]
    subsample: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Model JSON
    #[arg(long)]
    out: PathBuf,
    /// Also write the training-split prior as CSV
    #[arg(long)]
    prior_out: Option<PathBuf>,
}

/// Where logits come from: a logits CSV, or a model applied to features.
#[derive(Args)]
struct LogitSource {
    #[arg(long, conflicts_with = "model")]
    logits: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Labeled holdout CSV; its features feed --model
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    source: LogitSource,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Calibration JSON
    #[arg(long)]
    out: PathBuf,
    /// Also write the holdout label prior, the source prior matching the
    /// calibrated posterior
    #[arg(long)]
    prior_out: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    source: LogitSource,
    /// Unlabeled target features CSV (required with --model)
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Source prior CSV; defaults to the model's training prior. With
    /// --calibration pass the prior written by `calibrate --prior-out`.
    #[arg(long)]
    source_prior: Option<PathBuf>,
    /// Symmetric Dirichlet concentration (1 = maximum likelihood)
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = EmConfig::DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = EmConfig::DEFAULT_MAX_ITERATIONS)]
    max_iterations: usize,
    /// Estimated target prior CSV
    #[arg(long)]
    prior_out: PathBuf,
    /// Adapted posterior CSV
    #[arg(long)]
    out: PathBuf,
    /// Full EM result (trace, counts) as JSON
    #[arg(long)]
    em_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Labeled dataset CSV
    #[arg(long)]
    data: PathBuf,
    /// Posterior CSV; otherwise computed from --model
    #[arg(long, conflicts_with = "model")]
    posterior: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> metashift::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    Ok(io::read_text(path)?)
}

fn load_spec(spec: &str) -> Result<GaussianGenerativeSpec> {
    if let Some(s) = GaussianGenerativeSpec::builtin(spec) {
        return Ok(s);
    }
    let text = std::fs::read_to_string(spec)
        .with_context(|| format!("--spec: '{spec}' is neither a builtin name nor a readable file"))?;
    let record: GaussianSpecRecord = io::read_json(&text).context("--spec")?;
    Ok(GaussianGenerativeSpec::try_from(record).context("--spec")?)
}

fn load_model(path: &Path) -> Result<LinearSoftmaxModel> {
    let model: LinearSoftmaxModel =
        io::read_json(&read(path)?).with_context(|| format!("--model {}", path.display()))?;
    model.validate()?;
    Ok(model)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let spec = load_spec(&a.spec)?;
    let space = spec.space();
    if space.num_classes() != 2 || space.num_groups() != 2 {
        bail!("--prior-lambda needs a spec with C = K = 2");
    }
    let prior = lambda_prior(&default_anchors(), a.prior_lambda).context("--prior-lambda")?;
    let data = sample_dataset(&prior, &spec, a.n, a.seed)?;
    write_with(&a.out, |w| io::write_dataset(w, &data))?;
    log::info!("wrote {} rows to {}", a.n, a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut data = io::read_dataset(&read(&a.data)?, None).context("--data")?;
    let mode = TrainingMode::parse(&a.mode).context("--mode")?;
    if a.subsample {
        let sub = subsample_balanced(&data.features, &data.meta_labels(), data.space, a.seed)?;
        let (y, z) = sub.meta_labels.iter().map(|&m| data.space.decode(m)).unzip();
        data = LabeledDataset::new(data.space, sub.features, y, z)?;
    }
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        seed: a.seed,
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        max_epochs: a.max_epochs.unwrap_or(defaults.max_epochs),
        ..defaults
    };
    let labels = data.meta_labels();
    let prior = JointPrior::from_labels(data.space, &labels)?;
    let model = train_softmax(&data.features, &labels, mode, &config, &prior)?;
    write_with(&a.out, |w| io::write_json(w, &model))?;
    if let Some(p) = &a.prior_out {
        write_with(p, |w| io::write_prior(w, &prior))?;
    }
    Ok(())
}

fn logits_from(source: &LogitSource, features: Option<&metashift::Matrix>) -> Result<(LogitsMatrix, Option<LinearSoftmaxModel>)> {
    match (&source.logits, &source.model) {
        (Some(path), None) => Ok((io::read_logits(&read(path)?, None).context("--logits")?, None)),
        (None, Some(path)) => {
            let model = load_model(path)?;
            let features = features.context("--model needs input features")?;
            if features.cols() != model.feature_dim() {
                bail!(
                    "features have {} columns, model expects {}",
                    features.cols(),
                    model.feature_dim()
                );
            }
            Ok((predict_logits(&model, features)?, Some(model)))
        }
        _ => bail!("one of --logits or --model is required"),
    }
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let data = io::read_dataset(&read(&a.data)?, None).context("--data")?;
    let (logits, _) = logits_from(&a.source, Some(&data.features))?;
    if logits.space() != data.space {
        bail!(
            "logits have {} columns but the data declares M={}",
            logits.space().size(),
            data.space.size()
        );
    }
    if logits.len() != data.len() {
        bail!("logits have {} rows, data has {}", logits.len(), data.len());
    }
    let defaults = CalibrationFitConfig::default();
    let config = CalibrationFitConfig {
        seed: a.seed,
        max_epochs: a.max_epochs.unwrap_or(defaults.max_epochs),
        ..defaults
    };
    let fit = fit_bcts_report(&logits, &data.meta_labels(), &config)?;
    log::info!(
        "nll {} -> {} after {} epochs, T = {}",
        fit.initial_nll,
        fit.final_nll,
        fit.epochs,
        fit.params.temperature()
    );
    write_with(&a.out, |w| io::write_json(w, &fit.params))?;
    if let Some(p) = &a.prior_out {
        let prior = JointPrior::from_labels(data.space, &data.meta_labels())?;
        write_with(p, |w| io::write_prior(w, &prior))?;
    }
    Ok(())
}

fn calibrated(logits: &LogitsMatrix, calibration: Option<&PathBuf>) -> Result<PosteriorMatrix> {
    match calibration {
        Some(path) => {
            let params: CalibrationParams = io::read_json(&read(path)?).context("--calibration")?;
            let params = CalibrationParams::new(params.temperature(), params.bias().to_vec())
                .context("--calibration")?;
            Ok(apply_bcts(logits, &params).context("--calibration")?)
        }
        None => Ok(softmax_rows(logits)),
    }
}

fn cmd_adapt(a: AdaptArgs) -> Result<()> {
    let features = match &a.features {
        Some(p) => Some(io::read_features(&read(p)?).context("--features")?),
        None => None,
    };
    let (logits, model) = logits_from(&a.source, features.as_ref())?;
    let space = logits.space();
    let posterior = calibrated(&logits, a.calibration.as_ref())?;
    let source_prior = match (&a.source_prior, &model) {
        (Some(p), _) => io::read_prior(&read(p)?, Some(space)).context("--source-prior")?,
        (None, Some(m)) => m.training_prior.clone(),
        (None, None) => bail!("--source-prior is required with --logits"),
    };
    let em = EmConfig {
        tolerance: a.tolerance,
        max_iterations: a.max_iterations,
        ..EmConfig::symmetric(space.size(), a.alpha)
    };
    let fit = em_estimate_prior(&posterior, &source_prior, &em)?;
    log::info!("EM stopped after {} iterations", fit.iterations);
    let adapted = reweight_posterior(&posterior, &source_prior, &fit.target_prior)?;
    write_with(&a.prior_out, |w| io::write_prior(w, &fit.target_prior))?;
    write_with(&a.out, |w| io::write_posterior(w, &adapted))?;
    if let Some(p) = &a.em_out {
        write_with(p, |w| io::write_json(w, &fit))?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let data = io::read_dataset(&read(&a.data)?, None).context("--data")?;
    let posterior = match (&a.posterior, &a.model) {
        (Some(p), None) => io::read_posterior(&read(p)?, Some(data.space)).context("--posterior")?,
        (None, Some(_)) => {
            let source = LogitSource {
                logits: None,
                model: a.model.clone(),
            };
            let (logits, _) = logits_from(&source, Some(&data.features))?;
            calibrated(&logits, a.calibration.as_ref())?
        }
        _ => bail!("one of --posterior or --model is required"),
    };
    if posterior.len() != data.len() {
        bail!("posterior has {} rows, data has {}", posterior.len(), data.len());
    }
    let auc = if data.space.num_classes() == 2 {
        match roc_auc(&positive_class_scores(&posterior)?, &data.y) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("AUC skipped: {e}");
                None
            }
        }
    } else {
        None
    };
    let report = group_accuracy(&predict_class(&posterior), &data.y, &data.z, data.space)?;
    write_with(&a.out, |w| io::write_eval(w, data.space, auc, &report))
}

fn thread_count() -> Result<usize> {
    match std::env::var("METASHIFT_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .with_context(|| format!("METASHIFT_THREADS: '{v}' is not a nonnegative integer")),
        _ => Ok(0),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let config = io::parse_sweep_config(&read(&a.config)?).context("--config")?;
    config.validate().context("--config")?;
    let threads = thread_count()?;
    let spec = GaussianGenerativeSpec::gauss_cmnist();
    let out = run_sweep_with_threads(&config, &spec, threads)?;

    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    let dir = &a.out_dir;
    write_with(&dir.join("sweep.csv"), |w| io::write_sweep_records(w, &out.records))?;
    write_with(&dir.join("summary.csv"), |w| io::write_summary(w, &out.summary))?;
    if config.record_priors {
        write_with(&dir.join("priors.csv"), |w| {
            io::write_prior_records(w, spec.space(), &out.priors)
        })?;
    }

    let canonical = io::format_sweep_config(&config);
    let seeds: Vec<String> = config.replicate_seeds().iter().map(u64::to_string).collect();
    let mut manifest = create(&dir.join("manifest.txt"))?;
    writeln!(manifest, "config_sha256={}", hex(&Sha256::digest(canonical.as_bytes())))?;
    writeln!(manifest, "seeds={}", seeds.join(","))?;
    writeln!(manifest, "records={}", out.records.len())?;
    write!(manifest, "{canonical}")?;
    manifest.flush()?;
    log::info!("{} records written to {}", out.records.len(), dir.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<metashift::Error>())
        .any(metashift::Error::is_numerical);
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
