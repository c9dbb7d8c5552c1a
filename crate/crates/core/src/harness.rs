//! The shift sweep: train baselines on a strongly confounded source domain,
//! then score every method on a family of target domains.
//!
//! Per replicate seed the harness draws one labeled source set, splits off a
//! calibration holdout, and trains three linear models (ERM, SUBG, LA). Each
//! target lambda gets a fresh test draw; the unadapted baselines score it
//! directly, TTLSA re-estimates the prior on unlabeled batches of the test
//! draw and reweights the LA posteriors, and the oracle reweights with the
//! true target prior. Every (lambda, replicate) cell is independent and
//! results are assembled in a fixed order, so output does not depend on
//! thread count.

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;

use crate::adapt::{em_estimate_prior, reweight_posterior, EmConfig};
use crate::calibrate::{apply_bcts, fit_bcts, CalibrationFitConfig, CalibrationParams};
use crate::error::{invalid, Error, Result};
use crate::metrics::{roc_auc, Method, SweepRecord};
use crate::prob::{positive_class_scores, softmax_rows, JointPrior, Matrix, PosteriorMatrix};
use crate::rng::stream_rng;
use crate::synthdata::{
    default_anchors, lambda_prior, sample_dataset, AnchorPair, GaussianGenerativeSpec,
    LabeledDataset,
};
use crate::train::{
    predict_logits_with_scale, subsample_balanced, train_softmax, LinearSoftmaxModel, TrainConfig,
    TrainingMode,
};

/// Method families as requested in a config; TTLSA expands per batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodKind {
    Erm,
    Subg,
    La,
    Ttlsa,
    Oracle,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] = [
        MethodKind::Erm,
        MethodKind::Subg,
        MethodKind::La,
        MethodKind::Ttlsa,
        MethodKind::Oracle,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Self::Erm),
            "subg" => Ok(Self::Subg),
            "la" => Ok(Self::La),
            "ttlsa" => Ok(Self::Ttlsa),
            "oracle" => Ok(Self::Oracle),
            other => Err(invalid(format!("unknown method '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Erm => "erm",
            Self::Subg => "subg",
            Self::La => "la",
            Self::Ttlsa => "ttlsa",
            Self::Oracle => "oracle",
        }
    }
}

/// How the source prior `p_s(y, z)` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourcePriorEstimate {
    /// Label frequencies in the split the posterior was last fit on: the
    /// calibration holdout when calibrating, else the training split.
    Count,
    /// Mean calibrated LA posterior over the calibration holdout.
    ClassifierAverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub source_lambda: f64,
    pub adaptation_batch_sizes: Vec<usize>,
    pub n_train: usize,
    pub n_test_per_target: usize,
    pub replicates: usize,
    pub calibration_enabled: bool,
    pub methods: Vec<MethodKind>,
    pub base_seed: u64,
    /// Multiplies the learned scores `g(x)` before any prior offset; 1 leaves models untouched.
    pub logit_scale: f64,
    pub source_prior: SourcePriorEstimate,
    pub dirichlet_alpha: f64,
    pub em_tolerance: f64,
    pub em_max_iterations: usize,
    pub record_priors: bool,
    pub train: TrainConfig,
    pub calibration: CalibrationFitConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: (0..=20).map(|i| i as f64 / 20.0).collect(),
            source_lambda: 0.05,
            adaptation_batch_sizes: vec![64, 512],
            n_train: 20_000,
            n_test_per_target: 512,
            replicates: 4,
            calibration_enabled: true,
            methods: MethodKind::ALL.to_vec(),
            base_seed: 0,
            logit_scale: 1.0,
            source_prior: SourcePriorEstimate::Count,
            dirichlet_alpha: 1.0,
            em_tolerance: EmConfig::DEFAULT_TOLERANCE,
            em_max_iterations: EmConfig::DEFAULT_MAX_ITERATIONS,
            record_priors: false,
            train: TrainConfig::default(),
            calibration: CalibrationFitConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad("lambdas must be a nonempty subset of [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.source_lambda) {
            return bad("source_lambda must lie in [0, 1]");
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        if self.methods.contains(&MethodKind::Ttlsa)
            && (self.adaptation_batch_sizes.is_empty()
                || self.adaptation_batch_sizes.contains(&0))
        {
            return bad("TTLSA needs positive adaptation batch sizes");
        }
        if self.n_train == 0 || self.n_test_per_target == 0 || self.replicates == 0 {
            return bad("n_train, n_test_per_target and replicates must be positive");
        }
        if !(self.logit_scale > 0.0) || !self.logit_scale.is_finite() {
            return bad("logit_scale must be positive");
        }
        if self.dirichlet_alpha < 1.0 {
            return bad("dirichlet_alpha must be >= 1");
        }
        self.train.validate()?;
        self.calibration.validate()
    }

    /// Requested methods with TTLSA expanded per batch size, in canonical order.
    pub fn expanded_methods(&self) -> Vec<Method> {
        let mut kinds = self.methods.clone();
        kinds.sort();
        kinds.dedup();
        let mut out = Vec::new();
        for kind in kinds {
            match kind {
                MethodKind::Erm => out.push(Method::Erm),
                MethodKind::Subg => out.push(Method::Subg),
                MethodKind::La => out.push(Method::La),
                MethodKind::Ttlsa => {
                    let mut sizes = self.adaptation_batch_sizes.clone();
                    sizes.sort_unstable();
                    sizes.dedup();
                    out.extend(sizes.into_iter().map(Method::Ttlsa));
                }
                MethodKind::Oracle => out.push(Method::Oracle),
            }
        }
        out
    }

    pub fn replicate_seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64)
            .map(|r| self.base_seed.wrapping_add(r))
            .collect()
    }

    fn needs(&self, kind: MethodKind) -> bool {
        self.methods.contains(&kind)
    }

    fn needs_la(&self) -> bool {
        self.needs(MethodKind::La) || self.needs(MethodKind::Ttlsa) || self.needs(MethodKind::Oracle)
    }

    fn em_config(&self, num_labels: usize) -> EmConfig {
        EmConfig {
            dirichlet_alpha: vec![self.dirichlet_alpha; num_labels],
            tolerance: self.em_tolerance,
            max_iterations: self.em_max_iterations,
        }
    }
}

/// Independent sub-seed for one purpose within a replicate.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    stream_rng(seed, purpose).next_u64()
}

const PURPOSE_SOURCE: u64 = 1;
const PURPOSE_SPLIT: u64 = 2;
const PURPOSE_TRAIN: u64 = 3;
const PURPOSE_SUBSAMPLE: u64 = 4;
const PURPOSE_CALIBRATE: u64 = 5;
const PURPOSE_TARGET: u64 = 1000;

/// A trained model plus its optional post-hoc calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedModel {
    pub model: LinearSoftmaxModel,
    pub calibration: Option<CalibrationParams>,
    pub logit_scale: f64,
}

impl CalibratedModel {
    /// Source posterior `p_s(y, z | x)`, calibrated when parameters are present.
    pub fn posterior(&self, features: &Matrix) -> Result<PosteriorMatrix> {
        let logits = predict_logits_with_scale(&self.model, features, self.logit_scale)?;
        match &self.calibration {
            Some(params) => apply_bcts(&logits, params),
            None => Ok(softmax_rows(&logits)),
        }
    }
}

/// Everything trained for one replicate seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateModels {
    pub seed: u64,
    pub erm: Option<CalibratedModel>,
    pub subg: Option<CalibratedModel>,
    pub la: Option<CalibratedModel>,
    /// `p_s(y, z)` used as the reweighting denominator.
    pub source_prior: JointPrior,
}

fn split_holdout(data: &LabeledDataset, fraction: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream_rng(seed, 0));
    let n_hold = ((data.len() as f64) * fraction).round() as usize;
    let (hold, train) = order.split_at(n_hold.min(data.len()));
    let mut train = train.to_vec();
    let mut hold = hold.to_vec();
    train.sort_unstable();
    hold.sort_unstable();
    (data.select(&train), data.select(&hold))
}

fn fit_model(
    train: &LabeledDataset,
    holdout: &LabeledDataset,
    mode: TrainingMode,
    config: &SweepConfig,
    seed: u64,
) -> Result<CalibratedModel> {
    let labels = train.meta_labels();
    let prior = JointPrior::from_labels(train.space, &labels)?;
    let train_config = TrainConfig {
        seed: derive_seed(seed, PURPOSE_TRAIN),
        ..config.train.clone()
    };
    let model = train_softmax(&train.features, &labels, mode, &train_config, &prior)?;
    let calibration = if config.calibration_enabled {
        let logits = predict_logits_with_scale(&model, &holdout.features, config.logit_scale)?;
        let cal_config = CalibrationFitConfig {
            seed: derive_seed(seed, PURPOSE_CALIBRATE),
            ..config.calibration.clone()
        };
        Some(fit_bcts(&logits, &holdout.meta_labels(), &cal_config)?)
    } else {
        None
    };
    Ok(CalibratedModel {
        model,
        calibration,
        logit_scale: config.logit_scale,
    })
}

/// Draws the source set for `seed` and trains the models the config asks for.
pub fn train_replicate(
    config: &SweepConfig,
    spec: &GaussianGenerativeSpec,
    anchors: &AnchorPair,
    seed: u64,
) -> Result<ReplicateModels> {
    let source_dist = lambda_prior(anchors, config.source_lambda)?;
    let source = sample_dataset(
        &source_dist,
        spec,
        config.n_train,
        derive_seed(seed, PURPOSE_SOURCE),
    )?;
    let (train, holdout) = split_holdout(
        &source,
        config.calibration.holdout_fraction,
        derive_seed(seed, PURPOSE_SPLIT),
    );
    let ctx = |what: &str| format!("training {what} (seed={seed})");

    let erm = if config.needs(MethodKind::Erm) {
        Some(fit_model(&train, &holdout, TrainingMode::Erm, config, seed).map_err(|e| e.context(ctx("erm")))?)
    } else {
        None
    };

    let subg = if config.needs(MethodKind::Subg) {
        let balance = |d: &LabeledDataset, s: u64| -> Result<LabeledDataset> {
            let sub = subsample_balanced(&d.features, &d.meta_labels(), d.space, s)?;
            let (y, z) = sub.meta_labels.iter().map(|&m| d.space.decode(m)).unzip();
            LabeledDataset::new(d.space, sub.features, y, z)
        };
        let sub_seed = derive_seed(seed, PURPOSE_SUBSAMPLE);
        let fitted = balance(&train, sub_seed).and_then(|t| {
            let h = balance(&holdout, sub_seed.wrapping_add(1))?;
            fit_model(&t, &h, TrainingMode::Erm, config, seed)
        });
        Some(fitted.map_err(|e| e.context(ctx("subg")))?)
    } else {
        None
    };

    let la = if config.needs_la() {
        Some(
            fit_model(&train, &holdout, TrainingMode::LogitAdjusted, config, seed)
                .map_err(|e| e.context(ctx("la")))?,
        )
    } else {
        None
    };

    let source_prior = match (config.source_prior, &la) {
        (SourcePriorEstimate::ClassifierAverage, Some(la)) => {
            la.posterior(&holdout.features)?.mean_row()?
        }
        // The bias fit on the holdout pins the calibrated posterior to the
        // holdout label frequencies, so those are the matching denominator.
        _ if config.calibration_enabled => {
            JointPrior::from_labels(holdout.space, &holdout.meta_labels())?
        }
        _ => JointPrior::from_labels(train.space, &train.meta_labels())?,
    };

    Ok(ReplicateModels {
        seed,
        erm,
        subg,
        la,
        source_prior,
    })
}

/// Estimated prior for one unlabeled adaptation batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorRecord {
    pub lambda: f64,
    pub method: Method,
    pub seed: u64,
    pub batch: usize,
    pub prior: JointPrior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub record: SweepRecord,
    pub batch_priors: Vec<JointPrior>,
}

/// Adapted posterior for a test draw: EM per consecutive batch, then reweighting.
pub fn adapt_in_batches(
    posterior: &PosteriorMatrix,
    source_prior: &JointPrior,
    batch_size: usize,
    em: &EmConfig,
) -> Result<(PosteriorMatrix, Vec<JointPrior>)> {
    let n = posterior.len();
    let mut parts = Vec::new();
    let mut priors = Vec::new();
    for start in (0..n).step_by(batch_size.max(1)) {
        let rows: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let batch = posterior.select_rows(&rows);
        let fit = em_estimate_prior(&batch, source_prior, em)?;
        parts.push(reweight_posterior(&batch, source_prior, &fit.target_prior)?);
        priors.push(fit.target_prior);
    }
    Ok((PosteriorMatrix::concat(&parts)?, priors))
}

fn mean_prior(priors: &[JointPrior]) -> Result<JointPrior> {
    let space = priors[0].space();
    let mut acc = vec![0.0; space.size()];
    for p in priors {
        for (a, v) in acc.iter_mut().zip(p.probs()) {
            *a += v;
        }
    }
    JointPrior::from_weights(space, &acc)
}

fn required<'a>(model: &'a Option<CalibratedModel>, method: Method) -> Result<&'a CalibratedModel> {
    model
        .as_ref()
        .ok_or_else(|| invalid(format!("no model trained for {method}")))
}

/// Scores one method on one labeled target draw.
pub fn evaluate_method(
    models: &ReplicateModels,
    method: Method,
    lambda: f64,
    target_prior: &JointPrior,
    test: &LabeledDataset,
    config: &SweepConfig,
) -> Result<CellOutcome> {
    let space = test.space;
    let mut batch_priors = Vec::new();
    let adapted = match method {
        Method::Erm => required(&models.erm, method)?.posterior(&test.features)?,
        Method::Subg => required(&models.subg, method)?.posterior(&test.features)?,
        Method::La => {
            let post = required(&models.la, method)?.posterior(&test.features)?;
            reweight_posterior(&post, &models.source_prior, &JointPrior::uniform(space))?
        }
        Method::Ttlsa(batch) => {
            let post = required(&models.la, method)?.posterior(&test.features)?;
            let (adapted, priors) = adapt_in_batches(
                &post,
                &models.source_prior,
                batch,
                &config.em_config(space.size()),
            )?;
            batch_priors = priors;
            adapted
        }
        Method::Oracle => {
            let post = required(&models.la, method)?.posterior(&test.features)?;
            reweight_posterior(&post, &models.source_prior, target_prior)?
        }
    };
    let auc = roc_auc(&positive_class_scores(&adapted)?, &test.y)?;
    let target_prior_estimate = if batch_priors.is_empty() {
        None
    } else {
        Some(mean_prior(&batch_priors)?)
    };
    Ok(CellOutcome {
        record: SweepRecord {
            lambda,
            method,
            seed: models.seed,
            auc,
            target_prior_estimate,
        },
        batch_priors,
    })
}

/// The labeled target draw for lambda index `index` under replicate `seed`.
pub fn target_draw(
    config: &SweepConfig,
    spec: &GaussianGenerativeSpec,
    target_prior: &JointPrior,
    seed: u64,
    index: usize,
) -> Result<LabeledDataset> {
    sample_dataset(
        target_prior,
        spec,
        config.n_test_per_target,
        derive_seed(seed, PURPOSE_TARGET + index as u64),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub lambda: f64,
    pub method: Method,
    pub mean_auc: f64,
    /// Standard error of the mean across replicates (zero for one replicate).
    pub sem: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    /// Ordered by lambda, then method, then replicate.
    pub records: Vec<SweepRecord>,
    pub summary: Vec<SummaryRow>,
    pub priors: Vec<PriorRecord>,
}

impl SweepOutput {
    pub fn summary_for(&self, lambda: f64, method: Method) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.method == method && (r.lambda - lambda).abs() < 1e-12)
    }

    /// Summary rows for one method, in lambda order.
    pub fn curve(&self, method: Method) -> Vec<&SummaryRow> {
        self.summary.iter().filter(|r| r.method == method).collect()
    }

    /// Mean over lambda of the per-lambda mean AUC.
    pub fn lambda_average(&self, method: Method) -> Option<f64> {
        let curve = self.curve(method);
        (!curve.is_empty())
            .then(|| curve.iter().map(|r| r.mean_auc).sum::<f64>() / curve.len() as f64)
    }
}

pub fn mean_and_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn summarize(records: &[SweepRecord], lambdas: &[f64], methods: &[Method]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &lambda in lambdas {
        for &method in methods {
            let aucs: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method && r.lambda == lambda)
                .map(|r| r.auc)
                .collect();
            if aucs.is_empty() {
                continue;
            }
            let (mean_auc, sem) = mean_and_sem(&aucs);
            out.push(SummaryRow {
                lambda,
                method,
                mean_auc,
                sem,
                n: aucs.len(),
            });
        }
    }
    out
}

/// Runs the full sweep on the current rayon pool.
pub fn run_sweep(config: &SweepConfig, spec: &GaussianGenerativeSpec) -> Result<SweepOutput> {
    config.validate()?;
    let space = spec.space();
    if space.num_classes() != 2 || space.num_groups() != 2 {
        return Err(invalid("the lambda sweep needs C = K = 2"));
    }
    let anchors = default_anchors();
    let seeds = config.replicate_seeds();
    let methods = config.expanded_methods();

    let models: Vec<ReplicateModels> = seeds
        .par_iter()
        .map(|&seed| train_replicate(config, spec, &anchors, seed))
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize)> = (0..config.lambdas.len())
        .flat_map(|l| (0..models.len()).map(move |r| (l, r)))
        .collect();

    // One entry per (lambda, replicate): outcomes in method order.
    let results: Vec<Vec<CellOutcome>> = cells
        .par_iter()
        .map(|&(li, ri)| {
            let lambda = config.lambdas[li];
            let replicate = &models[ri];
            let target = lambda_prior(&anchors, lambda)?;
            let test = target_draw(config, spec, &target, replicate.seed, li)?;
            methods
                .iter()
                .map(|&method| {
                    evaluate_method(replicate, method, lambda, &target, &test, config).map_err(|e| {
                        e.context(format!(
                            "lambda={lambda} method={method} seed={}",
                            replicate.seed
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(cells.len() * methods.len());
    let mut priors = Vec::new();
    for li in 0..config.lambdas.len() {
        for mi in 0..methods.len() {
            for ri in 0..models.len() {
                let outcome = &results[li * models.len() + ri][mi];
                if config.record_priors {
                    priors.extend(outcome.batch_priors.iter().enumerate().map(|(b, p)| {
                        PriorRecord {
                            lambda: outcome.record.lambda,
                            method: outcome.record.method,
                            seed: outcome.record.seed,
                            batch: b,
                            prior: p.clone(),
                        }
                    }));
                }
                records.push(outcome.record.clone());
            }
        }
    }
    let summary = summarize(&records, &config.lambdas, &methods);
    Ok(SweepOutput {
        records,
        summary,
        priors,
    })
}

/// Runs the sweep on a dedicated pool; `threads == 0` lets rayon decide.
pub fn run_sweep_with_threads(
    config: &SweepConfig,
    spec: &GaussianGenerativeSpec,
    threads: usize,
) -> Result<SweepOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    pool.install(|| run_sweep(config, spec))
}

/// Paired sweeps that differ only in whether calibration is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutput {
    pub calibrated: SweepOutput,
    pub uncalibrated: SweepOutput,
}

impl AblationOutput {
    /// Per-lambda `calibrated - uncalibrated` mean AUC for one method.
    pub fn auc_deltas(&self, method: Method) -> Vec<(f64, f64)> {
        self.calibrated
            .curve(method)
            .into_iter()
            .filter_map(|c| {
                self.uncalibrated
                    .summary_for(c.lambda, method)
                    .map(|u| (c.lambda, c.mean_auc - u.mean_auc))
            })
            .collect()
    }

    /// Per-lambda `Oracle - TTLSA(batch)` mean AUC in one arm.
    pub fn oracle_gap(&self, calibrated: bool, batch: usize) -> Vec<(f64, f64)> {
        let arm = if calibrated {
            &self.calibrated
        } else {
            &self.uncalibrated
        };
        arm.curve(Method::Oracle)
            .into_iter()
            .filter_map(|o| {
                arm.summary_for(o.lambda, Method::Ttlsa(batch))
                    .map(|t| (o.lambda, o.mean_auc - t.mean_auc))
            })
            .collect()
    }
}

pub fn run_calibration_ablation(
    config: &SweepConfig,
    spec: &GaussianGenerativeSpec,
) -> Result<AblationOutput> {
    let with = SweepConfig {
        calibration_enabled: true,
        ..config.clone()
    };
    let without = SweepConfig {
        calibration_enabled: false,
        ..config.clone()
    };
    Ok(AblationOutput {
        calibrated: run_sweep(&with, spec)?,
        uncalibrated: run_sweep(&without, spec)?,
    })
}
