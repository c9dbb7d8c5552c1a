//! Bias-corrected temperature scaling.
//!
//! Calibrated posteriors are `softmax(l(x) / T + b)`. The temperature is
//! optimized as `u = ln T` so the search is unconstrained.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::prob::{
    log_sum_exp, softmax_into, LogitsMatrix, Matrix, PosteriorMatrix, PROB_FLOOR,
};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    temperature: f64,
    bias: Vec<f64>,
}

impl CalibrationParams {
    /// Bias is stored mean-centered; a shared offset cancels in the softmax.
    pub fn new(temperature: f64, bias: Vec<f64>) -> Result<Self> {
        validate_temperature(temperature)?;
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter("bias must be finite".into()));
        }
        let mean = if bias.is_empty() {
            0.0
        } else {
            bias.iter().sum::<f64>() / bias.len() as f64
        };
        Ok(Self {
            temperature,
            bias: bias.into_iter().map(|b| b - mean).collect(),
        })
    }

    pub fn identity(num_labels: usize) -> Self {
        Self {
            temperature: 1.0,
            bias: vec![0.0; num_labels],
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFitConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub ema_decay: f64,
    pub patience: usize,
    /// Fraction of labeled source data reserved for calibration by callers that split.
    pub holdout_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CalibrationFitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 1000,
            ema_decay: 0.1,
            patience: 5,
            holdout_fraction: 0.1,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl CalibrationFitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.max_epochs > 0
            && self.ema_decay > 0.0
            && self.ema_decay < 1.0
            && self.patience > 0
            && self.holdout_fraction > 0.0
            && self.holdout_fraction < 1.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "calibration config out of range: {self:?}"
            )))
        }
    }
}

fn validate_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "temperature must be positive and finite, got {t}"
        )))
    }
}

/// `softmax(l / T + b)` without any normalization of `b`.
pub fn bcts_posterior(
    logits: &LogitsMatrix,
    temperature: f64,
    bias: &[f64],
) -> Result<PosteriorMatrix> {
    validate_temperature(temperature)?;
    let space = logits.space();
    if bias.len() != space.size() {
        return Err(invalid(format!(
            "bias has {} entries, expected M={}",
            bias.len(),
            space.size()
        )));
    }
    let mut out = Matrix::zeros(logits.len(), space.size());
    let mut scaled = vec![0.0; space.size()];
    for (i, row) in logits.iter_rows().enumerate() {
        for ((s, l), b) in scaled.iter_mut().zip(row).zip(bias) {
            *s = l / temperature + b;
        }
        softmax_into(&scaled, out.row_mut(i));
    }
    PosteriorMatrix::new(space, out)
}

pub fn apply_bcts(logits: &LogitsMatrix, params: &CalibrationParams) -> Result<PosteriorMatrix> {
    bcts_posterior(logits, params.temperature, &params.bias)
}

fn check_labels(len: usize, labels: &[usize], num_labels: usize) -> Result<()> {
    if len != labels.len() {
        return Err(invalid(format!(
            "{len} rows but {} labels",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&m| m >= num_labels) {
        return Err(invalid(format!(
            "meta-label {bad} out of range for M={num_labels}"
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of the labels under the posterior rows.
pub fn negative_log_likelihood(posterior: &PosteriorMatrix, labels: &[usize]) -> Result<f64> {
    check_labels(posterior.len(), labels, posterior.space().size())?;
    if labels.is_empty() {
        return Err(Error::InsufficientData("no labels".into()));
    }
    let total: f64 = posterior
        .iter_rows()
        .zip(labels)
        .map(|(row, &m)| row[m].max(PROB_FLOOR).ln())
        .sum();
    Ok(-total / labels.len() as f64)
}

/// Calibration NLL and its gradient with respect to `T` and each bias entry.
#[derive(Debug, Clone, PartialEq)]
pub struct NllGradient {
    pub loss: f64,
    pub d_temperature: f64,
    pub d_bias: Vec<f64>,
}

/// Analytic NLL gradient of `softmax(l / T + b)`.
pub fn nll_gradient(
    logits: &LogitsMatrix,
    labels: &[usize],
    temperature: f64,
    bias: &[f64],
) -> Result<NllGradient> {
    check_labels(logits.len(), labels, logits.space().size())?;
    validate_temperature(temperature)?;
    let rows: Vec<usize> = (0..labels.len()).collect();
    Ok(batch_gradient(logits, labels, &rows, temperature, bias))
}

fn batch_gradient(
    logits: &LogitsMatrix,
    labels: &[usize],
    rows: &[usize],
    temperature: f64,
    bias: &[f64],
) -> NllGradient {
    let m = bias.len();
    let mut scaled = vec![0.0; m];
    let mut prob = vec![0.0; m];
    let mut loss = 0.0;
    let mut d_t = 0.0;
    let mut d_b = vec![0.0; m];
    let t2 = temperature * temperature;
    for &i in rows {
        let row = logits.row(i);
        for ((s, l), b) in scaled.iter_mut().zip(row).zip(bias) {
            *s = l / temperature + b;
        }
        let lse = log_sum_exp(&scaled);
        loss += lse - scaled[labels[i]];
        softmax_into(&scaled, &mut prob);
        for k in 0..m {
            let resid = prob[k] - if k == labels[i] { 1.0 } else { 0.0 };
            d_b[k] += resid;
            d_t -= resid * row[k] / t2;
        }
    }
    let n = rows.len().max(1) as f64;
    d_b.iter_mut().for_each(|g| *g /= n);
    NllGradient {
        loss: loss / n,
        d_temperature: d_t / n,
        d_bias: d_b,
    }
}

/// Adam state over the packed parameter vector `[ln T, b_0, .., b_{M-1}]`.
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, dim: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for k in 0..params.len() {
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * grad[k];
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * grad[k] * grad[k];
            params[k] -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Summary of a calibration fit.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFit {
    pub params: CalibrationParams,
    pub epochs: usize,
    pub initial_nll: f64,
    pub final_nll: f64,
}

/// Fits temperature and bias by minibatch Adam on the NLL, returning the
/// best parameters seen (never worse than the identity map).
pub fn fit_bcts_report(
    logits: &LogitsMatrix,
    labels: &[usize],
    config: &CalibrationFitConfig,
) -> Result<CalibrationFit> {
    config.validate()?;
    let m = logits.space().size();
    check_labels(logits.len(), labels, m)?;
    if labels.len() < m {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least M={m} examples, got {}",
            labels.len()
        )));
    }

    let full: Vec<usize> = (0..labels.len()).collect();
    let loss_at = |p: &[f64]| batch_gradient(logits, labels, &full, p[0].exp(), &p[1..]).loss;

    let mut params = vec![0.0; m + 1];
    let initial_nll = loss_at(&params);
    let mut best = (initial_nll, params.clone());
    let mut ema: Option<f64> = None;
    let mut best_ema = f64::INFINITY;
    let mut stale = 0;
    let mut adam = Adam::new(config.learning_rate, m + 1);
    let mut rng = stream_rng(config.seed, 0);
    let mut order = full.clone();
    let mut grad = vec![0.0; m + 1];
    let mut epochs = 0;

    for epoch in 1..=config.max_epochs {
        epochs = epoch;
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let t = params[0].exp();
            let g = batch_gradient(logits, labels, batch, t, &params[1..]);
            // chain rule through T = exp(u)
            grad[0] = g.d_temperature * t;
            grad[1..].copy_from_slice(&g.d_bias);
            adam.update(&mut params, &grad);
        }
        let loss = loss_at(&params);
        if !loss.is_finite() {
            return Err(Error::NumericalFailure {
                iteration: epoch,
                detail: "calibration loss became non-finite".into(),
            });
        }
        if loss < best.0 {
            best = (loss, params.clone());
        }
        let smoothed = match ema {
            None => loss,
            Some(prev) => config.ema_decay * prev + (1.0 - config.ema_decay) * loss,
        };
        ema = Some(smoothed);
        if smoothed < best_ema {
            best_ema = smoothed;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (final_nll, p) = best;
    Ok(CalibrationFit {
        params: CalibrationParams::new(p[0].exp(), p[1..].to_vec())?,
        epochs,
        initial_nll,
        final_nll,
    })
}

pub fn fit_bcts(
    logits: &LogitsMatrix,
    labels: &[usize],
    config: &CalibrationFitConfig,
) -> Result<CalibrationParams> {
    fit_bcts_report(logits, labels, config).map(|fit| fit.params)
}
