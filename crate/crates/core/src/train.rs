//! Linear softmax classifiers over meta-labels.
//!
//! Two training modes share one model: plain cross-entropy (`Erm`) and
//! logit-adjusted cross-entropy (`LogitAdjusted`), where the loss sees
//! `g(x) + log p_s(m)` so that `g` itself tracks the balanced posterior.
//! SUBG is ERM on a group-balanced subsample.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::prob::{
    log_sum_exp, softmax_into, JointPrior, LogitsMatrix, Matrix, MetaLabelSpace, PROB_FLOOR,
};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Erm,
    LogitAdjusted,
}

impl TrainingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Self::Erm),
            "la" | "logit_adjusted" | "logit-adjusted" => Ok(Self::LogitAdjusted),
            other => Err(invalid(format!("unknown training mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub ema_decay: f64,
    pub patience: usize,
    pub l2: f64,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 5000,
            ema_decay: 0.1,
            patience: 5,
            l2: 0.0,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.ema_decay > 0.0
            && self.ema_decay < 1.0
            && self.patience > 0
            && self.l2 >= 0.0
            && (0.0..1.0).contains(&self.validation_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("training config out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxModel {
    pub space: MetaLabelSpace,
    pub mode: TrainingMode,
    /// M x D, acting on standardized features.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// Source prior baked in at training time.
    pub training_prior: JointPrior,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
}

impl LinearSoftmaxModel {
    /// A model with the given raw parameters and no feature standardization.
    pub fn from_parts(
        mode: TrainingMode,
        weights: Matrix,
        bias: Vec<f64>,
        training_prior: JointPrior,
    ) -> Result<Self> {
        let d = weights.cols();
        let model = Self {
            space: training_prior.space(),
            mode,
            weights,
            bias,
            training_prior,
            feature_mean: vec![0.0; d],
            feature_scale: vec![1.0; d],
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks shapes and finiteness, e.g. after deserializing.
    pub fn validate(&self) -> Result<()> {
        let m = self.space.size();
        let d = self.weights.cols();
        if self.weights.rows() != m || self.bias.len() != m {
            return Err(invalid("model weights/bias do not match the meta-label space"));
        }
        if self.feature_mean.len() != d || self.feature_scale.len() != d {
            return Err(invalid("standardization stats do not match the feature dimension"));
        }
        if !self.weights.is_finite()
            || self.bias.iter().any(|b| !b.is_finite())
            || self.feature_scale.iter().any(|s| !(*s > 0.0) || !s.is_finite())
            || self.feature_mean.iter().any(|v| !v.is_finite())
        {
            return Err(invalid("model parameters must be finite"));
        }
        // round-trips the invariants of the prior
        JointPrior::new(self.training_prior.space(), self.training_prior.probs().to_vec())?;
        if self.training_prior.space() != self.space {
            return Err(invalid("training prior space differs from model space"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    /// Raw scores `g(x) = W standardize(x) + b`.
    pub fn scores(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.feature_dim() {
            return Err(invalid(format!(
                "features have {} columns, model expects D={}",
                features.cols(),
                self.feature_dim()
            )));
        }
        if !features.is_finite() {
            return Err(invalid("non-finite feature value"));
        }
        let m = self.space.size();
        let mut out = Matrix::zeros(features.rows(), m);
        let mut z = vec![0.0; self.feature_dim()];
        for (i, x) in features.iter_rows().enumerate() {
            standardize_into(x, &self.feature_mean, &self.feature_scale, &mut z);
            let dst = out.row_mut(i);
            for (k, d) in dst.iter_mut().enumerate() {
                *d = self.bias[k] + dot(self.weights.row(k), &z);
            }
        }
        Ok(out)
    }

    /// `log p_s(m)` terms added to `g` in logit-adjusted mode, zero otherwise.
    pub fn prior_offsets(&self) -> Vec<f64> {
        match self.mode {
            TrainingMode::Erm => vec![0.0; self.space.size()],
            TrainingMode::LogitAdjusted => log_prior(&self.training_prior),
        }
    }
}

fn log_prior(prior: &JointPrior) -> Vec<f64> {
    prior.probs().iter().map(|p| p.max(PROB_FLOOR).ln()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn standardize_into(x: &[f64], mean: &[f64], scale: &[f64], out: &mut [f64]) {
    for ((o, v), (mu, s)) in out.iter_mut().zip(x).zip(mean.iter().zip(scale)) {
        *o = (v - mu) / s;
    }
}

/// Source-posterior logits: `g(x)` for ERM, `g(x) + log p_s(m)` when logit-adjusted.
pub fn predict_logits(model: &LinearSoftmaxModel, features: &Matrix) -> Result<LogitsMatrix> {
    predict_logits_with_scale(model, features, 1.0)
}

/// As [`predict_logits`] but with `g(x)` multiplied by `score_scale` before
/// the prior offset is added; simulates an over- or under-confident network.
pub fn predict_logits_with_scale(
    model: &LinearSoftmaxModel,
    features: &Matrix,
    score_scale: f64,
) -> Result<LogitsMatrix> {
    let mut scores = model.scores(features)?;
    let offsets = model.prior_offsets();
    for i in 0..scores.rows() {
        for (s, o) in scores.row_mut(i).iter_mut().zip(&offsets) {
            *s = score_scale * *s + o;
        }
    }
    LogitsMatrix::new(model.space, scores)
}

/// Mean cross-entropy plus its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Loss `mean_i CE(softmax(W x_i + b + offsets), y_i) + l2/2 ||W||^2` over the
/// listed rows, with its analytic gradient.
pub fn softmax_loss_gradient(
    weights: &Matrix,
    bias: &[f64],
    features: &Matrix,
    labels: &[usize],
    rows: &[usize],
    offsets: &[f64],
    l2: f64,
) -> LossGradient {
    let (m, d) = (weights.rows(), weights.cols());
    let mut gw = Matrix::zeros(m, d);
    let mut gb = vec![0.0; m];
    let mut logits = vec![0.0; m];
    let mut prob = vec![0.0; m];
    let mut loss = 0.0;
    for &i in rows {
        let x = features.row(i);
        for k in 0..m {
            logits[k] = bias[k] + dot(weights.row(k), x) + offsets[k];
        }
        loss += log_sum_exp(&logits) - logits[labels[i]];
        softmax_into(&logits, &mut prob);
        for k in 0..m {
            let resid = prob[k] - if k == labels[i] { 1.0 } else { 0.0 };
            gb[k] += resid;
            for (g, xv) in gw.row_mut(k).iter_mut().zip(x) {
                *g += resid * xv;
            }
        }
    }
    let n = rows.len().max(1) as f64;
    let mut penalty = 0.0;
    for k in 0..m {
        for (g, w) in gw.row_mut(k).iter_mut().zip(weights.row(k)) {
            *g = *g / n + l2 * w;
            penalty += w * w;
        }
    }
    gb.iter_mut().for_each(|g| *g /= n);
    LossGradient {
        loss: loss / n + 0.5 * l2 * penalty,
        weights: gw,
        bias: gb,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub initial_validation_loss: f64,
    pub best_validation_loss: f64,
    pub final_smoothed_loss: f64,
}

fn check_training_inputs(features: &Matrix, labels: &[usize], space: MetaLabelSpace) -> Result<()> {
    if features.rows() == 0 {
        return Err(invalid("training needs at least one example"));
    }
    if features.cols() == 0 {
        return Err(invalid("training needs at least one feature"));
    }
    if features.rows() != labels.len() {
        return Err(invalid(format!(
            "{} feature rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if !features.is_finite() {
        return Err(invalid("non-finite feature value"));
    }
    for &m in labels {
        space.check_label(m)?;
    }
    Ok(())
}

/// Trains by minibatch gradient descent with EMA early stopping on a held-out
/// validation split; returns the parameters with the lowest validation loss.
pub fn fit_softmax(
    features: &Matrix,
    meta_labels: &[usize],
    mode: TrainingMode,
    config: &TrainConfig,
    prior: &JointPrior,
) -> Result<(LinearSoftmaxModel, TrainReport)> {
    let space = prior.space();
    config.validate()?;
    check_training_inputs(features, meta_labels, space)?;
    if mode == TrainingMode::LogitAdjusted {
        if let Some(&m) = meta_labels.iter().find(|&&m| prior.probs()[m] <= 0.0) {
            return Err(Error::SupportViolation {
                index: m,
                target: 1.0,
                source_mass: prior.probs()[m],
            });
        }
    }

    let n = features.rows();
    let d = features.cols();
    let m = space.size();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(config.seed, 1));
    let n_val = (n as f64 * config.validation_fraction).floor() as usize;
    let (val_idx, train_idx) = if n_val == 0 || n_val == n {
        (order.clone(), order)
    } else {
        let (v, t) = order.split_at(n_val);
        (v.to_vec(), t.to_vec())
    };

    let (mean, scale) = standardization(features, &train_idx);
    let mut z = Matrix::zeros(n, d);
    for i in 0..n {
        standardize_into(features.row(i), &mean, &scale, z.row_mut(i));
    }

    // Centered so a constant offset vector is exactly zero.
    let offsets = match mode {
        TrainingMode::Erm => vec![0.0; m],
        TrainingMode::LogitAdjusted => {
            let lp = log_prior(prior);
            let mu = lp.iter().sum::<f64>() / m as f64;
            lp.into_iter().map(|v| v - mu).collect()
        }
    };

    let mut weights = Matrix::zeros(m, d);
    let mut bias = vec![0.0; m];
    let val_loss = |w: &Matrix, b: &[f64]| {
        softmax_loss_gradient(w, b, &z, meta_labels, &val_idx, &offsets, config.l2).loss
    };

    let initial = val_loss(&weights, &bias);
    let mut best = (initial, weights.clone(), bias.clone());
    let mut ema: Option<f64> = None;
    let mut best_ema = f64::INFINITY;
    let mut stale = 0;
    let mut epochs = 0;
    let mut shuffled = train_idx.clone();
    let mut rng = stream_rng(config.seed, 2);
    let lr = config.learning_rate;

    for epoch in 1..=config.max_epochs {
        epochs = epoch;
        shuffled.shuffle(&mut rng);
        for batch in shuffled.chunks(config.batch_size) {
            let g = softmax_loss_gradient(
                &weights,
                &bias,
                &z,
                meta_labels,
                batch,
                &offsets,
                config.l2,
            );
            for k in 0..m {
                for (w, gw) in weights.row_mut(k).iter_mut().zip(g.weights.row(k)) {
                    *w -= lr * gw;
                }
                bias[k] -= lr * g.bias[k];
            }
        }
        let loss = val_loss(&weights, &bias);
        if !loss.is_finite() {
            return Err(Error::NumericalFailure {
                iteration: epoch,
                detail: "training loss became non-finite".into(),
            });
        }
        if loss < best.0 {
            best = (loss, weights.clone(), bias.clone());
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

    let (best_loss, weights, bias) = best;
    let model = LinearSoftmaxModel {
        space,
        mode,
        weights,
        bias,
        training_prior: prior.clone(),
        feature_mean: mean,
        feature_scale: scale,
    };
    let report = TrainReport {
        epochs,
        initial_validation_loss: initial,
        best_validation_loss: best_loss,
        final_smoothed_loss: ema.unwrap_or(initial),
    };
    Ok((model, report))
}

pub fn train_softmax(
    features: &Matrix,
    meta_labels: &[usize],
    mode: TrainingMode,
    config: &TrainConfig,
    prior: &JointPrior,
) -> Result<LinearSoftmaxModel> {
    fit_softmax(features, meta_labels, mode, config, prior).map(|(model, _)| model)
}

fn standardization(features: &Matrix, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = features.cols();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in rows {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for &i in rows {
        for ((s, v), mu) in var.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v - mu) * (v - mu);
        }
    }
    let scale = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Group-balanced subsample: every nonempty meta-label keeps `min count` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedSubsample {
    pub features: Matrix,
    pub meta_labels: Vec<usize>,
    /// Meta-labels with no examples, left out of the balancing.
    pub skipped_groups: Vec<usize>,
}

pub fn subsample_balanced(
    features: &Matrix,
    meta_labels: &[usize],
    space: MetaLabelSpace,
    seed: u64,
) -> Result<BalancedSubsample> {
    if features.rows() != meta_labels.len() {
        return Err(invalid("features and labels differ in length"));
    }
    let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); space.size()];
    for (i, &m) in meta_labels.iter().enumerate() {
        space.check_label(m)?;
        by_group[m].push(i);
    }
    let skipped_groups: Vec<usize> = (0..space.size()).filter(|&m| by_group[m].is_empty()).collect();
    let take = by_group
        .iter()
        .filter(|g| !g.is_empty())
        .map(Vec::len)
        .min()
        .ok_or_else(|| invalid("every group is empty"))?;
    for &m in &skipped_groups {
        let (y, z) = space.decode(m);
        log::warn!("subsample: group (y={y}, z={z}) is empty and was skipped");
    }

    let mut rng = stream_rng(seed, 3);
    let mut chosen = Vec::with_capacity(take * space.size());
    for group in by_group.iter_mut().filter(|g| !g.is_empty()) {
        group.shuffle(&mut rng);
        chosen.extend_from_slice(&group[..take]);
    }
    chosen.sort_unstable();
    Ok(BalancedSubsample {
        features: features.select_rows(&chosen),
        meta_labels: chosen.iter().map(|&i| meta_labels[i]).collect(),
        skipped_groups,
    })
}

/// Removes the y-z dependence of a non-factorized prior from logits:
/// subtracts `log(p(y,z) / (p(y) p(z)))` from every row.
pub fn adjust_nonuniform_marginals(logits: &LogitsMatrix, prior: &JointPrior) -> Result<LogitsMatrix> {
    let space = logits.space();
    if prior.space() != space {
        return Err(invalid("prior and logits live on different meta-label spaces"));
    }
    let classes = prior.class_marginal();
    let groups = prior.group_marginal();
    let mut offsets = Vec::with_capacity(space.size());
    for (m, &p) in prior.probs().iter().enumerate() {
        if p <= 0.0 {
            return Err(Error::SupportViolation {
                index: m,
                target: 1.0,
                source_mass: p,
            });
        }
        let (y, z) = space.decode(m);
        offsets.push((p / (classes[y] * groups[z])).ln());
    }
    let mut values = logits.as_matrix().clone();
    for i in 0..values.rows() {
        for (v, o) in values.row_mut(i).iter_mut().zip(&offsets) {
            *v -= o;
        }
    }
    LogitsMatrix::new(space, values)
}
