//! Target-prior estimation and posterior reweighting.
//!
//! Under a shift that leaves `p(x | y, z)` fixed, a source posterior divided by
//! the source prior is proportional to the class-conditional likelihood, so the
//! target posterior is the source posterior reweighted by `p_t(m) / p_s(m)`.
//! The target prior itself is fit to unlabeled target inputs by EM, optionally
//! with a Dirichlet prior (MAP-EM, `alpha - 1` pseudo-counts).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::prob::{JointPrior, Matrix, PosteriorMatrix, PROB_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Dirichlet concentration per meta-label; all ones gives the MLE.
    pub dirichlet_alpha: Vec<f64>,
    /// Stop once the L1 change in the prior falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl EmConfig {
    pub const DEFAULT_TOLERANCE: f64 = 1e-8;
    pub const DEFAULT_MAX_ITERATIONS: usize = 500;

    /// Maximum-likelihood EM over `num_labels` meta-labels.
    pub fn mle(num_labels: usize) -> Self {
        Self {
            dirichlet_alpha: vec![1.0; num_labels],
            tolerance: Self::DEFAULT_TOLERANCE,
            max_iterations: Self::DEFAULT_MAX_ITERATIONS,
        }
    }

    /// MAP-EM with the same concentration on every meta-label.
    pub fn symmetric(num_labels: usize, alpha: f64) -> Self {
        Self {
            dirichlet_alpha: vec![alpha; num_labels],
            ..Self::mle(num_labels)
        }
    }

    fn validate(&self, num_labels: usize) -> Result<()> {
        if self.dirichlet_alpha.len() != num_labels {
            return Err(invalid(format!(
                "alpha has {} entries, expected M={num_labels}",
                self.dirichlet_alpha.len()
            )));
        }
        if self.dirichlet_alpha.iter().any(|a| !a.is_finite() || *a < 1.0) {
            return Err(Error::InvalidParameter(
                "Dirichlet concentrations must be >= 1".into(),
            ));
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidParameter(
                "EM needs a positive tolerance and at least one iteration".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmResult {
    pub target_prior: JointPrior,
    pub iterations: usize,
    /// Objective at every iterate, the last entry at `target_prior`.
    pub log_likelihood_trace: Vec<f64>,
    /// Expected meta-label counts under `target_prior`.
    pub expected_counts: Vec<f64>,
}

fn check_same_space(a: &JointPrior, b: &JointPrior) -> Result<()> {
    if a.space() != b.space() {
        return Err(invalid("priors live on different meta-label spaces"));
    }
    Ok(())
}

/// `w[m] = p_t(m) / p_s(m)`, with the source floored.
pub fn importance_weights(source_prior: &JointPrior, target_prior: &JointPrior) -> Result<Vec<f64>> {
    check_same_space(source_prior, target_prior)?;
    source_prior
        .probs()
        .iter()
        .zip(target_prior.probs())
        .enumerate()
        .map(|(m, (&s, &t))| {
            if t > 0.0 && s < PROB_FLOOR {
                Err(Error::SupportViolation {
                    index: m,
                    target: t,
                    source_mass: s,
                })
            } else {
                Ok(t / s.max(PROB_FLOOR))
            }
        })
        .collect()
}

/// Moves source posteriors to the target prior.
pub fn reweight_posterior(
    source_posterior: &PosteriorMatrix,
    source_prior: &JointPrior,
    target_prior: &JointPrior,
) -> Result<PosteriorMatrix> {
    let space = source_posterior.space();
    if source_prior.space() != space {
        return Err(invalid("posterior and priors live on different meta-label spaces"));
    }
    let weights = importance_weights(source_prior, target_prior)?;
    let mut out = Matrix::zeros(source_posterior.len(), space.size());
    for (i, row) in source_posterior.iter_rows().enumerate() {
        let dst = out.row_mut(i);
        let mut total = 0.0;
        for ((d, p), w) in dst.iter_mut().zip(row).zip(&weights) {
            *d = p * w;
            total += *d;
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateRow { row: i });
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    Ok(PosteriorMatrix::from_normalized(space, out))
}

/// Scaled likelihoods `p_s(m | x_i) / p_s(m)`, row-major.
fn likelihood_ratios(posterior: &PosteriorMatrix, source_prior: &JointPrior) -> Vec<f64> {
    let inv: Vec<f64> = source_prior
        .probs()
        .iter()
        .map(|s| 1.0 / s.max(PROB_FLOOR))
        .collect();
    posterior
        .iter_rows()
        .flat_map(|row| row.iter().zip(&inv).map(|(p, i)| p * i))
        .collect()
}

/// One pass over the data at `pi`: objective value and expected counts.
fn expectation(
    ratios: &[f64],
    pi: &[f64],
    alpha: &[f64],
    iteration: usize,
    counts: &mut [f64],
) -> Result<f64> {
    let m = pi.len();
    counts.iter_mut().for_each(|c| *c = 0.0);
    let mut log_lik = 0.0;
    for (i, row) in ratios.chunks_exact(m).enumerate() {
        let denom: f64 = row.iter().zip(pi).map(|(r, p)| r * p).sum();
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(Error::NumericalFailure {
                iteration,
                detail: format!("row {i} has zero likelihood under the current prior"),
            });
        }
        log_lik += denom.ln();
        for ((c, r), p) in counts.iter_mut().zip(row).zip(pi) {
            *c += r * p / denom;
        }
    }
    let log_prior: f64 = alpha
        .iter()
        .zip(pi)
        .filter(|(a, _)| **a != 1.0)
        .map(|(a, p)| (a - 1.0) * p.max(PROB_FLOOR).ln())
        .sum();
    let value = log_lik + log_prior;
    if !value.is_finite() {
        return Err(Error::NumericalFailure {
            iteration,
            detail: "objective became non-finite".into(),
        });
    }
    Ok(value)
}

/// Estimates the target meta-label prior from unlabeled target posteriors.
///
/// Starts at the source prior and alternates responsibilities
/// `r_i(m) ∝ pi[m] p_s(m | x_i) / p_s(m)` with the update
/// `pi[m] ∝ sum_i r_i(m) + alpha_m - 1` until the prior moves less than the
/// tolerance in L1.
pub fn em_estimate_prior(
    source_posterior: &PosteriorMatrix,
    source_prior: &JointPrior,
    config: &EmConfig,
) -> Result<EmResult> {
    let space = source_posterior.space();
    let m = space.size();
    if source_prior.space() != space {
        return Err(invalid("posterior and source prior live on different meta-label spaces"));
    }
    if source_posterior.is_empty() {
        return Err(invalid("EM needs at least one unlabeled example"));
    }
    config.validate(m)?;

    let ratios = likelihood_ratios(source_posterior, source_prior);
    let alpha = &config.dirichlet_alpha;
    let pseudo: Vec<f64> = alpha.iter().map(|a| a - 1.0).collect();

    let mut pi = source_prior.probs().to_vec();
    let mut counts = vec![0.0; m];
    let mut next = vec![0.0; m];
    let mut trace = Vec::new();
    let mut iterations = 0;

    while iterations < config.max_iterations {
        trace.push(expectation(&ratios, &pi, alpha, iterations, &mut counts)?);
        let total: f64 = counts.iter().zip(&pseudo).map(|(c, a)| c + a).sum();
        for ((n, c), a) in next.iter_mut().zip(&counts).zip(&pseudo) {
            *n = (c + a) / total;
        }
        iterations += 1;
        let moved: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if !moved.is_finite() {
            return Err(Error::NumericalFailure {
                iteration: iterations,
                detail: "prior update became non-finite".into(),
            });
        }
        if moved < config.tolerance {
            break;
        }
    }
    trace.push(expectation(&ratios, &pi, alpha, iterations, &mut counts)?);

    Ok(EmResult {
        target_prior: JointPrior::new(space, pi)?,
        iterations,
        log_likelihood_trace: trace,
        expected_counts: counts,
    })
}

/// The EM objective at an arbitrary prior (log-likelihood up to a constant,
/// plus the Dirichlet log-density up to its normalizer).
pub fn em_objective(
    source_posterior: &PosteriorMatrix,
    source_prior: &JointPrior,
    alpha: &[f64],
    pi: &[f64],
) -> Result<f64> {
    let ratios = likelihood_ratios(source_posterior, source_prior);
    let mut counts = vec![0.0; pi.len()];
    expectation(&ratios, pi, alpha, 0, &mut counts)
}

/// Keeps the source class marginal and takes only `p_t(z | y)` from the estimate.
pub fn fix_class_marginal(
    estimated_prior: &JointPrior,
    source_class_marginal: &[f64],
) -> Result<JointPrior> {
    let space = estimated_prior.space();
    let (c, k) = (space.num_classes(), space.num_groups());
    if source_class_marginal.len() != c {
        return Err(invalid(format!(
            "class marginal has {} entries, expected C={c}",
            source_class_marginal.len()
        )));
    }
    if source_class_marginal
        .iter()
        .any(|p| !p.is_finite() || *p < 0.0)
        || (source_class_marginal.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(invalid("class marginal must be a probability vector"));
    }
    let mut out = Vec::with_capacity(space.size());
    for (y, (row, &target)) in estimated_prior
        .probs()
        .chunks_exact(k)
        .zip(source_class_marginal)
        .enumerate()
    {
        let mass: f64 = row.iter().sum();
        if mass <= 0.0 {
            return Err(Error::DegenerateMarginal { class: y });
        }
        out.extend(row.iter().map(|p| target * p / mass));
    }
    JointPrior::new(space, out)
}
