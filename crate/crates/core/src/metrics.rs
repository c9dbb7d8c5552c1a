//! ROC AUC, per-group accuracy, and summaries of priors.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::prob::{JointPrior, MetaLabelSpace};

/// Area under the ROC curve for binary labels (0 = negative, 1 = positive).
///
/// Computed as the Mann-Whitney statistic from midranks, so a tied
/// positive-negative pair counts one half. All arithmetic before the final
/// division is exact integer arithmetic on doubled ranks.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("NaN score"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(invalid(format!("AUC needs binary labels, found {bad}")));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum over positives of twice their midrank.
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share the midrank (start + 1 + end) / 2
        let doubled_midrank = (start + 1 + end) as u128;
        let tied_positives = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        doubled_rank_sum += doubled_midrank * tied_positives as u128;
        start = end;
    }
    let p = positives as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2.0 * positives as f64 * negatives as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAccuracyReport {
    /// Accuracy per meta-label; `None` where the group has no examples.
    pub per_group: Vec<Option<f64>>,
    pub worst: f64,
    /// Unweighted mean over nonempty groups.
    pub average: f64,
    /// Plain accuracy over all examples.
    pub example_weighted: f64,
    pub counts: Vec<usize>,
}

pub fn group_accuracy(
    predicted_classes: &[usize],
    y: &[usize],
    z: &[usize],
    space: MetaLabelSpace,
) -> Result<GroupAccuracyReport> {
    if predicted_classes.len() != y.len() || y.len() != z.len() {
        return Err(invalid(format!(
            "length mismatch: {} predictions, {} y, {} z",
            predicted_classes.len(),
            y.len(),
            z.len()
        )));
    }
    let m = space.size();
    let mut counts = vec![0usize; m];
    let mut correct = vec![0usize; m];
    for ((&p, &yi), &zi) in predicted_classes.iter().zip(y).zip(z) {
        let g = space.try_encode(yi, zi)?;
        counts[g] += 1;
        if p == yi {
            correct[g] += 1;
        }
    }
    let per_group: Vec<Option<f64>> = counts
        .iter()
        .zip(&correct)
        .map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    let observed: Vec<f64> = per_group.iter().flatten().copied().collect();
    if observed.is_empty() {
        return Err(Error::UndefinedMetric("no examples to score".into()));
    }
    let worst = observed.iter().copied().fold(f64::INFINITY, f64::min);
    let average = observed.iter().sum::<f64>() / observed.len() as f64;
    let example_weighted = correct.iter().sum::<usize>() as f64 / y.len() as f64;
    Ok(GroupAccuracyReport {
        per_group,
        worst,
        average,
        example_weighted,
        counts,
    })
}

/// Largest meta-label probability: a one-number summary of how concentrated a prior is.
pub fn max_group_prob(prior: &JointPrior) -> f64 {
    prior.probs().iter().copied().fold(0.0, f64::max)
}

/// Methods compared in the shift sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Erm,
    Subg,
    La,
    /// EM-adapted LA model, fit on unlabeled batches of the given size.
    Ttlsa(usize),
    Oracle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Erm => f.write_str("erm"),
            Method::Subg => f.write_str("subg"),
            Method::La => f.write_str("la"),
            Method::Ttlsa(n) => write!(f, "ttlsa-{n}"),
            Method::Oracle => f.write_str("oracle"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Method::Erm),
            "subg" => Ok(Method::Subg),
            "la" => Ok(Method::La),
            "oracle" => Ok(Method::Oracle),
            other => other
                .strip_prefix("ttlsa-")
                .and_then(|n| n.parse().ok())
                .filter(|n| *n > 0)
                .map(Method::Ttlsa)
                .ok_or_else(|| invalid(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub lambda: f64,
    pub method: Method,
    pub seed: u64,
    pub auc: f64,
    /// Mean of the per-batch EM estimates, for adapted methods.
    pub target_prior_estimate: Option<JointPrior>,
}
