//! Meta-label indexing and the probability containers shared by the pipeline.
//!
//! A meta-label `m` flattens a (class `y`, group `z`) pair as `m = y * K + z`,
//! row-major by class. Every file and vector in this crate uses that order.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Floor applied before taking logs of, or dividing by, probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

const PRIOR_SUM_TOL: f64 = 1e-9;
const ROW_SUM_TOL: f64 = 1e-9;

/// The flattened index set over (class, group) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetaLabelSpace {
    num_classes: usize,
    num_groups: usize,
}

impl MetaLabelSpace {
    pub fn new(num_classes: usize, num_groups: usize) -> Result<Self> {
        if num_classes == 0 || num_groups == 0 {
            return Err(invalid(format!(
                "meta-label space needs C >= 1 and K >= 1, got C={num_classes} K={num_groups}"
            )));
        }
        Ok(Self {
            num_classes,
            num_groups,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    /// M = C * K.
    pub fn size(&self) -> usize {
        self.num_classes * self.num_groups
    }

    pub fn encode(&self, class: usize, group: usize) -> usize {
        debug_assert!(class < self.num_classes && group < self.num_groups);
        class * self.num_groups + group
    }

    pub fn decode(&self, m: usize) -> (usize, usize) {
        debug_assert!(m < self.size());
        (m / self.num_groups, m % self.num_groups)
    }

    pub fn try_encode(&self, class: usize, group: usize) -> Result<usize> {
        if class >= self.num_classes || group >= self.num_groups {
            return Err(invalid(format!(
                "label (y={class}, z={group}) outside C={} K={}",
                self.num_classes, self.num_groups
            )));
        }
        Ok(self.encode(class, group))
    }

    pub(crate) fn check_label(&self, m: usize) -> Result<()> {
        if m >= self.size() {
            return Err(invalid(format!(
                "meta-label {m} out of range for M={}",
                self.size()
            )));
        }
        Ok(())
    }
}

/// A probability vector over meta-labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPrior {
    space: MetaLabelSpace,
    probs: Vec<f64>,
}

impl JointPrior {
    /// Validates and renormalizes so the stored vector sums to one in floating point.
    pub fn new(space: MetaLabelSpace, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != space.size() {
            return Err(invalid(format!(
                "prior has {} entries, expected M={}",
                probs.len(),
                space.size()
            )));
        }
        if let Some((m, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(invalid(format!("prior entry {m} = {p} is not a probability")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PRIOR_SUM_TOL {
            return Err(invalid(format!("prior sums to {total}, expected 1")));
        }
        Ok(Self {
            space,
            probs: probs.into_iter().map(|p| p / total).collect(),
        })
    }

    /// Normalizes nonnegative weights (counts, unnormalized masses) into a prior.
    pub fn from_weights(space: MetaLabelSpace, weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("prior weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(invalid("prior weights have zero total mass"));
        }
        Self::new(space, weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(space: MetaLabelSpace) -> Self {
        let m = space.size();
        Self {
            space,
            probs: vec![1.0 / m as f64; m],
        }
    }

    pub fn one_hot(space: MetaLabelSpace, m: usize) -> Result<Self> {
        space.check_label(m)?;
        let mut probs = vec![0.0; space.size()];
        probs[m] = 1.0;
        Ok(Self { space, probs })
    }

    /// Empirical frequencies of meta-labels.
    pub fn from_labels(space: MetaLabelSpace, labels: &[usize]) -> Result<Self> {
        let mut counts = vec![0.0; space.size()];
        for &m in labels {
            space.check_label(m)?;
            counts[m] += 1.0;
        }
        Self::from_weights(space, &counts)
    }

    pub fn space(&self) -> MetaLabelSpace {
        self.space
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, class: usize, group: usize) -> f64 {
        self.probs[self.space.encode(class, group)]
    }

    pub fn class_marginal(&self) -> Vec<f64> {
        let k = self.space.num_groups();
        self.probs.chunks_exact(k).map(|row| row.iter().sum()).collect()
    }

    pub fn group_marginal(&self) -> Vec<f64> {
        let k = self.space.num_groups();
        let mut out = vec![0.0; k];
        for row in self.probs.chunks_exact(k) {
            for (o, p) in out.iter_mut().zip(row) {
                *o += p;
            }
        }
        out
    }

    pub fn l1_distance(&self, other: &JointPrior) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// Dense row-major matrix of reals, used for features and class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on zero width
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-example meta-label logits `l(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix {
    space: MetaLabelSpace,
    values: Matrix,
}

impl LogitsMatrix {
    pub fn new(space: MetaLabelSpace, values: Matrix) -> Result<Self> {
        if values.cols() != space.size() {
            return Err(invalid(format!(
                "logits have {} columns, expected M={}",
                values.cols(),
                space.size()
            )));
        }
        if let Some(pos) = values.data().iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "non-finite logit at row {} column {}",
                pos / space.size(),
                pos % space.size()
            )));
        }
        Ok(Self { space, values })
    }

    pub fn from_rows(space: MetaLabelSpace, rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(space, Matrix::from_rows(rows).map_err(|_| invalid("ragged logits rows"))?)
    }

    pub fn space(&self) -> MetaLabelSpace {
        self.space
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.iter_rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.values
    }

    /// Multiplies every logit by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let data = self.values.data().iter().map(|v| v * factor).collect();
        Self::new(
            self.space,
            Matrix::new(self.values.rows(), self.values.cols(), data)?,
        )
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            space: self.space,
            values: self.values.select_rows(indices),
        }
    }
}

/// Row-stochastic matrix of meta-label posteriors `p(y, z | x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    space: MetaLabelSpace,
    values: Matrix,
}

impl PosteriorMatrix {
    pub fn new(space: MetaLabelSpace, values: Matrix) -> Result<Self> {
        if values.cols() != space.size() {
            return Err(invalid(format!(
                "posterior has {} columns, expected M={}",
                values.cols(),
                space.size()
            )));
        }
        for (i, row) in values.iter_rows().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                return Err(invalid(format!("posterior row {i} has an entry outside [0, 1]")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(invalid(format!("posterior row {i} sums to {total}")));
            }
        }
        Ok(Self { space, values })
    }

    pub fn from_rows(space: MetaLabelSpace, rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(space, Matrix::from_rows(rows).map_err(|_| invalid("ragged posterior rows"))?)
    }

    /// For rows produced by a normalizing routine in this crate.
    pub(crate) fn from_normalized(space: MetaLabelSpace, values: Matrix) -> Self {
        debug_assert_eq!(values.cols(), space.size());
        Self { space, values }
    }

    pub fn space(&self) -> MetaLabelSpace {
        self.space
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.iter_rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.values
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            space: self.space,
            values: self.values.select_rows(indices),
        }
    }

    /// Stacks posteriors over the same space.
    pub fn concat(parts: &[PosteriorMatrix]) -> Result<Self> {
        let space = parts
            .first()
            .map(|p| p.space)
            .ok_or_else(|| invalid("nothing to concatenate"))?;
        if parts.iter().any(|p| p.space != space) {
            return Err(invalid("posteriors over different meta-label spaces"));
        }
        let rows = parts.iter().map(PosteriorMatrix::len).sum();
        let data = parts
            .iter()
            .flat_map(|p| p.values.data().iter().copied())
            .collect();
        Ok(Self::from_normalized(space, Matrix::new(rows, space.size(), data)?))
    }

    /// Average posterior row: the prior implied by the classifier on these inputs.
    pub fn mean_row(&self) -> Result<JointPrior> {
        if self.is_empty() {
            return Err(Error::InsufficientData("no rows to average".into()));
        }
        let mut acc = vec![0.0; self.space.size()];
        for row in self.iter_rows() {
            for (a, p) in acc.iter_mut().zip(row) {
                *a += p;
            }
        }
        JointPrior::from_weights(self.space, &acc)
    }
}

/// Stabilized softmax of one row into `out`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Log-sum-exp of a row.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(logits: &LogitsMatrix) -> PosteriorMatrix {
    let space = logits.space();
    let m = space.size();
    let mut out = Matrix::zeros(logits.len(), m);
    for i in 0..logits.len() {
        softmax_into(logits.row(i), out.row_mut(i));
    }
    PosteriorMatrix::from_normalized(space, out)
}

/// Sums each posterior row over groups, giving an N x C matrix of class probabilities.
pub fn marginalize_classes(posterior: &PosteriorMatrix) -> Matrix {
    let space = posterior.space();
    let (c, k) = (space.num_classes(), space.num_groups());
    let mut out = Matrix::zeros(posterior.len(), c);
    for (i, row) in posterior.iter_rows().enumerate() {
        for (dst, chunk) in out.row_mut(i).iter_mut().zip(row.chunks_exact(k)) {
            *dst = chunk.iter().sum();
        }
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// MAP class per row after marginalizing out the group.
pub fn predict_class(posterior: &PosteriorMatrix) -> Vec<usize> {
    marginalize_classes(posterior).iter_rows().map(argmax).collect()
}

/// Probability of class 1 per row: the score used for binary AUC.
pub fn positive_class_scores(posterior: &PosteriorMatrix) -> Result<Vec<f64>> {
    if posterior.space().num_classes() != 2 {
        return Err(invalid("positive-class score requires exactly two classes"));
    }
    Ok(marginalize_classes(posterior)
        .iter_rows()
        .map(|r| r[1])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn space(c: usize, k: usize) -> MetaLabelSpace {
        MetaLabelSpace::new(c, k).unwrap()
    }

    fn softmax_one(row: &[f64]) -> Vec<f64> {
        let l = LogitsMatrix::from_rows(space(1, row.len()), &[row.to_vec()]).unwrap();
        softmax_rows(&l).row(0).to_vec()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_one(&[0.0, 0.0]), vec![0.5, 0.5]);
        let r = softmax_one(&[3f64.ln(), 0.0]);
        assert!((r[0] - 0.75).abs() < 1e-15 && (r[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logits_match_shifted_direct_evaluation() {
        let r = softmax_one(&[1000.0, 1000.0, 999.0]);
        assert!(r.iter().all(|p| p.is_finite()));
        assert_eq!(r[0], r[1]);
        // Shift by 999 by hand: [e, e, 1] / (2e + 1).
        let e = 1f64.exp();
        let expected = [e / (2.0 * e + 1.0), e / (2.0 * e + 1.0), 1.0 / (2.0 * e + 1.0)];
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let err = LogitsMatrix::from_rows(space(1, 2), &[vec![f64::NAN, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        assert!(LogitsMatrix::from_rows(space(1, 2), &[vec![f64::INFINITY, 0.0]]).is_err());
    }

    #[test]
    fn marginalize_examples() {
        let s = space(2, 2);
        let p = PosteriorMatrix::from_rows(
            s,
            &[
                vec![0.1, 0.2, 0.3, 0.4],
                vec![0.25; 4],
                vec![0.0, 0.0, 1.0, 0.0],
            ],
        )
        .unwrap();
        let c = marginalize_classes(&p);
        assert!((c.get(0, 0) - 0.3).abs() < 1e-15 && (c.get(0, 1) - 0.7).abs() < 1e-15);
        assert_eq!(c.row(1), &[0.5, 0.5]);
        assert_eq!(c.row(2), &[0.0, 1.0]);
        assert_eq!(s.encode(1, 0), 2);
    }

    #[test]
    fn predict_class_breaks_ties_low() {
        let s = space(2, 1);
        let p = PosteriorMatrix::from_rows(s, &[vec![0.3, 0.7], vec![0.5, 0.5], vec![0.7, 0.3]])
            .unwrap();
        assert_eq!(predict_class(&p), vec![1, 0, 0]);
    }

    #[test]
    fn prior_validation() {
        let s = space(2, 2);
        assert!(JointPrior::new(s, vec![0.5, 0.5, 0.1, 0.0]).is_err());
        assert!(JointPrior::new(s, vec![1.5, -0.5, 0.0, 0.0]).is_err());
        assert!(JointPrior::new(s, vec![0.5, 0.5]).is_err());
        let p = JointPrior::new(s, vec![0.4, 0.1, 0.4, 0.1]).unwrap();
        assert_eq!(p.class_marginal(), vec![0.5, 0.5]);
        assert!((p.group_marginal()[0] - 0.8).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(c in 1usize..=16, k in 1usize..=16) {
            let s = space(c, k);
            for m in 0..s.size() {
                let (y, z) = s.decode(m);
                prop_assert!(y < c && z < k);
                prop_assert_eq!(s.encode(y, z), m);
            }
        }

        #[test]
        fn softmax_normalized_and_shift_invariant(
            row in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let a = softmax_one(&row);
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let b = softmax_one(&shifted);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn marginalize_preserves_mass(raw in prop::collection::vec(0.0f64..1.0, 6)) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let row: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / 6.0) / total).collect();
            let p = PosteriorMatrix::from_rows(space(3, 2), &[row.clone()]).unwrap();
            let c = marginalize_classes(&p);
            let s_in: f64 = row.iter().sum();
            let s_out: f64 = c.row(0).iter().sum();
            prop_assert!((s_in - s_out).abs() < 1e-12);
        }
    }
}
