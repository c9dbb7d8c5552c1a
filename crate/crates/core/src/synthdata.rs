//! Synthetic shift benchmark: anchor priors, their lambda-mixtures, a Gaussian
//! class-conditional model `p(x | y, z)` shared by every domain, and the exact
//! Bayes posterior under any prior.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::prob::{JointPrior, Matrix, MetaLabelSpace, PosteriorMatrix};
use crate::rng::stream_rng;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPair {
    pub p0: JointPrior,
    pub p1: JointPrior,
}

/// Perfect positive coupling (`p0`, mass on y == z) and perfect negative
/// coupling (`p1`, mass on y != z) for binary class and group.
pub fn default_anchors() -> AnchorPair {
    let space = MetaLabelSpace::new(2, 2).expect("2x2 space");
    AnchorPair {
        p0: JointPrior::new(space, vec![0.5, 0.0, 0.0, 0.5]).expect("valid anchor"),
        p1: JointPrior::new(space, vec![0.0, 0.5, 0.5, 0.0]).expect("valid anchor"),
    }
}

/// `(1 - lambda) p0 + lambda p1`.
pub fn lambda_prior(anchors: &AnchorPair, lambda: f64) -> Result<JointPrior> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if anchors.p0.space() != anchors.p1.space() {
        return Err(invalid("anchors live on different meta-label spaces"));
    }
    let probs = anchors
        .p0
        .probs()
        .iter()
        .zip(anchors.p1.probs())
        .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
        .collect();
    JointPrior::new(anchors.p0.space(), probs)
}

/// Serialized form of a [`GaussianGenerativeSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpecRecord {
    pub num_classes: usize,
    pub num_groups: usize,
    /// One mean per meta-label, canonical order.
    pub means: Vec<Vec<f64>>,
    /// One row-major D x D covariance per meta-label.
    pub covariances: Vec<Vec<f64>>,
}

/// Gaussian `p(x | m)` per meta-label, with cached Cholesky factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianSpecRecord", into = "GaussianSpecRecord")]
pub struct GaussianGenerativeSpec {
    space: MetaLabelSpace,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    cholesky: Vec<DMatrix<f64>>,
    log_norm: Vec<f64>,
}

impl GaussianGenerativeSpec {
    pub fn new(
        space: MetaLabelSpace,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let m = space.size();
        if means.len() != m || covariances.len() != m {
            return Err(Error::SpecValidation(format!(
                "need {m} means and covariances, got {} and {}",
                means.len(),
                covariances.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::SpecValidation("feature dimension must be >= 1".into()));
        }
        let mut spec = Self {
            space,
            means: Vec::with_capacity(m),
            covariances: Vec::with_capacity(m),
            cholesky: Vec::with_capacity(m),
            log_norm: Vec::with_capacity(m),
        };
        for (k, (mu, cov)) in means.into_iter().zip(covariances).enumerate() {
            if mu.len() != d || cov.len() != d * d {
                return Err(Error::SpecValidation(format!(
                    "meta-label {k}: expected a {d}-vector mean and {d}x{d} covariance"
                )));
            }
            if mu.iter().chain(&cov).any(|v| !v.is_finite()) {
                return Err(Error::SpecValidation(format!("meta-label {k}: non-finite parameter")));
            }
            let cov = DMatrix::from_row_slice(d, d, &cov);
            if (&cov - cov.transpose()).abs().max() > SYMMETRY_TOL {
                return Err(Error::SpecValidation(format!(
                    "meta-label {k}: covariance is not symmetric"
                )));
            }
            let chol = cov.clone().cholesky().ok_or_else(|| {
                Error::SpecValidation(format!("meta-label {k}: covariance is not positive definite"))
            })?;
            let l = chol.l();
            let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            spec.log_norm
                .push(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det));
            spec.means.push(DVector::from_vec(mu));
            spec.covariances.push(cov);
            spec.cholesky.push(l);
        }
        Ok(spec)
    }

    /// `mu_{yz} = (2y - 1, 3(2z - 1))`, identity covariance, C = K = 2.
    ///
    /// The group direction is three times as separable as the class
    /// direction, so an unadjusted classifier leans on the group.
    pub fn gauss_cmnist() -> Self {
        let space = MetaLabelSpace::new(2, 2).expect("2x2 space");
        let mut means = Vec::new();
        for y in 0..2 {
            for z in 0..2 {
                means.push(vec![2.0 * y as f64 - 1.0, 3.0 * (2.0 * z as f64 - 1.0)]);
            }
        }
        let identity = vec![1.0, 0.0, 0.0, 1.0];
        Self::new(space, means, vec![identity; 4]).expect("builtin spec is valid")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "gauss-cmnist" => Some(Self::gauss_cmnist()),
            _ => None,
        }
    }

    pub fn space(&self) -> MetaLabelSpace {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn mean(&self, m: usize) -> &[f64] {
        self.means[m].as_slice()
    }

    /// `log p(x_i | m)` for every row and meta-label.
    pub fn log_likelihoods(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.dim() {
            return Err(invalid(format!(
                "features have {} columns, spec has D={}",
                features.cols(),
                self.dim()
            )));
        }
        let m = self.space.size();
        let mut out = Matrix::zeros(features.rows(), m);
        for (i, x) in features.iter_rows().enumerate() {
            let x = DVector::from_column_slice(x);
            for k in 0..m {
                let diff = &x - &self.means[k];
                let white = self.cholesky[k]
                    .solve_lower_triangular(&diff)
                    .ok_or_else(|| Error::SpecValidation("singular covariance".into()))?;
                out.row_mut(i)[k] = self.log_norm[k] - 0.5 * white.norm_squared();
            }
        }
        Ok(out)
    }
}

impl TryFrom<GaussianSpecRecord> for GaussianGenerativeSpec {
    type Error = Error;

    fn try_from(r: GaussianSpecRecord) -> Result<Self> {
        Self::new(
            MetaLabelSpace::new(r.num_classes, r.num_groups)?,
            r.means,
            r.covariances,
        )
    }
}

impl From<GaussianGenerativeSpec> for GaussianSpecRecord {
    fn from(s: GaussianGenerativeSpec) -> Self {
        Self {
            num_classes: s.space.num_classes(),
            num_groups: s.space.num_groups(),
            means: s.means.iter().map(|v| v.as_slice().to_vec()).collect(),
            covariances: s
                .covariances
                .iter()
                .map(|c| c.transpose().as_slice().to_vec())
                .collect(),
        }
    }
}

/// Labeled draws `(x, y, z)` plus the prior and seed that produced them, when known.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub space: MetaLabelSpace,
    pub features: Matrix,
    pub y: Vec<usize>,
    pub z: Vec<usize>,
    pub prior: Option<JointPrior>,
    pub seed: Option<u64>,
}

impl LabeledDataset {
    pub fn new(space: MetaLabelSpace, features: Matrix, y: Vec<usize>, z: Vec<usize>) -> Result<Self> {
        if features.rows() != y.len() || y.len() != z.len() {
            return Err(invalid(format!(
                "dataset columns differ in length: {} features, {} y, {} z",
                features.rows(),
                y.len(),
                z.len()
            )));
        }
        for (&yi, &zi) in y.iter().zip(&z) {
            space.try_encode(yi, zi)?;
        }
        Ok(Self {
            space,
            features,
            y,
            z,
            prior: None,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn meta_labels(&self) -> Vec<usize> {
        self.y
            .iter()
            .zip(&self.z)
            .map(|(&y, &z)| self.space.encode(y, z))
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            space: self.space,
            features: self.features.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            z: indices.iter().map(|&i| self.z[i]).collect(),
            prior: self.prior.clone(),
            seed: self.seed,
        }
    }
}

fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (m, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return m;
        }
    }
    // rounding left u above the final cumulative sum
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Draws `m ~ prior`, then `x ~ N(mu_m, Sigma_m)`.
pub fn sample_dataset(
    prior: &JointPrior,
    spec: &GaussianGenerativeSpec,
    n: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if prior.space() != spec.space() {
        return Err(invalid("prior and spec live on different meta-label spaces"));
    }
    let space = spec.space();
    let d = spec.dim();
    let mut rng = stream_rng(seed, 0);
    let mut data = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut eps = DVector::zeros(d);
    for _ in 0..n {
        let m = sample_categorical(&mut rng, prior.probs());
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let x = &spec.means[m] + &spec.cholesky[m] * &eps;
        data.extend(x.iter());
        let (yi, zi) = space.decode(m);
        y.push(yi);
        z.push(zi);
    }
    Ok(LabeledDataset {
        space,
        features: Matrix::new(n, d, data)?,
        y,
        z,
        prior: Some(prior.clone()),
        seed: Some(seed),
    })
}

/// Exact Bayes posterior `p(m | x) ∝ prior[m] p(x | m)`.
pub fn oracle_posterior(
    features: &Matrix,
    spec: &GaussianGenerativeSpec,
    prior: &JointPrior,
) -> Result<PosteriorMatrix> {
    if prior.space() != spec.space() {
        return Err(invalid("prior and spec live on different meta-label spaces"));
    }
    let mut joint = spec.log_likelihoods(features)?;
    let log_prior: Vec<f64> = prior.probs().iter().map(|p| p.ln()).collect();
    for i in 0..joint.rows() {
        let row = joint.row_mut(i);
        for (v, lp) in row.iter_mut().zip(&log_prior) {
            *v += lp;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    PosteriorMatrix::new(spec.space(), joint)
}

/// Log of [`oracle_posterior`], computed without the round trip through probabilities.
pub fn oracle_log_posterior(
    features: &Matrix,
    spec: &GaussianGenerativeSpec,
    prior: &JointPrior,
) -> Result<Matrix> {
    let mut joint = spec.log_likelihoods(features)?;
    let log_prior: Vec<f64> = prior.probs().iter().map(|p| p.ln()).collect();
    for i in 0..joint.rows() {
        let row = joint.row_mut(i);
        for (v, lp) in row.iter_mut().zip(&log_prior) {
            *v += lp;
        }
        let lse = crate::prob::log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(joint)
}
