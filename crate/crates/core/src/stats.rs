//! Per-class feature summaries exchanged between clients and the server.

use crate::error::{Error, Result};
use crate::numerics::{axpy, sq_norm, Matrix};

/// One vector per class plus bookkeeping about where it came from.
///
/// `present` marks classes that have a usable centroid. A class can be
/// present and `stale` at once: the server saw it in an earlier round and
/// carried the value forward because no participant held that class now.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet {
    vectors: Matrix,
    counts: Vec<usize>,
    present: Vec<bool>,
    stale: Vec<bool>,
}

impl CentroidSet {
    /// All classes absent, vectors zero.
    pub fn empty(classes: usize, dim: usize) -> Self {
        Self {
            vectors: Matrix::zeros(classes, dim),
            counts: vec![0; classes],
            present: vec![false; classes],
            stale: vec![false; classes],
        }
    }

    pub fn from_parts(vectors: Matrix, counts: Vec<usize>, present: Vec<bool>, stale: Vec<bool>) -> Result<Self> {
        let k = vectors.rows();
        if counts.len() != k || present.len() != k || stale.len() != k {
            return Err(Error::shape("centroid bookkeeping does not match class count"));
        }
        Ok(Self {
            vectors,
            counts,
            present,
            stale,
        })
    }

    /// Every class present with the given vectors and counts.
    pub fn dense(vectors: Matrix, counts: Vec<usize>) -> Result<Self> {
        let k = vectors.rows();
        Self::from_parts(vectors, counts, vec![true; k], vec![false; k])
    }

    /// Class means of `features` (row-major, `labels.len()` rows of `dim`).
    /// Classes without samples are absent with count 0.
    pub fn from_features(features: &[f64], labels: &[usize], classes: usize, dim: usize) -> Self {
        let mut vectors = Matrix::zeros(classes, dim);
        let mut counts = vec![0usize; classes];
        for (row, &y) in features.chunks_exact(dim).zip(labels) {
            axpy(1.0, row, vectors.row_mut(y));
            counts[y] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            if c > 0 {
                vectors.row_mut(k).iter_mut().for_each(|v| *v /= c as f64);
            }
        }
        let present = counts.iter().map(|c| *c > 0).collect();
        Self {
            vectors,
            counts,
            present,
            stale: vec![false; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.present[class].then(|| self.vectors.row(class))
    }

    pub fn vector(&self, class: usize) -> &[f64] {
        self.vectors.row(class)
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn count(&self, class: usize) -> usize {
        self.counts[class]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.present[class]
    }

    pub fn is_stale(&self, class: usize) -> bool {
        self.stale[class]
    }
}

/// Label priors, class-conditional feature means and the scalar variance
/// term a client reports before it trains its extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub priors: Vec<f64>,
    /// Class means; rows of absent classes are zero and flagged in `present`.
    pub mu: Matrix,
    pub present: Vec<bool>,
    /// `priors[y] * mu[y]`, zero for absent classes.
    pub h: Matrix,
    pub variance: f64,
    pub counts: Vec<usize>,
}

impl FeatureStats {
    /// Single pass over a feature matrix. The variance is
    /// `Σ_y p_y·E[‖f‖² | y] − p_y²·‖μ_y‖²`, clamped at zero.
    pub fn from_features(features: &[f64], labels: &[usize], classes: usize, dim: usize) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Empty("training set"));
        }
        if features.len() != n * dim {
            return Err(Error::shape("feature matrix does not match label count"));
        }
        let centroids = CentroidSet::from_features(features, labels, classes, dim);
        let mut sq = vec![0.0; classes];
        for (row, &y) in features.chunks_exact(dim).zip(labels) {
            sq[y] += sq_norm(row);
        }
        let priors: Vec<f64> = centroids.counts.iter().map(|c| *c as f64 / n as f64).collect();
        let mut h = Matrix::zeros(classes, dim);
        let mut variance = 0.0;
        for y in 0..classes {
            let c = centroids.counts[y];
            if c == 0 {
                continue;
            }
            let p = priors[y];
            let mu = centroids.vectors.row(y);
            for (dst, m) in h.row_mut(y).iter_mut().zip(mu) {
                *dst = p * m;
            }
            variance += p * sq[y] / c as f64 - p * p * sq_norm(mu);
        }
        Ok(Self {
            priors,
            mu: centroids.vectors,
            present: centroids.present,
            h,
            variance: variance.max(0.0),
            counts: centroids.counts,
        })
    }

    pub fn classes(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn sample_count(&self) -> usize {
        self.counts.iter().sum()
    }
}
