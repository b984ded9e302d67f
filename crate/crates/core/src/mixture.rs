//! Finite Gaussian mixtures: density, sampling, and the closure of the
//! family under marginalization and conditioning.
//!
//! Conditioning a mixture conditions every component and reweights it by
//! how well that component explains the conditioning values:
//! `α̃ₖ = αₖ fₖ(x_given) / Σⱼ αⱼ fⱼ(x_given)`, computed in log space.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gaussian::{check_indices, Cholesky, ConditionParts, GaussianParams, IndexSplit};
use crate::special::{log_sum_exp, LN_2PI};

const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    weights: Vec<f64>,
    components: Vec<GaussianParams>,
}

impl Mixture {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianParams>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "mixture weights must be non-negative: {weights:?}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidParameter(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch(
                "mixture components have different dimensions".into(),
            ));
        }
        Ok(Self {
            weights,
            components,
        })
    }

    /// Single-component mixture.
    pub fn single(component: GaussianParams) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![component],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianParams] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        self.prepare()?.logpdf(x)
    }

    /// Factor every component once for repeated density evaluation.
    pub fn prepare(&self) -> Result<PreparedMixture<'_>> {
        let factors = self
            .components
            .iter()
            .map(GaussianParams::factor)
            .collect::<Result<Vec<_>>>()?;
        let log_norm = factors
            .iter()
            .map(|c| -0.5 * (self.dim() as f64 * LN_2PI + c.log_det()))
            .collect();
        Ok(PreparedMixture {
            mixture: self,
            factors,
            log_norm,
            log_weights: self.weights.iter().map(|w| w.ln()).collect(),
        })
    }

    pub fn marginalize(&self, keep: &[usize]) -> Result<Self> {
        let components = self
            .components
            .iter()
            .map(|c| c.marginalize(keep))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights: self.weights.clone(),
            components,
        })
    }

    /// Conditional mixture of `split.target()` given `split.given() = x_given`.
    pub fn condition(&self, split: &IndexSplit, x_given: &[f64]) -> Result<Self> {
        if x_given.len() != split.given().len() {
            return Err(Error::DimensionMismatch(format!(
                "{} conditioning values for {} given indices",
                x_given.len(),
                split.given().len()
            )));
        }
        check_indices(split.target(), self.dim(), "target")?;
        check_indices(split.given(), self.dim(), "given")?;
        if split.given().is_empty() {
            return self.marginalize(split.target());
        }
        let m = split.given().len() as f64;
        let mut log_w = Vec::with_capacity(self.n_components());
        let mut components = Vec::with_capacity(self.n_components());
        for (w, c) in self.weights.iter().zip(&self.components) {
            let parts = ConditionParts::new(c, split.target(), split.given())?;
            let q = parts.given_mahalanobis_sq(x_given);
            let given_cov = crate::gaussian::select_block(c.cov(), split.given(), split.given());
            let log_det = Cholesky::new(&given_cov)?.log_det();
            log_w.push(w.ln() - 0.5 * (m * LN_2PI + log_det + q));
            components.push(parts.apply(x_given));
        }
        let total = log_sum_exp(&log_w);
        if !total.is_finite() {
            return Err(Error::DegenerateConditioning);
        }
        let weights = log_w.iter().map(|l| (l - total).exp()).collect();
        Ok(Self {
            weights,
            components,
        })
    }

    /// Composition sampling: component index from the weights, then a
    /// Gaussian draw from that component.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        self.sample_labeled(n, rng).map(|(x, _)| x)
    }

    /// Like [`Mixture::sample`], also returning the component of every row.
    pub fn sample_labeled<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<(DMatrix<f64>, Vec<usize>)> {
        let factors = self
            .components
            .iter()
            .map(GaussianParams::factor)
            .collect::<Result<Vec<_>>>()?;
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        let mut z = vec![0.0; d];
        for i in 0..n {
            let k = draw_categorical(&self.weights, rng);
            self.components[k].draw_into(&factors[k], rng, &mut z, |j, v| out[(i, j)] = v);
            labels.push(k);
        }
        Ok((out, labels))
    }

    pub fn mean(&self) -> DVector<f64> {
        self.weights
            .iter()
            .zip(&self.components)
            .fold(DVector::zeros(self.dim()), |acc, (w, c)| acc + c.mean() * *w)
    }

    /// Law-of-total-covariance moment.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        self.weights
            .iter()
            .zip(&self.components)
            .fold(DMatrix::zeros(self.dim(), self.dim()), |acc, (w, c)| {
                let diff = c.mean() - &mu;
                acc + (c.cov() + &diff * diff.transpose()) * *w
            })
    }
}

pub(crate) fn draw_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // Rounding left u above the cumulative sum: take the last positive weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// A mixture with every component's Cholesky factor cached.
pub struct PreparedMixture<'a> {
    mixture: &'a Mixture,
    factors: Vec<Cholesky>,
    log_norm: Vec<f64>,
    log_weights: Vec<f64>,
}

impl PreparedMixture<'_> {
    /// `log αₖ + log φ(x; μₖ, Σₖ)` for every component.
    pub fn component_log_terms(&self, x: &[f64], out: &mut Vec<f64>) -> Result<()> {
        let d = self.mixture.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "point has length {} but mixture has dimension {d}",
                x.len()
            )));
        }
        out.clear();
        let mut diff = vec![0.0; d];
        for (k, c) in self.mixture.components.iter().enumerate() {
            for (j, v) in diff.iter_mut().enumerate() {
                *v = x[j] - c.mean()[j];
            }
            let q = self.factors[k].mahalanobis_sq(&diff);
            out.push(self.log_weights[k] + self.log_norm[k] - 0.5 * q);
        }
        Ok(())
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.factors.len());
        self.component_log_terms(x, &mut terms)?;
        Ok(log_sum_exp(&terms))
    }

    pub fn factors(&self) -> &[Cholesky] {
        &self.factors
    }
}
