//! Univariate marginal models: Gaussian-mixture margins with AIC order
//! selection, empirical CDFs, and rank-based pseudo-observations.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{em_fit, EmConfig};
use crate::error::{Error, Result};
use crate::mixture::Mixture;
use crate::special::{norm_cdf, norm_pdf, norm_ppf};

const CDF_TOL: f64 = 1e-12;

/// One-dimensional Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateMixture {
    weights: Vec<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
}

impl UnivariateMixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || sds.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "univariate mixture needs equal non-empty lengths, got {}/{}/{}",
                k,
                means.len(),
                sds.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || ((weights.iter().sum::<f64>()) - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidParameter(format!(
                "weights must lie on the simplex: {weights:?}"
            )));
        }
        if sds.iter().any(|s| !(*s > 0.0 && s.is_finite())) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "means must be finite and sds positive: {means:?} {sds:?}"
            )));
        }
        Ok(Self {
            weights,
            means,
            sds,
        })
    }

    pub fn standard_normal() -> Self {
        Self {
            weights: vec![1.0],
            means: vec![0.0],
            sds: vec![1.0],
        }
    }

    /// The `j`-th coordinate margin of a multivariate mixture.
    pub fn from_margin(m: &Mixture, j: usize) -> Result<Self> {
        if j >= m.dim() {
            return Err(Error::InvalidIndices(format!(
                "margin {j} of a {}-dimensional mixture",
                m.dim()
            )));
        }
        let comps = m.components();
        Self::new(
            m.weights().to_vec(),
            comps.iter().map(|c| c.mean()[j]).collect(),
            comps.iter().map(|c| c.cov()[(j, j)].sqrt()).collect(),
        )
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn sds(&self) -> &[f64] {
        &self.sds
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let mut s = 0.0;
        for k in 0..self.weights.len() {
            s += self.weights[k] * norm_cdf((x - self.means[k]) / self.sds[k]);
        }
        s.clamp(0.0, 1.0)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let mut s = 0.0;
        for k in 0..self.weights.len() {
            s += self.weights[k] * norm_pdf((x - self.means[k]) / self.sds[k]) / self.sds[k];
        }
        s
    }

    pub fn logpdf(&self, x: f64) -> f64 {
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|k| {
                let z = (x - self.means[k]) / self.sds[k];
                self.weights[k].ln() + crate::special::norm_logpdf(z) - self.sds[k].ln()
            })
            .collect();
        crate::special::log_sum_exp(&terms)
    }

    pub fn quantile(&self, u: f64) -> Result<f64> {
        self.quantile_near(u, None)
    }

    /// Quantile with an optional warm-start guess for the Newton iteration.
    pub fn quantile_near(&self, u: f64, guess: Option<f64>) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Domain(format!("quantile level {u} outside (0, 1)")));
        }
        Ok(self.quantile_probit(u, norm_ppf(u), guess))
    }

    /// Core solver; `q` must equal `Φ⁻¹(u)` for `u` in (0, 1).
    pub(crate) fn quantile_probit(&self, u: f64, q: f64, guess: Option<f64>) -> f64 {
        let f = |x: f64| self.cdf(x) - u;
        // A good warm start usually lands within a couple of Newton steps;
        // the CDF is monotone so a converged point is the root.
        if let Some(mut x) = guess.filter(|g| g.is_finite()) {
            for _ in 0..4 {
                let fx = f(x);
                let p = self.pdf(x);
                if !(p > 0.0) {
                    break;
                }
                let next = x - fx / p;
                if fx.abs() <= CDF_TOL {
                    return if next.is_finite() { next } else { x };
                }
                x = next;
            }
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut start = 0.0;
        for k in 0..self.weights.len() {
            let c = self.means[k] + self.sds[k] * q;
            lo = lo.min(c);
            hi = hi.max(c);
            start += self.weights[k] * c;
        }
        let mut flo = f(lo);
        let mut fhi = f(hi);
        // Rounding in Φ can leave the analytic bracket a hair short.
        let mut step = (hi - lo).max(1e-8 * lo.abs().max(1.0));
        while flo > 0.0 {
            lo -= step;
            step *= 2.0;
            flo = f(lo);
        }
        let mut step = (hi - lo).max(1e-8 * hi.abs().max(1.0));
        while fhi < 0.0 {
            hi += step;
            step *= 2.0;
            fhi = f(hi);
        }
        if flo == 0.0 {
            return lo;
        }
        if fhi == 0.0 {
            return hi;
        }

        let mut x = guess.filter(|g| *g > lo && *g < hi).unwrap_or(start);
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        for _ in 0..60 {
            let fx = f(x);
            if fx == 0.0 {
                return x;
            }
            if fx < 0.0 {
                lo = x;
                flo = fx;
            } else {
                hi = x;
                fhi = fx;
            }
            let p = self.pdf(x);
            let next = x - fx / p;
            let inside = p > 0.0 && next > lo && next < hi;
            if fx.abs() <= CDF_TOL {
                return if inside { next } else { x };
            }
            if hi - lo <= 1e-13 * x.abs().max(1.0) {
                return x;
            }
            if !inside {
                break;
            }
            x = next;
        }
        chandrupatla(f, lo, hi, flo, fhi)
    }
}

/// Inverse-quadratic bracketing root finder (Chandrupatla 1997).
/// Requires `fa` and `fb` of opposite sign.
fn chandrupatla(f: impl Fn(f64) -> f64, a0: f64, b0: f64, fa0: f64, fb0: f64) -> f64 {
    let (mut a, mut b) = (b0, a0);
    let (mut fa, mut fb) = (fb0, fa0);
    let (mut c, mut fc): (f64, f64);
    let mut t = 0.5;
    for _ in 0..400 {
        let xt = a + t * (b - a);
        let ft = f(xt);
        if ft == 0.0 {
            return xt;
        }
        if ft.signum() == fa.signum() {
            c = a;
            fc = fa;
        } else {
            c = b;
            b = a;
            fc = fb;
            fb = fa;
        }
        a = xt;
        fa = ft;
        let (xm, fm) = if fa.abs() < fb.abs() { (a, fa) } else { (b, fb) };
        let tol = 2.0 * f64::EPSILON * xm.abs() + 1e-13 * xm.abs().max(1.0) * 0.5;
        let tlim = tol / (b - c).abs();
        if fm.abs() <= CDF_TOL * 1e-2 || tlim > 0.5 {
            return xm;
        }
        let xi = (a - b) / (c - b);
        let phi = (fa - fb) / (fc - fb);
        t = if phi * phi < xi && (1.0 - phi) * (1.0 - phi) < 1.0 - xi {
            fa / (fb - fa) * fc / (fb - fc) + (c - a) / (b - a) * fa / (fc - fa) * fb / (fc - fb)
        } else {
            0.5
        };
        t = t.clamp(tlim, 1.0 - tlim);
    }
    if fa.abs() < fb.abs() {
        a
    } else {
        b
    }
}

pub fn gmm_cdf(x: f64, m: &UnivariateMixture) -> f64 {
    m.cdf(x)
}

pub fn gmm_quantile(u: f64, m: &UnivariateMixture) -> Result<f64> {
    m.quantile(u)
}

/// Fit mixtures with 1..=`k_max` components and keep the one with the
/// smallest AIC (`2p − 2 loglik`, `p = 3K − 1`). Orders whose fit fails are
/// skipped; the error of the smallest order is returned if all fail.
pub fn fit_marginal_aic<R: Rng + ?Sized>(
    x: &[f64],
    k_max: usize,
    rng: &mut R,
) -> Result<UnivariateMixture> {
    if x.len() < 10 {
        return Err(Error::InvalidParameter(format!(
            "marginal fitting needs at least 10 values, got {}",
            x.len()
        )));
    }
    if k_max == 0 {
        return Err(Error::InvalidParameter("k_max must be at least 1".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("marginal data contains non-finite values".into()));
    }
    // Sorting makes the fit a function of the multiset of values only.
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let data = DMatrix::from_column_slice(sorted.len(), 1, &sorted);
    let seeds: Vec<u64> = (0..k_max).map(|_| rng.random()).collect();
    let cfg = EmConfig {
        max_iter: 300,
        rel_tol: 1e-6,
        n_restarts: 3,
        ..EmConfig::default()
    };
    let fits: Vec<Result<(f64, UnivariateMixture)>> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let k = i + 1;
            let fit = em_fit(&data, k, &cfg, &mut ChaCha8Rng::seed_from_u64(s))?;
            let aic = 2.0 * (3 * k - 1) as f64 - 2.0 * fit.loglik;
            Ok((aic, UnivariateMixture::from_margin(&fit.mixture, 0)?))
        })
        .collect();

    let mut best: Option<(f64, UnivariateMixture)> = None;
    let mut first_err = None;
    for fit in fits {
        match fit {
            Ok((aic, m)) => {
                if best.as_ref().map_or(true, |(b, _)| aic < *b) {
                    best = Some((aic, m));
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match best {
        Some((_, m)) => Ok(m),
        None => Err(first_err.expect("k_max ≥ 1")),
    }
}

/// Per-column `rank / (n + 1)` with average ranks on ties.
pub fn pseudo_observations(data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, d) = data.shape();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "pseudo-observations need at least 2 rows, got {n}"
        )));
    }
    let mut out = DMatrix::zeros(n, d);
    for j in 0..d {
        let col: Vec<f64> = data.column(j).iter().copied().collect();
        for (i, r) in average_ranks(&col).into_iter().enumerate() {
            out[(i, j)] = r / (n + 1) as f64;
        }
    }
    Ok(out)
}

/// 1-based ranks, ties receiving the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Right-continuous empirical CDF scaled by `n / (n + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.len() < 2 || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "empirical CDF needs at least 2 finite values".into(),
            ));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn n(&self) -> usize {
        self.sorted.len()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let count = self.sorted.partition_point(|v| *v <= x);
        count as f64 / (self.n() + 1) as f64
    }

    /// Linear interpolation between order statistics at position `u (n + 1)`,
    /// clamped to the sample range.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        empirical_quantile(&self.sorted, u)
    }
}

fn empirical_quantile(sorted: &[f64], u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("quantile level {u} outside (0, 1)")));
    }
    let n = sorted.len();
    let t = u * (n + 1) as f64;
    if t <= 1.0 {
        return Ok(sorted[0]);
    }
    if t >= n as f64 {
        return Ok(sorted[n - 1]);
    }
    let i = t.floor() as usize;
    let frac = t - i as f64;
    let a = sorted[i - 1];
    let b = sorted[i];
    Ok(a + frac * (b - a))
}

/// How a column's marginal distribution is modelled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MarginalModel {
    ParametricGmm { gmm: UnivariateMixture },
    Empirical { sorted_data: Vec<f64> },
}

/// Marginal estimation strategy used when fitting a joint model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginKind {
    GmmAic,
    Empirical,
}

impl MarginalModel {
    pub fn fit<R: Rng + ?Sized>(x: &[f64], kind: MarginKind, k_max: usize, rng: &mut R) -> Result<Self> {
        match kind {
            MarginKind::GmmAic => Ok(Self::ParametricGmm {
                gmm: fit_marginal_aic(x, k_max, rng)?,
            }),
            MarginKind::Empirical => {
                let e = EmpiricalCdf::new(x)?;
                Ok(Self::Empirical {
                    sorted_data: e.sorted,
                })
            }
        }
    }

    pub fn n(&self) -> Option<usize> {
        match self {
            Self::ParametricGmm { .. } => None,
            Self::Empirical { sorted_data } => Some(sorted_data.len()),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Self::ParametricGmm { gmm } => gmm.cdf(x),
            Self::Empirical { sorted_data } => {
                let count = sorted_data.partition_point(|v| *v <= x);
                count as f64 / (sorted_data.len() + 1) as f64
            }
        }
    }

    pub fn quantile(&self, u: f64) -> Result<f64> {
        match self {
            Self::ParametricGmm { gmm } => gmm.quantile(u),
            Self::Empirical { sorted_data } => empirical_quantile(sorted_data, u),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match self {
            Self::ParametricGmm { gmm } => {
                UnivariateMixture::new(gmm.weights.clone(), gmm.means.clone(), gmm.sds.clone())
                    .map(|_| ())
            }
            Self::Empirical { sorted_data } => {
                if sorted_data.len() < 2 || sorted_data.windows(2).any(|w| !(w[0] <= w[1])) {
                    return Err(Error::Format(
                        "empirical marginal data must be sorted with at least 2 values".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}
