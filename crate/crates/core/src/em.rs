//! Expectation-maximization for full-covariance Gaussian mixtures.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{Cholesky, GaussianParams};
use crate::mixture::Mixture;
use crate::special::{log_sum_exp, LN_2PI};

/// How the first E-step is seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmInit {
    /// D²-weighted center seeding followed by a few Lloyd sweeps.
    KMeans,
    /// Uniform-random soft responsibilities.
    RandomResponsibility,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once `|Δ loglik| ≤ rel_tol · |loglik|`.
    pub rel_tol: f64,
    pub n_restarts: usize,
    pub init: EmInit,
    /// Added to M-step covariance diagonals. `None` selects
    /// `1e-9 · trace(S) / d` with `S` the data covariance.
    pub ridge: Option<f64>,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-8,
            n_restarts: 5,
            init: EmInit::KMeans,
            ridge: None,
        }
    }
}

impl EmConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || !(self.rel_tol > 0.0) || self.n_restarts == 0 {
            return Err(Error::InvalidParameter(format!(
                "EM needs max_iter ≥ 1, rel_tol > 0 and n_restarts ≥ 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub mixture: Mixture,
    pub loglik: f64,
    pub iterations: usize,
    /// Observed-data log-likelihood after each E-step.
    pub trace: Vec<f64>,
}

impl EmFit {
    /// Largest decrease between consecutive trace entries (0 when monotone).
    pub fn max_decrease(&self) -> f64 {
        self.trace
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max)
    }
}

/// Fit a `k`-component mixture to the rows of `data`, keeping the best of
/// `cfg.n_restarts` runs. Restarts run concurrently on independent streams
/// seeded from `rng`.
pub fn em_fit<R: Rng + ?Sized>(
    data: &DMatrix<f64>,
    k: usize,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<EmFit> {
    cfg.validate()?;
    let (n, d) = data.shape();
    if k == 0 || n == 0 || d == 0 {
        return Err(Error::InvalidParameter(format!(
            "em_fit needs k ≥ 1 and non-empty data, got k={k}, data {n}x{d}"
        )));
    }
    if n <= k * d {
        log::warn!("em_fit: {n} rows for {k} components in dimension {d}; fit is poorly determined");
    }
    let rows = RowData::new(data);
    let scatter = rows.covariance();
    let ridge = cfg
        .ridge
        .unwrap_or_else(|| 1e-9 * scatter.trace() / d as f64);
    let floor = 1e-8 * scatter.trace() / d as f64;

    let seeds: Vec<u64> = (0..cfg.n_restarts).map(|_| rng.random()).collect();
    let runs: Vec<Result<EmFit>> = seeds
        .par_iter()
        .map(|&s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            run_em(&rows, k, cfg, ridge, floor, &scatter, &mut r)
        })
        .collect();

    let mut best: Option<EmFit> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(fit) => {
                if best.as_ref().map_or(true, |b| fit.loglik > b.loglik) {
                    best = Some(fit);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one restart"))
}

/// Row-major copy of the data for cache-friendly sweeps.
pub(crate) struct RowData {
    pub(crate) values: Vec<f64>,
    pub(crate) n: usize,
    pub(crate) d: usize,
}

impl RowData {
    pub(crate) fn new(data: &DMatrix<f64>) -> Self {
        let (n, d) = data.shape();
        let mut values = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                values.push(data[(i, j)]);
            }
        }
        Self { values, n, d }
    }

    pub(crate) fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    fn covariance(&self) -> DMatrix<f64> {
        let w = vec![1.0; self.n];
        weighted_moments(self, &w).1
    }
}

/// Weighted mean and biased covariance.
fn weighted_moments(rows: &RowData, w: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let d = rows.d;
    let total: f64 = w.iter().sum();
    let mut mean = DVector::zeros(d);
    for i in 0..rows.n {
        for (j, x) in rows.row(i).iter().enumerate() {
            mean[j] += w[i] * x;
        }
    }
    mean /= total;
    let mut cov = DMatrix::zeros(d, d);
    let mut diff = vec![0.0; d];
    for i in 0..rows.n {
        if w[i] == 0.0 {
            continue;
        }
        for (j, x) in rows.row(i).iter().enumerate() {
            diff[j] = x - mean[j];
        }
        for a in 0..d {
            for b in 0..=a {
                cov[(a, b)] += w[i] * diff[a] * diff[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..=a {
            let v = cov[(a, b)] / total;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mean, cov)
}

fn run_em(
    rows: &RowData,
    k: usize,
    cfg: &EmConfig,
    ridge: f64,
    floor: f64,
    scatter: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<EmFit> {
    let n = rows.n;
    let mut resp = match cfg.init {
        EmInit::KMeans => kmeans_responsibilities(rows, k, rng),
        EmInit::RandomResponsibility => random_responsibilities(n, k, rng),
    };
    let mut mixture = m_step(rows, &resp, k, ridge, floor, Some(scatter))?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let ll = e_step(rows, &mixture, &mut resp)?;
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if ll < prev - 1e-9 * prev.abs().max(1.0) {
                log::warn!("em_fit: log-likelihood decreased from {prev} to {ll}");
            }
            trace.push(ll);
            if (ll - prev).abs() <= cfg.rel_tol * ll.abs() {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        mixture = m_step(rows, &resp, k, ridge, floor, None)?;
    }
    if !converged {
        let ll = e_step(rows, &mixture, &mut resp)?;
        trace.push(ll);
    }
    Ok(EmFit {
        loglik: *trace.last().expect("non-empty trace"),
        mixture,
        iterations,
        trace,
    })
}

/// Fill `resp` (n × k, row-major) with posterior component probabilities and
/// return the observed-data log-likelihood.
fn e_step(rows: &RowData, mixture: &Mixture, resp: &mut [f64]) -> Result<f64> {
    let k = mixture.n_components();
    let d = rows.d;
    let comps = mixture.components();
    let mut consts = Vec::with_capacity(k);
    let mut factors = Vec::with_capacity(k);
    for (c, w) in comps.iter().zip(mixture.weights()) {
        let f = c.factor()?;
        consts.push(w.ln() - 0.5 * (d as f64 * LN_2PI + f.log_det()));
        factors.push(f);
    }
    let mut terms = vec![0.0; k];
    let mut ll = 0.0;
    if d == 1 {
        let means: Vec<f64> = comps.iter().map(|c| c.mean()[0]).collect();
        let inv_sd: Vec<f64> = factors.iter().map(|f| 1.0 / f.l()[(0, 0)]).collect();
        for (i, x) in rows.values.iter().enumerate() {
            for c in 0..k {
                let z = (x - means[c]) * inv_sd[c];
                terms[c] = consts[c] - 0.5 * z * z;
            }
            ll += normalize_row(&terms, &mut resp[i * k..(i + 1) * k]);
        }
    } else {
        let mut diff = vec![0.0; d];
        for i in 0..rows.n {
            let x = rows.row(i);
            for c in 0..k {
                let mean = comps[c].mean();
                for j in 0..d {
                    diff[j] = x[j] - mean[j];
                }
                terms[c] = consts[c] - 0.5 * factors[c].mahalanobis_sq(&diff);
            }
            ll += normalize_row(&terms, &mut resp[i * k..(i + 1) * k]);
        }
    }
    if !ll.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 0 });
    }
    Ok(ll)
}

fn normalize_row(terms: &[f64], out: &mut [f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return log_sum_exp(terms);
    }
    let mut total = 0.0;
    for (o, t) in out.iter_mut().zip(terms) {
        *o = (t - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    max + total.ln()
}

fn m_step(
    rows: &RowData,
    resp: &[f64],
    k: usize,
    ridge: f64,
    floor: f64,
    fallback_cov: Option<&DMatrix<f64>>,
) -> Result<Mixture> {
    let n = rows.n;
    let d = rows.d;
    let mut weights = Vec::with_capacity(k);
    let mut comps = Vec::with_capacity(k);
    let (masses, means, covs) = component_moments(rows, resp, k);
    for c in 0..k {
        let mass = masses[c];
        if mass < 1e-12 {
            return Err(Error::EmptyComponent { component: c });
        }
        let mean = DVector::from_column_slice(&means[c * d..(c + 1) * d]);
        let mut cov = DMatrix::from_row_slice(d, d, &covs[c * d * d..(c + 1) * d * d]);
        for j in 0..rows.d {
            cov[(j, j)] += ridge;
        }
        let usable = Cholesky::new(&cov)
            .ok()
            .filter(|ch| (0..rows.d).all(|j| ch.l()[(j, j)].powi(2) > floor));
        if usable.is_none() {
            match fallback_cov {
                Some(s) => cov = s.clone(),
                None => return Err(Error::SingularComponent { component: c }),
            }
            if Cholesky::new(&cov).is_err() {
                return Err(Error::SingularComponent { component: c });
            }
        }
        weights.push(mass / n as f64);
        comps.push(GaussianParams::new(mean, cov)?);
    }
    let total: f64 = weights.iter().sum();
    for wt in weights.iter_mut() {
        *wt /= total;
    }
    Mixture::new(weights, comps)
}

/// Responsibility masses, weighted means (k × d) and biased weighted
/// covariances (k × d × d), accumulated in two contiguous passes.
fn component_moments(rows: &RowData, resp: &[f64], k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = rows.d;
    if d == 1 {
        return component_moments_1d(&rows.values, resp, k);
    }
    let mut mass = vec![0.0; k];
    let mut means = vec![0.0; k * d];
    for i in 0..rows.n {
        let x = rows.row(i);
        let r = &resp[i * k..(i + 1) * k];
        for c in 0..k {
            mass[c] += r[c];
            for j in 0..d {
                means[c * d + j] += r[c] * x[j];
            }
        }
    }
    for c in 0..k {
        if mass[c] > 0.0 {
            for j in 0..d {
                means[c * d + j] /= mass[c];
            }
        }
    }
    let mut covs = vec![0.0; k * d * d];
    let mut diff = vec![0.0; d];
    for i in 0..rows.n {
        let x = rows.row(i);
        let r = &resp[i * k..(i + 1) * k];
        for c in 0..k {
            if r[c] == 0.0 {
                continue;
            }
            for j in 0..d {
                diff[j] = x[j] - means[c * d + j];
            }
            let block = &mut covs[c * d * d..(c + 1) * d * d];
            for a in 0..d {
                for b in 0..=a {
                    block[a * d + b] += r[c] * diff[a] * diff[b];
                }
            }
        }
    }
    for c in 0..k {
        let block = &mut covs[c * d * d..(c + 1) * d * d];
        for a in 0..d {
            for b in 0..=a {
                let v = if mass[c] > 0.0 { block[a * d + b] / mass[c] } else { 0.0 };
                block[a * d + b] = v;
                block[b * d + a] = v;
            }
        }
    }
    (mass, means, covs)
}

fn component_moments_1d(x: &[f64], resp: &[f64], k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut mass = vec![0.0; k];
    let mut sum = vec![0.0; k];
    for (r, &xi) in resp.chunks_exact(k).zip(x) {
        for c in 0..k {
            mass[c] += r[c];
            sum[c] += r[c] * xi;
        }
    }
    let means: Vec<f64> = (0..k)
        .map(|c| if mass[c] > 0.0 { sum[c] / mass[c] } else { 0.0 })
        .collect();
    let mut ss = vec![0.0; k];
    for (r, &xi) in resp.chunks_exact(k).zip(x) {
        for c in 0..k {
            let e = xi - means[c];
            ss[c] += r[c] * e * e;
        }
    }
    let vars = (0..k)
        .map(|c| if mass[c] > 0.0 { ss[c] / mass[c] } else { 0.0 })
        .collect();
    (mass, means, vars)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_responsibilities(rows: &RowData, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rows.n;
    let mut centers: Vec<Vec<f64>> = vec![rows.row(rng.random_range(0..n)).to_vec()];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(rows.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(rows.row(next).to_vec());
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(rows.row(i), centers.last().unwrap()));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..20 {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&x, &y| {
                    sq_dist(rows.row(i), &centers[x]).total_cmp(&sq_dist(rows.row(i), &centers[y]))
                })
                .unwrap();
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; rows.d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(rows.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (cv, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *cv = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut resp = vec![0.0; n * k];
    for (i, &a) in assign.iter().enumerate() {
        resp[i * k + a] = 1.0;
    }
    // Components that captured no rows get a sliver of uniform mass so the
    // first M-step stays defined.
    for c in 0..k {
        if !assign.contains(&c) {
            for i in 0..n {
                resp[i * k + c] = 1.0 / n as f64;
            }
        }
    }
    resp
}

fn random_responsibilities(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut resp = vec![0.0; n * k];
    for i in 0..n {
        let row = &mut resp[i * k..(i + 1) * k];
        let mut total = 0.0;
        for r in row.iter_mut() {
            *r = rng.random::<f64>() + 1e-3;
            total += *r;
        }
        for r in row.iter_mut() {
            *r /= total;
        }
    }
    resp
}
