//! Gaussian mixture copulas: the implicit copula density of a Gaussian
//! mixture, its identifiability normalization, and three fitting routines.
//!
//! The copula log-likelihood of pseudo-observations `U` is
//! `Σᵢ [log ψ(zᵢ) − Σⱼ log ψⱼ(zᵢⱼ)]` with `zᵢⱼ = Ψⱼ⁻¹(uᵢⱼ)`, where `ψ` is the
//! mixture density and `ψⱼ`, `Ψⱼ` its univariate margins. Because any
//! per-coordinate increasing affine map of the mixture leaves this value
//! unchanged, parameters are normalized so that the first component has zero
//! mean and unit variances.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::em::{em_fit, EmConfig, RowData};
use crate::error::{Error, Result};
use crate::gaussian::{Cholesky, GaussianParams};
use crate::marginals::UnivariateMixture;
use crate::mixture::Mixture;
use crate::scoring::energy_distance;
use crate::special::{log_sum_exp, norm_cdf, norm_logpdf, norm_ppf, LN_2PI};

const ROW_CHUNK: usize = 64;
const STANDARD_TOL: f64 = 1e-9;

/// Gaussian-mixture copula parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GmcmParams {
    mixture: Mixture,
}

impl GmcmParams {
    pub fn new(mixture: Mixture) -> Self {
        Self { mixture }
    }

    pub fn mixture(&self) -> &Mixture {
        &self.mixture
    }

    pub fn into_mixture(self) -> Mixture {
        self.mixture
    }

    pub fn n_components(&self) -> usize {
        self.mixture.n_components()
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    /// Whether the first component has zero mean and unit variances.
    pub fn is_standardized(&self) -> bool {
        let c = &self.mixture.components()[0];
        (0..self.dim()).all(|j| {
            c.mean()[j].abs() <= STANDARD_TOL && (c.cov()[(j, j)] - 1.0).abs() <= STANDARD_TOL
        })
    }

    /// Implicit univariate margins `Ψⱼ`.
    pub fn margins(&self) -> Result<Vec<UnivariateMixture>> {
        (0..self.dim())
            .map(|j| UnivariateMixture::from_margin(&self.mixture, j))
            .collect()
    }

    /// Apply `z ↦ A z + b` with diagonal positive `A` to every component.
    pub fn transform_diagonal(&self, a: &[f64], b: &[f64]) -> Result<Self> {
        let d = self.dim();
        if a.len() != d || b.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "affine map needs {d} scales and shifts"
            )));
        }
        if a.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidParameter("affine scales must be positive".into()));
        }
        let comps = self
            .mixture
            .components()
            .iter()
            .map(|c| {
                let mean = DVector::from_fn(d, |j, _| a[j] * c.mean()[j] + b[j]);
                let cov = DMatrix::from_fn(d, d, |i, j| a[i] * c.cov()[(i, j)] * a[j]);
                GaussianParams::new(mean, cov)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(Mixture::new(self.mixture.weights().to_vec(), comps)?))
    }

    /// Normalize so that the first component has mean 0 and unit variances.
    pub fn standardize(&self) -> Result<Self> {
        let c = &self.mixture.components()[0];
        let d = self.dim();
        let mut a = Vec::with_capacity(d);
        let mut b = Vec::with_capacity(d);
        for j in 0..d {
            let v = c.cov()[(j, j)];
            if !(v > 0.0) {
                return Err(Error::SingularComponent { component: 0 });
            }
            let s = v.sqrt();
            a.push(1.0 / s);
            b.push(-c.mean()[j] / s);
        }
        let mut out = self.transform_diagonal(&a, &b)?;
        // Pin the normalized entries exactly.
        let comps: Vec<GaussianParams> = out
            .mixture
            .components()
            .iter()
            .enumerate()
            .map(|(k, c)| {
                if k > 0 {
                    return Ok(c.clone());
                }
                let mut cov = c.cov().clone();
                for j in 0..d {
                    cov[(j, j)] = 1.0;
                }
                GaussianParams::new(DVector::zeros(d), cov)
            })
            .collect::<Result<_>>()?;
        out.mixture = Mixture::new(out.mixture.weights().to_vec(), comps)?;
        Ok(out)
    }

    /// Copula log-likelihood of the rows of `u`.
    pub fn loglik(&self, u: &DMatrix<f64>) -> Result<f64> {
        let data = CopulaData::new(u)?;
        let mut z = Vec::new();
        Ok(Engine::new(&self.mixture)?.evaluate(&data, &mut z, false)?.0)
    }

    /// Latent scores `zᵢⱼ = Ψⱼ⁻¹(uᵢⱼ)`.
    pub fn latent_scores(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let data = CopulaData::new(u)?;
        let mut z = Vec::new();
        Engine::new(&self.mixture)?.solve_latent(&data, &mut z)?;
        Ok(DMatrix::from_row_slice(data.rows.n, data.rows.d, &z))
    }

    /// Draw `n` points from the copula (uniform margins).
    pub fn sample_uniform<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        crate::scenarios::to_uniform(&self.mixture, &self.mixture.sample(n, rng)?)
    }
}

pub fn gmcm_loglik(u: &DMatrix<f64>, p: &GmcmParams) -> Result<f64> {
    p.loglik(u)
}

pub fn standardize(p: &GmcmParams) -> Result<GmcmParams> {
    p.standardize()
}

/// Pseudo-observations with their probit transform cached.
struct CopulaData {
    rows: RowData,
    probit: Vec<f64>,
}

impl CopulaData {
    fn new(u: &DMatrix<f64>) -> Result<Self> {
        if u.nrows() == 0 || u.ncols() == 0 {
            return Err(Error::InvalidParameter("empty pseudo-observation matrix".into()));
        }
        if let Some(bad) = u.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Domain(format!(
                "pseudo-observation {bad} outside (0, 1)"
            )));
        }
        let rows = RowData::new(u);
        let probit = rows.values.iter().map(|v| norm_ppf(*v)).collect();
        Ok(Self { rows, probit })
    }
}

/// Gradient accumulators with respect to the natural parameters
/// (weights treated as free, means, covariances).
#[derive(Clone)]
struct Natural {
    w: Vec<f64>,
    mean: Vec<f64>,
    cov: Vec<f64>,
}

impl Natural {
    fn zeros(k: usize, d: usize) -> Self {
        Self {
            w: vec![0.0; k],
            mean: vec![0.0; k * d],
            cov: vec![0.0; k * d * d],
        }
    }

    fn add(&mut self, other: &Natural) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a += b;
        }
        for (a, b) in self.cov.iter_mut().zip(&other.cov) {
            *a += b;
        }
    }
}

/// Precomputed quantities for evaluating the copula density and gradient.
struct Engine {
    k: usize,
    d: usize,
    log_w: Vec<f64>,
    means: Vec<f64>,
    precisions: Vec<f64>,
    log_norm: Vec<f64>,
    margins: Vec<UnivariateMixture>,
    /// Marginal means, variances and log standard deviations, `[k * d + j]`.
    m_mean: Vec<f64>,
    m_var: Vec<f64>,
    m_logsd: Vec<f64>,
}

impl Engine {
    fn new(m: &Mixture) -> Result<Self> {
        let k = m.n_components();
        let d = m.dim();
        let mut means = Vec::with_capacity(k * d);
        let mut precisions = Vec::with_capacity(k * d * d);
        let mut log_norm = Vec::with_capacity(k);
        let mut m_mean = Vec::with_capacity(k * d);
        let mut m_var = Vec::with_capacity(k * d);
        let mut m_logsd = Vec::with_capacity(k * d);
        for (c, comp) in m.components().iter().enumerate() {
            let chol = Cholesky::new(comp.cov())
                .map_err(|_| Error::SingularComponent { component: c })?;
            let p = chol.inverse();
            for i in 0..d {
                for j in 0..d {
                    precisions.push(p[(i, j)]);
                }
            }
            log_norm.push(-0.5 * (d as f64 * LN_2PI + chol.log_det()));
            for j in 0..d {
                means.push(comp.mean()[j]);
                let v = comp.cov()[(j, j)];
                m_mean.push(comp.mean()[j]);
                m_var.push(v);
                m_logsd.push(0.5 * v.ln());
            }
        }
        let margins = (0..d)
            .map(|j| UnivariateMixture::from_margin(m, j))
            .collect::<Result<_>>()?;
        Ok(Self {
            k,
            d,
            log_w: m.weights().iter().map(|w| w.ln()).collect(),
            means,
            precisions,
            log_norm,
            margins,
            m_mean,
            m_var,
            m_logsd,
        })
    }

    /// Solve `z = Ψ⁻¹(u)` for every cell, warm-starting from `z` when it
    /// already holds a previous solution.
    fn solve_latent(&self, data: &CopulaData, z: &mut Vec<f64>) -> Result<()> {
        let total = data.rows.values.len();
        let warm = z.len() == total;
        if !warm {
            z.clear();
            z.resize(total, f64::NAN);
        }
        let d = self.d;
        z.par_chunks_mut(ROW_CHUNK * d)
            .enumerate()
            .for_each(|(c, chunk)| {
                let base = c * ROW_CHUNK * d;
                for (o, zv) in chunk.iter_mut().enumerate() {
                    let idx = base + o;
                    let j = idx % d;
                    let guess = if warm { Some(*zv) } else { None };
                    *zv = self.margins[j].quantile_probit(
                        data.rows.values[idx],
                        data.probit[idx],
                        guess,
                    );
                }
            });
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "latent quantile at row {} column {} is not finite",
                i / d,
                i % d
            )));
        }
        Ok(())
    }

    fn evaluate(
        &self,
        data: &CopulaData,
        z: &mut Vec<f64>,
        with_grad: bool,
    ) -> Result<(f64, Option<Natural>)> {
        self.solve_latent(data, z)?;
        let d = self.d;
        let partials: Vec<(f64, Option<Natural>)> = z
            .par_chunks(ROW_CHUNK * d)
            .map(|chunk| {
                let mut acc = with_grad.then(|| Natural::zeros(self.k, d));
                let mut scratch = Scratch::new(self.k, d);
                let mut value = 0.0;
                for row in chunk.chunks_exact(d) {
                    value += self.row(row, acc.as_mut(), &mut scratch);
                }
                (value, acc)
            })
            .collect();
        let mut value = 0.0;
        let mut grad = with_grad.then(|| Natural::zeros(self.k, d));
        for (v, g) in partials {
            value += v;
            if let (Some(total), Some(g)) = (grad.as_mut(), g) {
                total.add(&g);
            }
        }
        Ok((value, grad))
    }

    /// Log copula density at latent point `z`, accumulating natural-parameter
    /// derivatives (including the implicit dependence of `z` on the
    /// parameters) into `acc` when given.
    fn row(&self, z: &[f64], acc: Option<&mut Natural>, s: &mut Scratch) -> f64 {
        let (k, d) = (self.k, self.d);
        for c in 0..k {
            let mut q = 0.0;
            for i in 0..d {
                s.diff[i] = z[i] - self.means[c * d + i];
            }
            let p = &self.precisions[c * d * d..(c + 1) * d * d];
            for i in 0..d {
                let mut a = 0.0;
                for j in 0..d {
                    a += p[i * d + j] * s.diff[j];
                }
                s.a[c * d + i] = a;
                q += s.diff[i] * a;
            }
            s.log_phi[c] = self.log_norm[c] - 0.5 * q;
            s.terms[c] = self.log_w[c] + s.log_phi[c];
        }
        let log_psi = log_sum_exp(&s.terms);
        let mut value = log_psi;

        let Some(acc) = acc else {
            for j in 0..d {
                for c in 0..k {
                    let e = z[j] - self.m_mean[c * d + j];
                    let sd_log = self.m_logsd[c * d + j];
                    s.terms[c] = self.log_w[c] + norm_logpdf(e * (-sd_log).exp()) - sd_log;
                }
                value -= log_sum_exp(&s.terms);
            }
            return value;
        };

        // Joint density term.
        s.wz.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..k {
            let r = (s.terms[c] - log_psi).exp();
            acc.w[c] += (s.log_phi[c] - log_psi).exp();
            let a = &s.a[c * d..(c + 1) * d];
            let p = &self.precisions[c * d * d..(c + 1) * d * d];
            let g = &mut acc.cov[c * d * d..(c + 1) * d * d];
            for i in 0..d {
                acc.mean[c * d + i] += r * a[i];
                s.wz[i] -= r * a[i];
                for j in 0..d {
                    g[i * d + j] += 0.5 * r * (a[i] * a[j] - p[i * d + j]);
                }
            }
        }

        // Marginal density terms and the implicit quantile dependence.
        for j in 0..d {
            for c in 0..k {
                let e = z[j] - self.m_mean[c * d + j];
                let sd_log = self.m_logsd[c * d + j];
                let t = e * (-sd_log).exp();
                s.log_n[c] = norm_logpdf(t) - sd_log;
                s.terms[c] = self.log_w[c] + s.log_n[c];
                s.cdf[c] = norm_cdf(t);
            }
            let log_p = log_sum_exp(&s.terms);
            value -= log_p;
            let mut wj = s.wz[j];
            for c in 0..k {
                let e = z[j] - self.m_mean[c * d + j];
                let v = self.m_var[c * d + j];
                let rho = (s.terms[c] - log_p).exp();
                acc.w[c] -= (s.log_n[c] - log_p).exp();
                acc.mean[c * d + j] -= rho * e / v;
                acc.cov[c * d * d + j * d + j] -= 0.5 * rho * (e * e / (v * v) - 1.0 / v);
                wj += rho * e / v;
                s.rho[c] = rho;
            }
            for c in 0..k {
                let e = z[j] - self.m_mean[c * d + j];
                let v = self.m_var[c * d + j];
                let rho = s.rho[c];
                // ∂z/∂θ = −(∂Ψⱼ/∂θ) / ψⱼ at the solved quantile.
                acc.w[c] -= wj * (s.cdf[c].ln() - log_p).exp();
                acc.mean[c * d + j] += wj * rho;
                acc.cov[c * d * d + j * d + j] += wj * 0.5 * rho * e / v;
            }
        }
        value
    }
}

struct Scratch {
    diff: Vec<f64>,
    a: Vec<f64>,
    log_phi: Vec<f64>,
    terms: Vec<f64>,
    wz: Vec<f64>,
    log_n: Vec<f64>,
    cdf: Vec<f64>,
    rho: Vec<f64>,
}

impl Scratch {
    fn new(k: usize, d: usize) -> Self {
        Self {
            diff: vec![0.0; d],
            a: vec![0.0; k * d],
            log_phi: vec![0.0; k],
            terms: vec![0.0; k],
            wz: vec![0.0; d],
            log_n: vec![0.0; k],
            cdf: vec![0.0; k],
            rho: vec![0.0; k],
        }
    }
}

/// Unconstrained coordinates of a standardized GMCM.
///
/// Layout: `K − 1` weight logits (the first logit is pinned at 0); means of
/// components 2..K; the strict lower triangle of component 1's unit-diagonal
/// Cholesky pre-factor, whose rows are normalized to give a correlation
/// factor; then, for components 2..K, the lower-triangular Cholesky factor
/// row by row with log-diagonal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedGmcm {
    k: usize,
    d: usize,
    theta: Vec<f64>,
}

impl UnconstrainedGmcm {
    pub fn n_params(k: usize, d: usize) -> usize {
        (k - 1) + (k - 1) * d + d * (d - 1) / 2 + (k - 1) * d * (d + 1) / 2
    }

    pub fn from_vec(k: usize, d: usize, theta: Vec<f64>) -> Result<Self> {
        if k == 0 || d == 0 || theta.len() != Self::n_params(k, d) {
            return Err(Error::DimensionMismatch(format!(
                "expected {} coordinates for K={k}, d={d}, got {}",
                if k == 0 || d == 0 { 0 } else { Self::n_params(k, d) },
                theta.len()
            )));
        }
        Ok(Self { k, d, theta })
    }

    /// Chart coordinates of `p` after standardization.
    pub fn from_params(p: &GmcmParams) -> Result<Self> {
        let p = p.standardize()?;
        let (k, d) = (p.n_components(), p.dim());
        let m = p.mixture();
        let mut theta = Vec::with_capacity(Self::n_params(k, d));
        let w = m.weights();
        for c in 1..k {
            theta.push(w[c].ln() - w[0].ln());
        }
        for comp in &m.components()[1..] {
            theta.extend(comp.mean().iter());
        }
        let l0 = Cholesky::new(m.components()[0].cov())?.into_factor();
        for i in 1..d {
            for j in 0..i {
                theta.push(l0[(i, j)] / l0[(i, i)]);
            }
        }
        for comp in &m.components()[1..] {
            let l = Cholesky::new(comp.cov())?.into_factor();
            for i in 0..d {
                for j in 0..i {
                    theta.push(l[(i, j)]);
                }
                theta.push(l[(i, i)].ln());
            }
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "parameters have zero weights or are not finite".into(),
            ));
        }
        Ok(Self { k, d, theta })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn n_components(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn weights(&self) -> Vec<f64> {
        let mut logits = vec![0.0];
        logits.extend_from_slice(&self.theta[..self.k - 1]);
        let lse = log_sum_exp(&logits);
        let mut w: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        w
    }

    /// Component 1's correlation factor and the raw row norms.
    fn first_factor(&self) -> (DMatrix<f64>, Vec<f64>) {
        let d = self.d;
        let mut off = (self.k - 1) * (1 + d);
        let mut l = DMatrix::identity(d, d);
        let mut norms = vec![1.0; d];
        for i in 1..d {
            let mut ss = 1.0;
            for j in 0..i {
                l[(i, j)] = self.theta[off];
                ss += self.theta[off] * self.theta[off];
                off += 1;
            }
            let n = ss.sqrt();
            norms[i] = n;
            for j in 0..=i {
                l[(i, j)] /= n;
            }
        }
        (l, norms)
    }

    fn factor(&self, c: usize) -> DMatrix<f64> {
        let d = self.d;
        let tri = d * (d + 1) / 2;
        let mut off = (self.k - 1) * (1 + d) + d * (d - 1) / 2 + (c - 1) * tri;
        let mut l = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..i {
                l[(i, j)] = self.theta[off];
                off += 1;
            }
            l[(i, i)] = self.theta[off].exp();
            off += 1;
        }
        l
    }

    pub fn to_params(&self) -> Result<GmcmParams> {
        let (k, d) = (self.k, self.d);
        let mut comps = Vec::with_capacity(k);
        let (l0, _) = self.first_factor();
        let mut cov0 = &l0 * l0.transpose();
        for j in 0..d {
            cov0[(j, j)] = 1.0;
        }
        comps.push(GaussianParams::new(DVector::zeros(d), cov0)?);
        for c in 1..k {
            let off = (k - 1) + (c - 1) * d;
            let mean = DVector::from_column_slice(&self.theta[off..off + d]);
            let l = self.factor(c);
            comps.push(GaussianParams::new(mean, &l * l.transpose())?);
        }
        Ok(GmcmParams::new(Mixture::new(self.weights(), comps)?))
    }

    /// Pull a natural-parameter gradient back to chart coordinates.
    fn pull_back(&self, g: &Natural) -> Vec<f64> {
        let (k, d) = (self.k, self.d);
        let mut out = Vec::with_capacity(self.theta.len());
        let w = self.weights();
        let avg: f64 = w.iter().zip(&g.w).map(|(a, b)| a * b).sum();
        for c in 1..k {
            out.push(w[c] * (g.w[c] - avg));
        }
        for c in 1..k {
            out.extend_from_slice(&g.mean[c * d..(c + 1) * d]);
        }
        let sym = |c: usize| DMatrix::from_row_slice(d, d, &g.cov[c * d * d..(c + 1) * d * d]);

        // ∂/∂L = 2 G L for Σ = L Lᵀ with symmetric G.
        let (l0, norms) = self.first_factor();
        let gl = 2.0 * sym(0) * &l0;
        for i in 1..d {
            let dot: f64 = (0..=i).map(|j| gl[(i, j)] * l0[(i, j)]).sum();
            for j in 0..i {
                out.push((gl[(i, j)] - dot * l0[(i, j)]) / norms[i]);
            }
        }
        for c in 1..k {
            let l = self.factor(c);
            let gl = 2.0 * sym(c) * &l;
            for i in 0..d {
                for j in 0..i {
                    out.push(gl[(i, j)]);
                }
                out.push(gl[(i, i)] * l[(i, i)]);
            }
        }
        out
    }
}

/// Copula log-likelihood and its exact gradient in chart coordinates.
pub fn gmcm_grad(u: &DMatrix<f64>, x: &UnconstrainedGmcm) -> Result<(f64, Vec<f64>)> {
    let data = CopulaData::new(u)?;
    let mut z = Vec::new();
    value_and_grad(&data, x, &mut z)
}

fn value_and_grad(
    data: &CopulaData,
    x: &UnconstrainedGmcm,
    z: &mut Vec<f64>,
) -> Result<(f64, Vec<f64>)> {
    if data.rows.d != x.d {
        return Err(Error::DimensionMismatch(format!(
            "data have {} columns but parameters have dimension {}",
            data.rows.d, x.d
        )));
    }
    let p = x.to_params()?;
    let (v, g) = Engine::new(p.mixture())?.evaluate(data, z, true)?;
    Ok((v, x.pull_back(&g.expect("gradient requested"))))
}

fn value_at(data: &CopulaData, x: &UnconstrainedGmcm, z: &mut Vec<f64>) -> Result<f64> {
    let p = x.to_params()?;
    Ok(Engine::new(p.mixture())?.evaluate(data, z, false)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FitMethod {
    /// Adam ascent on exact gradients.
    Ad,
    /// Derivative-free Nelder–Mead simplex.
    Fd,
    /// Pseudo-EM with per-sweep latent refresh.
    Pem,
}

impl FitMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ad => "AD",
            Self::Fd => "FD",
            Self::Pem => "PEM",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub method: FitMethod,
    pub max_iter: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Relative log-likelihood change used by the stopping rules.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            method: FitMethod::Ad,
            max_iter: 10_000,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            tol: 1e-8,
        }
    }
}

impl FitOptions {
    pub fn with_method(method: FitMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "fit options need learning_rate > 0, max_iter ≥ 1 and tol > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GmcmFit {
    pub params: GmcmParams,
    /// Log-likelihood of `params`.
    pub loglik: f64,
    /// Log-likelihood recorded at each iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Starting point shared by every fitter: a Gaussian mixture fitted by EM to
/// the probit scores `Φ⁻¹(u)`, then standardized.
pub fn initial_params<R: Rng + ?Sized>(u: &DMatrix<f64>, k: usize, rng: &mut R) -> Result<GmcmParams> {
    let probit = u.map(norm_ppf);
    let fit = em_fit(&probit, k, &EmConfig::default(), rng)?;
    GmcmParams::new(fit.mixture).standardize()
}

/// Fit a `k`-component GMCM to pseudo-observations `u`.
pub fn fit_gmcm<R: Rng + ?Sized>(
    u: &DMatrix<f64>,
    k: usize,
    opts: &FitOptions,
    rng: &mut R,
) -> Result<GmcmFit> {
    opts.validate()?;
    if k == 0 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    let data = CopulaData::new(u)?;
    let init = initial_params(u, k, rng)?;
    fit_from(&data, init, opts)
}

/// Fit starting from explicit parameters.
pub fn fit_gmcm_from(u: &DMatrix<f64>, init: &GmcmParams, opts: &FitOptions) -> Result<GmcmFit> {
    opts.validate()?;
    let data = CopulaData::new(u)?;
    fit_from(&data, init.standardize()?, opts)
}

fn fit_from(data: &CopulaData, init: GmcmParams, opts: &FitOptions) -> Result<GmcmFit> {
    match opts.method {
        FitMethod::Ad => fit_adam(data, &init, opts),
        FitMethod::Fd => fit_nelder_mead(data, &init, opts),
        FitMethod::Pem => fit_pem(data, init, opts),
    }
}

const STALL_WINDOW: usize = 50;

fn fit_adam(data: &CopulaData, init: &GmcmParams, opts: &FitOptions) -> Result<GmcmFit> {
    let mut x = UnconstrainedGmcm::from_params(init)?;
    let n = x.theta.len();
    let (b1, b2) = opts.adam_betas;
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut z = Vec::new();
    let mut trace = Vec::new();
    let mut best = (f64::NEG_INFINITY, x.clone());
    for t in 1..=opts.max_iter {
        let (val, g) = value_and_grad(data, &x, &mut z)?;
        if !val.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteObjective { iteration: t - 1 });
        }
        trace.push(val);
        if val > best.0 {
            best = (val, x.clone());
        }
        if t > STALL_WINDOW {
            let old = trace[t - 1 - STALL_WINDOW];
            if (val - old).abs() < opts.tol * STALL_WINDOW as f64 * val.abs().max(1.0) {
                break;
            }
        }
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            x.theta[i] += opts.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + opts.adam_eps);
        }
    }
    Ok(GmcmFit {
        params: best.1.to_params()?,
        loglik: best.0,
        iterations: trace.len(),
        trace,
    })
}

fn fit_nelder_mead(data: &CopulaData, init: &GmcmParams, opts: &FitOptions) -> Result<GmcmFit> {
    let x0 = UnconstrainedGmcm::from_params(init)?;
    let (k, d) = (x0.k, x0.d);
    let n = x0.theta.len();
    let mut z = Vec::new();
    let mut evals = 0usize;
    let mut objective = |theta: &[f64]| -> f64 {
        evals += 1;
        let x = UnconstrainedGmcm {
            k,
            d,
            theta: theta.to_vec(),
        };
        match value_at(data, &x, &mut z) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        }
    };

    let f0 = objective(&x0.theta);
    if !f0.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 0 });
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.theta.clone(), f0)];
    for i in 0..n {
        let mut p = x0.theta.clone();
        p[i] = if p[i] != 0.0 { 1.05 * p[i] } else { 0.00025 };
        let f = objective(&p);
        simplex.push((p, f));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < opts.max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        trace.push(-simplex[0].1);
        let f_spread = simplex.iter().map(|s| (s.1 - simplex[0].1).abs()).fold(0.0, f64::max);
        let x_spread = simplex
            .iter()
            .flat_map(|s| s.0.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if f_spread <= 1e-4 && x_spread <= 1e-4 {
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for s in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(&s.0) {
                *c += v / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(alpha);
        let fr = objective(&xr);
        if fr < simplex[0].1 {
            let xe = along(alpha * gamma);
            let fe = objective(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst.1 {
            let xc = along(alpha * rho);
            let fc = objective(&xc);
            (xc, fc)
        } else {
            let xc = along(-rho);
            let fc = objective(&xc);
            (xc, fc)
        };
        if fc < fr.min(worst.1) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for s in simplex.iter_mut().skip(1) {
            for (v, b) in s.0.iter_mut().zip(&best) {
                *v = b + sigma * (*v - b);
            }
            s.1 = objective(&s.0);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (theta, f) = simplex.swap_remove(0);
    let x = UnconstrainedGmcm { k, d, theta };
    Ok(GmcmFit {
        params: x.to_params()?,
        loglik: -f,
        iterations,
        trace,
    })
}

fn fit_pem(data: &CopulaData, init: GmcmParams, opts: &FitOptions) -> Result<GmcmFit> {
    let (n, d) = (data.rows.n, data.rows.d);
    let mut params = init;
    let mut z = Vec::new();
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    loop {
        let engine = Engine::new(params.mixture())?;
        let (val, _) = engine.evaluate(data, &mut z, false)?;
        if !val.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: iterations });
        }
        let stalled = trace
            .last()
            .is_some_and(|prev| (val - prev).abs() < opts.tol * val.abs().max(1.0));
        trace.push(val);
        if stalled || iterations >= opts.max_iter {
            break;
        }
        iterations += 1;
        // One EM sweep on the current latent scores.
        let zm = DMatrix::from_row_slice(n, d, &z);
        let next = pem_step(&params, &zm)?;
        params = next.standardize()?;
    }
    Ok(GmcmFit {
        loglik: *trace.last().expect("at least one evaluation"),
        params,
        trace,
        iterations,
    })
}

fn pem_step(params: &GmcmParams, z: &DMatrix<f64>) -> Result<GmcmParams> {
    let m = params.mixture();
    let (k, d) = (m.n_components(), m.dim());
    let prepared = m.prepare()?;
    let n = z.nrows();
    let mut resp = vec![0.0; n * k];
    let mut terms = Vec::with_capacity(k);
    let mut row = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            row[j] = z[(i, j)];
        }
        prepared.component_log_terms(&row, &mut terms)?;
        let lse = log_sum_exp(&terms);
        for c in 0..k {
            resp[i * k + c] = (terms[c] - lse).exp();
        }
    }
    let mut weights = Vec::with_capacity(k);
    let mut comps = Vec::with_capacity(k);
    for c in 0..k {
        let mass: f64 = (0..n).map(|i| resp[i * k + c]).sum();
        if mass < 1e-12 {
            return Err(Error::EmptyComponent { component: c });
        }
        let mut mean = DVector::zeros(d);
        for i in 0..n {
            for j in 0..d {
                mean[j] += resp[i * k + c] * z[(i, j)];
            }
        }
        mean /= mass;
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..n {
            let r = resp[i * k + c];
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += r * (z[(i, a)] - mean[a]) * (z[(i, b)] - mean[b]);
                }
            }
        }
        cov /= mass;
        let ridge = 1e-9 * cov.trace() / d as f64;
        for j in 0..d {
            cov[(j, j)] += ridge;
        }
        if Cholesky::new(&cov).is_err() {
            return Err(Error::SingularComponent { component: c });
        }
        weights.push(mass / n as f64);
        comps.push(GaussianParams::new(mean, cov)?);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(GmcmParams::new(Mixture::new(weights, comps)?))
}

/// One fitted replicate of the fitter comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub method: FitMethod,
    pub replicate: usize,
    /// Final training log-likelihood (`NaN` when the fit failed).
    pub loglik: f64,
    /// Log-likelihood on an independent sample of the same size.
    pub heldout_loglik: f64,
    /// Energy distance between a fresh true sample and a sample of the
    /// fitted copula, both in uniform coordinates.
    pub energy_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: FitMethod,
    pub n_ok: usize,
    pub mean_loglik: f64,
    pub sd_loglik: f64,
    pub mean_heldout: f64,
    pub mean_energy: f64,
    pub sd_energy: f64,
}

/// Fit the same synthetic copula samples with AD, FD and PEM and record how
/// well each recovers the truth.
pub fn compare_fitters<R: Rng + ?Sized>(
    truth: &GmcmParams,
    k: usize,
    n: usize,
    n_rep: usize,
    opts: &FitOptions,
    rng: &mut R,
) -> Result<Vec<CompareRow>> {
    if n_rep == 0 || n < 2 {
        return Err(Error::InvalidParameter(format!(
            "compare_fitters needs n ≥ 2 and at least one replicate, got n={n}, reps={n_rep}"
        )));
    }
    let seeds: Vec<u64> = (0..n_rep).map(|_| rng.random()).collect();
    let rows: Vec<Vec<CompareRow>> = seeds
        .par_iter()
        .enumerate()
        .map(|(rep, &seed)| replicate(truth, k, n, rep, opts, seed))
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

fn replicate(
    truth: &GmcmParams,
    k: usize,
    n: usize,
    rep: usize,
    opts: &FitOptions,
    seed: u64,
) -> Result<Vec<CompareRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = truth.sample_uniform(n, &mut rng)?;
    let test = truth.sample_uniform(n, &mut rng)?;
    let fresh = truth.sample_uniform(n, &mut rng)?;
    let init_seed: u64 = rng.random();
    let draw_seed: u64 = rng.random();
    let init = initial_params(&train, k, &mut ChaCha8Rng::seed_from_u64(init_seed));
    let mut out = Vec::with_capacity(3);
    for method in [FitMethod::Ad, FitMethod::Fd, FitMethod::Pem] {
        let o = FitOptions {
            method,
            ..opts.clone()
        };
        let result = init
            .as_ref()
            .map_err(|e| Error::InvalidParameter(e.to_string()))
            .and_then(|init| fit_gmcm_from(&train, init, &o))
            .and_then(|fit| {
                let held = fit.params.loglik(&test)?;
                let sample = fit
                    .params
                    .sample_uniform(n, &mut ChaCha8Rng::seed_from_u64(draw_seed))?;
                Ok((fit.loglik, held, energy_distance(&fresh, &sample)?))
            });
        let (loglik, heldout_loglik, energy) = match result {
            Ok(v) => v,
            Err(e) => {
                log::warn!("replicate {rep}: {} fit failed: {e}", method.name());
                (f64::NAN, f64::NAN, f64::NAN)
            }
        };
        out.push(CompareRow {
            method,
            replicate: rep,
            loglik,
            heldout_loglik,
            energy_distance: energy,
        });
    }
    Ok(out)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-method means and standard deviations over successful replicates.
pub fn summarize(rows: &[CompareRow]) -> Vec<MethodSummary> {
    [FitMethod::Ad, FitMethod::Fd, FitMethod::Pem]
        .into_iter()
        .map(|method| {
            let ok: Vec<&CompareRow> = rows
                .iter()
                .filter(|r| r.method == method && r.loglik.is_finite())
                .collect();
            let ll: Vec<f64> = ok.iter().map(|r| r.loglik).collect();
            let held: Vec<f64> = ok.iter().map(|r| r.heldout_loglik).collect();
            let ed: Vec<f64> = ok.iter().map(|r| r.energy_distance).collect();
            let (mean_loglik, sd_loglik) = mean_sd(&ll);
            let (mean_energy, sd_energy) = mean_sd(&ed);
            MethodSummary {
                method,
                n_ok: ok.len(),
                mean_loglik,
                sd_loglik,
                mean_heldout: mean_sd(&held).0,
                mean_energy,
                sd_energy,
            }
        })
        .collect()
}

/// CSV table `method,replicate,loglik,energy_distance`; failed fits leave
/// empty cells.
pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("method,replicate,loglik,energy_distance\n");
    let cell = |v: f64| if v.is_finite() { format!("{v}") } else { String::new() };
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.method.name(),
            r.replicate,
            cell(r.loglik),
            cell(r.energy_distance)
        ));
    }
    s
}
