//! Multivariate Student-t and unified skew-normal (SUN) families.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gaussian::{
    check_indices, check_symmetric, select_block, select_vec, symmetrize, Cholesky,
    ConditionParts, GaussianParams, IndexSplit,
};
use crate::special::{ln_gamma, norm_cdf};

/// `t_d(μ, Σ, ν)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentTParams {
    mean: DVector<f64>,
    scale: DMatrix<f64>,
    dof: f64,
}

impl StudentTParams {
    pub fn new(mean: DVector<f64>, scale: DMatrix<f64>, dof: f64) -> Result<Self> {
        if !(dof > 0.0) || !dof.is_finite() {
            return Err(Error::InvalidParameter(format!("degrees of freedom {dof} must be positive")));
        }
        let inner = GaussianParams::new(mean, scale)?;
        inner.factor()?;
        let (mean, scale) = (inner.mean().clone(), inner.cov().clone());
        Ok(Self { mean, scale, dof })
    }

    pub fn from_slices(mean: &[f64], scale_row_major: &[f64], dof: f64) -> Result<Self> {
        let g = GaussianParams::from_slices(mean, scale_row_major)?;
        Self::new(g.mean().clone(), g.cov().clone(), dof)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn scale(&self) -> &DMatrix<f64> {
        &self.scale
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn as_gaussian(&self) -> GaussianParams {
        GaussianParams::new(self.mean.clone(), self.scale.clone()).expect("validated on construction")
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "point has length {} but distribution has dimension {d}",
                x.len()
            )));
        }
        let chol = Cholesky::new(&self.scale)?;
        let diff: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, b)| a - b).collect();
        let q = chol.mahalanobis_sq(&diff);
        let (nu, df) = (self.dof, d as f64);
        Ok(ln_gamma(0.5 * (nu + df)) - ln_gamma(0.5 * nu)
            - 0.5 * df * (nu * std::f64::consts::PI).ln()
            - 0.5 * chol.log_det()
            - 0.5 * (nu + df) * (q / nu).ln_1p())
    }

    pub fn marginalize(&self, keep: &[usize]) -> Result<Self> {
        let g = self.as_gaussian().marginalize(keep)?;
        Ok(Self {
            mean: g.mean().clone(),
            scale: g.cov().clone(),
            dof: self.dof,
        })
    }

    /// `t(μ₁.₂, (ν + d₂)/(ν + m) Σ₁₁.₂, ν + m)` with
    /// `d₂ = (x₂ − μ₂)ᵀ Σ₂₂⁻¹ (x₂ − μ₂)` and `m` conditioned coordinates.
    pub fn condition(&self, split: &IndexSplit, x_given: &[f64]) -> Result<Self> {
        let (t, g) = (split.target(), split.given());
        if x_given.len() != g.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} conditioning values for {} given indices",
                x_given.len(),
                g.len()
            )));
        }
        check_indices(t, self.dim(), "target")?;
        check_indices(g, self.dim(), "given")?;
        if g.is_empty() {
            return self.marginalize(t);
        }
        let parts = ConditionParts::new(&self.as_gaussian(), t, g)?;
        let d2 = parts.given_mahalanobis_sq(x_given);
        let gauss = parts.apply(x_given);
        let m = g.len() as f64;
        let factor = (self.dof + d2) / (self.dof + m);
        Ok(Self {
            mean: gauss.mean().clone(),
            scale: gauss.cov() * factor,
            dof: self.dof + m,
        })
    }

    /// `μ + z / √(w/ν)` with `z ~ N(0, Σ)` and `w ~ χ²(ν)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let chi = ChiSquared::new(self.dof)
            .map_err(|e| Error::InvalidParameter(format!("chi-square: {e}")))?;
        let zero = GaussianParams::new(DVector::zeros(self.dim()), self.scale.clone())?;
        let chol = zero.factor()?;
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        let mut buf = vec![0.0; d];
        for i in 0..n {
            let mut row = vec![0.0; d];
            zero.draw_into(&chol, rng, &mut buf, |j, v| row[j] = v);
            let w: f64 = chi.sample(rng);
            let s = (w / self.dof).sqrt().recip();
            for j in 0..d {
                out[(i, j)] = self.mean[j] + s * row[j];
            }
        }
        Ok(out)
    }
}

pub fn t_logpdf(x: &[f64], p: &StudentTParams) -> Result<f64> {
    p.logpdf(x)
}

pub fn t_marginalize(p: &StudentTParams, keep: &[usize]) -> Result<StudentTParams> {
    p.marginalize(keep)
}

pub fn t_condition(p: &StudentTParams, split: &IndexSplit, x_given: &[f64]) -> Result<StudentTParams> {
    p.condition(split, x_given)
}

pub fn t_sample<R: Rng + ?Sized>(p: &StudentTParams, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    p.sample(n, rng)
}

const UNIT_DIAG_TOL: f64 = 1e-10;

/// `SUN_{d,p}(ξ, γ, ω̄, Ω*)` with `Ω* = [[Γ, Δᵀ], [Δ, Ω̄]]` and `Ω̄` in
/// correlation form.
#[derive(Debug, Clone, PartialEq)]
pub struct SunParams {
    xi: DVector<f64>,
    gamma: DVector<f64>,
    omega_bar: DVector<f64>,
    omega_star: DMatrix<f64>,
}

impl SunParams {
    pub fn new(
        xi: DVector<f64>,
        gamma: DVector<f64>,
        omega_bar: DVector<f64>,
        omega_star: DMatrix<f64>,
    ) -> Result<Self> {
        let (d, p) = (xi.len(), gamma.len());
        if d == 0 || p == 0 {
            return Err(Error::DimensionMismatch("SUN needs d ≥ 1 and p ≥ 1".into()));
        }
        if omega_bar.len() != d || omega_star.shape() != (p + d, p + d) {
            return Err(Error::DimensionMismatch(format!(
                "ω̄ has length {} and Ω* is {:?}; expected {d} and ({}, {})",
                omega_bar.len(),
                omega_star.shape(),
                p + d,
                p + d
            )));
        }
        if omega_bar.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("ω̄ entries must be positive".into()));
        }
        if xi.iter().chain(gamma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("ξ and γ must be finite".into()));
        }
        check_symmetric(&omega_star, 1e-10)?;
        for j in 0..d {
            let v = omega_star[(p + j, p + j)];
            if (v - 1.0).abs() > UNIT_DIAG_TOL {
                return Err(Error::InvalidParameter(format!(
                    "Ω̄ must have unit diagonal, entry {j} is {v}"
                )));
            }
        }
        let mut omega_star = omega_star;
        symmetrize(&mut omega_star);
        Cholesky::new(&omega_star)?;
        Ok(Self {
            xi,
            gamma,
            omega_bar,
            omega_star,
        })
    }

    /// Build from blocks `Γ` (p×p), `Δ` (d×p) and `Ω̄` (d×d).
    pub fn from_blocks(
        xi: DVector<f64>,
        gamma: DVector<f64>,
        omega_bar: DVector<f64>,
        big_gamma: &DMatrix<f64>,
        delta: &DMatrix<f64>,
        omega_corr: &DMatrix<f64>,
    ) -> Result<Self> {
        let (d, p) = (xi.len(), gamma.len());
        if big_gamma.shape() != (p, p) || delta.shape() != (d, p) || omega_corr.shape() != (d, d) {
            return Err(Error::DimensionMismatch("SUN block shapes do not match d and p".into()));
        }
        let mut star = DMatrix::zeros(p + d, p + d);
        star.view_mut((0, 0), (p, p)).copy_from(big_gamma);
        star.view_mut((p, 0), (d, p)).copy_from(delta);
        star.view_mut((0, p), (p, d)).copy_from(&delta.transpose());
        star.view_mut((p, p), (d, d)).copy_from(omega_corr);
        Self::new(xi, gamma, omega_bar, star)
    }

    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn xi(&self) -> &DVector<f64> {
        &self.xi
    }

    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn omega_bar(&self) -> &DVector<f64> {
        &self.omega_bar
    }

    pub fn omega_star(&self) -> &DMatrix<f64> {
        &self.omega_star
    }

    pub fn big_gamma(&self) -> DMatrix<f64> {
        let p = self.latent_dim();
        self.omega_star.view((0, 0), (p, p)).into_owned()
    }

    pub fn delta(&self) -> DMatrix<f64> {
        let (d, p) = (self.dim(), self.latent_dim());
        self.omega_star.view((p, 0), (d, p)).into_owned()
    }

    pub fn omega_corr(&self) -> DMatrix<f64> {
        let (d, p) = (self.dim(), self.latent_dim());
        self.omega_star.view((p, p), (d, d)).into_owned()
    }

    /// `Ω = ω Ω̄ ω`.
    pub fn omega(&self) -> DMatrix<f64> {
        let w = &self.omega_bar;
        let c = self.omega_corr();
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| w[i] * c[(i, j)] * w[j])
    }

    pub fn marginalize(&self, keep: &[usize]) -> Result<Self> {
        check_indices(keep, self.dim(), "keep")?;
        let p = self.latent_dim();
        let rows: Vec<usize> = (0..p).chain(keep.iter().map(|k| p + k)).collect();
        Self::new(
            select_vec(&self.xi, keep),
            self.gamma.clone(),
            select_vec(&self.omega_bar, keep),
            select_block(&self.omega_star, &rows, &rows),
        )
    }

    /// Conditional law of the target block given `x_given`.
    ///
    /// With `z₂ = ω₂⁻¹(x₂ − ξ₂)`: `ξ₁.₂ = ξ₁ + Ω₁₂Ω₂₂⁻¹(x₂ − ξ₂)`,
    /// `γ₁.₂ = γ + Δ₂ᵀΩ̄₂₂⁻¹z₂`, `Ω̄₁₁.₂ = Ω̄₁₁ − Ω̄₁₂Ω̄₂₂⁻¹Ω̄₂₁`,
    /// `Δ₁.₂ = Δ₁ − Ω̄₁₂Ω̄₂₂⁻¹Δ₂`, `Γ₁.₂ = Γ − Δ₂ᵀΩ̄₂₂⁻¹Δ₂`.
    /// The result is returned in correlation form: with `D² = diag(Ω̄₁₁.₂)`
    /// the scales become `ω₁D` and the blocks `D⁻¹Ω̄₁₁.₂D⁻¹`, `D⁻¹Δ₁.₂`,
    /// which describes the same distribution.
    pub fn condition(&self, split: &IndexSplit, x_given: &[f64]) -> Result<Self> {
        let (t, g) = (split.target(), split.given());
        if x_given.len() != g.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} conditioning values for {} given indices",
                x_given.len(),
                g.len()
            )));
        }
        check_indices(t, self.dim(), "target")?;
        check_indices(g, self.dim(), "given")?;
        if g.is_empty() {
            return self.marginalize(t);
        }
        let corr = self.omega_corr();
        let delta = self.delta();
        let all_p: Vec<usize> = (0..self.latent_dim()).collect();
        let c22 = select_block(&corr, g, g);
        let c12 = select_block(&corr, t, g);
        let c11 = select_block(&corr, t, t);
        let d1 = select_block(&delta, t, &all_p);
        let d2 = select_block(&delta, g, &all_p);
        let chol = Cholesky::new(&c22)?;
        let z2 = DVector::from_iterator(
            g.len(),
            g.iter()
                .zip(x_given)
                .map(|(&j, x)| (x - self.xi[j]) / self.omega_bar[j]),
        );
        let solved_z = chol.solve_vec(&z2);
        let solved_c21 = chol.solve_mat(&c12.transpose());
        let solved_d2 = chol.solve_mat(&d2);

        // ω₁ Ω̄₁₂ Ω̄₂₂⁻¹ z₂ equals Ω₁₂Ω₂₂⁻¹(x₂ − ξ₂).
        let shift = &c12 * &solved_z;
        let xi = DVector::from_fn(t.len(), |i, _| self.xi[t[i]] + self.omega_bar[t[i]] * shift[i]);
        let gamma = &self.gamma + d2.transpose() * &solved_z;
        let mut c_cond = c11 - &c12 * &solved_c21;
        symmetrize(&mut c_cond);
        let d_cond = d1 - &c12 * &solved_d2;
        let mut g_cond = self.big_gamma() - d2.transpose() * &solved_d2;
        symmetrize(&mut g_cond);

        let scale: Vec<f64> = (0..t.len()).map(|i| c_cond[(i, i)].sqrt()).collect();
        if scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::NotPositiveDefinite {
                index: scale.iter().position(|s| !(*s > 0.0)).unwrap_or(0),
                pivot: 0.0,
            });
        }
        let omega_bar = DVector::from_fn(t.len(), |i, _| self.omega_bar[t[i]] * scale[i]);
        let mut corr_out = DMatrix::from_fn(t.len(), t.len(), |i, j| c_cond[(i, j)] / (scale[i] * scale[j]));
        for i in 0..t.len() {
            corr_out[(i, i)] = 1.0;
        }
        let delta_out = DMatrix::from_fn(t.len(), self.latent_dim(), |i, j| d_cond[(i, j)] / scale[i]);
        Self::from_blocks(xi, gamma, omega_bar, &g_cond, &delta_out, &corr_out)
    }

    /// Rejection sampler: draw `(U₀, U₁) ~ N(0, Ω*)`, keep draws with
    /// `U₀ + γ > 0`, return `ξ + ω U₁`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SunSample> {
        self.sample_capped(n, SUN_PROPOSAL_CAP, rng)
    }

    pub fn sample_capped<R: Rng + ?Sized>(
        &self,
        n: usize,
        max_proposals: usize,
        rng: &mut R,
    ) -> Result<SunSample> {
        let (d, p) = (self.dim(), self.latent_dim());
        let joint = GaussianParams::new(DVector::zeros(p + d), self.omega_star.clone())?;
        let chol = joint.factor()?;
        let mut out = DMatrix::zeros(n, d);
        let mut buf = vec![0.0; p + d];
        let mut row = vec![0.0; p + d];
        let mut accepted = 0;
        let mut proposals = 0;
        while accepted < n && proposals < max_proposals {
            proposals += 1;
            joint.draw_into(&chol, rng, &mut buf, |j, v| row[j] = v);
            if (0..p).all(|j| row[j] + self.gamma[j] > 0.0) {
                for j in 0..d {
                    out[(accepted, j)] = self.xi[j] + self.omega_bar[j] * row[p + j];
                }
                accepted += 1;
            }
        }
        let acceptance = if proposals == 0 { 1.0 } else { accepted as f64 / proposals as f64 };
        if acceptance < 1e-4 {
            log::warn!("SUN rejection sampler acceptance rate {acceptance:e} is below 1e-4");
        }
        if accepted < n {
            return Err(Error::InsufficientAcceptance {
                accepted,
                requested: n,
                draws: proposals,
            });
        }
        Ok(SunSample {
            draws: out,
            acceptance,
        })
    }

    /// Monte Carlo log density with its standard error:
    /// `log φ_d(x − ξ; Ω) + log Φ_p(γ + ΔᵀΩ̄⁻¹ω⁻¹(x − ξ); Γ − ΔᵀΩ̄⁻¹Δ) − log Φ_p(γ; Γ)`.
    /// For `p = 1` both orthant probabilities are exact and the error is 0.
    pub fn logpdf_mc<R: Rng + ?Sized>(&self, x: &[f64], n_mc: usize, rng: &mut R) -> Result<(f64, f64)> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "point has length {} but distribution has dimension {d}",
                x.len()
            )));
        }
        if n_mc < 1000 {
            return Err(Error::InvalidParameter(format!("n_mc = {n_mc} is below 1000")));
        }
        let base = GaussianParams::new(self.xi.clone(), self.omega())?;
        let log_phi = base.logpdf(x)?;
        let corr = self.omega_corr();
        let delta = self.delta();
        let chol = Cholesky::new(&corr)?;
        let z = DVector::from_fn(d, |j, _| (x[j] - self.xi[j]) / self.omega_bar[j]);
        let loc = &self.gamma + delta.transpose() * chol.solve_vec(&z);
        let mut cov = self.big_gamma() - delta.transpose() * chol.solve_mat(&delta);
        symmetrize(&mut cov);
        let (num, se_num) = orthant(&loc, &cov, n_mc, rng)?;
        let (den, se_den) = orthant(&self.gamma, &self.big_gamma(), n_mc, rng)?;
        let value = log_phi + num.ln() - den.ln();
        let se = ((se_num / num).powi(2) + (se_den / den).powi(2)).sqrt();
        Ok((value, se))
    }
}

const SUN_PROPOSAL_CAP: usize = 100_000_000;

/// Accepted SUN draws and the observed acceptance rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SunSample {
    pub draws: DMatrix<f64>,
    pub acceptance: f64,
}

/// `P(V ≤ a)` for `V ~ N(0, S)` with its standard error.
fn orthant<R: Rng + ?Sized>(a: &DVector<f64>, s: &DMatrix<f64>, n: usize, rng: &mut R) -> Result<(f64, f64)> {
    if a.len() == 1 {
        return Ok((norm_cdf(a[0] / s[(0, 0)].sqrt()), 0.0));
    }
    let chol = Cholesky::new(s)?;
    let l = chol.l();
    let p = a.len();
    let mut z = vec![0.0; p];
    let mut hits = 0usize;
    for _ in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let inside = (0..p).all(|r| {
            let v: f64 = (0..=r).map(|c| l[(r, c)] * z[c]).sum();
            v <= a[r]
        });
        hits += inside as usize;
    }
    let phat = hits as f64 / n as f64;
    Ok((phat, (phat * (1.0 - phat) / n as f64).sqrt()))
}

pub fn sun_marginalize(p: &SunParams, keep: &[usize]) -> Result<SunParams> {
    p.marginalize(keep)
}

pub fn sun_condition(p: &SunParams, split: &IndexSplit, x_given: &[f64]) -> Result<SunParams> {
    p.condition(split, x_given)
}

pub fn sun_sample<R: Rng + ?Sized>(p: &SunParams, n: usize, rng: &mut R) -> Result<SunSample> {
    p.sample(n, rng)
}

pub fn sun_logpdf_mc<R: Rng + ?Sized>(x: &[f64], p: &SunParams, n_mc: usize, rng: &mut R) -> Result<(f64, f64)> {
    p.logpdf_mc(x, n_mc, rng)
}
