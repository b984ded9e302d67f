//! Meta models: fitted marginals linked by a latent family, with exact
//! conditioning in the latent space and reference conditional samplers.
//!
//! A data point `x` maps to latent coordinates `zⱼ = Ψⱼ⁻¹(F̂ⱼ(xⱼ))`, where
//! `F̂ⱼ` is the fitted marginal CDF and `Ψⱼ` the latent family's `j`-th
//! marginal CDF. Conditioning happens on `z` and draws go back through
//! `F̂ⱼ⁻¹ ∘ Ψⱼ`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elliptical::StudentTParams;
use crate::em::{em_fit, EmConfig};
use crate::error::{Error, Result};
use crate::gaussian::{Cholesky, GaussianParams, IndexSplit};
use crate::gmcm::{fit_gmcm, FitOptions, GmcmParams};
use crate::marginals::{pseudo_observations, MarginKind, MarginalModel, UnivariateMixture};
use crate::mixture::Mixture;
use crate::special::{norm_cdf, norm_ppf, t_cdf, t_ppf};

/// Clamp applied to every PIT value before a latent quantile.
pub const PIT_EPS: f64 = 1e-10;

pub const FORMAT_VERSION: u32 = 1;

fn clamp_pit(u: f64) -> f64 {
    u.clamp(PIT_EPS, 1.0 - PIT_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Gmcm,
    GaussianCopula,
    Tgmm,
    StudentT,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gmcm => "gmcm",
            Self::GaussianCopula => "gaussian-copula",
            Self::Tgmm => "tgmm",
            Self::StudentT => "student-t",
        }
    }

    /// Accepts the canonical names plus `gc`.
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gmcm" => Some(Self::Gmcm),
            "gc" | "gaussian-copula" => Some(Self::GaussianCopula),
            "tgmm" => Some(Self::Tgmm),
            "student-t" | "t" => Some(Self::StudentT),
            _ => None,
        }
    }
}

/// Fitted latent law.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentFamily {
    Gmcm(GmcmParams),
    /// Correlation matrix of the probit scores.
    GaussianCopula(DMatrix<f64>),
    /// Mixture fitted to the probit scores.
    Tgmm(Mixture),
    StudentT(StudentTParams),
}

impl LatentFamily {
    pub fn family(&self) -> Family {
        match self {
            Self::Gmcm(_) => Family::Gmcm,
            Self::GaussianCopula(_) => Family::GaussianCopula,
            Self::Tgmm(_) => Family::Tgmm,
            Self::StudentT(_) => Family::StudentT,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gmcm(p) => p.dim(),
            Self::GaussianCopula(c) => c.nrows(),
            Self::Tgmm(m) => m.dim(),
            Self::StudentT(t) => t.dim(),
        }
    }
}

/// Latent law after conditioning, over the target coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionalLatent {
    Mixture(Mixture),
    Gaussian(GaussianParams),
    StudentT(StudentTParams),
}

impl ConditionalLatent {
    pub fn dim(&self) -> usize {
        match self {
            Self::Mixture(m) => m.dim(),
            Self::Gaussian(g) => g.dim(),
            Self::StudentT(t) => t.dim(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        match self {
            Self::Mixture(m) => m.sample(n, rng),
            Self::Gaussian(g) => g.sample(n, rng),
            Self::StudentT(t) => t.sample(n, rng),
        }
    }

    /// CDF of a univariate conditional law.
    pub fn cdf_1d(&self, z: f64) -> Result<f64> {
        if self.dim() != 1 {
            return Err(Error::UnsupportedShape(format!(
                "conditional CDF needs a univariate target, got {}",
                self.dim()
            )));
        }
        Ok(match self {
            Self::Mixture(m) => UnivariateMixture::from_margin(m, 0)?.cdf(z),
            Self::Gaussian(g) => norm_cdf((z - g.mean()[0]) / g.cov()[(0, 0)].sqrt()),
            Self::StudentT(t) => t_cdf(z, t.mean()[0], t.scale()[(0, 0)].sqrt(), t.dof()),
        })
    }
}

/// Marginal CDF `Ψⱼ` of the latent space, used in both directions.
#[derive(Debug, Clone, PartialEq)]
enum LatentMargin {
    Normal,
    Gmm(UnivariateMixture),
    T { loc: f64, scale: f64, dof: f64 },
}

impl LatentMargin {
    fn cdf(&self, z: f64) -> f64 {
        match self {
            Self::Normal => norm_cdf(z),
            Self::Gmm(m) => m.cdf(z),
            Self::T { loc, scale, dof } => t_cdf(z, *loc, *scale, *dof),
        }
    }

    fn quantile(&self, u: f64) -> Result<f64> {
        match self {
            Self::Normal => Ok(norm_ppf(u)),
            Self::Gmm(m) => m.quantile(u),
            Self::T { loc, scale, dof } => Ok(t_ppf(u, *loc, *scale, *dof)),
        }
    }
}

/// Marginal models, a latent family and column names.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    marginals: Vec<MarginalModel>,
    latent: LatentFamily,
    column_names: Vec<String>,
    psi: Vec<LatentMargin>,
}

impl MetaModel {
    pub fn new(
        marginals: Vec<MarginalModel>,
        latent: LatentFamily,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let d = latent.dim();
        if marginals.len() != d || column_names.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "{} marginals and {} column names for a {d}-dimensional latent family",
                marginals.len(),
                column_names.len()
            )));
        }
        for (j, m) in marginals.iter().enumerate() {
            m.validate().map_err(|e| e.in_column(j, "marginal"))?;
        }
        let psi = match &latent {
            LatentFamily::Gmcm(p) => p.margins()?.into_iter().map(LatentMargin::Gmm).collect(),
            LatentFamily::GaussianCopula(c) => {
                for j in 0..d {
                    if (c[(j, j)] - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidParameter(format!(
                            "correlation matrix has diagonal entry {} at {j}",
                            c[(j, j)]
                        )));
                    }
                }
                Cholesky::new(c)?;
                vec![LatentMargin::Normal; d]
            }
            LatentFamily::Tgmm(_) => vec![LatentMargin::Normal; d],
            LatentFamily::StudentT(t) => (0..d)
                .map(|j| LatentMargin::T {
                    loc: t.mean()[j],
                    scale: t.scale()[(j, j)].sqrt(),
                    dof: t.dof(),
                })
                .collect(),
        };
        Ok(Self {
            marginals,
            latent,
            column_names,
            psi,
        })
    }

    pub fn marginals(&self) -> &[MarginalModel] {
        &self.marginals
    }

    pub fn latent(&self) -> &LatentFamily {
        &self.latent
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn family(&self) -> Family {
        self.latent.family()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    /// `zⱼ = Ψⱼ⁻¹(clamp(F̂ⱼ(xⱼ)))` for the listed columns.
    pub fn to_latent(&self, x: &[f64], cols: &[usize]) -> Result<Vec<f64>> {
        if x.len() != cols.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} columns",
                x.len(),
                cols.len()
            )));
        }
        crate::gaussian::check_indices(cols, self.dim(), "column")?;
        x.iter()
            .zip(cols)
            .map(|(v, &j)| {
                let u = clamp_pit(self.marginals[j].cdf(*v));
                self.psi[j].quantile(u).map_err(|e| e.in_column(j, "latent"))
            })
            .collect()
    }

    /// `F̂ⱼ⁻¹(clamp(Ψⱼ(z)))`.
    pub fn from_latent(&self, z: f64, j: usize) -> Result<f64> {
        let u = clamp_pit(self.psi[j].cdf(z));
        self.marginals[j].quantile(u).map_err(|e| e.in_column(j, "back-transform"))
    }

    fn split(&self, req: &ConditionRequest) -> Result<IndexSplit> {
        req.validate(self.dim())?;
        IndexSplit::complement(req.given_columns.clone(), self.dim())
    }

    pub fn conditional_latent(&self, req: &ConditionRequest) -> Result<ConditionalLatent> {
        let split = self.split(req)?;
        let z = self.to_latent(&req.x_given, &req.given_columns)?;
        Ok(match &self.latent {
            LatentFamily::Gmcm(p) => ConditionalLatent::Mixture(p.mixture().condition(&split, &z)?),
            LatentFamily::Tgmm(m) => ConditionalLatent::Mixture(m.condition(&split, &z)?),
            LatentFamily::GaussianCopula(c) => {
                let g = GaussianParams::new(DVector::zeros(self.dim()), c.clone())?;
                ConditionalLatent::Gaussian(g.condition(&split, &z)?)
            }
            LatentFamily::StudentT(t) => ConditionalLatent::StudentT(t.condition(&split, &z)?),
        })
    }

    /// Target columns of a request, in output order.
    pub fn target_columns(&self, req: &ConditionRequest) -> Result<Vec<usize>> {
        Ok(self.split(req)?.target().to_vec())
    }

    pub fn conditional_sample<R: Rng + ?Sized>(
        &self,
        req: &ConditionRequest,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        if req.n_samples == 0 {
            return Err(Error::InvalidParameter("n_samples must be at least 1".into()));
        }
        let target = self.target_columns(req)?;
        let law = self.conditional_latent(req)?;
        let z = law.sample(req.n_samples, rng)?;
        let mut out = DMatrix::zeros(req.n_samples, target.len());
        for (c, &j) in target.iter().enumerate() {
            for i in 0..req.n_samples {
                out[(i, c)] = self.from_latent(z[(i, c)], j)?;
            }
        }
        Ok(out)
    }

    /// Conditional CDF of a univariate target at each grid value.
    pub fn conditional_cdf(&self, req: &ConditionRequest) -> Result<Vec<f64>> {
        let target = self.target_columns(req)?;
        if target.len() != 1 {
            return Err(Error::UnsupportedShape(format!(
                "conditional CDF needs exactly one target column, got {}",
                target.len()
            )));
        }
        let grid = req
            .cdf_grid
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("request has no CDF grid".into()))?;
        if grid.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::InvalidParameter("CDF grid must be sorted".into()));
        }
        let law = self.conditional_latent(req)?;
        let j = target[0];
        grid.iter()
            .map(|g| {
                let z = self.to_latent(&[*g], &[j])?[0];
                Ok(law.cdf_1d(z)?.clamp(0.0, 1.0))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&ModelDoc::from_model(self))
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let head: VersionProbe =
            serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        if head.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                head.format_version
            )));
        }
        let doc: ModelDoc = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        doc.into_model()
    }
}

/// Conditioning point and what to compute there.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRequest {
    pub given_columns: Vec<usize>,
    pub x_given: Vec<f64>,
    pub n_samples: usize,
    pub cdf_grid: Option<Vec<f64>>,
}

impl ConditionRequest {
    pub fn new(given_columns: Vec<usize>, x_given: Vec<f64>, n_samples: usize) -> Self {
        Self {
            given_columns,
            x_given,
            n_samples,
            cdf_grid: None,
        }
    }

    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.cdf_grid = Some(grid);
        self
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let g = &self.given_columns;
        if g.is_empty() || g.len() >= d {
            return Err(Error::InvalidIndices(format!(
                "given columns must be a non-empty proper subset of {d} columns, got {g:?}"
            )));
        }
        if g.windows(2).any(|w| w[0] >= w[1]) || g.iter().any(|&j| j >= d) {
            return Err(Error::InvalidIndices(format!(
                "given columns must be strictly increasing and below {d}, got {g:?}"
            )));
        }
        if self.x_given.len() != g.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} conditioning values for {} given columns",
                self.x_given.len(),
                g.len()
            )));
        }
        if self.x_given.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("conditioning values must be finite".into()));
        }
        Ok(())
    }
}

/// How uniforms are produced from the training data for the copula stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PitKind {
    /// `F̂ⱼ(xⱼ)` from the fitted marginals.
    #[default]
    Parametric,
    /// Ranks `r / (n + 1)`.
    Ranks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig {
    pub margins: MarginKind,
    pub margin_k_max: usize,
    pub pit: PitKind,
    pub gmcm: FitOptions,
    pub em: EmConfig,
    pub column_names: Option<Vec<String>>,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            margins: MarginKind::GmmAic,
            margin_k_max: 10,
            pit: PitKind::Parametric,
            gmcm: FitOptions::default(),
            em: EmConfig::default(),
            column_names: None,
        }
    }
}

/// Summary of the latent fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    /// Log-likelihood of the latent fit on its own scale (copula,
    /// probit-score mixture or Student-t likelihood).
    pub loglik: f64,
    pub iterations: usize,
}

pub fn fit_marginals<R: Rng + ?Sized>(
    data: &DMatrix<f64>,
    cfg: &JointConfig,
    rng: &mut R,
) -> Result<Vec<MarginalModel>> {
    let seeds: Vec<u64> = (0..data.ncols()).map(|_| rng.random()).collect();
    seeds
        .par_iter()
        .enumerate()
        .map(|(j, &s)| {
            let col: Vec<f64> = data.column(j).iter().copied().collect();
            MarginalModel::fit(&col, cfg.margins, cfg.margin_k_max, &mut ChaCha8Rng::seed_from_u64(s))
                .map_err(|e| e.in_column(j, "marginal"))
        })
        .collect()
}

/// Uniforms for the copula stage, clamped to `[ε, 1 − ε]`.
pub fn training_uniforms(
    data: &DMatrix<f64>,
    marginals: &[MarginalModel],
    pit: PitKind,
) -> Result<DMatrix<f64>> {
    let u = match pit {
        PitKind::Ranks => pseudo_observations(data)?,
        PitKind::Parametric => DMatrix::from_fn(data.nrows(), data.ncols(), |i, j| {
            marginals[j].cdf(data[(i, j)])
        }),
    };
    Ok(u.map(clamp_pit))
}

fn check_data(data: &DMatrix<f64>) -> Result<()> {
    let (n, d) = data.shape();
    if n < 20 || d < 2 {
        return Err(Error::InvalidParameter(format!(
            "joint fitting needs at least 20 rows and 2 columns, got {n}×{d}"
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite value at row {} column {}",
            i % n,
            i / n
        ))
        .in_column(i / n, "input"));
    }
    Ok(())
}

/// Fit a meta model; see [`fit_joint_with_summary`].
pub fn fit_joint<R: Rng + ?Sized>(
    data: &DMatrix<f64>,
    family: Family,
    k: usize,
    cfg: &JointConfig,
    rng: &mut R,
) -> Result<MetaModel> {
    Ok(fit_joint_with_summary(data, family, k, cfg, rng)?.0)
}

/// Fit marginals column by column, transform to uniforms, then fit the
/// latent family: GMCM by gradient ascent, Gaussian copula by the Pearson
/// correlation of probit scores, TGMM by EM on probit scores, and Student-t
/// by moments on probit scores with the degrees of freedom from a 1D
/// likelihood search.
pub fn fit_joint_with_summary<R: Rng + ?Sized>(
    data: &DMatrix<f64>,
    family: Family,
    k: usize,
    cfg: &JointConfig,
    rng: &mut R,
) -> Result<(MetaModel, FitSummary)> {
    check_data(data)?;
    let marginals = fit_marginals(data, cfg, rng)?;
    fit_latent(data, marginals, family, k, cfg, rng)
}

/// Latent stage of [`fit_joint_with_summary`] given already fitted marginals.
pub fn fit_latent<R: Rng + ?Sized>(
    data: &DMatrix<f64>,
    marginals: Vec<MarginalModel>,
    family: Family,
    k: usize,
    cfg: &JointConfig,
    rng: &mut R,
) -> Result<(MetaModel, FitSummary)> {
    check_data(data)?;
    let d = data.ncols();
    let names = match &cfg.column_names {
        Some(n) => n.clone(),
        None => (1..=d).map(|j| format!("x{j}")).collect(),
    };
    let u = training_uniforms(data, &marginals, cfg.pit)?;
    let (latent, summary) = match family {
        Family::Gmcm => {
            let fit = fit_gmcm(&u, k, &cfg.gmcm, rng)?;
            let s = FitSummary {
                loglik: fit.loglik,
                iterations: fit.iterations,
            };
            (LatentFamily::Gmcm(fit.params), s)
        }
        Family::GaussianCopula => {
            let z = u.map(norm_ppf);
            let corr = correlation(&z)?;
            let g = GaussianParams::new(DVector::zeros(d), corr.clone())?;
            let chol = g.factor()?;
            let ll: f64 = (0..z.nrows())
                .map(|i| {
                    let row: Vec<f64> = z.row(i).iter().copied().collect();
                    g.logpdf_with(&chol, &row).unwrap_or(f64::NAN)
                        - row.iter().map(|v| crate::special::norm_logpdf(*v)).sum::<f64>()
                })
                .sum();
            (LatentFamily::GaussianCopula(corr), FitSummary { loglik: ll, iterations: 1 })
        }
        Family::Tgmm => {
            let z = u.map(norm_ppf);
            let fit = em_fit(&z, k, &cfg.em, rng)?;
            let s = FitSummary {
                loglik: fit.loglik,
                iterations: fit.iterations,
            };
            (LatentFamily::Tgmm(fit.mixture), s)
        }
        Family::StudentT => {
            let z = u.map(norm_ppf);
            let (t, ll, evals) = fit_student_t(&z)?;
            (LatentFamily::StudentT(t), FitSummary { loglik: ll, iterations: evals })
        }
    };
    Ok((MetaModel::new(marginals, latent, names)?, summary))
}

fn mean_and_cov(z: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = z.shape();
    let mean = DVector::from_fn(d, |j, _| z.column(j).sum() / n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            let da = z[(i, a)] - mean[a];
            for b in 0..d {
                cov[(a, b)] += da * (z[(i, b)] - mean[b]);
            }
        }
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

/// Pearson correlation matrix of the columns.
pub fn correlation(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (_, cov) = mean_and_cov(z);
    let d = cov.nrows();
    let sd: Vec<f64> = (0..d).map(|j| cov[(j, j)].sqrt()).collect();
    if let Some(j) = sd.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::InvalidParameter("column has zero variance".into()).in_column(j, "copula"));
    }
    let mut c = DMatrix::from_fn(d, d, |a, b| cov[(a, b)] / (sd[a] * sd[b]));
    for j in 0..d {
        c[(j, j)] = 1.0;
    }
    Cholesky::new(&c)?;
    Ok(c)
}

/// Moment fit of a Student-t to `z` with `ν` chosen by likelihood: the
/// scale is `S (ν − 2) / ν` so that the covariance matches the sample.
fn fit_student_t(z: &DMatrix<f64>) -> Result<(StudentTParams, f64, usize)> {
    let (mean, cov) = mean_and_cov(z);
    let rows: Vec<Vec<f64>> = (0..z.nrows()).map(|i| z.row(i).iter().copied().collect()).collect();
    let mut evals = 0;
    let mut loglik = |log_excess: f64| -> f64 {
        evals += 1;
        let nu = 2.0 + log_excess.exp();
        let Ok(t) = StudentTParams::new(mean.clone(), &cov * ((nu - 2.0) / nu), nu) else {
            return f64::NEG_INFINITY;
        };
        rows.iter().map(|r| t.logpdf(r).unwrap_or(f64::NEG_INFINITY)).sum()
    };
    // Coarse grid over ν − 2 ∈ [0.05, 500], then golden-section refinement.
    let (lo, hi) = (0.05f64.ln(), 500f64.ln());
    let grid: Vec<f64> = (0..=40).map(|i| lo + (hi - lo) * i as f64 / 40.0).collect();
    let values: Vec<f64> = grid.iter().map(|g| loglik(*g)).collect();
    let best = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(40)]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut e = a + phi * (b - a);
    let (mut fc, mut fe) = (loglik(c), loglik(e));
    for _ in 0..40 {
        if fc > fe {
            b = e;
            e = c;
            fe = fc;
            c = b - phi * (b - a);
            fc = loglik(c);
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + phi * (b - a);
            fe = loglik(e);
        }
    }
    let x = if fc > fe { c } else { e };
    let nu = 2.0 + x.exp();
    let t = StudentTParams::new(mean.clone(), &cov * ((nu - 2.0) / nu), nu)?;
    let ll = loglik(x);
    if !ll.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: evals });
    }
    Ok((t, ll, evals))
}

/// Options for the conditional kernel density sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct CkdeOptions {
    pub bandwidth: f64,
    pub tol: f64,
    /// Work on per-column standardized data (tolerance in standard units).
    pub standardize: bool,
    pub max_draws: usize,
}

impl Default for CkdeOptions {
    fn default() -> Self {
        Self {
            bandwidth: 1.0,
            tol: 0.1,
            standardize: false,
            max_draws: 1 << 20,
        }
    }
}

/// Conditional sampler by rejection from a Gaussian-kernel density estimate:
/// joint draws whose given coordinates all lie within `tol` (max-norm) of
/// `x_given` are kept. The batch size doubles until enough draws are kept or
/// `max_draws` proposals have been made.
pub fn ckde_conditional_sample<R: Rng + ?Sized>(
    data: &DMatrix<f64>,
    req: &ConditionRequest,
    opts: &CkdeOptions,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (n, d) = data.shape();
    req.validate(d)?;
    if n == 0 || req.n_samples == 0 {
        return Err(Error::InvalidParameter("CKDE needs data and n_samples ≥ 1".into()));
    }
    if !(opts.bandwidth > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter("bandwidth and tolerance must be positive".into()));
    }
    let (shift, scale): (Vec<f64>, Vec<f64>) = if opts.standardize && n >= 2 {
        let (mean, cov) = mean_and_cov(data);
        (0..d)
            .map(|j| {
                let s = cov[(j, j)].sqrt();
                (mean[j], if s > 0.0 { s } else { 1.0 })
            })
            .unzip()
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let given = &req.given_columns;
    let target: Vec<usize> = (0..d).filter(|j| !given.contains(j)).collect();
    let x_given: Vec<f64> = given
        .iter()
        .zip(&req.x_given)
        .map(|(&j, x)| (x - shift[j]) / scale[j])
        .collect();
    let kernel = Normal::new(0.0, opts.bandwidth).expect("positive bandwidth");
    let mut out = DMatrix::zeros(req.n_samples, target.len());
    let mut accepted = 0;
    let mut draws = 0;
    let mut batch = req.n_samples;
    let mut row = vec![0.0; d];
    while accepted < req.n_samples && draws < opts.max_draws {
        let this = batch.min(opts.max_draws - draws);
        for _ in 0..this {
            let i = rng.random_range(0..n);
            for j in 0..d {
                row[j] = (data[(i, j)] - shift[j]) / scale[j] + kernel.sample(rng);
            }
            let close = given
                .iter()
                .zip(&x_given)
                .all(|(&j, x)| (row[j] - x).abs() < opts.tol);
            if close && accepted < req.n_samples {
                for (c, &j) in target.iter().enumerate() {
                    out[(accepted, c)] = row[j] * scale[j] + shift[j];
                }
                accepted += 1;
            }
        }
        draws += this;
        batch *= 2;
    }
    if accepted < req.n_samples {
        return Err(Error::InsufficientAcceptance {
            accepted,
            requested: req.n_samples,
            draws,
        });
    }
    Ok(out)
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct MatrixDoc {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

impl MatrixDoc {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Format(format!(
                "matrix of shape {}×{} has {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Serialize, Deserialize)]
struct ComponentDoc {
    mean: Vec<f64>,
    cov: MatrixDoc,
}

#[derive(Serialize, Deserialize)]
struct MixtureDoc {
    weights: Vec<f64>,
    components: Vec<ComponentDoc>,
}

impl MixtureDoc {
    fn from_mixture(m: &Mixture) -> Self {
        Self {
            weights: m.weights().to_vec(),
            components: m
                .components()
                .iter()
                .map(|c| ComponentDoc {
                    mean: c.mean().as_slice().to_vec(),
                    cov: MatrixDoc::from_matrix(c.cov()),
                })
                .collect(),
        }
    }

    fn to_mixture(&self) -> Result<Mixture> {
        let comps = self
            .components
            .iter()
            .map(|c| GaussianParams::new(DVector::from_vec(c.mean.clone()), c.cov.to_matrix()?))
            .collect::<Result<Vec<_>>>()?;
        Mixture::new(self.weights.clone(), comps)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LatentDoc {
    Mixture(MixtureDoc),
    Correlation { correlation: MatrixDoc },
    StudentT { mean: Vec<f64>, scale: MatrixDoc, dof: f64 },
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format_version: u32,
    family: Family,
    column_names: Vec<String>,
    marginals: Vec<MarginalModel>,
    latent: LatentDoc,
}

impl ModelDoc {
    fn from_model(m: &MetaModel) -> Self {
        let latent = match &m.latent {
            LatentFamily::Gmcm(p) => LatentDoc::Mixture(MixtureDoc::from_mixture(p.mixture())),
            LatentFamily::Tgmm(mix) => LatentDoc::Mixture(MixtureDoc::from_mixture(mix)),
            LatentFamily::GaussianCopula(c) => LatentDoc::Correlation {
                correlation: MatrixDoc::from_matrix(c),
            },
            LatentFamily::StudentT(t) => LatentDoc::StudentT {
                mean: t.mean().as_slice().to_vec(),
                scale: MatrixDoc::from_matrix(t.scale()),
                dof: t.dof(),
            },
        };
        Self {
            format_version: FORMAT_VERSION,
            family: m.family(),
            column_names: m.column_names.clone(),
            marginals: m.marginals.clone(),
            latent,
        }
    }

    fn into_model(self) -> Result<MetaModel> {
        let wrap = |e: Error| Error::Format(format!("invalid latent parameters: {e}"));
        let latent = match (self.family, self.latent) {
            (Family::Gmcm, LatentDoc::Mixture(m)) => {
                LatentFamily::Gmcm(GmcmParams::new(m.to_mixture().map_err(wrap)?))
            }
            (Family::Tgmm, LatentDoc::Mixture(m)) => LatentFamily::Tgmm(m.to_mixture().map_err(wrap)?),
            (Family::GaussianCopula, LatentDoc::Correlation { correlation }) => {
                LatentFamily::GaussianCopula(correlation.to_matrix()?)
            }
            (Family::StudentT, LatentDoc::StudentT { mean, scale, dof }) => LatentFamily::StudentT(
                StudentTParams::new(DVector::from_vec(mean), scale.to_matrix()?, dof).map_err(wrap)?,
            ),
            (f, _) => {
                return Err(Error::Format(format!(
                    "latent parameters do not match family {}",
                    f.name()
                )))
            }
        };
        MetaModel::new(self.marginals, latent, self.column_names).map_err(|e| match e {
            Error::Format(_) => e,
            other => Error::Format(other.to_string()),
        })
    }
}
