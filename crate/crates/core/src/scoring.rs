//! Sample-based proper scoring rules and the energy two-sample distance.
//!
//! Every score is oriented so that lower is better. [`evaluate_split`] runs
//! train/test experiments over conditional samplers.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::{
    ckde_conditional_sample, fit_latent, fit_marginals, CkdeOptions, ConditionRequest, Family,
    JointConfig, MetaModel,
};
use crate::special::LN_2PI;

const CHUNK: usize = 64;

fn check_samples(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!(
            "scoring needs at least 2 samples, got {m}"
        )));
    }
    Ok(())
}

/// Continuous ranked probability score in energy form,
/// `mean|x − y| − (1 / 2m²) ΣΣ|xᵢ − xⱼ|`, evaluated in O(m log m).
pub fn crps(samples: &[f64], y: f64) -> Result<f64> {
    let m = samples.len();
    check_samples(m)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mf = m as f64;
    let first = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / mf;
    // Σ_{i<j} (x₍ⱼ₎ − x₍ᵢ₎) = Σₖ x₍ₖ₎ (2k − m + 1) with 0-based k.
    let spread: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, x)| x * (2.0 * k as f64 - mf + 1.0))
        .sum();
    Ok((first - spread / (mf * mf)).max(0.0))
}

/// Negative log of a Gaussian-kernel density estimate at `y`.
pub fn log_score_kde(samples: &[f64], y: f64, bandwidth: f64) -> Result<f64> {
    check_samples(samples.len())?;
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidParameter(format!("bandwidth {bandwidth} must be positive")));
    }
    let s: f64 = samples
        .iter()
        .map(|x| {
            let t = (y - x) / bandwidth;
            (-0.5 * t * t).exp()
        })
        .sum();
    let density = s / samples.len() as f64 * (-0.5 * LN_2PI).exp() / bandwidth;
    Ok(-density.max(1e-300).ln())
}

fn row_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..a.ncols() {
        let d = a[(i, c)] - b[(j, c)];
        s += d * d;
    }
    s.sqrt()
}

/// Multivariate energy score
/// `mean‖xᵢ − y‖ − (1 / 2m²) ΣΣ‖xᵢ − xⱼ‖`.
pub fn energy_score(samples: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    let (m, l) = samples.shape();
    check_samples(m)?;
    if y.len() != l {
        return Err(Error::DimensionMismatch(format!(
            "observation has length {} but samples have {l} columns",
            y.len()
        )));
    }
    let ym = DMatrix::from_row_slice(1, l, y);
    let mf = m as f64;
    let first = (0..m).map(|i| row_dist(samples, i, &ym, 0)).sum::<f64>() / mf;
    let mut pairs = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            pairs += row_dist(samples, i, samples, j);
        }
    }
    Ok((first - pairs / (mf * mf)).max(0.0))
}

/// Variogram score of order `r` with unit weights:
/// `Σ_{i<j} (|yᵢ − yⱼ|^r − mean_k |x_ki − x_kj|^r)²`.
pub fn variogram_score(samples: &DMatrix<f64>, y: &[f64], r: f64) -> Result<f64> {
    let (m, l) = samples.shape();
    check_samples(m)?;
    if l < 2 {
        return Err(Error::UnsupportedShape(format!(
            "variogram score needs at least 2 target dimensions, got {l}"
        )));
    }
    if y.len() != l {
        return Err(Error::DimensionMismatch(format!(
            "observation has length {} but samples have {l} columns",
            y.len()
        )));
    }
    let mut total = 0.0;
    for a in 0..l {
        for b in (a + 1)..l {
            let obs = (y[a] - y[b]).abs().powf(r);
            // Mean of deviations from the observed term, exact for a perfect forecast.
            let gap = samples
                .row_iter()
                .map(|row| (row[a] - row[b]).abs().powf(r) - obs)
                .sum::<f64>()
                / m as f64;
            total += gap * gap;
        }
    }
    Ok(total)
}

fn cross_sum(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let partial: Vec<f64> = (0..a.nrows())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|rows| {
            rows.iter()
                .map(|&i| (0..b.nrows()).map(|j| row_dist(a, i, b, j)).sum::<f64>())
                .sum()
        })
        .collect();
    partial.iter().sum()
}

fn within_mean(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let partial: Vec<f64> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|rows| {
            rows.iter()
                .map(|&i| ((i + 1)..n).map(|j| row_dist(a, i, a, j)).sum::<f64>())
                .sum()
        })
        .collect();
    2.0 * partial.iter().sum::<f64>() / (n * (n - 1)) as f64
}

/// Energy distance `2E‖a − b‖ − E‖a − a′‖ − E‖b − b′‖` with self-pairs
/// excluded from the within-sample means. Symmetric in its arguments
/// bit-for-bit.
pub fn energy_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_samples(a.nrows())?;
    check_samples(b.nrows())?;
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "samples have {} and {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    // Fix the summation order independently of argument order.
    let (first, second) = if canonical_le(a, b) { (a, b) } else { (b, a) };
    let cross = cross_sum(first, second) / (a.nrows() * b.nrows()) as f64;
    Ok(2.0 * cross - (within_mean(a) + within_mean(b)))
}

fn canonical_le(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    if a.nrows() != b.nrows() {
        return a.nrows() < b.nrows();
    }
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}

/// A conditional sampler under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Meta(Family),
    Ckde { standardize: bool },
}

impl Method {
    /// `gc`, `gmcm`, `tgmm`, `student-t`, `ckde` or `ckde-std`.
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ckde" => Some(Self::Ckde { standardize: false }),
            "ckde-std" => Some(Self::Ckde { standardize: true }),
            other => Family::parse(other).map(Self::Meta),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Meta(Family::GaussianCopula) => "gc",
            Self::Meta(f) => f.name(),
            Self::Ckde { standardize: false } => "ckde",
            Self::Ckde { standardize: true } => "ckde-std",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    /// Columns to predict; every other column is conditioned on.
    pub target_columns: Vec<usize>,
    pub split_frac: f64,
    pub n_samples: usize,
    pub n_splits: usize,
    /// Mixture components for GMCM and TGMM.
    pub k: usize,
    pub joint: JointConfig,
    pub ckde: CkdeOptions,
    /// Use at most this many test points per split.
    pub max_test_points: Option<usize>,
    pub kde_bandwidth: f64,
    pub variogram_order: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            target_columns: vec![0],
            split_frac: 0.8,
            n_samples: 1000,
            n_splits: 1,
            k: 2,
            joint: JointConfig::default(),
            ckde: CkdeOptions::default(),
            max_test_points: None,
            kde_bandwidth: 0.5,
            variogram_order: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointScore {
    pub split: usize,
    pub method: String,
    /// Row index of the test point in the input data.
    pub point: usize,
    pub score: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub method: String,
    pub score: &'static str,
    /// Mean over every scored test point of every split.
    pub mean: f64,
    /// Standard deviation of the per-point values.
    pub sd: f64,
    pub n: usize,
    pub split_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub method: String,
    pub split: Option<usize>,
    pub point: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMetadata {
    pub split_seeds: Vec<u64>,
    pub n_samples: usize,
    pub n_splits: usize,
    pub split_frac: f64,
    pub methods: Vec<String>,
    pub target_columns: Vec<usize>,
    pub given_columns: Vec<usize>,
}

/// Per-point scores with their aggregates. Lower scores are better.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub metadata: ReportMetadata,
    pub aggregate: Vec<Aggregate>,
    pub failures: Vec<Failure>,
    #[serde(skip)]
    pub per_point: Vec<PointScore>,
}

impl ScoreReport {
    pub fn mean(&self, method: &str, score: &str) -> Option<f64> {
        self.aggregate
            .iter()
            .find(|a| a.method == method && a.score == score)
            .map(|a| a.mean)
    }

    /// Methods with at least one scored point.
    pub fn succeeded(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for a in &self.aggregate {
            if a.n > 0 && !out.contains(&a.method.as_str()) {
                out.push(&a.method);
            }
        }
        out
    }

    /// `split,method,point,score,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,method,point,score,value\n");
        for p in &self.per_point {
            s.push_str(&format!("{},{},{},{},{}\n", p.split, p.method, p.point, p.score, p.value));
        }
        s
    }

    /// Aggregate-level JSON with metadata and failures.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn score_names(l: usize) -> [&'static str; 2] {
    if l == 1 {
        ["crps", "logs"]
    } else {
        ["es", "vs"]
    }
}

fn score_point(samples: &DMatrix<f64>, y: &[f64], cfg: &SplitConfig) -> Result<[f64; 2]> {
    if y.len() == 1 {
        let col: Vec<f64> = samples.column(0).iter().copied().collect();
        Ok([crps(&col, y[0])?, log_score_kde(&col, y[0], cfg.kde_bandwidth)?])
    } else {
        Ok([
            energy_score(samples, y)?,
            variogram_score(samples, y, cfg.variogram_order)?,
        ])
    }
}

/// Random train/test splits; every method is fitted on the training rows and
/// scored at each test row by sampling its conditional distribution of the
/// target columns given the others.
///
/// Within a split all methods share the marginal fits, the fitting seed and
/// the per-point sampling streams, so two identical methods score
/// identically. Failures are recorded and the run continues.
pub fn evaluate_split<R: Rng + ?Sized>(
    data: &DMatrix<f64>,
    methods: &[String],
    cfg: &SplitConfig,
    rng: &mut R,
) -> Result<ScoreReport> {
    let (n, d) = data.shape();
    if cfg.n_splits == 0 {
        return Err(Error::InvalidParameter("n_splits must be at least 1".into()));
    }
    if !(cfg.split_frac > 0.0 && cfg.split_frac < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "split fraction {} outside (0, 1)",
            cfg.split_frac
        )));
    }
    let target = cfg.target_columns.clone();
    if target.is_empty() || target.windows(2).any(|w| w[0] >= w[1]) || target.iter().any(|&j| j >= d) {
        return Err(Error::InvalidIndices(format!(
            "target columns {target:?} must be strictly increasing and below {d}"
        )));
    }
    let given: Vec<usize> = (0..d).filter(|j| !target.contains(j)).collect();
    if given.is_empty() {
        return Err(Error::InvalidIndices("no columns left to condition on".into()));
    }
    let n_train = ((cfg.split_frac * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
    if n_train < 20 || n - n_train < 1 {
        return Err(Error::InvalidParameter(format!(
            "{n} rows are too few for a train/test split"
        )));
    }

    let mut failures = Vec::new();
    let mut parsed = Vec::new();
    for name in methods {
        match Method::parse(name) {
            Some(m) => parsed.push((name.clone(), m)),
            None => failures.push(Failure {
                method: name.clone(),
                split: None,
                point: None,
                message: format!("unknown method {name:?}"),
            }),
        }
    }

    let mut per_point = Vec::new();
    let mut split_seeds = Vec::with_capacity(cfg.n_splits);
    for split in 0..cfg.n_splits {
        let seed: u64 = rng.random();
        split_seeds.push(seed);
        let mut srng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut srng);
        let train_rows = &perm[..n_train];
        let mut test_rows = perm[n_train..].to_vec();
        if let Some(m) = cfg.max_test_points {
            test_rows.truncate(m);
        }
        let train = data.select_rows(train_rows);
        let marginal_seed: u64 = srng.random();
        let fit_seed: u64 = srng.random();
        let sample_seed: u64 = srng.random();

        let needs_marginals = parsed.iter().any(|(_, m)| matches!(m, Method::Meta(_)));
        let marginals = if needs_marginals {
            Some(fit_marginals(&train, &cfg.joint, &mut ChaCha8Rng::seed_from_u64(marginal_seed)))
        } else {
            None
        };

        for (name, method) in &parsed {
            let sampler: std::result::Result<Sampler, Error> = match method {
                Method::Meta(family) => match marginals.as_ref().expect("fitted above") {
                    Ok(m) => fit_latent(
                        &train,
                        m.clone(),
                        *family,
                        cfg.k,
                        &cfg.joint,
                        &mut ChaCha8Rng::seed_from_u64(fit_seed),
                    )
                    .map(|(model, _)| Sampler::Meta(model)),
                    Err(e) => Err(Error::InvalidParameter(format!("marginal fit failed: {e}"))),
                },
                Method::Ckde { standardize } => Ok(Sampler::Ckde(CkdeOptions {
                    standardize: *standardize,
                    ..cfg.ckde.clone()
                })),
            };
            let sampler = match sampler {
                Ok(s) => s,
                Err(e) => {
                    failures.push(Failure {
                        method: name.clone(),
                        split: Some(split),
                        point: None,
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            let results: Vec<(usize, Result<[f64; 2]>)> = test_rows
                .par_iter()
                .map(|&row| {
                    let mut prng = ChaCha8Rng::seed_from_u64(sample_seed);
                    prng.set_stream(row as u64);
                    let x_given: Vec<f64> = given.iter().map(|&j| data[(row, j)]).collect();
                    let y: Vec<f64> = target.iter().map(|&j| data[(row, j)]).collect();
                    let req = ConditionRequest::new(given.clone(), x_given, cfg.n_samples);
                    let samples = match &sampler {
                        Sampler::Meta(model) => model.conditional_sample(&req, &mut prng),
                        Sampler::Ckde(opts) => ckde_conditional_sample(&train, &req, opts, &mut prng),
                    };
                    (row, samples.and_then(|s| score_point(&s, &y, cfg)))
                })
                .collect();
            let names = score_names(target.len());
            for (row, r) in results {
                match r {
                    Ok(values) => {
                        for (score, value) in names.iter().zip(values) {
                            per_point.push(PointScore {
                                split,
                                method: name.clone(),
                                point: row,
                                score,
                                value,
                            });
                        }
                    }
                    Err(e) => failures.push(Failure {
                        method: name.clone(),
                        split: Some(split),
                        point: Some(row),
                        message: e.to_string(),
                    }),
                }
            }
        }
    }

    let mut aggregate = Vec::new();
    for (name, _) in &parsed {
        for score in score_names(target.len()) {
            let values: Vec<&PointScore> = per_point
                .iter()
                .filter(|p| &p.method == name && p.score == score)
                .collect();
            let all: Vec<f64> = values.iter().map(|p| p.value).collect();
            let split_means = (0..cfg.n_splits)
                .map(|s| {
                    let v: Vec<f64> = values.iter().filter(|p| p.split == s).map(|p| p.value).collect();
                    if v.is_empty() {
                        f64::NAN
                    } else {
                        v.iter().sum::<f64>() / v.len() as f64
                    }
                })
                .collect();
            let (mean, sd) = mean_sd(&all);
            aggregate.push(Aggregate {
                method: name.clone(),
                score,
                mean,
                sd,
                n: all.len(),
                split_means,
            });
        }
    }

    Ok(ScoreReport {
        metadata: ReportMetadata {
            split_seeds,
            n_samples: cfg.n_samples,
            n_splits: cfg.n_splits,
            split_frac: cfg.split_frac,
            methods: methods.to_vec(),
            target_columns: target,
            given_columns: given,
        },
        aggregate,
        failures,
        per_point,
    })
}

enum Sampler {
    Meta(MetaModel),
    Ckde(CkdeOptions),
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
