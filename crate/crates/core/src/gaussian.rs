//! Dense SPD linear algebra and closed-form Gaussian marginalization and
//! conditioning.
//!
//! Every covariance solve goes through a Cholesky factor; no explicit
//! inverse is formed outside [`Cholesky::inverse`], which is only used by the
//! copula gradient where the full precision matrix is genuinely needed.
//! There is no automatic jitter: callers that want regularization pass an
//! explicit `ridge` to [`Cholesky::with_ridge`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::special::LN_2PI;

const PIVOT_FLOOR: f64 = 1e-300;

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        Self::with_ridge(m, 0.0)
    }

    /// Factor `m + ridge·I`.
    pub fn with_ridge(m: &DMatrix<f64>, ridge: f64) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "cholesky of a {}x{} matrix",
                n,
                m.ncols()
            )));
        }
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut pivot = m[(j, j)] + ridge;
            for k in 0..j {
                pivot -= l[(j, k)] * l[(j, k)];
            }
            if !(pivot > PIVOT_FLOOR) {
                return Err(Error::NotPositiveDefinite { index: j, pivot });
            }
            let ljj = pivot.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    /// Wrap an existing lower-triangular factor with positive diagonal.
    pub fn from_factor(l: DMatrix<f64>) -> Result<Self> {
        for j in 0..l.nrows() {
            if !(l[(j, j)] > 0.0) {
                return Err(Error::NotPositiveDefinite {
                    index: j,
                    pivot: l[(j, j)],
                });
            }
        }
        Ok(Self { l })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn into_factor(self) -> DMatrix<f64> {
        self.l
    }

    /// `log |A| = 2 Σ log Lᵢᵢ`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }

    /// Forward substitution `L y = b`, in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Back substitution `Lᵀ x = y`, in place.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solve `A x = b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_lower_in_place(x.as_mut_slice());
        self.solve_upper_in_place(x.as_mut_slice());
        x
    }

    /// Solve `A X = B` column by column.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            let s = col.as_mut_slice();
            self.solve_lower_in_place(s);
            self.solve_upper_in_place(s);
        }
        x
    }

    /// `dᵀ A⁻¹ d` via one triangular solve.
    pub fn mahalanobis_sq(&self, diff: &[f64]) -> f64 {
        let d = diff.len();
        let mut stack = [0.0; 8];
        let mut heap;
        let y: &mut [f64] = if d <= stack.len() {
            &mut stack[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        y.copy_from_slice(diff);
        self.solve_lower_in_place(y);
        y.iter().map(|v| v * v).sum()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_mat(&DMatrix::identity(self.dim(), self.dim()))
    }

    /// Reconstruct `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

/// Lower-triangular factor of a symmetric positive-definite matrix.
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(m).map(Cholesky::into_factor)
}

/// Check symmetry to a tolerance relative to the largest entry.
pub(crate) fn check_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return Err(Error::InvalidParameter(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    m[(i, j)],
                    m[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Validate a strictly increasing, in-range index list.
pub(crate) fn check_indices(idx: &[usize], d: usize, what: &str) -> Result<()> {
    for w in idx.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidIndices(format!(
                "{what} indices must be strictly increasing: {idx:?}"
            )));
        }
    }
    if let Some(&last) = idx.last() {
        if last >= d {
            return Err(Error::InvalidIndices(format!(
                "{what} index {last} out of range for dimension {d}"
            )));
        }
    }
    Ok(())
}

pub(crate) fn select_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub(crate) fn select_block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// A target/given partition of coordinate indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSplit {
    target: Vec<usize>,
    given: Vec<usize>,
}

impl IndexSplit {
    pub fn new(target: Vec<usize>, given: Vec<usize>, d: usize) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::InvalidIndices("target set is empty".into()));
        }
        check_indices(&target, d, "target")?;
        check_indices(&given, d, "given")?;
        if target.iter().any(|t| given.contains(t)) {
            return Err(Error::InvalidIndices(format!(
                "target {target:?} and given {given:?} overlap"
            )));
        }
        Ok(Self { target, given })
    }

    /// Condition on `given`; the target is every remaining coordinate.
    pub fn complement(given: Vec<usize>, d: usize) -> Result<Self> {
        check_indices(&given, d, "given")?;
        let target = (0..d).filter(|i| !given.contains(i)).collect();
        Self::new(target, given, d)
    }

    pub fn target(&self) -> &[usize] {
        &self.target
    }

    pub fn given(&self) -> &[usize] {
        &self.given
    }
}

/// Mean and covariance of a multivariate normal.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianParams {
    /// Validates shape and symmetry. Positive definiteness is checked lazily
    /// by the operations that factor the covariance.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        check_symmetric(&cov, 1e-12)?;
        Ok(Self { mean, cov })
    }

    pub fn from_slices(mean: &[f64], cov_row_major: &[f64]) -> Result<Self> {
        let d = mean.len();
        if cov_row_major.len() != d * d {
            return Err(Error::DimensionMismatch(format!(
                "covariance needs {} entries, got {}",
                d * d,
                cov_row_major.len()
            )));
        }
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_row_slice(d, d, cov_row_major),
        )
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn factor(&self) -> Result<Cholesky> {
        Cholesky::new(&self.cov)
    }

    /// Log density, evaluated through the Cholesky factor.
    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        let chol = self.factor()?;
        self.logpdf_with(&chol, x)
    }

    /// Log density with a precomputed factor of `self.cov()`.
    pub fn logpdf_with(&self, chol: &Cholesky, x: &[f64]) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "point has length {} but distribution has dimension {d}",
                x.len()
            )));
        }
        let diff: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, b)| a - b).collect();
        let q = chol.mahalanobis_sq(&diff);
        Ok(-0.5 * (d as f64 * LN_2PI + chol.log_det() + q))
    }

    /// Marginal over the coordinates in `keep` (strictly increasing).
    pub fn marginalize(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::InvalidIndices("cannot marginalize to zero coordinates".into()));
        }
        check_indices(keep, self.dim(), "keep")?;
        Ok(Self {
            mean: select_vec(&self.mean, keep),
            cov: select_block(&self.cov, keep, keep),
        })
    }

    /// Conditional law of `split.target()` given `split.given() = x_given`.
    ///
    /// Coordinates are permuted into `[target, given]` blocks once; the block
    /// formulas `μ₁ + Σ₁₂Σ₂₂⁻¹(x₂−μ₂)` and `Σ₁₁ − Σ₁₂Σ₂₂⁻¹Σ₂₁` then apply.
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
        let parts = ConditionParts::new(self, t, g)?;
        Ok(parts.apply(x_given))
    }

    /// Draw `n` rows `μ + L z`, `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let chol = self.factor()?;
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        let mut z = vec![0.0; d];
        for i in 0..n {
            self.draw_into(&chol, rng, &mut z, |j, v| out[(i, j)] = v);
        }
        Ok(out)
    }

    pub(crate) fn draw_into<R: Rng + ?Sized>(
        &self,
        chol: &Cholesky,
        rng: &mut R,
        z: &mut [f64],
        mut sink: impl FnMut(usize, f64),
    ) {
        let d = self.dim();
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let l = chol.l();
        for r in 0..d {
            let mut s = self.mean[r];
            for c in 0..=r {
                s += l[(r, c)] * z[c];
            }
            sink(r, s);
        }
    }
}

/// Precomputed pieces of a conditioning split, reusable across many
/// conditioning values.
pub(crate) struct ConditionParts {
    mean_t: DVector<f64>,
    mean_g: DVector<f64>,
    /// `Σ₁₂ Σ₂₂⁻¹` (ℓ × m).
    regression: DMatrix<f64>,
    cond_cov: DMatrix<f64>,
    chol_gg: Cholesky,
}

impl ConditionParts {
    pub(crate) fn new(p: &GaussianParams, t: &[usize], g: &[usize]) -> Result<Self> {
        let s_tg = select_block(&p.cov, t, g);
        let s_gg = select_block(&p.cov, g, g);
        let chol_gg = Cholesky::new(&s_gg)?;
        // Σ₂₂⁻¹ Σ₂₁, then transpose.
        let solved = chol_gg.solve_mat(&s_tg.transpose());
        let regression = solved.transpose();
        let mut cond_cov = select_block(&p.cov, t, t) - &s_tg * &solved;
        symmetrize(&mut cond_cov);
        Ok(Self {
            mean_t: select_vec(&p.mean, t),
            mean_g: select_vec(&p.mean, g),
            regression,
            cond_cov,
            chol_gg,
        })
    }

    pub(crate) fn apply(&self, x_given: &[f64]) -> GaussianParams {
        let diff = DVector::from_iterator(
            x_given.len(),
            x_given.iter().zip(self.mean_g.iter()).map(|(a, b)| a - b),
        );
        GaussianParams {
            mean: &self.mean_t + &self.regression * diff,
            cov: self.cond_cov.clone(),
        }
    }

    /// Squared Mahalanobis distance of `x_given` under the given-block marginal.
    pub(crate) fn given_mahalanobis_sq(&self, x_given: &[f64]) -> f64 {
        let diff: Vec<f64> = x_given
            .iter()
            .zip(self.mean_g.iter())
            .map(|(a, b)| a - b)
            .collect();
        self.chol_gg.mahalanobis_sq(&diff)
    }
}
