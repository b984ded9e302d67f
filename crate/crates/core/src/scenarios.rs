//! Synthetic data-generating configurations used in experiments and tests.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::Result;
use crate::gaussian::GaussianParams;
use crate::marginals::UnivariateMixture;
use crate::mixture::Mixture;
use crate::special::norm_ppf;

/// Two-component bivariate mixture with a closed-form conditional of the
/// first coordinate given the second.
pub fn gmm_scenario() -> Mixture {
    Mixture::new(
        vec![0.3, 0.7],
        vec![
            GaussianParams::from_slices(&[4.0, 2.0], &[2.0, 1.0, 1.0, 1.0]).unwrap(),
            GaussianParams::from_slices(&[-2.0, 1.0], &[1.0, 0.5, 0.5, 1.0]).unwrap(),
        ],
    )
    .unwrap()
}

/// Bivariate copula configuration used for fitter comparisons.
pub fn gmcm_2d() -> Mixture {
    Mixture::new(
        vec![0.45, 0.55],
        vec![
            GaussianParams::from_slices(&[5.15, 4.32], &[5.6, 2.3, 2.3, 8.27]).unwrap(),
            GaussianParams::from_slices(&[-20.07, 3.04], &[3.35, 1.0, 1.0, 1.16]).unwrap(),
        ],
    )
    .unwrap()
}

/// Trivariate copula configuration used for fitter comparisons. The first
/// covariance is symmetrized on its (1,3) entry.
pub fn gmcm_3d() -> Mixture {
    Mixture::new(
        vec![0.69, 0.163, 0.147],
        vec![
            GaussianParams::from_slices(
                &[1.19, 5.63, -9.67],
                &[
                    2.26, 1.33, -1.163544, //
                    1.33, 2.71, -1.36, //
                    -1.163544, -1.36, 3.78,
                ],
            )
            .unwrap(),
            GaussianParams::from_slices(
                &[-6.75, 12.04, -8.44],
                &[
                    12.24, 4.14, -3.87, //
                    4.14, 10.33, 2.76, //
                    -3.87, 2.76, 16.45,
                ],
            )
            .unwrap(),
            GaussianParams::from_slices(
                &[-5.92, -4.0, 2.58],
                &[
                    3.19, -0.38, 0.54, //
                    -0.38, 0.76, -0.02, //
                    0.54, -0.02, 1.01,
                ],
            )
            .unwrap(),
        ],
    )
    .unwrap()
}

/// Map each column of a latent mixture sample through its own margin CDF.
pub fn to_uniform(m: &Mixture, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let margins: Vec<UnivariateMixture> = (0..m.dim())
        .map(|j| UnivariateMixture::from_margin(m, j))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
        margins[j].cdf(z[(i, j)])
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Raw draws from [`gmm_scenario`].
    Gmm,
    /// Same copula as [`Scenario::Gmm`] with standard-normal margins.
    MetaGmm,
    /// Copula sample (uniform margins) of [`gmcm_2d`].
    Gmcm2d,
    /// Copula sample (uniform margins) of [`gmcm_3d`].
    Gmcm3d,
}

impl Scenario {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "gmm" => Some(Self::Gmm),
            "meta-gmm" => Some(Self::MetaGmm),
            "gmcm-2d" => Some(Self::Gmcm2d),
            "gmcm-3d" => Some(Self::Gmcm3d),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gmm => "gmm",
            Self::MetaGmm => "meta-gmm",
            Self::Gmcm2d => "gmcm-2d",
            Self::Gmcm3d => "gmcm-3d",
        }
    }

    pub fn mixture(self) -> Mixture {
        match self {
            Self::Gmm | Self::MetaGmm => gmm_scenario(),
            Self::Gmcm2d => gmcm_2d(),
            Self::Gmcm3d => gmcm_3d(),
        }
    }

    pub fn column_names(self) -> Vec<String> {
        let prefix = match self {
            Self::Gmm | Self::MetaGmm => "x",
            Self::Gmcm2d | Self::Gmcm3d => "u",
        };
        (1..=self.mixture().dim()).map(|j| format!("{prefix}{j}")).collect()
    }

    pub fn generate<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let m = self.mixture();
        let z = m.sample(n, rng)?;
        match self {
            Self::Gmm => Ok(z),
            Self::MetaGmm => Ok(to_uniform(&m, &z)?.map(norm_ppf)),
            Self::Gmcm2d | Self::Gmcm3d => to_uniform(&m, &z),
        }
    }
}
