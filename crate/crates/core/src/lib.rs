//! Conditional density estimation with meta models built from families that
//! stay closed under marginalization and conditioning.
//!
//! Data are mapped to a latent space through fitted marginal CDFs and the
//! implicit marginal quantiles of a latent family (Gaussian mixture copula,
//! Gaussian copula, transformed GMM, or Student-t). Conditioning happens in
//! closed form in that space and draws are mapped back to the data scale.

pub mod elliptical;
pub mod em;
pub mod error;
pub mod gaussian;
pub mod gmcm;
pub mod marginals;
pub mod mixture;
pub mod pipeline;
pub mod scenarios;
pub mod scoring;
pub mod special;
pub mod stats;

pub use em::{em_fit, EmConfig, EmFit, EmInit};
pub use error::{Error, Result};
pub use gaussian::{cholesky, Cholesky, GaussianParams, IndexSplit};
pub use marginals::{
    fit_marginal_aic, gmm_cdf, gmm_quantile, pseudo_observations, EmpiricalCdf, MarginKind,
    MarginalModel, UnivariateMixture,
};
pub use mixture::Mixture;
pub use elliptical::{
    sun_condition, sun_logpdf_mc, sun_marginalize, sun_sample, t_condition, t_logpdf,
    t_marginalize, t_sample, StudentTParams, SunParams, SunSample,
};
pub use gmcm::{
    compare_fitters, fit_gmcm, gmcm_grad, gmcm_loglik, standardize, FitMethod, FitOptions,
    GmcmFit, GmcmParams, UnconstrainedGmcm,
};
pub use pipeline::{
    ckde_conditional_sample, fit_joint, CkdeOptions, ConditionRequest, ConditionalLatent, Family,
    JointConfig, LatentFamily, MetaModel,
};
pub use scenarios::Scenario;
pub use scoring::{
    crps, energy_distance, energy_score, evaluate_split, log_score_kde, variogram_score, Method,
    ScoreReport, SplitConfig,
};
