//! Extreme-value distributions and the point-process likelihood.

pub mod bgev;
pub mod gev;
pub mod pp;
pub mod special;

pub use bgev::{bgev_cdf, bgev_logpdf, bgev_quantile, blend_derived, BGevConfig, BlendDerived, BlendFrame, LOG_ZERO};
pub use gev::{
    classic_to_reparam, gev_cdf, gev_logpdf, gev_quantile, gpd_cdf, gpd_quantile, gumbel_cdf, gumbel_quantile,
    reparam_to_classic, GevParams, GpdParams, QuantileParams,
};
pub use pp::{pp_nll, pp_nll_with_grad, PpContext, PpTheta, PpVariant};
