//! Dirichlet-process Gaussian mixture with a conjugate normal–inverse-Wishart
//! base measure.
//!
//! A class is summarized by its sufficient statistics; its posterior
//! predictive is a multivariate student-t. The CRP prior and the predictive
//! combine into the one-record class posterior that both online inference
//! engines use.

mod hyper;
mod model;
mod predictive;
mod stats;

pub use hyper::{estimate_hyperparams, HyperConfig, NIWHyper, Sigma0Scale};
pub(crate) use model::mint_novel_label;
pub use model::{
    combine_posterior, crp_log_weights_for, is_novel_label, novel_label, posterior_for, ClassPosterior, CrpLogWeights,
    ModelState, Outcome, NOVEL_PREFIX,
};
pub use predictive::{log_predictive, predictive_params, studentt_logpdf, PredictiveParams};
pub use stats::ClassStats;
