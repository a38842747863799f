//! Generation under distributional control for small discrete autoregressive
//! models.
//!
//! The pipeline: describe the desired behaviour as feature constraints
//! ([`scorers`]), turn them into an energy-based target ([`ebm`]), fine-tune a
//! tractable autoregressive model toward that target ([`tuner`]), and optionally
//! sharpen its samples with quasi-rejection sampling ([`qrs`]). Because every
//! model here lives on a finite sequence space, [`oracle`] can compute the exact
//! value of everything the stochastic estimators approximate.

pub mod ebm;
pub mod error;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod qrs;
pub mod scorers;
pub mod snis;
pub mod tuner;

pub use ebm::{constrain, fit_lambda, rlhf_target, ContextDistribution, EbmForm, EbmTarget, LambdaFitConfig};
pub use error::{Error, Result};
pub use model::{AutoregressiveModel, Conditioning, Context, ModelKind, ModelSpec, Scorer, Sequence, Vocab};
pub use qrs::{qrs_estimate, qrs_sample, QrsConfig};
pub use scorers::{ConstraintSpec, Feature, FeatureKind, FeatureSpec};
pub use tuner::{ProposalPolicy, Tuner, TunerConfig};


