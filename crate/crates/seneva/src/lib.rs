//! SeNeVA: a variational Bayes mixture model for single-agent trajectory
//! prediction with uncertainty quantification.
//!
//! The crate covers the full pipeline: scene representation and
//! normalization ([`scene`]), synthetic multimodal datasets ([`synthetic`]),
//! scene feature encoding ([`encoder`]), the K-component sequential latent
//! mixture ([`mixture`]), ELBO/focal training ([`training`]), NMS destination
//! sampling with backward completion ([`sampling`]), and entropy/displacement
//! metrics ([`evaluation`]).

pub mod autodiff;
pub mod encoder;
pub mod evaluation;
pub mod mixture;
pub mod nn;
pub mod sampling;
pub mod scene;
pub mod synthetic;
pub mod training;
