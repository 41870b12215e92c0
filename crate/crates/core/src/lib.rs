//! Ontology-conditioned progressive GAN (O-GAN) at desk scale.
//!
//! The crate bundles a small autodiff engine ([`tensor`]), the conditioning
//! inputs ([`ontology`], [`textemb`]), a synthetic hierarchical dataset
//! ([`synthdata`]), the text-to-label bridge ([`labelnet`]), the models
//! ([`gan`]) and their objectives ([`losses`]), the progressive training
//! loop ([`trainer`]) and the evaluation measures ([`metrics`]).

pub mod checkpoint;
pub mod error;
pub mod gan;
pub mod labelnet;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod ontology;
pub mod synthdata;
pub mod tensor;
pub mod textemb;
pub mod trainer;

pub use error::{Error, Result};
