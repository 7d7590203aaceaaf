//! Tangent-bundle importance upsampling of Markov chains on manifolds
//! embedded in a Gaussian ambient space.
//!
//! A short base chain on the parameter space is expanded into `n·m`
//! weighted samples by drawing Gaussian mini-distributions in the tangent
//! space at each base point and correcting with closed-form weights.

pub mod basechain;
pub mod compactness;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod examples;
pub mod exec;
pub mod geometry;
pub mod pipeline;
pub mod rng;
pub mod upsampler;

pub use basechain::{build_base_chain, metropolis_hastings, BaseChainEntry, ChainConfig, TargetDensity};
pub use config::{load_config, RunConfig};
pub use compactness::{CompactnessConfig, CompactnessMode, SamplingRegion};
pub use error::{Error, Result};
pub use evaluation::{hellinger, weighted_histogram, HistogramND};
pub use exec::Execution;
pub use geometry::{AmbientGaussian, Embedding, FnEmbedding, GeometryAtPoint, Hessian, ManifoldModel};
pub use upsampler::{upsample, UpsampleConfig, Upsampled, WeightedSample};
pub use pipeline::{execute, run, upsample_post_hoc, RunReport};
