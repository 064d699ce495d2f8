//! Speaker diarisation with combined deep speaker embeddings.
//!
//! The pipeline runs neural voice activity detection, neural change point
//! detection, window-level speaker embedding extraction (single systems or
//! any of their combination structures), spectral clustering, and NIST-style
//! diarisation scoring. All numeric kernels are generic over the scalar
//! type; the pipeline itself runs in double precision via the aliases below.

pub mod clustering;
pub mod combination;
pub mod config;
pub mod features;
pub mod gradcheck;
pub mod nets;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod pooling;
pub mod scalar;
pub mod scoring;
pub mod segmentation;
pub mod selftest;
pub mod synth;
pub mod system;
pub mod timeline;
pub mod training;

pub use scalar::Scalar;

/// Double-precision tensor used throughout the pipeline.
pub type Tensor = numerics::Tensor<f64>;
/// Double-precision gradient tape.
pub type Tape = numerics::Tape<f64>;
/// Double-precision parameter store.
pub type ParamStore = params::ParamStore<f64>;
