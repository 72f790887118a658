//! Partition-of-unity mixtures of spectral operator experts on arbitrary
//! domains: a small reverse-mode tape, pseudo-spectral operators on the
//! torus, H¹ smooth extension of embedded-domain data, MOR-style operator
//! experts blended by a gating network, deterministic and variational
//! training, and the synthetic data generators used by the exemplars.

pub mod datagen;
pub mod dataset;
pub mod error;
pub mod experts;
pub mod extension;
pub mod gating;
pub mod io;
pub mod model;
pub mod nn;
pub mod spectral;
pub mod fft;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{NodeId, ParamStore, Tape};
pub use tensor::Tensor;
