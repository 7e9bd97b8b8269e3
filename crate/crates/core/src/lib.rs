//! Allocation-only core of the medas pipeline platform.
//!
//! Everything in this crate is a pure function of its inputs: the pipeline
//! graph model and its port type lattice, the `MDT1` tensor container, the
//! image-processing and metric kernels, the desk-scale pixel classifier,
//! the resource-quota scheduler state machine and the Bayesian
//! hyper-parameter optimizer. Filesystem, process and network concerns live
//! in the `medas` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod classifier;
pub mod dataset;
pub mod either;
pub mod graph;
pub mod hpo;
pub mod image;
pub mod metrics;
pub mod scheduler;
pub mod semantic;
pub mod stain;
pub mod synthetic;
pub mod table;
pub mod tensor;

mod canonical;
mod linalg;

pub use canonical::{canonical_json, sha256_hex};
pub use semantic::{coerce, ArtifactRef, CoercionError, MediaType, SemanticType, Value};
