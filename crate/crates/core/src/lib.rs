//! Desk-scale laboratory for locating and manipulating importance-ranked
//! parameter regions in a micro decoder-only language model.
//!
//! The pipeline: generate synthetic languages ([`corpus`]), pre-train a
//! micro transformer ([`model`], [`trainer`]), accumulate first-order
//! parameter importance during per-language further pre-training
//! ([`importance`]), carve the scores into regions and operate on them
//! ([`regions`]), and drive the named experiments from the CLI
//! ([`experiment`], [`viz`]).

pub mod artifact;
pub mod config;
pub mod corpus;
pub mod experiment;
pub mod importance;
pub mod model;
pub mod regions;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use model::{MatrixId, MatrixKind, ModelConfig, ParamCoord, ParameterStore};
pub use tensor::{Real, Tape, TensorId};
