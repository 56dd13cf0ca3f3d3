//! Joint point-cloud + multi-view 3D shape recognition.
//!
//! A self-contained stack: a reverse-mode tape autodiff core, mesh ingestion
//! (OFF parsing, surface sampling, view rendering), the two recognition
//! branches, attention-gated fusion of the two, and training, evaluation,
//! and retrieval drivers on top.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod point_branch;
pub mod runner;
pub mod tensor;
pub mod train;
pub mod view_branch;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Tape, Tensor};
