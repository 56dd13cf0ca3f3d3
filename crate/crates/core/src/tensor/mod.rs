//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every array-valued computation in the crate runs on [`Tensor`] handles
//! attached to a [`Tape`]. The tape records each executed operation in
//! order; [`Tensor::backward`] replays it in exact reverse order to fill
//! gradients. Compute dtype is selectable: `f32` for training, `f64` for
//! finite-difference gradient checking.

mod gradcheck;
mod ops;
pub mod pvt1;
mod tape;

pub use gradcheck::{grad_check, standard_op_checks, OpCheck};
pub use tape::{Tape, Tensor};

use crate::error::{Error, Result};

/// Scalar dtype of a tensor payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    /// Wire code used by the PVT1 binary format.
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            c => Err(Error::domain(format!("unknown dtype code {c}"))),
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element of a tensor: `f32` or `f64`.
pub trait Element:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
