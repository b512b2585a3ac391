//! Numerical toolkit for weighted Bergman kernels on the unit ball of C^n, directional
//! Lelong numbers of plurisubharmonic weights, and BMO / John-Nirenberg / A_p statistics
//! over nonisotropic ball families.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bergman;
pub mod error;
pub mod experiment;
pub mod fit;
pub mod geometry;
pub mod linalg;
pub mod oscillation;
pub mod quadrature;
pub mod riesz;
pub mod rng;
pub mod weights;

pub use error::{Error, Result};
