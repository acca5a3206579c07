//! Discrete unbalanced optimal transport between matrix-valued measures on
//! simplicial meshes: fields, operators, actions, a primal-dual solver and
//! closed-form reference values.
#![no_std]
#![allow(clippy::needless_range_loop)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod action;
pub mod analytic;
pub mod measure;
pub mod mesh;
pub mod operators;
pub mod quadrature;
pub mod solver;
pub mod spaces;
