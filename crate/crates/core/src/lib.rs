//! Domain-specific suppression laboratory.
//!
//! A gradient-projection optimizer that strips the component of each update
//! lying along the current weight, its Frobenius weight-normalization special
//! case, a small convolutional domain-adaptation harness, and diagnostics for
//! per-layer gradient statistics. Everything runs in double precision on the
//! CPU with deterministic summation order.
//!
//! ```
//! use dss_lab::optim::{dss_step, DssConfig, ParamState, WeightMode};
//! use dss_lab::tensor::Tensor;
//!
//! let mut p = ParamState::new(Tensor::from_slice(&[3.0, 4.0]), WeightMode::Dss).unwrap();
//! p.grad = Tensor::from_slice(&[1.0, 0.0]);
//! let cfg = DssConfig { lambda: 1.0, lr: 0.1, ..DssConfig::default() };
//! dss_step(&mut p, &cfg).unwrap();
//! assert!((p.weight.data()[0] - 2.936).abs() < 1e-12);
//! assert!((p.weight.data()[1] - 4.048).abs() < 1e-12);
//! ```

pub mod analysis;
pub mod equivalence;
pub mod error;
pub mod nn;
pub mod optim;
pub mod svd;
pub mod tensor;
pub mod uda;
pub mod verify;

#[cfg(doctest)]
mod book;

pub use error::{Error, Result};
pub use tensor::Tensor;
