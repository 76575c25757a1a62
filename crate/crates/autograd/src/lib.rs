//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Operations are recorded on a [`Tape`] through [`Var`] handles; a single
//! reverse sweep from a scalar loss yields gradients for every leaf created
//! with [`Tape::variable`].
//!
//! ```
//! use rmot_autograd::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.variable(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(&x).unwrap().item(), 6.0);
//! ```

mod error;
mod gradcheck;
mod tape;
mod tensor;

pub use error::{AutogradError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP};
pub use tape::{CustomOp, Elementwise, Gradients, ReduceKind, Tape, Var, COSINE_EPS};
pub use tensor::Tensor;
