//! Dense `f64` tensors with tape-based reverse-mode gradients, Adam, and a
//! small binary checkpoint container.
//!
//! ```
//! use ptmtok_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let loss = tape.sum(w);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use optim::{adam_step, OptimState, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
