//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every forward op together with what its backward rule
//! needs. Values are immutable once recorded; gradients accumulate on the
//! tape and are read back per [`Var`]. Every op rejects non-finite output.
//!
//! ```
//! use gtcn_core::diffcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.hadamard(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item(), 6.0);
//! ```

mod gradcheck;
mod sparse;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use sparse::SparseRows;
pub use tape::{Tape, Var, VjpFn};
pub use tensor::Tensor;
