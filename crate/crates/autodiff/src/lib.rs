//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves are registered with
//! [`Tape::leaf`] (trainable) or [`Tape::constant`], primitive operations
//! append nodes, and [`Tape::backward`] consumes the tape and returns the
//! accumulated [`Gradients`].
//!
//! ```
//! use eanet_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
//! ```

pub mod check;
mod conv;
mod error;
mod linalg;
mod shape;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
