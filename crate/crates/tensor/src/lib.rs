//! Reverse-mode automatic differentiation over dense `f64` tensors, with an
//! Adam optimiser and a small binary checkpoint format.
//!
//! ```
//! use buildiff_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(&Tensor::vector(vec![3.0]));
//! let zero = tape.constant(Tensor::zeros(&[1]));
//! let loss = tape.mse(w, zero).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap(), &[6.0]);
//! ```

mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use error::{Result, TensorError};
pub use gradcheck::finite_diff_grad;
pub use params::{BoundParams, ParamStore};
pub use tape::{DiffTensor, NodeId, OpKind, Tape, Var, PAD_ROW};
pub use tensor::Tensor;
