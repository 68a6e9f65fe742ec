//! Dense tensors with an explicit reverse-mode tape.
//!
//! ```
//! use rainforge_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(&x).unwrap().sum();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap().to_f64_vec(), vec![2.0, 4.0, 6.0]);
//! ```

mod error;
pub mod gradcheck;
pub mod io;
mod ops;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_with, compare_gradients, finite_difference_check, FdConfig, FdReport};
pub use ops::conv2d_output_extent;
pub use rng::{Rng, RngState};
pub use scalar::{DType, Real};
pub use tape::{Backward, Gradients, NodeId, Param, ParamId, Tape, Var};
pub use tensor::{numel, strides_of, Tensor};
