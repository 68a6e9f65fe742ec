//! Differentiable operations on [`Var`](crate::Var).
//!
//! Binary elementwise ops broadcast only along leading singleton extents:
//! the smaller operand's shape, left-padded with ones, must match the larger
//! one after its leading run of ones. Anything else goes through an explicit
//! [`Var::expand`].

mod conv;
mod elementwise;
mod image;
mod linalg;
mod matmul;
mod norm;
mod reduce;
mod shape;
mod softmax;

pub use conv::conv2d_output_extent;

use crate::scalar::Real;
use crate::tensor::Tensor;

/// Sums `full` blockwise down to `n` elements (adjoint of cyclic repetition).
pub(crate) fn fold_repeated<T: Real>(full: &[T], n: usize) -> Vec<T> {
    if full.len() == n {
        return full.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for chunk in full.chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn grad_of<T: Real>(shape: &[usize], data: Vec<T>) -> Option<Tensor<T>> {
    Some(Tensor::from_parts(shape.to_vec(), data))
}
