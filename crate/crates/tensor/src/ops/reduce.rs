use crate::error::{Result, TensorError};
use crate::ops::{grad_of, split_axis};
use crate::scalar::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    out
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::AxisOutOfRange { op, axis, rank });
    }
    Ok(())
}

impl<'t, T: Real> Var<'t, T> {
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        let out = Tensor::scalar(self.value.sum());
        self.tape.record(&[self], out, move |g| {
            vec![Some(Tensor::full(shape, g.data()[0]))]
        })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        check_axis("sum_axis", axis, self.rank())?;
        let shape = self.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..][..inner];
                for (d, &s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let out = Tensor::from_parts(reduced_shape(&shape, axis, keepdim), out);
        Ok(self.tape.record(&[self], out, move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    dx[(o * len + l) * inner..][..inner].copy_from_slice(&gd[o * inner..][..inner]);
                }
            }
            vec![grad_of(&shape, dx)]
        }))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        check_axis("mean_axis", axis, self.rank())?;
        let len = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len))
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        check_axis("max_axis", axis, self.rank())?;
        let shape = self.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value.data();
        let mut out = vec![T::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = x[(o * len + l) * inner + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        arg[slot] = l;
                    }
                }
            }
        }
        let out = Tensor::from_parts(reduced_shape(&shape, axis, keepdim), out);
        Ok(self.tape.record(&[self], out, move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    dx[(o * len + arg[slot]) * inner + i] = gd[slot];
                }
            }
            vec![grad_of(&shape, dx)]
        }))
    }
}
