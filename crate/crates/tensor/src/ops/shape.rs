use crate::error::{Result, TensorError};
use crate::ops::{grad_of, split_axis};
use crate::scalar::Real;
use crate::tape::Var;
use crate::tensor::{gather_strided, numel, scatter_add_strided, strides_of, Tensor};

impl<'t, T: Real> Var<'t, T> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let out = self.value.reshape(shape)?;
        let src = self.shape().to_vec();
        Ok(self.tape.record(&[self], out, move |g| vec![g.reshape(src).ok()]))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value.permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.tape.record(&[self], out, move |g| vec![g.permute(&inverse).ok()]))
    }

    /// Repeats singleton extents to `shape` (same rank).
    pub fn expand(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        let src = self.shape().to_vec();
        if src.len() != shape.len() || src.iter().zip(&shape).any(|(&s, &d)| s != d && s != 1) {
            return Err(TensorError::mismatch("expand", &src, &shape));
        }
        let strides: Vec<usize> = strides_of(&src)
            .into_iter()
            .zip(&src)
            .map(|(st, &s)| if s == 1 { 0 } else { st })
            .collect();
        let out = Tensor::from_parts(shape.clone(), gather_strided(self.value.data(), &shape, &strides));
        Ok(self.tape.record(&[self], out, move |g| {
            let mut dx = vec![T::zero(); numel(&src)];
            scatter_add_strided(g.data(), &mut dx, &shape, &strides);
            vec![grad_of(&src, dx)]
        }))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} exceeds extent {} of axis {axis}", start + len, shape[axis]),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let x = self.value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x[(o * full + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.tape.record(&[self], out, move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                dx[(o * full + start) * inner..][..len * inner].copy_from_slice(&gd[o * len * inner..][..len * inner]);
            }
            vec![grad_of(&shape, dx)]
        }))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no operands"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { op: "concat", axis, rank });
        }
        for p in &parts[1..] {
            let compatible = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::mismatch("concat", first.shape(), p.shape()));
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.value.data()[o * l * inner..][..l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let out = Tensor::from_parts(shape.clone(), data);
        let tracked: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(first.tape.record(parts, out, move |g| {
            let gd = g.data();
            let mut offset = 0;
            lens.iter()
                .zip(&tracked)
                .map(|(&l, &t)| {
                    let start = offset;
                    offset += l;
                    t.then(|| {
                        let mut d = Vec::with_capacity(outer * l * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[(o * total + start) * inner..][..l * inner]);
                        }
                        let mut s = shape.clone();
                        s[axis] = l;
                        Tensor::from_parts(s, d)
                    })
                })
                .collect()
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor, Var};

    #[test]
    fn concat_axis_out_of_range() {
        let tape = Tape::<f32>::inference();
        let a = tape.constant(Tensor::ones([2, 2]));
        assert!(Var::concat(&[&a, &a], 2).is_err());
        let b = tape.constant(Tensor::ones([3, 3]));
        assert!(Var::concat(&[&a, &b], 0).is_err());
    }

    #[test]
    fn expand_grad_sums() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2, 1], &[1.0, 2.0]).unwrap());
        let y = x.expand([2, 3]).unwrap();
        assert_eq!(y.value().to_f64_vec(), vec![1., 1., 1., 2., 2., 2.]);
        let g = tape.backward(&y.sum()).unwrap();
        assert_eq!(g.get(&x).unwrap().to_f64_vec(), vec![3.0, 3.0]);
    }
}
