use crate::error::{Result, TensorError};
use crate::ops::{grad_of, split_axis};
use crate::scalar::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, T: Real> Var<'t, T> {
    /// Exp-normalizes along `axis` after subtracting the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[idx(l)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for l in 0..len {
                    let e = (x[idx(l)] - max).exp();
                    y[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    y[idx(l)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(shape.clone(), y);
        let saved = out.clone();
        Ok(self.tape.record(&[self], out, move |g| {
            let (y, gd) = (saved.data(), g.data());
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let dot: T = (0..len).map(|l| gd[idx(l)] * y[idx(l)]).sum();
                    for l in 0..len {
                        dx[idx(l)] = y[idx(l)] * (gd[idx(l)] - dot);
                    }
                }
            }
            vec![grad_of(&shape, dx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn closed_form_pair() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_f64([2], &[0.0, 3f64.ln()]).unwrap());
        let y = x.softmax(0).unwrap().value().to_f64_vec();
        assert!((y[0] - 0.25).abs() < 1e-12 && (y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn uniform_input() {
        let tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::full([4], 1.3));
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.25; 4]);
    }

    #[test]
    fn middle_axis_slices_sum_to_one() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_fn([2, 3, 2], |i| (i as f64 * 0.7).sin() * 5.0));
        let y = x.softmax(1).unwrap();
        let s = y.sum_axis(1, false).unwrap();
        for v in s.value().data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
