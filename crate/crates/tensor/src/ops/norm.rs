use crate::error::{Result, TensorError};
use crate::ops::{grad_of, split_axis};
use crate::scalar::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, T: Real> Var<'t, T> {
    /// Normalizes every slice along `axis` to zero mean and unit (biased)
    /// variance, then applies the per-feature affine `gamma`, `beta`.
    pub fn layer_norm(&self, axis: usize, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "layer_norm",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if gamma.shape() != [len] || beta.shape() != [len] {
            return Err(TensorError::mismatch("layer_norm", &shape, gamma.shape()));
        }
        if eps <= 0.0 {
            return Err(TensorError::invalid("layer_norm", "epsilon must be positive"));
        }
        let eps = T::of(eps);
        let inv_len = T::of(1.0 / len as f64);
        let x = self.value.data();
        let (gm, bt) = (gamma.value.data(), beta.value.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| x[idx(l)]).sum::<T>() * inv_len;
                let var = (0..len).map(|l| (x[idx(l)] - mean).powi(2)).sum::<T>() * inv_len;
                let r = (var + eps).sqrt().recip();
                rstd[o * inner + i] = r;
                for l in 0..len {
                    let xh = (x[idx(l)] - mean) * r;
                    xhat[idx(l)] = xh;
                    y[idx(l)] = gm[l] * xh + bt[l];
                }
            }
        }
        let out = Tensor::from_parts(shape.clone(), y);
        let gamma_v = gamma.value.clone();
        let track_x = self.requires_grad();
        Ok(self.tape.record(&[self, gamma, beta], out, move |g| {
            let (gd, gm) = (g.data(), gamma_v.data());
            let mut dx = vec![T::zero(); if track_x { gd.len() } else { 0 }];
            let mut dgamma = vec![T::zero(); len];
            let mut dbeta = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let mut mean_g = T::zero();
                    let mut mean_gx = T::zero();
                    for l in 0..len {
                        let gh = gd[idx(l)] * gm[l];
                        mean_g += gh;
                        mean_gx += gh * xhat[idx(l)];
                        dgamma[l] += gd[idx(l)] * xhat[idx(l)];
                        dbeta[l] += gd[idx(l)];
                    }
                    if track_x {
                        mean_g *= inv_len;
                        mean_gx *= inv_len;
                        let r = rstd[o * inner + i];
                        for l in 0..len {
                            let gh = gd[idx(l)] * gm[l];
                            dx[idx(l)] = r * (gh - mean_g - xhat[idx(l)] * mean_gx);
                        }
                    }
                }
            }
            vec![
                track_x.then(|| Tensor::from_parts(shape.clone(), dx)),
                grad_of(&[len], dgamma),
                grad_of(&[len], dbeta),
            ]
        }))
    }
}
