use crate::error::{Result, TensorError};
use crate::ops::grad_of;
use crate::scalar::Real;
use crate::tape::Var;
use crate::tensor::{numel, Tensor};

/// Lower Cholesky factor of the symmetric part of a row-major `k x k` matrix.
fn cholesky<T: Real>(a: &[T], k: usize) -> Result<Vec<T>> {
    let mut l = vec![T::zero(); k * k];
    for i in 0..k {
        for j in 0..=i {
            let aij = (a[i * k + j] + a[j * k + i]) * T::of(0.5);
            let s = aij - (0..j).map(|p| l[i * k + p] * l[j * k + p]).sum::<T>();
            if i == j {
                if !(s > T::zero()) {
                    return Err(TensorError::NotPositiveDefinite {
                        pivot: i,
                        value: s.as_f64(),
                    });
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L L^T Z = R` in place for a row-major `k x c` right-hand side.
fn cholesky_solve<T: Real>(l: &[T], k: usize, c: usize, z: &mut [T]) {
    for col in 0..c {
        for i in 0..k {
            let s = z[i * c + col] - (0..i).map(|p| l[i * k + p] * z[p * c + col]).sum::<T>();
            z[i * c + col] = s / l[i * k + i];
        }
        for i in (0..k).rev() {
            let s = z[i * c + col] - (i + 1..k).map(|p| l[p * k + i] * z[p * c + col]).sum::<T>();
            z[i * c + col] = s / l[i * k + i];
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Batched solve of `S Z = R` where `S` is the symmetric part of `self`
    /// (`[.., k, k]`, positive definite) and `rhs` is `[.., k, c]`.
    ///
    /// Uses a Cholesky factorization; the gradient with respect to `self` is
    /// symmetrized to match the symmetric-part definition.
    pub fn solve_spd(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (gs, rs) = (self.shape().to_vec(), rhs.shape().to_vec());
        let ok = gs.len() >= 2
            && gs.len() == rs.len()
            && gs[gs.len() - 1] == gs[gs.len() - 2]
            && rs[rs.len() - 2] == gs[gs.len() - 1]
            && gs[..gs.len() - 2] == rs[..rs.len() - 2];
        if !ok {
            return Err(TensorError::mismatch("solve_spd", &gs, &rs));
        }
        let k = gs[gs.len() - 1];
        let c = rs[rs.len() - 1];
        let batch = numel(&gs[..gs.len() - 2]);
        let mut factors = Vec::with_capacity(batch);
        let mut z = rhs.value.data().to_vec();
        for b in 0..batch {
            let l = cholesky(&self.value.data()[b * k * k..][..k * k], k)?;
            cholesky_solve(&l, k, c, &mut z[b * k * c..][..k * c]);
            factors.push(l);
        }
        let out = Tensor::from_parts(rs.clone(), z);
        let zs = out.clone();
        Ok(self.tape.record(&[self, rhs], out, move |g| {
            let mut dr = g.data().to_vec();
            let mut dg = vec![T::zero(); batch * k * k];
            let z = zs.data();
            for (b, l) in factors.iter().enumerate() {
                let drb = &mut dr[b * k * c..][..k * c];
                cholesky_solve(l, k, c, drb);
                let zb = &z[b * k * c..][..k * c];
                let dgb = &mut dg[b * k * k..][..k * k];
                for i in 0..k {
                    for j in 0..k {
                        let mut s = T::zero();
                        for col in 0..c {
                            s += drb[i * c + col] * zb[j * c + col] + zb[i * c + col] * drb[j * c + col];
                        }
                        dgb[i * k + j] = -s * T::of(0.5);
                    }
                }
            }
            vec![grad_of(&gs, dg), grad_of(&rs, dr)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn solves_small_system() {
        let tape = Tape::<f64>::inference();
        let g = tape.constant(Tensor::from_f64([2, 2], &[4., 1., 1., 3.]).unwrap());
        let r = tape.constant(Tensor::from_f64([2, 1], &[1., 2.]).unwrap());
        let z = g.solve_spd(&r).unwrap().value().to_f64_vec();
        // [4 1; 1 3]^-1 [1; 2] = [1/11; 7/11]
        assert!((z[0] - 1.0 / 11.0).abs() < 1e-14);
        assert!((z[1] - 7.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn indefinite_rejected() {
        let tape = Tape::<f64>::inference();
        let g = tape.constant(Tensor::from_f64([2, 2], &[1., 2., 2., 1.]).unwrap());
        let r = tape.constant(Tensor::ones([2, 1]));
        assert!(g.solve_spd(&r).is_err());
    }
}
