use crate::error::{Result, TensorError};
use crate::ops::fold_repeated;
use crate::scalar::{gemm, MatRef, Real};
use crate::tape::Var;
use crate::tensor::{numel, Tensor};

/// Batched product of the last two axes, optionally transposing either
/// operand. Leading (batch) axes must be equal, or one side must have a
/// single batch, which is then shared.
pub(crate) fn bmm<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(TensorError::mismatch("matmul", a.shape(), b.shape()));
    }
    let (lead_a, mat_a) = a.shape().split_at(a.rank() - 2);
    let (lead_b, mat_b) = b.shape().split_at(b.rank() - 2);
    let (m, k) = if ta { (mat_a[1], mat_a[0]) } else { (mat_a[0], mat_a[1]) };
    let (kb, n) = if tb { (mat_b[1], mat_b[0]) } else { (mat_b[0], mat_b[1]) };
    if k != kb {
        return Err(TensorError::mismatch("matmul", a.shape(), b.shape()));
    }
    let (ba, bb) = (numel(lead_a), numel(lead_b));
    let lead = if lead_a == lead_b || bb == 1 && lead_a.len() >= lead_b.len() {
        lead_a
    } else if ba == 1 && lead_b.len() >= lead_a.len() {
        lead_b
    } else {
        return Err(TensorError::mismatch("matmul", a.shape(), b.shape()));
    };
    let batch = numel(lead);
    let mut out = vec![T::zero(); batch * m * n];
    let (sa, sb) = (mat_a[0] * mat_a[1], mat_b[0] * mat_b[1]);
    for i in 0..batch {
        let ad = &a.data()[(i % ba) * sa..][..sa];
        let bd = &b.data()[(i % bb) * sb..][..sb];
        let am = if ta { MatRef::t(ad, mat_a[0], mat_a[1]) } else { MatRef::new(ad, m, k) };
        let bm = if tb { MatRef::t(bd, mat_b[0], mat_b[1]) } else { MatRef::new(bd, k, n) };
        gemm(am, bm, T::zero(), &mut out[i * m * n..][..m * n]);
    }
    let mut shape = lead.to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

impl<'t, T: Real> Var<'t, T> {
    /// Matrix product over the last two axes.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_ex(other, false, false)
    }

    /// `self * other^T` over the last two axes.
    pub fn matmul_nt(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_ex(other, false, true)
    }

    pub fn matmul_ex(&self, other: &Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let out = bmm(&self.value, &other.value, ta, tb)?;
        let a = self.value.clone();
        let b = other.value.clone();
        let (track_a, track_b) = (self.requires_grad(), other.requires_grad());
        Ok(self.tape.record(&[self, other], out, move |g| {
            let da = track_a.then(|| {
                let full = if ta { bmm(&b, g, tb, true) } else { bmm(g, &b, false, !tb) }.expect("matmul grad");
                Tensor::from_parts(a.shape().to_vec(), fold_repeated(full.data(), a.numel()))
            });
            let db = track_b.then(|| {
                let full = if tb { bmm(g, &a, true, ta) } else { bmm(&a, g, !ta, false) }.expect("matmul grad");
                Tensor::from_parts(b.shape().to_vec(), fold_repeated(full.data(), b.numel()))
            });
            vec![da, db]
        }))
    }

    /// `self * weight^T + bias` along the last axis; `weight` is `[out, in]`.
    pub fn linear(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let y = self.matmul_nt(weight)?;
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}
