use crate::error::{Result, TensorError};
use crate::ops::{fold_repeated, grad_of};
use crate::scalar::Real;
use crate::tape::Var;
use crate::tensor::{numel, Tensor};

/// Output shape of a leading-singleton broadcast, or an error.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let (big, small) = if na >= nb && a.len() >= b.len() {
        (a, b)
    } else if nb >= na && b.len() >= a.len() {
        (b, a)
    } else {
        return Err(TensorError::mismatch(op, a, b));
    };
    let pad = big.len() - small.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(small.iter().copied()).collect();
    let first = padded.iter().position(|&d| d != 1).unwrap_or(padded.len());
    if padded[first..] != big[first..] {
        return Err(TensorError::mismatch(op, a, b));
    }
    Ok(big.to_vec())
}

/// Calls `f` on `(a[i % a.len()], b[i % b.len()])` for `i < n`, where one
/// operand has length `n` and the other divides it.
#[inline]
fn cyclic_zip<T: Copy>(a: &[T], b: &[T], n: usize, mut f: impl FnMut(T, T)) {
    if a.len() == n && b.len() == n {
        a.iter().zip(b).for_each(|(&x, &y)| f(x, y));
    } else if a.len() == n {
        for chunk in a.chunks_exact(b.len()) {
            chunk.iter().zip(b).for_each(|(&x, &y)| f(x, y));
        }
    } else {
        for chunk in b.chunks_exact(a.len()) {
            a.iter().zip(chunk).for_each(|(&x, &y)| f(x, y));
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl<'t, T: Real> Var<'t, T> {
    fn binary<F, DA, DB>(&self, other: &Var<'t, T>, op: &'static str, f: F, da: DA, db: DB) -> Result<Var<'t, T>>
    where
        F: Fn(T, T) -> T,
        DA: Fn(T, T) -> T + 'static,
        DB: Fn(T, T) -> T + 'static,
    {
        let shape = broadcast_shape(op, self.shape(), other.shape())?;
        let a = self.value.clone();
        let b = other.value.clone();
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        cyclic_zip(a.data(), b.data(), n, |x, y| data.push(f(x, y)));
        let out = Tensor::from_parts(shape, data);
        let (track_a, track_b) = (self.requires_grad(), other.requires_grad());
        Ok(self.tape.record(&[self, other], out, move |g| {
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            let partial = |d: &dyn Fn(T, T) -> T, len: usize, shape: &[usize]| {
                let mut full = Vec::with_capacity(n);
                let mut i = 0;
                cyclic_zip(ad, bd, n, |x, y| {
                    full.push(gd[i] * d(x, y));
                    i += 1;
                });
                Tensor::from_parts(shape.to_vec(), fold_repeated(&full, len))
            };
            let ga = track_a.then(|| partial(&da, ad.len(), a.shape()));
            let gb = track_b.then(|| partial(&db, bd.len(), b.shape()));
            vec![ga, gb]
        }))
    }

    /// `self + sign * other`; the gradient needs no operand values.
    fn affine(&self, other: &Var<'t, T>, op: &'static str, negate: bool) -> Result<Var<'t, T>> {
        let shape = broadcast_shape(op, self.shape(), other.shape())?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        if negate {
            cyclic_zip(self.value.data(), other.value.data(), n, |x, y| data.push(x - y));
        } else {
            cyclic_zip(self.value.data(), other.value.data(), n, |x, y| data.push(x + y));
        }
        let out = Tensor::from_parts(shape, data);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let (track_a, track_b) = (self.requires_grad(), other.requires_grad());
        Ok(self.tape.record(&[self, other], out, move |g| {
            let ga = track_a.then(|| Tensor::from_parts(sa.clone(), fold_repeated(g.data(), numel(&sa))));
            let gb = track_b.then(|| {
                let mut d = fold_repeated(g.data(), numel(&sb));
                if negate {
                    d.iter_mut().for_each(|v| *v = -*v);
                }
                Tensor::from_parts(sb, d)
            });
            vec![ga, gb]
        }))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.affine(other, "add", false)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.affine(other, "sub", true)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "div", |a, b| a / b, |_, b| b.recip(), |a, b| -a / (b * b))
    }

    /// Applies `f` elementwise; `df(x, y)` is the derivative at input `x`
    /// with output `y`.
    pub fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value.clone();
        let y = x.map(f);
        let y_saved = y.clone();
        self.tape.record(&[self], y, move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y_saved.data())
                .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![grad_of(x.shape(), data)]
        })
    }

    pub fn scale(&self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        self.unary(move |x| x + s, |_, _| T::one())
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    /// Rectifier; the derivative at exactly zero is taken as zero.
    pub fn relu(&self) -> Var<'t, T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&self) -> Var<'t, T> {
        let k = T::of(SQRT_2_OVER_PI);
        let c = T::of(GELU_C);
        let half = T::of(0.5);
        let three = T::of(3.0);
        self.unary(
            move |x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()),
            move |x, _| {
                let t = (k * (x + c * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
            },
        )
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(
            |x| {
                if x >= T::zero() {
                    (T::one() + (-x).exp()).recip()
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Var<'t, T> {
        self.unary(|x| x.ln(), |x, _| x.recip())
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        self.unary(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    /// Absolute value; the derivative at zero is zero.
    pub fn abs(&self) -> Var<'t, T> {
        self.unary(|x| x.abs(), |x, _| x.signum() * T::of(if x == T::zero() { 0.0 } else { 1.0 }))
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }
}
