//! Orthonormal two-dimensional Haar wavelet transform.
//!
//! For each 2x2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2    HL = (a - b + c - d) / 2
//! LH = (a + b - c - d) / 2    HH = (a - b - c + d) / 2
//! ```
//!
//! The transform matrix is symmetric and orthogonal, so the inverse uses
//! the same coefficients and the backward pass of each direction is the
//! other direction.

use rainforge_tensor::{Real, Tensor, Var};

use crate::error::{Error, Result};

/// The four subbands of a single-level transform, each `[N, C, H/2, W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DwtSubbands<T: Real> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Real> DwtSubbands<T> {
    /// Concatenates along channels in the order LL, LH, HL, HH.
    pub fn stack(&self) -> Result<Tensor<T>> {
        let s = self.ll.shape();
        for (name, band) in [("LH", &self.lh), ("HL", &self.hl), ("HH", &self.hh)] {
            if band.shape() != s {
                return Err(Error::shape("idwt2_haar", format!("{name} {:?} differs from LL {s:?}", band.shape())));
            }
        }
        if s.len() != 4 {
            return Err(Error::shape("idwt2_haar", format!("subbands must be 4-d, got {s:?}")));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut data = Vec::with_capacity(4 * self.ll.numel());
        for i in 0..n {
            for band in [&self.ll, &self.lh, &self.hl, &self.hh] {
                data.extend_from_slice(&band.data()[i * c * plane..][..c * plane]);
            }
        }
        Ok(Tensor::new([n, 4 * c, s[2], s[3]], data)?)
    }

    /// Inverse of [`DwtSubbands::stack`].
    pub fn unstack(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] % 4 != 0 {
            return Err(Error::shape("dwt_subbands", format!("{s:?} is not a stack of four subbands")));
        }
        let (n, c, plane) = (s[0], s[1] / 4, s[2] * s[3]);
        let band = |b: usize| {
            let mut data = Vec::with_capacity(n * c * plane);
            for i in 0..n {
                data.extend_from_slice(&t.data()[(i * 4 + b) * c * plane..][..c * plane]);
            }
            Tensor::new([n, c, s[2], s[3]], data).expect("subband shape")
        };
        Ok(DwtSubbands { ll: band(0), lh: band(1), hl: band(2), hh: band(3) })
    }

    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .flat_map(|b| b.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }
}

fn analysis<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let plane = h2 * w2;
    let half = T::of(0.5);
    let mut out = vec![T::zero(); n * 4 * c * plane];
    for i in 0..n {
        for ch in 0..c {
            let src = &x[(i * c + ch) * h * w..][..h * w];
            let base = i * 4 * c * plane + ch * plane;
            for y in 0..h2 {
                for xx in 0..w2 {
                    let a = src[2 * y * w + 2 * xx];
                    let b = src[2 * y * w + 2 * xx + 1];
                    let cc = src[(2 * y + 1) * w + 2 * xx];
                    let d = src[(2 * y + 1) * w + 2 * xx + 1];
                    let o = base + y * w2 + xx;
                    out[o] = (a + b + cc + d) * half;
                    out[o + c * plane] = (a + b - cc - d) * half;
                    out[o + 2 * c * plane] = (a - b + cc - d) * half;
                    out[o + 3 * c * plane] = (a - b - cc + d) * half;
                }
            }
        }
    }
    out
}

fn synthesis<T: Real>(s: &[T], n: usize, c: usize, h2: usize, w2: usize) -> Vec<T> {
    let (h, w) = (2 * h2, 2 * w2);
    let plane = h2 * w2;
    let half = T::of(0.5);
    let mut out = vec![T::zero(); n * c * h * w];
    for i in 0..n {
        for ch in 0..c {
            let base = i * 4 * c * plane + ch * plane;
            let dst = &mut out[(i * c + ch) * h * w..][..h * w];
            for y in 0..h2 {
                for xx in 0..w2 {
                    let o = base + y * w2 + xx;
                    let ll = s[o];
                    let lh = s[o + c * plane];
                    let hl = s[o + 2 * c * plane];
                    let hh = s[o + 3 * c * plane];
                    dst[2 * y * w + 2 * xx] = (ll + lh + hl + hh) * half;
                    dst[2 * y * w + 2 * xx + 1] = (ll + lh - hl - hh) * half;
                    dst[(2 * y + 1) * w + 2 * xx] = (ll - lh + hl - hh) * half;
                    dst[(2 * y + 1) * w + 2 * xx + 1] = (ll - lh - hl + hh) * half;
                }
            }
        }
    }
    out
}

fn dwt_shape(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [n, c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok((n, c, h, w)),
        [_, _, _, _] => Err(Error::shape(op, format!("extents of {s:?} must be even; reflection-pad odd inputs"))),
        _ => Err(Error::shape(op, format!("expected [N, C, H, W], got {s:?}"))),
    }
}

fn dwt_stacked<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dwt_shape("dwt2_haar", x.shape())?;
    Ok(Tensor::new([n, 4 * c, h / 2, w / 2], analysis(x.data(), n, c, h, w))?)
}

fn idwt_stacked<T: Real>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let sh = s.shape();
    if sh.len() != 4 || sh[1] % 4 != 0 {
        return Err(Error::shape("idwt2_haar", format!("{sh:?} is not a stack of four subbands")));
    }
    let (n, c, h2, w2) = (sh[0], sh[1] / 4, sh[2], sh[3]);
    Ok(Tensor::new([n, c, 2 * h2, 2 * w2], synthesis(s.data(), n, c, h2, w2))?)
}

/// Single-level transform of `[N, C, H, W]` with even extents.
pub fn dwt2_haar_tensor<T: Real>(x: &Tensor<T>) -> Result<DwtSubbands<T>> {
    DwtSubbands::unstack(&dwt_stacked(x)?)
}

pub fn idwt2_haar_tensor<T: Real>(s: &DwtSubbands<T>) -> Result<Tensor<T>> {
    idwt_stacked(&s.stack()?)
}

/// Differentiable transform; returns the subbands stacked along channels
/// as `[N, 4C, H/2, W/2]` in the order LL, LH, HL, HH.
pub fn dwt2_haar<'t, T: Real>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let out = dwt_stacked(x.value())?;
    Ok(x.tape().record(&[x], out, |g| vec![idwt_stacked(g).ok()]))
}

/// Differentiable inverse of [`dwt2_haar`].
pub fn idwt2_haar<'t, T: Real>(s: &Var<'t, T>) -> Result<Var<'t, T>> {
    let out = idwt_stacked(s.value())?;
    Ok(s.tape().record(&[s], out, |g| vec![dwt_stacked(g).ok()]))
}

/// Reflection-pads by one row/column on the bottom/right if odd.
pub fn pad_to_even<'t, T: Real>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if h % 2 == 0 && w % 2 == 0 {
        return Ok(x.clone());
    }
    Ok(x.reflection_pad2d(0, h % 2, 0, w % 2)?)
}

/// Multi-level decomposition: level `i + 1` transforms the LL band of level `i`.
pub fn wavedec2<T: Real>(x: &Tensor<T>, levels: usize) -> Result<Vec<DwtSubbands<T>>> {
    let mut out: Vec<DwtSubbands<T>> = Vec::with_capacity(levels);
    for _ in 0..levels {
        let src = out.last().map_or(x, |s| &s.ll);
        out.push(dwt2_haar_tensor(src)?);
    }
    Ok(out)
}

/// Inverse of [`wavedec2`] using the detail bands of every level and the
/// approximation of the deepest.
pub fn waverec2<T: Real>(levels: &[DwtSubbands<T>]) -> Result<Tensor<T>> {
    let mut iter = levels.iter().rev();
    let Some(deepest) = iter.next() else {
        return Err(Error::shape("waverec2", "no levels"));
    };
    let mut ll = idwt2_haar_tensor(deepest)?;
    for s in iter {
        ll = idwt2_haar_tensor(&DwtSubbands { ll, lh: s.lh.clone(), hl: s.hl.clone(), hh: s.hh.clone() })?;
    }
    Ok(ll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rainforge_tensor::{Rng, Tape};

    #[test]
    fn two_by_two_block() {
        let x = Tensor::<f64>::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = dwt2_haar_tensor(&x).unwrap();
        assert_eq!(
            [s.ll.data()[0], s.hl.data()[0], s.lh.data()[0], s.hh.data()[0]],
            [5.0, -1.0, -2.0, 0.0]
        );
    }

    #[test]
    fn constant_image() {
        let x = Tensor::<f64>::full([1, 2, 4, 6], 0.3);
        let s = dwt2_haar_tensor(&x).unwrap();
        assert!(s.ll.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        for b in [&s.lh, &s.hl, &s.hh] {
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
        let back = idwt2_haar_tensor(&s).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn round_trip_and_energy_f32() {
        let x = Tensor::<f32>::randn([2, 3, 8, 10], 1.0, &mut Rng::new(0));
        let s = dwt2_haar_tensor(&x).unwrap();
        assert!(idwt2_haar_tensor(&s).unwrap().max_abs_diff(&x).unwrap() <= 1e-5);
        let ex: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
        assert!((s.energy() - ex).abs() / ex < 1e-4);
    }

    #[test]
    fn stack_unstack_round_trip() {
        let x = Tensor::<f64>::randn([2, 3, 4, 4], 1.0, &mut Rng::new(1));
        let s = dwt2_haar_tensor(&x).unwrap();
        assert_eq!(DwtSubbands::unstack(&s.stack().unwrap()).unwrap(), s);
    }

    #[test]
    fn odd_extents_rejected_and_padded() {
        let x = Tensor::<f32>::zeros([1, 1, 5, 4]);
        assert!(dwt2_haar_tensor(&x).is_err());
        let tape = Tape::inference();
        let v = tape.constant(Tensor::<f32>::randn([1, 1, 5, 7], 1.0, &mut Rng::new(2)));
        let p = pad_to_even(&v).unwrap();
        assert_eq!(p.shape(), &[1, 1, 6, 8]);
        assert_eq!(p.value().at(&[0, 0, 5, 7]), v.value().at(&[0, 0, 3, 5]));
    }

    #[test]
    fn multilevel_round_trip() {
        let x = Tensor::<f64>::randn([1, 2, 16, 8], 1.0, &mut Rng::new(3));
        let levels = wavedec2(&x, 3).unwrap();
        assert_eq!(levels[2].ll.shape(), &[1, 2, 2, 1]);
        assert!(waverec2(&levels).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
    }
}
