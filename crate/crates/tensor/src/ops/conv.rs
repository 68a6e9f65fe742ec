use crate::error::{Result, TensorError};
use crate::ops::grad_of;
use crate::scalar::{gemm, MatRef, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad >= kernel && stride > 0).then(|| (input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn taps(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Valid `ox` range for tap column `j`: `x = ox * stride + j - pad` in `0..w`.
    #[inline]
    fn ox_range(&self, j: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if j >= self.pad { 0 } else { (self.pad - j).div_ceil(s) };
        let hi = if self.w + self.pad > j { ((self.w + self.pad - j - 1) / s + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }

    #[inline]
    fn source_row(&self, oy: usize, i: usize) -> Option<usize> {
        (oy * self.stride + i).checked_sub(self.pad).filter(|&y| y < self.h)
    }
}

fn im2col<T: Real>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let p = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..][..g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                let (lo, hi) = g.ox_range(j);
                for oy in 0..g.ho {
                    let out = &mut row[oy * g.wo..][..g.wo];
                    let Some(y) = g.source_row(oy, i) else {
                        out.fill(T::zero());
                        continue;
                    };
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let src = &plane[y * g.w..][..g.w];
                    if g.stride == 1 {
                        let x0 = lo + j - g.pad;
                        out[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                            *o = src[ox * g.stride + j - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let p = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..][..g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                let (lo, hi) = g.ox_range(j);
                for oy in 0..g.ho {
                    let Some(y) = g.source_row(oy, i) else { continue };
                    let src = &row[oy * g.wo..][..g.wo];
                    let dst = &mut plane[y * g.w..][..g.w];
                    if g.stride == 1 {
                        let x0 = lo + j - g.pad;
                        for (d, &v) in dst[x0..x0 + hi - lo].iter_mut().zip(&src[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * g.stride + j - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// 2-D cross-correlation with zero padding.
    ///
    /// `self` is `[N, C, H, W]`, `weight` is `[O, C, kh, kw]`, `bias` is `[O]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::mismatch("conv2d", xs, ws));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(TensorError::mismatch("conv2d bias", b.shape(), &ws[..1]));
            }
        }
        let (n, o) = (xs[0], ws[0]);
        let ho = conv2d_output_extent(xs[2], ws[2], stride, pad);
        let wo = conv2d_output_extent(xs[3], ws[3], stride, pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {ws:?} does not fit input {xs:?} with padding {pad}"),
            ));
        };
        let g = Geometry {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho,
            wo,
        };
        let (p, taps, plane_in) = (ho * wo, g.taps(), g.c * g.h * g.w);
        let x = self.value.clone();
        let wt = weight.value.clone();
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); taps * p] };
        for b in 0..n {
            let xb = &x.data()[b * plane_in..][..plane_in];
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(&g, xb, &mut cols);
                &cols
            };
            let yb = &mut out[b * o * p..][..o * p];
            if let Some(bias) = bias {
                for (row, &bv) in yb.chunks_mut(p).zip(bias.value.data()) {
                    row.fill(bv);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            gemm(MatRef::new(wt.data(), o, taps), MatRef::new(src, taps, p), beta, yb);
        }
        let out = Tensor::from_parts(vec![n, o, ho, wo], out);
        let has_bias = bias.is_some();
        let track = (self.requires_grad(), weight.requires_grad());
        let backward = move |grad: &Tensor<T>| {
            let gd = grad.data();
            let mut dx = track.0.then(|| vec![T::zero(); n * plane_in]);
            let mut dw = track.1.then(|| vec![T::zero(); o * taps]);
            let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { taps * p }];
            let mut dcols = vec![T::zero(); taps * p];
            for b in 0..n {
                let gb = &gd[b * o * p..][..o * p];
                if let Some(dw) = dw.as_mut() {
                    let xb = &x.data()[b * plane_in..][..plane_in];
                    let src: &[T] = if g.is_pointwise() {
                        xb
                    } else {
                        im2col(&g, xb, &mut cols);
                        &cols
                    };
                    gemm(MatRef::new(gb, o, p), MatRef::t(src, taps, p), T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[b * plane_in..][..plane_in];
                    if g.is_pointwise() {
                        gemm(MatRef::t(wt.data(), o, taps), MatRef::new(gb, o, p), T::zero(), dxb);
                    } else {
                        gemm(MatRef::t(wt.data(), o, taps), MatRef::new(gb, o, p), T::zero(), &mut dcols);
                        col2im(&g, &dcols, dxb);
                    }
                }
            }
            let mut grads = vec![
                dx.and_then(|d| grad_of(x.shape(), d)),
                dw.and_then(|d| grad_of(wt.shape(), d)),
            ];
            if has_bias {
                let mut db = vec![T::zero(); o];
                for b in 0..n {
                    for (oc, row) in gd[b * o * p..][..o * p].chunks(p).enumerate() {
                        db[oc] += row.iter().copied().sum::<T>();
                    }
                }
                grads.push(grad_of(&[o], db));
            }
            grads
        };
        let inputs: Vec<&Var<'t, T>> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        Ok(self.tape.record(&inputs, out, backward))
    }

    /// Per-channel 2-D cross-correlation, stride 1, zero padding `k / 2`.
    ///
    /// `self` is `[N, C, H, W]`, `weight` is `[C, 1, k, k]` with odd `k`.
    pub fn depthwise_conv2d(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[1] != 1 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(TensorError::mismatch("depthwise_conv2d", &xs, &ws));
        }
        if let Some(b) = bias {
            if b.shape() != [xs[1]] {
                return Err(TensorError::mismatch("depthwise_conv2d bias", b.shape(), &xs[1..2]));
            }
        }
        let (n, c, h, w, k) = (xs[0], xs[1], xs[2], xs[3], ws[2]);
        let pad = k / 2;
        let x = self.value.clone();
        let wt = weight.value.clone();
        let hw = h * w;
        // (tap offset, valid output range) per kernel axis
        let span = move |i: usize, extent: usize| -> (usize, usize) {
            let lo = pad.saturating_sub(i);
            let hi = (extent + pad).saturating_sub(i).min(extent);
            (lo, hi)
        };
        let mut out = vec![T::zero(); n * c * hw];
        for b in 0..n {
            for ch in 0..c {
                let plane = &x.data()[(b * c + ch) * hw..][..hw];
                let dst = &mut out[(b * c + ch) * hw..][..hw];
                if let Some(bias) = bias {
                    dst.fill(bias.value.data()[ch]);
                }
                let kern = &wt.data()[ch * k * k..][..k * k];
                for i in 0..k {
                    let (y0, y1) = span(i, h);
                    for j in 0..k {
                        let (x0, x1) = span(j, w);
                        let wv = kern[i * k + j];
                        for oy in y0..y1 {
                            let sy = oy + i - pad;
                            let src = &plane[sy * w..][..w];
                            let row = &mut dst[oy * w..][..w];
                            for ox in x0..x1 {
                                row[ox] += wv * src[ox + j - pad];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(xs.clone(), out);
        let has_bias = bias.is_some();
        let track = (self.requires_grad(), weight.requires_grad());
        let backward = move |grad: &Tensor<T>| {
            let gd = grad.data();
            let mut dx = vec![T::zero(); if track.0 { n * c * hw } else { 0 }];
            let mut dw = vec![T::zero(); c * k * k];
            for b in 0..n {
                for ch in 0..c {
                    let plane = &x.data()[(b * c + ch) * hw..][..hw];
                    let gp = &gd[(b * c + ch) * hw..][..hw];
                    let kern = &wt.data()[ch * k * k..][..k * k];
                    for i in 0..k {
                        let (y0, y1) = span(i, h);
                        for j in 0..k {
                            let (x0, x1) = span(j, w);
                            let wv = kern[i * k + j];
                            let mut acc = T::zero();
                            for oy in y0..y1 {
                                let sy = oy + i - pad;
                                for ox in x0..x1 {
                                    let gv = gp[oy * w + ox];
                                    let sx = ox + j - pad;
                                    acc += gv * plane[sy * w + sx];
                                    if track.0 {
                                        dx[(b * c + ch) * hw + sy * w + sx] += wv * gv;
                                    }
                                }
                            }
                            dw[(ch * k + i) * k + j] += acc;
                        }
                    }
                }
            }
            let mut grads = vec![
                track.0.then(|| Tensor::from_parts(xs.clone(), dx)),
                track.1.then(|| Tensor::from_parts(ws.clone(), dw)),
            ];
            if has_bias {
                let mut db = vec![T::zero(); c];
                for b in 0..n {
                    for (ch, d) in db.iter_mut().enumerate() {
                        *d += gd[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                    }
                }
                grads.push(grad_of(&[c], db));
            }
            grads
        };
        let inputs: Vec<&Var<'t, T>> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        Ok(self.tape.record(&inputs, out, backward))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn output_extent_formula() {
        assert_eq!(super::conv2d_output_extent(8, 3, 2, 1), Some(4));
        assert_eq!(super::conv2d_output_extent(5, 3, 1, 1), Some(5));
        assert_eq!(super::conv2d_output_extent(1, 3, 1, 0), None);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::ones([1, 2, 4, 4]));
        let w = tape.constant(Tensor::ones([3, 1, 3, 3]));
        assert!(x.conv2d(&w, None, 1, 1).is_err());
        assert!(x.depthwise_conv2d(&w, None).is_err());
    }

    #[test]
    fn zero_weights_give_bias() {
        let tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::ones([1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros([3, 2, 3, 3]));
        let b = tape.constant(Tensor::full([3], 0.5));
        let y = x.conv2d(&w, Some(&b), 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        assert!(y.value().data().iter().all(|&v| v == 0.5));
    }
}
