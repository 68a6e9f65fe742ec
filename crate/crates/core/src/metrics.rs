//! Image quality metrics, accumulated in double precision.

use rainforge_tensor::{Real, Tensor};

use crate::error::{Error, Result};

/// Reported when the mean squared error falls below [`MSE_FLOOR`].
pub const PSNR_CLAMP_DB: f64 = 100.0;
pub const MSE_FLOOR: f64 = 1e-12;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_shape<T: Real>(op: &'static str, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

pub fn mse<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape("mse", x, y)?;
    let n = x.numel().max(1) as f64;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB.
pub fn psnr<T: Real>(x: &Tensor<T>, y: &Tensor<T>, max_val: f64) -> Result<f64> {
    if max_val <= 0.0 {
        return Err(Error::Config(format!("psnr peak value must be positive, got {max_val}")));
    }
    let e = mse(x, y)?;
    if e < MSE_FLOOR {
        return Ok(PSNR_CLAMP_DB);
    }
    Ok(10.0 * (max_val * max_val / e).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable "valid" filtering of one `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// averaged over channels (and images for 4-d input).
pub fn ssim<T: Real>(x: &Tensor<T>, y: &Tensor<T>, max_val: f64) -> Result<f64> {
    same_shape("ssim", x, y)?;
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape("ssim", format!("expected an image, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let taps = gaussian_taps();
    let plane = h * w;
    let planes = x.numel() / plane;
    let mut total = 0.0;
    for p in 0..planes {
        let a: Vec<f64> = x.data()[p * plane..][..plane].iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = y.data()[p * plane..][..plane].iter().map(|v| v.as_f64()).collect();
        let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(&b).map(|(&u, &v)| f(u, v)).collect() };
        let mu_a = filter_valid(&a, h, w, &taps);
        let mu_b = filter_valid(&b, h, w, &taps);
        let aa = filter_valid(&prod(|u, _| u * u), h, w, &taps);
        let bb = filter_valid(&prod(|_, v| v * v), h, w, &taps);
        let ab = filter_valid(&prod(|u, v| u * v), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / planes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rainforge_tensor::Rng;

    #[test]
    fn psnr_closed_forms() {
        let x = Tensor::<f64>::uniform([3, 8, 8], 0.1, 0.9, &mut Rng::new(0));
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CLAMP_DB);
        let y = x.map(|v| v + 1.0 / 255.0);
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
        let z = x.map(|v| v + 1.0);
        assert!(psnr(&x, &z, 1.0).unwrap().abs() < 1e-9);
        assert!(psnr(&x, &Tensor::zeros([3, 8, 9]), 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let x = Tensor::<f64>::uniform([3, 16, 16], 0.0, 1.0, &mut Rng::new(1));
        let noise = Tensor::<f64>::uniform([3, 16, 16], -1.0, 1.0, &mut Rng::new(2));
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.3] {
            let y = x.zip_map(&noise, |a, n| a + amp * n).unwrap();
            let p = psnr(&x, &y, 1.0).unwrap();
            assert!(p < last);
            assert_eq!(p, psnr(&y, &x, 1.0).unwrap());
            last = p;
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_size() {
        let x = Tensor::<f64>::uniform([3, 16, 20], 0.0, 1.0, &mut Rng::new(3));
        let y = Tensor::<f64>::uniform([3, 16, 20], 0.0, 1.0, &mut Rng::new(4));
        assert!((ssim(&x, &x, 1.0).unwrap() - 1.0).abs() < 1e-6);
        assert!((ssim(&x, &y, 1.0).unwrap() - ssim(&y, &x, 1.0).unwrap()).abs() < 1e-9);
        assert!(ssim(&x, &y, 1.0).unwrap() < 0.5);
        let small = Tensor::<f64>::zeros([3, 10, 16]);
        assert!(ssim(&small, &small, 1.0).is_err());
    }

    #[test]
    fn gaussian_taps_are_normalized_and_symmetric() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
        assert!(t[5] > t[4]);
    }
}
