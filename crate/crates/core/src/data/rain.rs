//! Synthetic rain: `rainy = clamp((1 - alpha) * clean + alpha * R)` where
//! `R` is a layer of anti-aliased bright streaks.

use rainforge_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RainParams {
    pub alpha: f64,
    pub streak_count: usize,
    /// Dominant direction per image, degrees from vertical.
    pub angle_deg: [f64; 2],
    /// Per-streak deviation from the dominant direction, degrees.
    pub angle_jitter_deg: f64,
    pub length: [f64; 2],
    pub thickness: f64,
    pub intensity: [f64; 2],
    /// Gaussian blur sigma in pixels; 0 disables blurring.
    pub blur_radius: f64,
    pub seed: u64,
}

impl Default for RainParams {
    fn default() -> Self {
        RainParams {
            alpha: 0.6,
            streak_count: 40,
            angle_deg: [-20.0, 20.0],
            angle_jitter_deg: 4.0,
            length: [6.0, 16.0],
            thickness: 1.0,
            intensity: [0.7, 1.0],
            blur_radius: 0.5,
            seed: 3,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("rain alpha must lie in [0, 1], got {}", self.alpha)));
        }
        for (name, [lo, hi]) in [("angle_deg", self.angle_deg), ("length", self.length), ("intensity", self.intensity)] {
            if !(lo <= hi) {
                return Err(Error::Config(format!("rain {name} range [{lo}, {hi}] is empty")));
            }
        }
        if !(self.thickness > 0.0) || self.length[0] < 0.0 || !(self.blur_radius >= 0.0) || !(self.angle_jitter_deg >= 0.0) {
            return Err(Error::Config("rain thickness must be positive; length, blur and jitter non-negative".into()));
        }
        Ok(())
    }
}

fn segment_distance(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Single-channel streak layer of extent `h x w`, values in `[0, 1]`.
pub fn rain_layer(h: usize, w: usize, p: &RainParams, rng: &mut Rng) -> Vec<f64> {
    let mut layer = vec![0.0f64; h * w];
    let base = rng.uniform_range(p.angle_deg[0], p.angle_deg[1]);
    let reach = p.thickness / 2.0 + 0.5;
    for _ in 0..p.streak_count {
        let theta = (base + rng.uniform_range(-p.angle_jitter_deg, p.angle_jitter_deg)).to_radians();
        let len = rng.uniform_range(p.length[0], p.length[1]);
        let level = rng.uniform_range(p.intensity[0], p.intensity[1]);
        let cx = rng.uniform_range(0.0, w as f64);
        let cy = rng.uniform_range(0.0, h as f64);
        let (dx, dy) = (theta.sin() * len / 2.0, theta.cos() * len / 2.0);
        let a = (cx - dx, cy - dy);
        let b = (cx + dx, cy + dy);
        let clip = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
        let (x0, x1) = (clip(a.0.min(b.0) - reach - 1.0, w), clip(a.0.max(b.0) + reach + 1.0, w));
        let (y0, y1) = (clip(a.1.min(b.1) - reach - 1.0, h), clip(a.1.max(b.1) + reach + 1.0, h));
        for y in y0..y1 {
            for x in x0..x1 {
                let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b);
                let coverage = (reach - d).clamp(0.0, 1.0);
                let v = &mut layer[y * w + x];
                *v = v.max(level * coverage);
            }
        }
    }
    if p.blur_radius > 0.0 {
        layer = gaussian_blur(&layer, h, w, p.blur_radius);
    }
    layer.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    layer
}

fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r).map(|d| taps[(d + r) as usize] * src[y * w + at(x as isize + d, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r).map(|d| taps[(d + r) as usize] * tmp[at(y as isize + d, h) * w + x]).sum();
        }
    }
    out
}

/// Renders rain over `clean` (`[3, H, W]`) using `p.seed`.
/// Returns `(rainy, rain_layer)`.
pub fn synth_rain(clean: &Tensor<f32>, p: &RainParams) -> Result<(Tensor<f32>, Tensor<f32>)> {
    synth_rain_with(clean, p, &mut Rng::new(p.seed))
}

pub fn synth_rain_with(clean: &Tensor<f32>, p: &RainParams, rng: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    p.validate()?;
    let &[c, h, w] = clean.shape() else {
        return Err(Error::shape("synth_rain", format!("expected [C, H, W], got {:?}", clean.shape())));
    };
    let layer = rain_layer(h, w, p, rng);
    let r = Tensor::from_fn([c, h, w], |i| layer[i % (h * w)] as f32);
    let (keep, mix) = ((1.0 - p.alpha) as f32, p.alpha as f32);
    let rainy = clean.zip_map(&r, |b, r| (keep * b + mix * r).clamp(0.0, 1.0))?;
    Ok((rainy, r))
}
