//! Paired crop, flip and rotation.

use rainforge_tensor::{Rng, Tensor};

use crate::error::{Error, Result};

/// A square crop followed by optional flips and a rotation by
/// `quarter_turns * 90` degrees counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
}

fn extent(op: &'static str, img: &Tensor<f32>) -> Result<(usize, usize)> {
    match *img.shape() {
        [_, h, w] => Ok((h, w)),
        _ => Err(Error::shape(op, format!("expected [C, H, W], got {:?}", img.shape()))),
    }
}

impl Transform {
    pub fn identity(size: usize) -> Self {
        Transform { top: 0, left: 0, size, flip_h: false, flip_v: false, quarter_turns: 0 }
    }

    /// Uniformly random crop position and dihedral element.
    pub fn draw(h: usize, w: usize, size: usize, rng: &mut Rng) -> Result<Self> {
        if size == 0 || size > h || size > w {
            return Err(Error::Dataset(format!("crop {size} does not fit a {h}x{w} image")));
        }
        Ok(Transform {
            top: rng.below(h - size + 1),
            left: rng.below(w - size + 1),
            size,
            flip_h: rng.below(2) == 1,
            flip_v: rng.below(2) == 1,
            quarter_turns: rng.below(4) as u8,
        })
    }

    /// Centred crop without flips or rotation.
    pub fn center(h: usize, w: usize, size: usize) -> Result<Self> {
        if size == 0 || size > h || size > w {
            return Err(Error::Dataset(format!("crop {size} does not fit a {h}x{w} image")));
        }
        Ok(Transform { top: (h - size) / 2, left: (w - size) / 2, ..Transform::identity(size) })
    }

    /// Source coordinate in the uncropped image for output pixel `(y, x)`.
    pub fn source(&self, y: usize, x: usize) -> (usize, usize) {
        let last = self.size - 1;
        let (mut y, mut x) = (y, x);
        for _ in 0..self.quarter_turns {
            (y, x) = (x, last - y);
        }
        if self.flip_v {
            y = last - y;
        }
        if self.flip_h {
            x = last - x;
        }
        (self.top + y, self.left + x)
    }

    pub fn apply(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (h, w) = extent("augment", img)?;
        if self.top + self.size > h || self.left + self.size > w {
            return Err(Error::Dataset(format!("crop {self:?} does not fit a {h}x{w} image")));
        }
        let s = self.size;
        let c = img.shape()[0];
        let d = img.data();
        let mut out = Vec::with_capacity(c * s * s);
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let (sy, sx) = self.source(y, x);
                    out.push(d[(ch * h + sy) * w + sx]);
                }
            }
        }
        Ok(Tensor::new([c, s, s], out)?)
    }
}

/// Applies one randomly drawn transform to both images of a pair.
pub fn augment(clean: &Tensor<f32>, rainy: &Tensor<f32>, crop: usize, rng: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if clean.shape() != rainy.shape() {
        return Err(Error::Dataset(format!("pair extents differ: {:?} vs {:?}", clean.shape(), rainy.shape())));
    }
    let (h, w) = extent("augment", clean)?;
    let t = Transform::draw(h, w, crop, rng)?;
    Ok((t.apply(clean)?, t.apply(rainy)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([2, h, w], |i| i as f32)
    }

    #[test]
    fn identity_and_involutions() {
        let img = ramp(6, 6);
        assert_eq!(Transform::identity(6).apply(&img).unwrap(), img);
        let half = Transform { quarter_turns: 2, ..Transform::identity(6) };
        assert_eq!(half.apply(&half.apply(&img).unwrap()).unwrap(), img);
        let quarter = Transform { quarter_turns: 1, ..Transform::identity(6) };
        let mut r = img.clone();
        for _ in 0..4 {
            r = quarter.apply(&r).unwrap();
        }
        assert_eq!(r, img);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let img = Tensor::from_f64([1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = Transform { quarter_turns: 1, ..Transform::identity(2) };
        assert_eq!(t.apply(&img).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn crop_bounds() {
        let mut rng = Rng::new(1);
        assert!(Transform::draw(5, 8, 6, &mut rng).is_err());
        for _ in 0..50 {
            let t = Transform::draw(9, 12, 5, &mut rng).unwrap();
            assert!(t.top + 5 <= 9 && t.left + 5 <= 12);
        }
        assert!(augment(&ramp(4, 4), &ramp(4, 5), 2, &mut rng).is_err());
    }
}
