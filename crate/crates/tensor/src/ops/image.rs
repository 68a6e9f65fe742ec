use crate::error::{Result, TensorError};
use crate::ops::grad_of;
use crate::scalar::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn check_image(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(TensorError::invalid(op, format!("expected [N, C, H, W], got {shape:?}")));
    }
    Ok((shape[0] * shape[1], shape[2], shape[3]))
}

/// Gathers `out[p, y, x] = in[p, row[y], col[x]]` and returns it with the
/// index maps so the adjoint can scatter back.
fn remap<'t, T: Real>(
    v: &Var<'t, T>,
    out_hw: (usize, usize),
    rows: Vec<usize>,
    cols: Vec<usize>,
) -> Var<'t, T> {
    let shape = v.shape().to_vec();
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (ho, wo) = out_hw;
    let x = v.value.data();
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let plane = &x[p * h * w..][..h * w];
        for &r in &rows {
            for &c in &cols {
                out.push(plane[r * w + c]);
            }
        }
    }
    let out = Tensor::from_parts(vec![shape[0], shape[1], ho, wo], out);
    v.tape.record(&[v], out, move |g| {
        let gd = g.data();
        let mut dx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            let plane = &mut dx[p * h * w..][..h * w];
            let src = &gd[p * ho * wo..][..ho * wo];
            for (y, &r) in rows.iter().enumerate() {
                for (xo, &c) in cols.iter().enumerate() {
                    plane[r * w + c] += src[y * wo + xo];
                }
            }
        }
        vec![grad_of(&shape, dx)]
    })
}

impl<'t, T: Real> Var<'t, T> {
    /// Mirror padding that excludes the edge sample; each pad must be
    /// smaller than the padded extent.
    pub fn reflection_pad2d(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var<'t, T>> {
        let (_, h, w) = check_image("reflection_pad2d", self.shape())?;
        if top.max(bottom) >= h || left.max(right) >= w {
            return Err(TensorError::invalid(
                "reflection_pad2d",
                format!("padding ({top}, {bottom}, {left}, {right}) too large for {h}x{w}"),
            ));
        }
        let rows = (0..h + top + bottom).map(|y| reflect(y as isize - top as isize, h)).collect();
        let cols = (0..w + left + right).map(|x| reflect(x as isize - left as isize, w)).collect();
        Ok(remap(self, (h + top + bottom, w + left + right), rows, cols))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2x(&self) -> Result<Var<'t, T>> {
        let (_, h, w) = check_image("upsample_nearest2x", self.shape())?;
        let rows = (0..2 * h).map(|y| y / 2).collect();
        let cols = (0..2 * w).map(|x| x / 2).collect();
        Ok(remap(self, (2 * h, 2 * w), rows, cols))
    }

    /// Cyclic shift: `out[y, x] = in[(y - dy) mod H, (x - dx) mod W]`.
    pub fn roll2d(&self, dy: isize, dx: isize) -> Result<Var<'t, T>> {
        let (_, h, w) = check_image("roll2d", self.shape())?;
        let rows = (0..h).map(|y| (y as isize - dy).rem_euclid(h as isize) as usize).collect();
        let cols = (0..w).map(|x| (x as isize - dx).rem_euclid(w as isize) as usize).collect();
        Ok(remap(self, (h, w), rows, cols))
    }

    /// Spatial window `[y0, y0 + h) x [x0, x0 + w)`.
    pub fn crop2d(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var<'t, T>> {
        check_image("crop2d", self.shape())?;
        self.slice(2, y0, h)?.slice(3, x0, w)
    }
}
