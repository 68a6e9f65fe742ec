//! Stage-two blocks: windowed self-attention with optional cyclic shift,
//! the dual attention/convolution block, the depthwise feed-forward network
//! and subspace-projection fusion.

use rainforge_tensor::{Real, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{module_fields, Activation, Conv2d, DepthwiseConv2d, LayerNorm, Linear};

/// Additive bias that blocks attention between tokens.
pub const MASK_VALUE: f64 = -1e9;

fn check_multiple(op: &'static str, shape: &[usize], m: usize) -> Result<()> {
    if shape.len() != 4 || m == 0 || shape[2] % m != 0 || shape[3] % m != 0 {
        return Err(Error::shape(op, format!("spatial extents of {shape:?} must be multiples of {m}")));
    }
    Ok(())
}

/// `[N, C, H, W]` to `[N * P, M * M, C]`, windows in row-major order.
pub fn window_partition<'t, T: Real>(x: &Var<'t, T>, m: usize) -> Result<Var<'t, T>> {
    check_multiple("window_partition", x.shape(), m)?;
    let &[n, c, h, w] = x.shape() else { unreachable!() };
    let blocks = x
        .reshape([n, c, h / m, m, w / m, m])?
        .permute(&[0, 2, 4, 3, 5, 1])?;
    Ok(blocks.reshape([n * (h / m) * (w / m), m * m, c])?)
}

/// Exact inverse of [`window_partition`] for images of extent `h x w`.
pub fn window_merge<'t, T: Real>(xw: &Var<'t, T>, h: usize, w: usize, m: usize) -> Result<Var<'t, T>> {
    if xw.rank() != 3 || m == 0 || h % m != 0 || w % m != 0 || xw.shape()[1] != m * m {
        return Err(Error::shape("window_merge", format!("{:?} is not a {m}x{m} window stack of {h}x{w}", xw.shape())));
    }
    let p = (h / m) * (w / m);
    let (b, c) = (xw.shape()[0], xw.shape()[2]);
    if b % p != 0 {
        return Err(Error::shape("window_merge", format!("{b} windows is not a multiple of {p}")));
    }
    let blocks = xw
        .reshape([b / p, h / m, w / m, m, m, c])?
        .permute(&[0, 5, 1, 3, 2, 4])?;
    Ok(blocks.reshape([b / p, c, h, w])?)
}

/// Attention mask for windows of an `h x w` map cyclically shifted by
/// `shift` pixels up and left: shape `[P, M*M, M*M]`, zero between tokens
/// from the same pre-shift region and [`MASK_VALUE`] otherwise.
pub fn shifted_mask<T: Real>(h: usize, w: usize, m: usize, shift: usize) -> Tensor<T> {
    assert!(m > 0 && h % m == 0 && w % m == 0, "extents must be multiples of the window");
    assert!(shift < m, "shift must be smaller than the window");
    let t = m * m;
    let (wh, ww) = (h / m, w / m);
    if shift == 0 {
        return Tensor::zeros([wh * ww, t, t]);
    }
    let region = |pos: usize, extent: usize| -> usize {
        if pos < extent - m {
            0
        } else if pos < extent - shift {
            1
        } else {
            2
        }
    };
    let mut data = Vec::with_capacity(wh * ww * t * t);
    for by in 0..wh {
        for bx in 0..ww {
            let ids: Vec<usize> = (0..t)
                .map(|i| region(by * m + i / m, h) * 3 + region(bx * m + i % m, w))
                .collect();
            for i in 0..t {
                for j in 0..t {
                    data.push(if ids[i] == ids[j] { T::zero() } else { T::of(MASK_VALUE) });
                }
            }
        }
    }
    Tensor::new([wh * ww, t, t], data).expect("mask shape")
}

/// Multi-head self-attention inside each window, without position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention<T: Real> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}

module_fields!(WindowAttention { q, k, v, proj });

impl<T: Real> WindowAttention<T> {
    pub fn new(dim: usize, out_dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("attention width {dim} is not divisible by {heads} heads")));
        }
        Ok(WindowAttention {
            q: Linear::new(dim, dim, rng),
            k: Linear::new(dim, dim, rng),
            v: Linear::new(dim, dim, rng),
            proj: Linear::new(dim, out_dim, rng),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.in_features()
    }

    fn split_heads<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let &[b, t, d] = x.shape() else { unreachable!() };
        Ok(x.reshape([b, t, self.heads, d / self.heads])?.permute(&[0, 2, 1, 3])?)
    }

    /// Softmax attention weights `[B, heads, T, T]`.
    pub fn attention_weights<'t>(&self, xw: &Var<'t, T>, mask: Option<&Tensor<T>>) -> Result<Var<'t, T>> {
        let d = self.dim();
        if xw.rank() != 3 || xw.shape()[2] != d {
            return Err(Error::shape("wmsa", format!("tokens {:?} do not have width {d}", xw.shape())));
        }
        let (b, t) = (xw.shape()[0], xw.shape()[1]);
        let q = self.split_heads(&self.q.forward(xw)?)?;
        let k = self.split_heads(&self.k.forward(xw)?)?;
        let head_dim = (d / self.heads) as f64;
        let mut scores = q.matmul_nt(&k)?.scale(1.0 / head_dim.sqrt());
        if let Some(mask) = mask {
            let ms = mask.shape();
            if ms.len() != 3 || ms[1] != t || ms[2] != t || ms[0] == 0 || b % ms[0] != 0 {
                return Err(Error::shape("wmsa", format!("mask {ms:?} does not fit {b} windows of {t} tokens")));
            }
            let per = t * t;
            let mut full = Vec::with_capacity(b * self.heads * per);
            for i in 0..b {
                let src = &mask.data()[(i % ms[0]) * per..][..per];
                for _ in 0..self.heads {
                    full.extend_from_slice(src);
                }
            }
            let bias = Tensor::new([b, self.heads, t, t], full)?;
            scores = scores.add(&xw.constant(bias))?;
        }
        Ok(scores.softmax(3)?)
    }

    /// `[B, T, D]` tokens to `[B, T, D_out]`.
    pub fn forward<'t>(&self, xw: &Var<'t, T>, mask: Option<&Tensor<T>>) -> Result<Var<'t, T>> {
        let attn = self.attention_weights(xw, mask)?;
        let v = self.split_heads(&self.v.forward(xw)?)?;
        let &[b, t, d] = xw.shape() else { unreachable!() };
        let heads = attn.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape([b, t, d])?;
        self.proj.forward(&heads)
    }
}

/// Feed-forward network with a depthwise convolution between the two
/// channel projections, plus residual.
#[derive(Clone, Debug)]
pub struct DconvFfn<T: Real> {
    pub norm: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub dw: Option<DepthwiseConv2d<T>>,
    pub fc2: Linear<T>,
    pub activation: Activation,
    /// Drops both activations, leaving a purely affine map.
    pub literal: bool,
}

module_fields!(DconvFfn { norm, fc1, dw, fc2 });

impl<T: Real> DconvFfn<T> {
    pub fn new(dim: usize, ratio: usize, depthwise: bool, activation: Activation, literal: bool, rng: &mut Rng) -> Self {
        let hidden = dim * ratio;
        DconvFfn {
            norm: LayerNorm::new(dim),
            fc1: Linear::new(dim, hidden, rng),
            dw: depthwise.then(|| DepthwiseConv2d::new(hidden, rng)),
            fc2: Linear::new(hidden, dim, rng),
            activation,
            literal,
        }
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features()
    }

    fn act<'t>(&self, x: Var<'t, T>) -> Var<'t, T> {
        if self.literal {
            x
        } else {
            self.activation.apply(&x)
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let d = self.fc1.in_features();
        if x.rank() != 4 || x.shape()[1] != d {
            return Err(Error::shape("dconv_ffn", format!("input {:?} does not have {d} channels", x.shape())));
        }
        let mut h = self.act(self.fc1.forward_channels(&self.norm.forward_channels(x)?)?);
        if let Some(dw) = &self.dw {
            h = self.act(dw.forward(&h)?);
        }
        Ok(x.add(&self.fc2.forward_channels(&h)?)?)
    }
}

/// Feed-forward variant used by stage-two blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    #[default]
    Dconv,
    Mlp,
}

/// Parallel window attention and convolution branches, each emitting half
/// the channels, concatenated with a residual and followed by the FFN.
#[derive(Clone, Debug)]
pub struct DualTransformerBlock<T: Real> {
    pub norm: LayerNorm<T>,
    pub attn: WindowAttention<T>,
    pub conv1: Option<Conv2d<T>>,
    pub conv2: Option<Conv2d<T>>,
    pub ffn: DconvFfn<T>,
    pub window: usize,
    pub shift: usize,
    pub activation: Activation,
}

module_fields!(DualTransformerBlock { norm, attn, conv1, conv2, ffn });

#[derive(Clone, Debug)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    pub ffn_ratio: usize,
    pub ffn: FfnKind,
    pub ffn_literal: bool,
    pub conv_branch: bool,
    pub activation: Activation,
}

impl<T: Real> DualTransformerBlock<T> {
    pub fn new(cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.dim;
        if d % 2 != 0 {
            return Err(Error::Config(format!("block width {d} must be even")));
        }
        if cfg.window == 0 || cfg.shift >= cfg.window {
            return Err(Error::Config(format!("shift {} must be below window {}", cfg.shift, cfg.window)));
        }
        let attn_out = if cfg.conv_branch { d / 2 } else { d };
        Ok(DualTransformerBlock {
            norm: LayerNorm::new(d),
            attn: WindowAttention::new(d, attn_out, cfg.heads, rng)?,
            conv1: cfg.conv_branch.then(|| Conv2d::new(d, d / 2, 3, 1, rng)),
            conv2: cfg.conv_branch.then(|| Conv2d::new(d / 2, d / 2, 3, 1, rng)),
            ffn: DconvFfn::new(d, cfg.ffn_ratio, cfg.ffn == FfnKind::Dconv, cfg.activation, cfg.ffn_literal, rng),
            window: cfg.window,
            shift: cfg.shift,
            activation: cfg.activation,
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.dim()
    }

    /// Windowed attention on an arbitrary-extent map: reflection-padded to
    /// window multiples, optionally shifted and masked, then cropped back.
    pub fn attention_branch<'t>(&self, y: &Var<'t, T>) -> Result<Var<'t, T>> {
        let m = self.window;
        let &[_, _, h, w] = y.shape() else { unreachable!() };
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let mut z = if ph + pw > 0 { y.reflection_pad2d(0, ph, 0, pw)? } else { y.clone() };
        let (hp, wp) = (h + ph, w + pw);
        let s = self.shift as isize;
        if s > 0 {
            z = z.roll2d(-s, -s)?;
        }
        let mask = (s > 0).then(|| shifted_mask::<T>(hp, wp, m, self.shift));
        let out = self.attn.forward(&window_partition(&z, m)?, mask.as_ref())?;
        let mut merged = window_merge(&out, hp, wp, m)?;
        if s > 0 {
            merged = merged.roll2d(s, s)?;
        }
        if ph + pw > 0 {
            merged = merged.crop2d(0, 0, h, w)?;
        }
        Ok(merged)
    }

    pub fn conv_branch<'t>(&self, x: &Var<'t, T>) -> Result<Option<Var<'t, T>>> {
        match (&self.conv1, &self.conv2) {
            (Some(c1), Some(c2)) => Ok(Some(c2.forward(&self.activation.apply(&c1.forward(x)?))?)),
            _ => Ok(None),
        }
    }

    /// Residual sum of the two branches, before the FFN.
    pub fn dual<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let d = self.dim();
        if x.rank() != 4 || x.shape()[1] != d {
            return Err(Error::shape("dual_block", format!("input {:?} does not have {d} channels", x.shape())));
        }
        let sa = self.attention_branch(&self.norm.forward_channels(x)?)?;
        let branches = match self.conv_branch(x)? {
            Some(conv) => Var::concat(&[&sa, &conv], 1)?,
            None => sa,
        };
        Ok(branches.add(x)?)
    }

    pub fn forward<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.ffn.forward(&self.dual(x)?)
    }
}

/// Projects `x1` onto a `k`-dimensional spatial subspace whose basis is
/// predicted from both inputs.
#[derive(Clone, Debug)]
pub struct Nlffm<T: Real> {
    pub basis: Conv2d<T>,
    pub eps: f64,
}

module_fields!(Nlffm { basis });

impl<T: Real> Nlffm<T> {
    pub fn new(channels: usize, rank: usize, eps: f64, rng: &mut Rng) -> Self {
        assert!(eps > 0.0, "projection regularizer must be positive");
        Nlffm {
            basis: Conv2d::new(2 * channels, rank, 3, 1, rng),
            eps,
        }
    }

    pub fn rank(&self) -> usize {
        self.basis.out_channels()
    }

    /// Basis vectors as rows: `[N, k, H * W]`.
    pub fn basis_rows<'t>(&self, x1: &Var<'t, T>, x2: &Var<'t, T>) -> Result<Var<'t, T>> {
        if x1.shape() != x2.shape() || x1.rank() != 4 {
            return Err(Error::shape("nlffm", format!("inputs {:?} and {:?} differ", x1.shape(), x2.shape())));
        }
        let &[n, _, h, w] = x1.shape() else { unreachable!() };
        if self.rank() > h * w {
            return Err(Error::shape("nlffm", format!("rank {} exceeds {} spatial positions", self.rank(), h * w)));
        }
        let v = self.basis.forward(&Var::concat(&[x1, x2], 1)?)?;
        Ok(v.reshape([n, self.rank(), h * w])?)
    }

    pub fn forward<'t>(&self, x1: &Var<'t, T>, x2: &Var<'t, T>) -> Result<Var<'t, T>> {
        let vt = self.basis_rows(x1, x2)?;
        project_onto(&vt, x1, self.eps)
    }
}

/// `V (V^T V + eps I)^-1 V^T mat(x)` with `vt = V^T` of shape `[N, k, H*W]`
/// and `mat(x)` the `(H*W) x C` matrix of each image in `x`.
pub fn project_onto<'t, T: Real>(vt: &Var<'t, T>, x: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::shape("project_onto", format!("expected a 4-d input, got {:?}", x.shape())));
    };
    if vt.rank() != 3 || vt.shape()[0] != n || vt.shape()[2] != h * w {
        return Err(Error::shape("project_onto", format!("basis {:?} does not fit {:?}", vt.shape(), x.shape())));
    }
    let k = vt.shape()[1];
    let xc = x.reshape([n, c, h * w])?;
    let ridge = Tensor::<T>::eye(k).map(|v| v * T::of(eps));
    let gram = vt.matmul_nt(vt)?.add(&vt.constant(ridge))?;
    let rhs = vt.matmul_nt(&xc)?;
    let z = gram.solve_spd(&rhs)?;
    Ok(z.matmul_ex(vt, true, false)?.reshape([n, c, h, w])?)
}
