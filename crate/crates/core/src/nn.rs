//! Layer primitives: convolutions, linear maps, normalization, resampling.
//!
//! Layers own [`Param`]s and bind them to the caller's tape on every
//! forward pass. Weights are initialized from `Normal(0, 2 / fan_in)` and
//! biases start at zero.

use rainforge_tensor::{Param, Real, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Visits a module's parameters in a fixed order under dotted names.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out: Vec<(String, *const Param<T>)> = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p as *const _)));
        // SAFETY: the pointers come from `&self` and live as long as it.
        out.into_iter().map(|(n, p)| (n, unsafe { &*p })).collect()
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real> Module<T> for Param<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(prefix, self)
    }
}

impl<T: Real, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

impl<T: Real, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Implements [`Module`] by visiting the listed fields in order.
macro_rules! module_fields {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: ::rainforge_tensor::Real> $crate::nn::Module<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &::rainforge_tensor::Param<T>)) {
                $( self.$field.visit(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ::rainforge_tensor::Param<T>)) {
                $( self.$field.visit_mut(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use module_fields;

fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Param<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Param::new(Tensor::randn(shape.to_vec(), std, rng))
}

/// Activation used by the convolution branch and the feed-forward network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<'t, T: Real>(self, x: &Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => x.gelu(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    #[default]
    Zero,
    Reflect,
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Real> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
    pub mode: PaddingMode,
}

module_fields!(Conv2d { weight, bias });

impl<T: Real> Conv2d<T> {
    /// `k x k` convolution with "same" padding `k / 2` and a bias.
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd, got {k}");
        Conv2d {
            weight: he_normal(&[out_ch, in_ch, k, k], in_ch * k * k, rng),
            bias: Some(Param::new(Tensor::zeros([out_ch]))),
            stride,
            pad: k / 2,
            mode: PaddingMode::Zero,
        }
    }

    /// Same geometry as [`Conv2d::new`] with all-zero weights.
    pub fn zeroed(in_ch: usize, out_ch: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd, got {k}");
        Conv2d {
            weight: Param::new(Tensor::zeros([out_ch, in_ch, k, k])),
            bias: Some(Param::new(Tensor::zeros([out_ch]))),
            stride: 1,
            pad: k / 2,
            mode: PaddingMode::Zero,
        }
    }

    pub fn with_mode(mut self, mode: PaddingMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        if x.rank() != 4 || x.shape()[1] != self.in_channels() {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} does not have {} channels", x.shape(), self.in_channels()),
            ));
        }
        let tape = x.tape();
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        let y = match self.mode {
            PaddingMode::Reflect if self.pad > 0 => {
                let p = self.pad;
                x.reflection_pad2d(p, p, p, p)?.conv2d(&w, b.as_ref(), self.stride, 0)?
            }
            _ => x.conv2d(&w, b.as_ref(), self.stride, self.pad)?,
        };
        Ok(y)
    }
}

/// Per-channel 3x3 convolution.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d<T: Real> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

module_fields!(DepthwiseConv2d { weight, bias });

impl<T: Real> DepthwiseConv2d<T> {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        DepthwiseConv2d {
            weight: he_normal(&[channels, 1, 3, 3], 9, rng),
            bias: Some(Param::new(Tensor::zeros([channels]))),
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        let b = self.bias.as_ref().map(|b| tape.param(b));
        Ok(x.depthwise_conv2d(&tape.param(&self.weight), b.as_ref())?)
    }
}

/// Fully-connected map along the feature axis.
#[derive(Clone, Debug)]
pub struct Linear<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

module_fields!(Linear { weight, bias });

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: he_normal(&[out_features, in_features], in_features, rng),
            bias: Param::new(Tensor::zeros([out_features])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Applies to the last axis of `[.., in]`.
    pub fn forward<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        Ok(x.linear(&tape.param(&self.weight), Some(&tape.param(&self.bias)))?)
    }

    /// Applies to the channel axis of `[N, C, H, W]` (a 1x1 convolution).
    pub fn forward_channels<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        let w = tape
            .param(&self.weight)
            .reshape([self.out_features(), self.in_features(), 1, 1])?;
        Ok(x.conv2d(&w, Some(&tape.param(&self.bias)), 1, 0)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

module_fields!(LayerNorm { gamma, beta });

impl<T: Real> LayerNorm<T> {
    pub fn new(features: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Tensor::ones([features])),
            beta: Param::new(Tensor::zeros([features])),
            eps: 1e-5,
        }
    }

    /// Normalizes over the channel axis of `[N, C, H, W]` at every position.
    pub fn forward_channels<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_axis(x, 1)
    }

    pub fn forward_axis<'t>(&self, x: &Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        let tape = x.tape();
        Ok(x.layer_norm(axis, &tape.param(&self.gamma), &tape.param(&self.beta), self.eps)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// Scale change between encoder-decoder levels.
///
/// `Down` is a stride-2 3x3 convolution doubling channels; `Up` is a 2x
/// nearest-neighbour upsample followed by a 3x3 convolution halving them.
#[derive(Clone, Debug)]
pub struct Resample<T: Real> {
    pub direction: Direction,
    pub conv: Conv2d<T>,
}

module_fields!(Resample { conv });

impl<T: Real> Resample<T> {
    pub fn down(channels: usize, rng: &mut Rng) -> Self {
        Resample {
            direction: Direction::Down,
            conv: Conv2d::new(channels, 2 * channels, 3, 2, rng),
        }
    }

    /// `channels` is the input width; the output has half as many.
    pub fn up(channels: usize, rng: &mut Rng) -> Self {
        assert!(channels % 2 == 0, "up-sampling needs an even channel count");
        Resample {
            direction: Direction::Up,
            conv: Conv2d::new(channels, channels / 2, 3, 1, rng),
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        match self.direction {
            Direction::Down => {
                if x.rank() != 4 || x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0 {
                    return Err(Error::shape(
                        "resample",
                        format!("down-sampling needs even spatial extents, got {:?}", x.shape()),
                    ));
                }
                self.conv.forward(x)
            }
            Direction::Up => self.conv.forward(&x.upsample_nearest2x()?),
        }
    }
}

/// Symmetric mirror padding (edge sample not repeated).
pub fn reflection_pad<'t, T: Real>(x: &Var<'t, T>, pad: usize) -> Result<Var<'t, T>> {
    Ok(x.reflection_pad2d(pad, pad, pad, pad)?)
}

/// Inverse of [`reflection_pad`].
pub fn central_crop<'t, T: Real>(x: &Var<'t, T>, pad: usize) -> Result<Var<'t, T>> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if 2 * pad > h || 2 * pad > w {
        return Err(Error::shape("central_crop", format!("cannot remove {pad} from {h}x{w}")));
    }
    Ok(x.crop2d(pad, pad, h - 2 * pad, w - 2 * pad)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rainforge_tensor::Tape;

    #[test]
    fn resample_shapes() {
        let mut rng = Rng::new(0);
        let down = Resample::<f32>::down(4, &mut rng);
        let up = Resample::<f32>::up(8, &mut rng);
        let tape = Tape::inference();
        let x = tape.constant(Tensor::randn([2, 4, 8, 8], 1.0, &mut rng));
        let d = down.forward(&x).unwrap();
        assert_eq!(d.shape(), &[2, 8, 4, 4]);
        assert_eq!(up.forward(&d).unwrap().shape(), &[2, 4, 8, 8]);
        let odd = tape.constant(Tensor::zeros([1, 4, 7, 8]));
        assert!(down.forward(&odd).is_err());
    }

    #[test]
    fn reflect_mode_rejects_large_pad() {
        let conv = Conv2d::<f32>::new(1, 1, 3, 1, &mut Rng::new(1)).with_mode(PaddingMode::Reflect);
        let tape = Tape::inference();
        assert!(conv.forward(&tape.constant(Tensor::zeros([1, 1, 1, 4]))).is_err());
        assert_eq!(conv.forward(&tape.constant(Tensor::zeros([1, 1, 3, 4]))).unwrap().shape(), &[1, 1, 3, 4]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let conv = Conv2d::<f32>::new(3, 2, 3, 1, &mut Rng::new(2));
        let tape = Tape::inference();
        assert!(conv.forward(&tape.constant(Tensor::zeros([1, 2, 4, 4]))).is_err());
    }

    #[test]
    fn reflect_pad_crop_inverse_and_constant() {
        let tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::randn([1, 2, 5, 6], 1.0, &mut Rng::new(3)));
        let p = reflection_pad(&x, 2).unwrap();
        assert_eq!(p.shape(), &[1, 2, 9, 10]);
        assert_eq!(central_crop(&p, 2).unwrap().value(), x.value());
        let c = tape.constant(Tensor::full([1, 1, 4, 4], 0.7));
        assert!(reflection_pad(&c, 3).unwrap().value().data().iter().all(|&v| v == 0.7));
        assert!(reflection_pad(&c, 4).is_err());
    }

    #[test]
    fn named_params_are_ordered() {
        let conv = Conv2d::<f32>::new(3, 2, 3, 1, &mut Rng::new(4));
        let names: Vec<String> = conv.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["weight", "bias"]);
        assert_eq!(conv.param_count(), 2 * 3 * 9 + 2);
    }
}
