//! Stage-one building blocks: the gated multi-attention block, the
//! supervised attention module and the U-shaped encoder-decoder.

use rainforge_tensor::{Param, Real, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{module_fields, Conv2d, Resample};

/// Which branch of the multi-attention block receives the learned gate `a`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateBranch {
    /// Spatial attention is weighted by `a`, pixel and channel by `(1 - a) / 2`.
    #[default]
    Spatial,
    /// Pixel attention is weighted by `a`, spatial and channel by `(1 - a) / 2`.
    Pixel,
}

/// Blend coefficients `(pixel, spatial, channel)` for gate logit `theta`.
pub fn blend_weights(theta: f64, gate: GateBranch) -> [f64; 3] {
    let a = 1.0 / (1.0 + (-theta).exp());
    let side = (1.0 - a) / 2.0;
    match gate {
        GateBranch::Spatial => [side, a, side],
        GateBranch::Pixel => [a, side, side],
    }
}

fn expand_like<'t, T: Real>(map: &Var<'t, T>, like: &[usize]) -> Result<Var<'t, T>> {
    Ok(map.expand(like.to_vec())?)
}

/// The three attention outputs of a block body, before blending.
pub struct Branches<'t, T: Real> {
    pub pixel: Var<'t, T>,
    pub spatial: Var<'t, T>,
    pub channel: Var<'t, T>,
    pub pixel_map: Var<'t, T>,
    pub spatial_map: Var<'t, T>,
    pub channel_scale: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct MultiAttentionBlock<T: Real> {
    pub body1: Conv2d<T>,
    pub body2: Conv2d<T>,
    pub pa1: Conv2d<T>,
    pub pa2: Conv2d<T>,
    pub sa: Conv2d<T>,
    pub ca1: Conv2d<T>,
    pub ca2: Conv2d<T>,
    pub theta: Param<T>,
    pub gate: GateBranch,
}

module_fields!(MultiAttentionBlock { body1, body2, pa1, pa2, sa, ca1, ca2, theta });

impl<T: Real> MultiAttentionBlock<T> {
    pub fn new(channels: usize, gate: GateBranch, rng: &mut Rng) -> Self {
        let reduced = (channels / 4).max(1);
        MultiAttentionBlock {
            body1: Conv2d::new(channels, channels, 3, 1, rng),
            body2: Conv2d::new(channels, channels, 3, 1, rng),
            pa1: Conv2d::new(channels, reduced, 1, 1, rng),
            pa2: Conv2d::new(reduced, 1, 1, 1, rng),
            sa: Conv2d::new(2, 1, 3, 1, rng),
            ca1: Conv2d::new(channels, reduced, 1, 1, rng),
            ca2: Conv2d::new(reduced, channels, 1, 1, rng),
            theta: Param::new(Tensor::zeros([1])),
            gate,
        }
    }

    pub fn channels(&self) -> usize {
        self.body1.in_channels()
    }

    pub fn body<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        if x.rank() != 4 || x.shape()[1] != self.channels() {
            return Err(Error::shape(
                "multi_attention_block",
                format!("input {:?} does not have {} channels", x.shape(), self.channels()),
            ));
        }
        self.body2.forward(&self.body1.forward(x)?.relu())
    }

    pub fn branches<'t>(&self, body: &Var<'t, T>) -> Result<Branches<'t, T>> {
        let shape = body.shape().to_vec();

        let pixel_map = self.pa2.forward(&self.pa1.forward(body)?.relu())?.sigmoid();
        let pixel = body.mul(&expand_like(&pixel_map, &shape)?)?;

        let pooled = Var::concat(&[&body.mean_axis(1, true)?, &body.max_axis(1, true)?], 1)?;
        let spatial_map = self.sa.forward(&pooled)?.sigmoid();
        let spatial = body.mul(&expand_like(&spatial_map, &shape)?)?;

        let gap = body.mean_axis(3, true)?.mean_axis(2, true)?;
        let channel_scale = self.ca2.forward(&self.ca1.forward(&gap)?.relu())?.sigmoid();
        let channel = body.mul(&expand_like(&channel_scale, &shape)?)?;

        Ok(Branches { pixel, spatial, channel, pixel_map, spatial_map, channel_scale })
    }

    /// Weighted sum of the three branches, without the outer residual.
    pub fn blend<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let b = self.branches(&self.body(x)?)?;
        let a = x.tape().param(&self.theta).sigmoid();
        let side = a.neg().add_scalar(1.0).scale(0.5);
        let (pw, sw) = match self.gate {
            GateBranch::Spatial => (&side, &a),
            GateBranch::Pixel => (&a, &side),
        };
        let out = b.pixel.mul(pw)?.add(&b.spatial.mul(sw)?)?.add(&b.channel.mul(&side)?)?;
        Ok(out)
    }

    pub fn forward<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.add(&self.blend(x)?)?)
    }
}

/// Bridges stage one and stage two: a supervised image estimate plus
/// features gated by an attention map computed from that estimate.
#[derive(Clone, Debug)]
pub struct SupervisedAttention<T: Real> {
    pub conv_img: Conv2d<T>,
    pub conv_mask: Conv2d<T>,
    pub conv_feat: Conv2d<T>,
}

module_fields!(SupervisedAttention { conv_img, conv_mask, conv_feat });

impl<T: Real> SupervisedAttention<T> {
    /// `conv_img` starts at zero so the first estimate equals the input.
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        SupervisedAttention {
            conv_img: Conv2d::zeroed(channels, 3, 3),
            conv_mask: Conv2d::new(3, channels, 3, 1, rng),
            conv_feat: Conv2d::new(channels, channels, 3, 1, rng),
        }
    }

    /// Returns `(restored_img, gated_feat)`.
    pub fn forward<'t>(&self, feat: &Var<'t, T>, img: &Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if feat.rank() != 4 || img.rank() != 4 || feat.shape()[2..] != img.shape()[2..] {
            return Err(Error::shape(
                "supervised_attention",
                format!("features {:?} and image {:?} differ spatially", feat.shape(), img.shape()),
            ));
        }
        let restored = self.conv_img.forward(feat)?.add(img)?;
        let mask = self.conv_mask.forward(&restored)?.sigmoid();
        let gated = self.conv_feat.forward(feat)?.mul(&mask)?.add(feat)?;
        Ok((restored, gated))
    }
}

/// Three-level U-net of multi-attention blocks with additive skips.
///
/// Level `i` (0-based) runs at `1 / 2^i` resolution with `C * 2^i`
/// channels.
#[derive(Clone, Debug)]
pub struct EncoderDecoder<T: Real> {
    pub shallow: Conv2d<T>,
    pub enc: Vec<Vec<MultiAttentionBlock<T>>>,
    pub down: Vec<Resample<T>>,
    pub dec: Vec<Vec<MultiAttentionBlock<T>>>,
    pub up: Vec<Resample<T>>,
}

module_fields!(EncoderDecoder { shallow, enc, down, dec, up });

pub const LEVELS: usize = 3;

fn run_blocks<'t, T: Real>(blocks: &[MultiAttentionBlock<T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
    blocks.iter().try_fold(x, |h, b| b.forward(&h))
}

impl<T: Real> EncoderDecoder<T> {
    pub fn new(channels: usize, blocks_per_level: usize, gate: GateBranch, rng: &mut Rng) -> Self {
        let shallow = Conv2d::new(3, channels, 3, 1, rng);
        let level = |c: usize, rng: &mut Rng| -> Vec<MultiAttentionBlock<T>> {
            (0..blocks_per_level).map(|_| MultiAttentionBlock::new(c, gate, rng)).collect()
        };
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for i in 0..LEVELS {
            let c = channels << i;
            enc.push(level(c, rng));
            if i + 1 < LEVELS {
                down.push(Resample::down(c, rng));
            }
        }
        let mut dec = Vec::new();
        let mut up = Vec::new();
        for i in (0..LEVELS).rev() {
            let c = channels << i;
            dec.push(level(c, rng));
            if i > 0 {
                up.push(Resample::up(c, rng));
            }
        }
        EncoderDecoder { shallow, enc, down, dec, up }
    }

    /// Encoder outputs from full resolution down to the deepest level.
    pub fn encode<'t>(&self, img: &Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let div = 1 << (LEVELS - 1);
        if img.rank() != 4 || img.shape()[2] % div != 0 || img.shape()[3] % div != 0 {
            return Err(Error::shape(
                "encoder_decoder",
                format!("spatial extents of {:?} must be multiples of {div}; pad the input first", img.shape()),
            ));
        }
        let mut h = self.shallow.forward(img)?;
        let mut out = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            h = run_blocks(&self.enc[i], h)?;
            out.push(h.clone());
            if i + 1 < LEVELS {
                h = self.down[i].forward(&h)?;
            }
        }
        Ok(out)
    }

    /// Decodes from encoder outputs (as returned by [`Self::encode`]).
    pub fn decode<'t>(&self, enc: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if enc.len() != LEVELS {
            return Err(Error::shape("encoder_decoder", format!("expected {LEVELS} encoder levels, got {}", enc.len())));
        }
        let mut h = enc[LEVELS - 1].clone();
        for (j, blocks) in self.dec.iter().enumerate() {
            let level = LEVELS - 1 - j;
            if j > 0 {
                let skip = &enc[level];
                h = self.up[j - 1].forward(&h)?;
                if h.shape() != skip.shape() {
                    return Err(Error::shape(
                        "encoder_decoder",
                        format!("skip {:?} does not match decoder {:?}", skip.shape(), h.shape()),
                    ));
                }
                h = h.add(skip)?;
            }
            h = run_blocks(blocks, h)?;
        }
        Ok(h)
    }

    pub fn forward<'t>(&self, img: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.decode(&self.encode(img)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;
    use rainforge_tensor::Tape;

    fn input(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn blend_weights_sum_to_one() {
        for theta in [-20.0, -1.3, 0.0, 0.7, 20.0] {
            for gate in [GateBranch::Spatial, GateBranch::Pixel] {
                let w = blend_weights(theta, gate);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
                assert!(w.iter().all(|&v| v >= 0.0));
            }
        }
        assert_eq!(blend_weights(0.0, GateBranch::Spatial), [0.25, 0.5, 0.25]);
    }

    #[test]
    fn saturated_gate_selects_spatial_branch() {
        let mut block = MultiAttentionBlock::<f64>::new(4, GateBranch::Spatial, &mut Rng::new(1));
        block.theta.value = Tensor::full([1], 20.0);
        let tape = Tape::inference();
        let x = tape.constant(input([1, 4, 6, 6], 2));
        let blend = block.blend(&x).unwrap();
        let sa = block.branches(&block.body(&x).unwrap()).unwrap().spatial;
        assert!(blend.value().max_abs_diff(sa.value()).unwrap() < 1e-5);
    }

    #[test]
    fn branch_maps_are_bounded_and_channel_scale_is_spatially_constant() {
        let block = MultiAttentionBlock::<f64>::new(8, GateBranch::Spatial, &mut Rng::new(3));
        let tape = Tape::inference();
        let x = tape.constant(input([2, 8, 5, 7], 4));
        let body = block.body(&x).unwrap();
        let b = block.branches(&body).unwrap();
        assert_eq!(b.pixel_map.shape(), &[2, 1, 5, 7]);
        assert_eq!(b.spatial_map.shape(), &[2, 1, 5, 7]);
        assert_eq!(b.channel_scale.shape(), &[2, 8, 1, 1]);
        for m in [&b.pixel_map, &b.spatial_map, &b.channel_scale] {
            assert!(m.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let ratio = |n: usize, c: usize, y: usize, x: usize| {
            b.channel.value().at(&[n, c, y, x]) / body.value().at(&[n, c, y, x])
        };
        assert!((ratio(1, 3, 0, 0) - ratio(1, 3, 4, 6)).abs() < 1e-12);
        assert_eq!(block.forward(&x).unwrap().shape(), x.shape());
    }

    #[test]
    fn mab_rejects_channel_mismatch() {
        let block = MultiAttentionBlock::<f32>::new(4, GateBranch::Spatial, &mut Rng::new(5));
        let tape = Tape::inference();
        assert!(block.forward(&tape.constant(Tensor::zeros([1, 3, 4, 4]))).is_err());
    }

    #[test]
    fn sam_identities() {
        let mut sam = SupervisedAttention::<f64>::new(4, &mut Rng::new(6));
        let tape = Tape::inference();
        let feat = tape.constant(input([1, 4, 6, 6], 7));
        let img = tape.constant(input([1, 3, 6, 6], 8));
        let (restored, _) = sam.forward(&feat, &img).unwrap();
        assert_eq!(restored.value(), img.value());

        sam.conv_feat.visit_mut("", &mut |_, p| p.value = p.value.zeros_like());
        sam.conv_img = Conv2d::new(4, 3, 3, 1, &mut Rng::new(9));
        let (restored, gated) = sam.forward(&feat, &img).unwrap();
        assert_eq!(gated.value(), feat.value());
        assert_eq!(restored.shape(), img.shape());

        let small = tape.constant(input([1, 3, 4, 6], 10));
        assert!(sam.forward(&feat, &small).is_err());
    }

    #[test]
    fn encoder_decoder_shapes() {
        let net = EncoderDecoder::<f32>::new(8, 1, GateBranch::Spatial, &mut Rng::new(11));
        let tape = Tape::inference();
        let x = tape.constant(Tensor::randn([1, 3, 16, 16], 1.0, &mut Rng::new(12)));
        let enc = net.encode(&x).unwrap();
        assert_eq!(enc[2].shape(), &[1, 32, 4, 4]);
        assert_eq!(net.decode(&enc).unwrap().shape(), &[1, 8, 16, 16]);
        let bad = tape.constant(Tensor::zeros([1, 3, 18, 16]));
        assert!(net.forward(&bad).is_err());
    }

    #[test]
    fn zeroed_decoder_ignores_deepest_level() {
        let mut net = EncoderDecoder::<f64>::new(4, 1, GateBranch::Spatial, &mut Rng::new(13));
        net.dec.visit_mut("", &mut |_, p| p.value = p.value.zeros_like());
        net.up.visit_mut("", &mut |_, p| p.value = p.value.zeros_like());
        let tape = Tape::inference();
        let x = tape.constant(input([1, 3, 8, 8], 14));
        let mut enc = net.encode(&x).unwrap();
        let before = net.decode(&enc).unwrap().into_value();
        let deep = enc[2].value().map(|v| v + 3.5);
        enc[2] = tape.constant(deep);
        let after = net.decode(&enc).unwrap().into_value();
        assert_eq!(before, after);
    }

    #[test]
    fn every_gate_receives_gradient() {
        let net = EncoderDecoder::<f64>::new(4, 2, GateBranch::Spatial, &mut Rng::new(15));
        let tape = Tape::new();
        let x = tape.constant(input([1, 3, 8, 8], 16));
        let loss = net.forward(&x).unwrap().square().mean();
        let grads = tape.backward(&loss).unwrap();
        for level in net.enc.iter().chain(&net.dec) {
            for block in level {
                let g = grads.param(&block.theta).expect("theta gradient");
                assert!(g.data()[0] != 0.0);
            }
        }
    }
}
