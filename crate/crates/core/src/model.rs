//! The two-stage network: a multi-attention U-net with a supervised
//! attention bridge, then a stack of dual-branch window transformer blocks
//! with subspace-projection fusion and a global residual.

use rainforge_tensor::{Real, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attention::{EncoderDecoder, GateBranch, SupervisedAttention, LEVELS};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nn::{module_fields, Activation, Conv2d, Module};
use crate::window::{BlockConfig, DualTransformerBlock, FfnKind, Nlffm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub mab_per_level: usize,
    pub levels: usize,
    pub window: usize,
    pub stage2_blocks: usize,
    pub ffn_ratio: usize,
    /// Subspace rank of each fusion; `base_channels / 2` when absent.
    pub nlffm_rank: Option<usize>,
    pub heads: usize,
    pub lambda: f64,
    pub omega: Option<Vec<f64>>,
    pub eps_cr: f64,
    pub eps_proj: f64,
    pub init_seed: u64,
    pub feature_seed: u64,
    pub data_seed: u64,
    pub activation: Activation,
    pub ffn: FfnKind,
    pub ffn_literal: bool,
    pub conv_branch: bool,
    pub fusion: bool,
    pub gate: GateBranch,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 8,
            mab_per_level: 3,
            levels: LEVELS,
            window: 4,
            stage2_blocks: 2,
            ffn_ratio: 4,
            nlffm_rank: None,
            heads: 2,
            lambda: 0.1,
            omega: None,
            eps_cr: 1e-7,
            eps_proj: 1e-4,
            init_seed: 0,
            feature_seed: 1,
            data_seed: 2,
            activation: Activation::Relu,
            ffn: FfnKind::Dconv,
            ffn_literal: false,
            conv_branch: true,
            fusion: true,
            gate: GateBranch::Spatial,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        let fail = |msg: String| Err(Error::Config(msg));
        if c < 2 || c % 2 != 0 {
            return fail(format!("base_channels must be even and at least 2, got {c}"));
        }
        if self.heads == 0 || c % self.heads != 0 {
            return fail(format!("base_channels {c} is not divisible by {} heads", self.heads));
        }
        if self.levels != LEVELS {
            return fail(format!("only {LEVELS} encoder levels are supported, got {}", self.levels));
        }
        if self.window == 0 || self.ffn_ratio == 0 || self.stage2_blocks == 0 {
            return fail("window, ffn_ratio and stage2_blocks must be positive".into());
        }
        if self.nlffm_rank() == 0 {
            return fail("nlffm_rank must be positive".into());
        }
        if !(self.eps_proj > 0.0) {
            return fail(format!("eps_proj must be positive, got {}", self.eps_proj));
        }
        self.loss().validate()
    }

    pub fn nlffm_rank(&self) -> usize {
        self.nlffm_rank.unwrap_or(self.base_channels / 2)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            omega: self.omega.clone(),
            eps_cr: self.eps_cr,
        }
    }

    /// Inputs are padded to a multiple of this before the forward pass.
    pub fn pad_multiple(&self) -> usize {
        let div = 1 << (LEVELS - 1);
        div / gcd(div, self.window) * self.window
    }

    fn block_config(&self, index: usize) -> BlockConfig {
        BlockConfig {
            dim: self.base_channels,
            heads: self.heads,
            window: self.window,
            shift: if index % 2 == 1 { self.window / 2 } else { 0 },
            ffn_ratio: self.ffn_ratio,
            ffn: self.ffn,
            ffn_literal: self.ffn_literal,
            conv_branch: self.conv_branch,
            activation: self.activation,
        }
    }
}

/// Both supervised outputs of a forward pass, at input resolution.
pub struct ModelOutput<'t, T: Real> {
    pub stage1: Var<'t, T>,
    pub stage2: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct Derainer<T: Real> {
    pub config: ModelConfig,
    pub stage1: EncoderDecoder<T>,
    pub sam: SupervisedAttention<T>,
    pub shallow2: Conv2d<T>,
    pub blocks: Vec<DualTransformerBlock<T>>,
    pub fusions: Vec<Nlffm<T>>,
    pub out_conv: Conv2d<T>,
}

module_fields!(Derainer { stage1, sam, shallow2, blocks, fusions, out_conv });

impl<T: Real> Derainer<T> {
    /// Initializes every parameter from `config.init_seed`. The residual
    /// output convolution starts at zero, so a fresh model returns its input.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.init_seed);
        let c = config.base_channels;
        let stage1 = EncoderDecoder::new(c, config.mab_per_level, config.gate, &mut rng);
        let sam = SupervisedAttention::new(c, &mut rng);
        let shallow2 = Conv2d::new(3, c, 3, 1, &mut rng);
        let blocks = (0..config.stage2_blocks)
            .map(|i| DualTransformerBlock::new(&config.block_config(i), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let fusions = if config.fusion {
            (1..config.stage2_blocks)
                .map(|_| Nlffm::new(c, config.nlffm_rank(), config.eps_proj, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Derainer {
            config: config.clone(),
            stage1,
            sam,
            shallow2,
            blocks,
            fusions,
            out_conv: Conv2d::zeroed(c, 3, 3),
        })
    }

    /// Differentiable forward pass on `[N, 3, H, W]` images in `[0, 1]`.
    /// Outputs are not clamped.
    pub fn forward<'t>(&self, rainy: &Var<'t, T>) -> Result<ModelOutput<'t, T>> {
        if rainy.rank() != 4 || rainy.shape()[1] != 3 {
            return Err(Error::shape("model", format!("expected [N, 3, H, W] input, got {:?}", rainy.shape())));
        }
        let (h, w) = (rainy.shape()[2], rainy.shape()[3]);
        let m = self.config.pad_multiple();
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let x = if ph + pw > 0 { rainy.reflection_pad2d(0, ph, 0, pw)? } else { rainy.clone() };

        let feat = self.stage1.forward(&x)?;
        let (stage1, gated) = self.sam.forward(&feat, &x)?;

        let x0 = self.shallow2.forward(&stage1)?.add(&gated)?;
        let mut hdn = x0.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            hdn = block.forward(&hdn)?;
            if let Some(fuse) = self.fusions.get(i) {
                hdn = fuse.forward(&x0, &hdn)?;
            }
        }
        let stage2 = x.add(&self.out_conv.forward(&hdn)?)?;

        let crop = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            if ph + pw > 0 {
                Ok(v.crop2d(0, 0, h, w)?)
            } else {
                Ok(v)
            }
        };
        Ok(ModelOutput { stage1: crop(stage1)?, stage2: crop(stage2)? })
    }

    /// Inference: stage-two output clamped to `[0, 1]`.
    pub fn derain(&self, rainy: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let out = self.forward(&tape.constant(rainy.clone()))?;
        Ok(out.stage2.into_value().clamp(T::zero(), T::one()))
    }

    /// Parameter tensors in visiting order.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        self.named_params().into_iter().map(|(n, p)| (n, p.value.clone())).collect()
    }

    /// Replaces every parameter from `entries`, which must name exactly the
    /// model's parameters with matching shapes.
    pub fn load_state(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> =
            self.named_params().into_iter().map(|(n, p)| (n, p.shape().to_vec())).collect();
        for (name, shape) in &names {
            match entries.iter().find(|(n, _)| n == name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some((_, t)) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, model expects {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some((extra, _)) = entries.iter().find(|(n, _)| !names.iter().any(|(m, _)| m == n)) {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        self.visit_mut("", &mut |name, p| {
            let (_, t) = entries.iter().find(|(n, _)| n == name).expect("checked above");
            p.value = t.clone();
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { base_channels: 4, mab_per_level: 1, heads: 1, ..ModelConfig::default() }
    }

    #[test]
    fn fresh_model_is_identity() {
        let model = Derainer::<f32>::new(&tiny()).unwrap();
        let tape = Tape::inference();
        let x = tape.constant(Tensor::uniform([2, 3, 12, 20], 0.0, 1.0, &mut Rng::new(0)));
        let out = model.forward(&x).unwrap();
        assert_eq!(out.stage1.value(), x.value());
        assert_eq!(out.stage2.value(), x.value());
    }

    #[test]
    fn shapes_for_unpadded_extents() {
        let mut model = Derainer::<f32>::new(&tiny()).unwrap();
        model.out_conv = Conv2d::new(4, 3, 3, 1, &mut Rng::new(1));
        let tape = Tape::inference();
        for (h, w) in [(24, 24), (9, 13), (8, 8)] {
            let x = tape.constant(Tensor::uniform([1, 3, h, w], 0.0, 1.0, &mut Rng::new(2)));
            let out = model.forward(&x).unwrap();
            assert_eq!(out.stage1.shape(), &[1, 3, h, w]);
            assert_eq!(out.stage2.shape(), &[1, 3, h, w]);
        }
        assert!(model.forward(&tape.constant(Tensor::zeros([1, 1, 8, 8]))).is_err());
    }

    #[test]
    fn pad_multiple_is_lcm() {
        let cfg = |window| ModelConfig { window, ..ModelConfig::default() };
        assert_eq!(cfg(4).pad_multiple(), 4);
        assert_eq!(cfg(8).pad_multiple(), 8);
        assert_eq!(cfg(6).pad_multiple(), 12);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { base_channels: 7, ..tiny() }.validate().is_err());
        assert!(ModelConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { levels: 4, ..tiny() }.validate().is_err());
        assert!(ModelConfig { eps_proj: 0.0, ..tiny() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn state_round_trip_and_mismatch() {
        let a = Derainer::<f32>::new(&tiny()).unwrap();
        let mut b = Derainer::<f32>::new(&ModelConfig { init_seed: 9, ..tiny() }).unwrap();
        b.load_state(&a.state()).unwrap();
        assert_eq!(a.state(), b.state());
        let mut wide = Derainer::<f32>::new(&ModelConfig { base_channels: 6, heads: 1, ..tiny() }).unwrap();
        let err = wide.load_state(&a.state()).unwrap_err().to_string();
        assert!(err.contains("stage1.shallow.weight"), "{err}");
    }
}
