//! Double-precision finite-difference checks for every differentiable op
//! and every layer, runnable from the command line.

use rainforge_tensor::{check_with, compare_gradients, FdConfig, FdReport, Rng, Tape, Tensor, TensorError, Var};

use crate::attention::{EncoderDecoder, GateBranch, MultiAttentionBlock, SupervisedAttention};
use crate::error::{Error, Result};
use crate::frequency::{dwt2_haar, idwt2_haar};
use crate::losses::{contrastive_reg, psnr_var, total_loss, FeatureExtractor, LossConfig};
use crate::nn::{Activation, Conv2d, DepthwiseConv2d, LayerNorm, Linear, Module, Resample};
use crate::window::{shifted_mask, window_merge, window_partition, BlockConfig, DconvFfn, DualTransformerBlock, FfnKind, Nlffm, WindowAttention};

pub const STEP: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-6;
pub const LAYER_TOL: f64 = 1e-4;
/// Coordinates sampled per layer tensor.
const LAYER_COORDS: usize = 16;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub report: FdReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passed && self.report.checked > 0
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut Rng::new(seed))
}

fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.uniform_range(0.2, 2.0);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

/// `sum(w * y)` with fixed random `w`.
fn weighted<'t>(y: Var<'t, f64>, seed: u64) -> rainforge_tensor::Result<Var<'t, f64>> {
    let w = randn(y.shape(), seed);
    Ok(y.mul(&y.constant(w))?.sum())
}

fn lift<T>(r: Result<T>) -> rainforge_tensor::Result<T> {
    r.map_err(|e| match e {
        Error::Tensor(t) => t,
        other => TensorError::Invalid { op: "layer", msg: other.to_string() },
    })
}

struct Suite {
    out: Vec<CheckOutcome>,
}

impl Suite {
    fn input<F>(&mut self, name: &str, x: &Tensor<f64>, cfg: FdConfig, f: F) -> Result<()>
    where
        F: for<'t> Fn(&Var<'t, f64>) -> rainforge_tensor::Result<Var<'t, f64>>,
    {
        let report = check_with(f, x, &cfg)?;
        self.out.push(CheckOutcome { name: name.to_string(), report });
        Ok(())
    }

    fn op<F>(&mut self, name: &str, x: &Tensor<f64>, f: F) -> Result<()>
    where
        F: for<'t> Fn(&Var<'t, f64>) -> rainforge_tensor::Result<Var<'t, f64>>,
    {
        self.input(name, x, FdConfig::new(STEP, OP_TOL), f)
    }

    /// Checks the gradient of `loss` with respect to each named parameter
    /// of `module`.
    fn params<M, L>(&mut self, name: &str, module: &M, which: &[&str], loss: L) -> Result<()>
    where
        M: Module<f64> + Clone,
        L: for<'t> Fn(&M, &'t Tape<f64>) -> Result<Var<'t, f64>>,
    {
        let tape = Tape::new();
        let value = loss(module, &tape)?;
        let grads = tape.backward(&value)?;
        let cfg = FdConfig::new(STEP, LAYER_TOL).with_max_coords(LAYER_COORDS);
        for &pname in which {
            let mut found = None;
            module.visit("", &mut |n, p| {
                if n == pname {
                    found = Some((p.value.clone(), grads.param(p).cloned()));
                }
            });
            let Some((x, g)) = found else {
                return Err(Error::Config(format!("{name}: no parameter {pname}")));
            };
            let analytic = g.unwrap_or_else(|| x.zeros_like());
            let report = compare_gradients(&analytic, &x, |probe| {
                let mut m = module.clone();
                m.visit_mut("", &mut |n, p| {
                    if n == pname {
                        p.value = probe.clone();
                    }
                });
                let tape = Tape::inference();
                let v = lift(loss(&m, &tape))?;
                v.value().item()
            }, &cfg)?;
            self.out.push(CheckOutcome { name: format!("{name}.{pname}"), report });
        }
        Ok(())
    }
}

fn op_checks(s: &mut Suite) -> Result<()> {
    let x = away_from_zero(&[2, 5], 1);
    let pos = x.map(f64::abs);
    s.op("relu", &x, |v| weighted(v.relu(), 9))?;
    s.op("gelu", &x, |v| weighted(v.gelu(), 9))?;
    s.op("sigmoid", &x, |v| weighted(v.sigmoid(), 9))?;
    s.op("exp", &x, |v| weighted(v.exp(), 9))?;
    s.op("abs", &x, |v| weighted(v.abs(), 9))?;
    s.op("square", &x, |v| weighted(v.square(), 9))?;
    s.op("ln", &pos, |v| weighted(v.ln(), 9))?;
    s.op("sqrt", &pos, |v| weighted(v.sqrt(), 9))?;

    let a = away_from_zero(&[2, 3, 4], 2);
    let b = away_from_zero(&[3, 4], 3);
    for (name, kind) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        let bb = b.clone();
        s.op(name, &a, move |v| {
            let c = v.constant(bb.clone());
            let y = match kind {
                0 => v.add(&c)?,
                1 => c.sub(v)?,
                2 => v.mul(&c)?,
                _ => c.div(v)?,
            };
            weighted(y, 10)
        })?;
    }

    let t = randn(&[2, 3, 4], 4);
    s.op("sum_axis", &t, |v| weighted(v.sum_axis(1, false)?, 11))?;
    s.op("mean_axis", &t, |v| weighted(v.mean_axis(2, true)?, 11))?;
    s.op("max_axis", &t, |v| weighted(v.max_axis(1, true)?, 11))?;
    s.op("mean", &t, |v| Ok(v.square().mean()))?;
    s.op("reshape_permute", &t, |v| weighted(v.reshape([6, 4])?.permute(&[1, 0])?, 12))?;
    s.op("expand", &randn(&[2, 1, 4], 5), |v| weighted(v.expand([2, 3, 4])?, 12))?;
    s.op("slice_concat", &t, |v| {
        let y = Var::concat(&[&v.slice(1, 1, 2)?, &v.slice(1, 0, 1)?], 1)?;
        weighted(y, 13)
    })?;
    s.op("softmax", &t, |v| weighted(v.softmax(2)?, 14))?;

    let m = randn(&[2, 3, 4], 6);
    let k = randn(&[2, 4, 5], 7);
    s.op("matmul", &m, move |v| weighted(v.matmul(&v.constant(k.clone()))?, 15))?;
    let k2 = randn(&[5, 4], 8);
    s.op("matmul_nt", &m, move |v| weighted(v.matmul_nt(&v.constant(k2.clone()))?, 15))?;
    let k3 = randn(&[2, 3, 5], 9);
    s.op("matmul_tn", &m, move |v| weighted(v.matmul_ex(&v.constant(k3.clone()), true, false)?, 15))?;
    let lw = randn(&[3, 4], 10);
    s.op("linear", &m, move |v| weighted(v.linear(&v.constant(lw.clone()), None)?, 16))?;

    let img = randn(&[2, 3, 5, 6], 11);
    for (name, stride, pad) in [("conv2d", 1, 1), ("conv2d_stride2", 2, 1), ("conv2d_valid", 1, 0)] {
        let w = randn(&[4, 3, 3, 3], 12);
        let bias = randn(&[4], 13);
        s.op(name, &img, move |v| {
            let y = v.conv2d(&v.constant(w.clone()), Some(&v.constant(bias.clone())), stride, pad)?;
            weighted(y, 17)
        })?;
    }
    let wimg = randn(&[4, 3, 3, 3], 14);
    let imgc = img.clone();
    s.op("conv2d_weight", &wimg, move |w| weighted(w.constant(imgc.clone()).conv2d(w, None, 2, 1)?, 18))?;
    let dw = randn(&[3, 1, 3, 3], 15);
    s.op("depthwise_conv2d", &img, move |v| weighted(v.depthwise_conv2d(&v.constant(dw.clone()), None)?, 19))?;
    let imgd = img.clone();
    s.op("depthwise_conv2d_weight", &randn(&[3, 1, 3, 3], 16), move |w| {
        weighted(w.constant(imgd.clone()).depthwise_conv2d(w, None)?, 19)
    })?;
    let (g, be) = (randn(&[3], 17), randn(&[3], 18));
    s.op("layer_norm", &img, move |v| {
        weighted(v.layer_norm(1, &v.constant(g.clone()), &v.constant(be.clone()), 1e-5)?, 20)
    })?;
    s.op("reflection_pad2d", &img, |v| weighted(v.reflection_pad2d(1, 2, 2, 1)?, 21))?;
    s.op("upsample_nearest2x", &img, |v| weighted(v.upsample_nearest2x()?, 21))?;
    s.op("roll2d", &img, |v| weighted(v.roll2d(-2, 3)?, 21))?;
    s.op("crop2d", &img, |v| weighted(v.crop2d(1, 2, 3, 3)?, 21))?;

    let basis = randn(&[2, 3, 6], 19);
    let spd = basis.clone();
    let rhs = randn(&[2, 3, 2], 20);
    let rhs_c = rhs.clone();
    s.op("solve_spd_rhs", &rhs, move |r| {
        let v = r.constant(spd.clone());
        let gram = v.matmul_nt(&v)?.add(&r.constant(Tensor::eye(3)))?;
        weighted(gram.solve_spd(r)?, 22)
    })?;
    s.op("solve_spd_matrix", &basis, move |v| {
        let gram = v.matmul_nt(v)?.add(&v.constant(Tensor::eye(3)))?;
        weighted(gram.solve_spd(&v.constant(rhs_c.clone()))?, 22)
    })?;

    let even = randn(&[1, 2, 4, 6], 21);
    s.op("dwt2_haar", &even, |v| lift(dwt2_haar(v)).and_then(|y| weighted(y, 23)))?;
    s.op("idwt2_haar", &randn(&[1, 8, 2, 3], 22), |v| lift(idwt2_haar(v)).and_then(|y| weighted(y, 23)))?;
    s.op("window_partition_merge", &randn(&[1, 2, 4, 4], 23), |v| {
        let w = lift(window_partition(v, 2))?;
        let scaled = w.mul(&w)?;
        weighted(lift(window_merge(&scaled, 4, 4, 2))?, 24)
    })?;
    s.op("psnr", &randn(&[1, 3, 4, 4], 24).map(|v| 0.5 + 0.1 * v), |v| {
        let clean = v.constant(Tensor::full([1, 3, 4, 4], 0.5));
        lift(psnr_var(v, &clean))
    })?;
    Ok(())
}

fn weighted_out<'t>(y: Result<Var<'t, f64>>, seed: u64) -> Result<Var<'t, f64>> {
    Ok(weighted(y?, seed)?)
}

fn layer_checks(s: &mut Suite) -> Result<()> {
    let cfg = FdConfig::new(STEP, LAYER_TOL).with_max_coords(LAYER_COORDS);
    let mut rng = Rng::new(100);
    let x4 = randn(&[1, 4, 4, 4], 101);

    let conv = Conv2d::<f64>::new(4, 3, 3, 1, &mut rng);
    let xc = x4.clone();
    s.params("conv2d_layer", &conv, &["weight", "bias"], move |m, t| weighted_out(m.forward(&t.constant(xc.clone())), 30))?;
    let lin = Linear::<f64>::new(4, 6, &mut rng);
    let xl = randn(&[3, 4], 102);
    s.params("linear_layer", &lin, &["weight", "bias"], move |m, t| weighted_out(m.forward(&t.constant(xl.clone())), 31))?;
    let ln = LayerNorm::<f64>::new(4);
    let xn = x4.clone();
    s.params("layer_norm_layer", &ln, &["gamma", "beta"], move |m, t| weighted_out(m.forward_channels(&t.constant(xn.clone())), 32))?;
    let dw = DepthwiseConv2d::<f64>::new(4, &mut rng);
    let xd = x4.clone();
    s.params("depthwise_layer", &dw, &["weight", "bias"], move |m, t| weighted_out(m.forward(&t.constant(xd.clone())), 33))?;
    let down = Resample::<f64>::down(4, &mut rng);
    let xr = x4.clone();
    s.params("resample_down", &down, &["conv.weight"], move |m, t| weighted_out(m.forward(&t.constant(xr.clone())), 34))?;
    let up = Resample::<f64>::up(4, &mut rng);
    let xu = randn(&[1, 4, 2, 2], 103);
    s.params("resample_up", &up, &["conv.weight"], move |m, t| weighted_out(m.forward(&t.constant(xu.clone())), 35))?;

    let mut mab = MultiAttentionBlock::<f64>::new(4, GateBranch::Spatial, &mut rng);
    mab.theta.value = Tensor::full([1], 0.3);
    let xm = x4.clone();
    s.params("mab", &mab, &["theta", "body1.weight", "pa1.weight", "sa.weight", "ca2.weight"], move |m, t| {
        weighted_out(m.forward(&t.constant(xm.clone())), 36)
    })?;
    let mab_in = mab.clone();
    s.input("mab.input", &x4, cfg, move |v| weighted(lift(mab_in.forward(v))?, 36))?;

    let mut sam = SupervisedAttention::<f64>::new(4, &mut rng);
    sam.conv_img = Conv2d::new(4, 3, 3, 1, &mut rng);
    let (sf, si) = (x4.clone(), randn(&[1, 3, 4, 4], 104));
    s.params("sam", &sam, &["conv_img.weight", "conv_mask.weight", "conv_feat.weight"], move |m, t| {
        let (r, g) = m.forward(&t.constant(sf.clone()), &t.constant(si.clone()))?;
        Ok(weighted(r, 37)?.add(&weighted(g, 38)?)?)
    })?;

    let mut net = EncoderDecoder::<f64>::new(2, 1, GateBranch::Spatial, &mut rng);
    net.enc[1][0].theta.value = Tensor::full([1], -0.4);
    let xe = randn(&[1, 3, 4, 4], 105);
    s.params("encoder_decoder", &net, &["enc.1.0.theta", "dec.0.0.body2.weight", "shallow.weight"], move |m, t| {
        weighted_out(m.forward(&t.constant(xe.clone())), 39)
    })?;

    let attn = WindowAttention::<f64>::new(4, 4, 2, &mut rng)?;
    let xw = randn(&[4, 4, 4], 106);
    let mask = shifted_mask::<f64>(4, 4, 2, 1);
    s.params("window_attention", &attn, &["q.weight", "k.weight", "v.weight", "proj.weight"], move |m, t| {
        weighted_out(m.forward(&t.constant(xw.clone()), Some(&mask)), 40)
    })?;

    let block_cfg = BlockConfig {
        dim: 4,
        heads: 2,
        window: 2,
        shift: 1,
        ffn_ratio: 2,
        ffn: FfnKind::Dconv,
        ffn_literal: false,
        conv_branch: true,
        activation: Activation::Gelu,
    };
    let block = DualTransformerBlock::<f64>::new(&block_cfg, &mut rng)?;
    let xb = randn(&[1, 4, 4, 4], 107);
    s.params("dual_block", &block, &["norm.gamma", "attn.q.weight", "conv1.weight", "ffn.fc1.weight", "ffn.dw.weight"], move |m, t| {
        weighted_out(m.forward(&t.constant(xb.clone())), 41)
    })?;
    let block_in = block.clone();
    s.input("dual_block.input", &x4, cfg, move |v| weighted(lift(block_in.forward(v))?, 41))?;

    let ffn = DconvFfn::<f64>::new(4, 2, true, Activation::Relu, false, &mut rng);
    let xf = x4.clone();
    s.params("dconv_ffn", &ffn, &["fc1.weight", "fc2.weight"], move |m, t| weighted_out(m.forward(&t.constant(xf.clone())), 42))?;

    let fuse = Nlffm::<f64>::new(4, 3, 1e-4, &mut rng);
    let (f1, f2) = (x4.clone(), randn(&[1, 4, 4, 4], 108));
    s.params("nlffm", &fuse, &["basis.weight", "basis.bias"], move |m, t| {
        weighted_out(m.forward(&t.constant(f1.clone()), &t.constant(f2.clone())), 43)
    })?;
    let (fuse_in, f2b) = (fuse.clone(), randn(&[1, 4, 4, 4], 108));
    s.input("nlffm.input", &x4, cfg, move |v| weighted(lift(fuse_in.forward(v, &v.constant(f2b.clone())))?, 43))?;

    let fx = FeatureExtractor::<f64>::with_widths(12, &[4, 4], 109);
    let mut r = Rng::new(110);
    let clean = Tensor::uniform([1, 3, 8, 8], 0.0, 1.0, &mut r);
    let rainy = clean.zip_map(&Tensor::uniform([1, 3, 8, 8], 0.0, 0.4, &mut r), |c, n| c + n)?;
    let restored = clean.zip_map(&rainy, |c, y| 0.5 * (c + y))?;
    let loss_cfg = LossConfig::default();
    let (c1, r1, fx1, l1) = (clean.clone(), rainy.clone(), fx.clone(), loss_cfg.clone());
    s.input("contrastive_reg", &restored, cfg, move |v| lift(contrastive_reg(v, &c1, &r1, &fx1, &l1)))?;
    s.input("total_loss", &restored, cfg, move |v| Ok(lift(total_loss(v, &clean, &rainy, &fx, &loss_cfg))?.total))?;
    Ok(())
}

/// Runs every check. Op checks use tolerance [`OP_TOL`], layer and loss
/// checks [`LAYER_TOL`].
pub fn run_suite() -> Result<Vec<CheckOutcome>> {
    let mut s = Suite { out: Vec::new() };
    op_checks(&mut s)?;
    layer_checks(&mut s)?;
    Ok(s.out)
}
