//! Reference implementations shared by the integration and acceptance
//! tests.
#![allow(dead_code)]

use rainforge::nn::{Activation, Linear};
use rainforge::tensor::{Rng, Tape, Tensor};
use rainforge::window::{project_onto, BlockConfig, DualTransformerBlock, FfnKind, Nlffm, WindowAttention};

pub fn block(dim: usize, heads: usize, window: usize, shift: usize, seed: u64) -> DualTransformerBlock<f32> {
    let cfg = BlockConfig {
        dim,
        heads,
        window,
        shift,
        ffn_ratio: 2,
        ffn: FfnKind::Dconv,
        ffn_literal: false,
        conv_branch: true,
        activation: Activation::Gelu,
    };
    DualTransformerBlock::new(&cfg, &mut Rng::new(seed)).unwrap()
}

pub fn affine(lin: &Linear<f32>, x: &[f64]) -> Vec<f64> {
    let (w, b) = (lin.weight.value.data(), lin.bias.value.data());
    let n_in = x.len();
    (0..b.len())
        .map(|o| b[o] as f64 + (0..n_in).map(|i| w[o * n_in + i] as f64 * x[i]).sum::<f64>())
        .collect()
}

/// Token-by-token shifted-window attention on an `h x w` map whose sides
/// are multiples of the window. Two pixels interact when they share a
/// window after the cyclic shift and neither axis separates a wrapped
/// pixel from an unwrapped one.
pub fn oracle(attn: &WindowAttention<f32>, x: &Tensor<f32>, m: usize, s: usize) -> Vec<f64> {
    let &[1, c, h, w] = x.shape() else { panic!() };
    let pixel = |y: usize, xx: usize| -> Vec<f64> { (0..c).map(|ch| x.data()[(ch * h + y) * w + xx] as f64).collect() };
    // Rolled coordinate and wrap flags of an original position.
    let key = |y: usize, xx: usize| {
        let (ry, rx) = ((y + h - s) % h, (xx + w - s) % w);
        (ry / m, rx / m, y < s, xx < s)
    };
    let heads = attn.heads;
    let hd = c / heads;
    let out_dim = attn.proj.out_features();
    let mut out = vec![0.0; out_dim * h * w];
    let positions: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |xx| (y, xx))).collect();
    let qs: Vec<Vec<f64>> = positions.iter().map(|&(y, xx)| affine(&attn.q, &pixel(y, xx))).collect();
    let ks: Vec<Vec<f64>> = positions.iter().map(|&(y, xx)| affine(&attn.k, &pixel(y, xx))).collect();
    let vs: Vec<Vec<f64>> = positions.iter().map(|&(y, xx)| affine(&attn.v, &pixel(y, xx))).collect();
    for (i, &(y, xx)) in positions.iter().enumerate() {
        let peers: Vec<usize> = (0..positions.len()).filter(|&j| key(positions[j].0, positions[j].1) == key(y, xx)).collect();
        let mut merged = vec![0.0; c];
        for hh in 0..heads {
            let r = hh * hd..(hh + 1) * hd;
            let scores: Vec<f64> = peers
                .iter()
                .map(|&j| r.clone().map(|d| qs[i][d] * ks[j][d]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for (p, &j) in peers.iter().enumerate() {
                for d in r.clone() {
                    merged[d] += e[p] / z * vs[j][d];
                }
            }
        }
        for (o, v) in affine(&attn.proj, &merged).into_iter().enumerate() {
            out[(o * h + y) * w + xx] = v;
        }
    }
    out
}

/// Largest absolute gap between the block's shifted-window attention and
/// the token-loop oracle on a random `2M x 3M` map.
pub fn wmsa_error(m: usize, shift: usize, heads: usize, seed: u64) -> f64 {
    let (h, w) = (2 * m, 3 * m);
    let b = block(4, heads, m, shift, seed);
    let x = Tensor::<f32>::randn([1, 4, h, w], 1.0, &mut Rng::new(seed + 10));
    let tape = Tape::inference();
    let got = b.attention_branch(&tape.constant(x.clone())).unwrap().into_value();
    let want = oracle(&b.attn, &x, m, shift);
    got.data().iter().zip(&want).map(|(&g, &o)| (g as f64 - o).abs()).fold(0.0, f64::max)
}

pub fn frobenius(d: &[f64]) -> f64 {
    d.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                out[i * n + j] += a[i * n + k] * b[k * n + j];
            }
        }
    }
    out
}

/// The explicit `HW x HW` projector: projecting the identity (one channel
/// per spatial position) returns its rows.
pub fn projector(fuse: &Nlffm<f32>, x1: &Tensor<f32>, x2: &Tensor<f32>) -> (Vec<f64>, usize) {
    let tape = Tape::inference();
    let vt = fuse.basis_rows(&tape.constant(x1.clone()), &tape.constant(x2.clone())).unwrap();
    let &[_, _, h, w] = x1.shape() else { panic!() };
    let n = h * w;
    let eye = tape.constant(Tensor::<f32>::eye(n).reshape([1, n, h, w]).unwrap());
    let p = project_onto(&vt, &eye, fuse.eps).unwrap().into_value();
    (p.data().iter().map(|&v| v as f64).collect(), n)
}

#[derive(Debug)]
pub struct ProjectorQuality {
    /// `|P - P^T| / |P|` (Frobenius).
    pub asymmetry: f64,
    /// `|P P - P| / |P|`.
    pub idempotence: f64,
    /// Largest normalized inner product between a basis vector and a
    /// channel of the fusion residual `x1 - P x1`.
    pub residual_alignment: f64,
}

/// Measures the projector of a randomly initialized fusion (4 channels,
/// rank 3, eps 1e-4) on a random 6x6 input pair.
pub fn projector_quality(seed: u64) -> ProjectorQuality {
    let mut rng = Rng::new(seed);
    let fuse = Nlffm::<f32>::new(4, 3, 1e-4, &mut rng);
    let x1 = Tensor::<f32>::randn([1, 4, 6, 6], 1.0, &mut rng);
    let x2 = Tensor::<f32>::randn([1, 4, 6, 6], 1.0, &mut rng);
    let (p, n) = projector(&fuse, &x1, &x2);
    let scale = frobenius(&p);
    let asym: Vec<f64> = (0..n * n).map(|i| p[i] - p[(i % n) * n + i / n]).collect();
    let p2 = matmul(&p, &p, n);
    let idem: Vec<f64> = p2.iter().zip(&p).map(|(a, b)| a - b).collect();

    let tape = Tape::inference();
    let (a, b) = (tape.constant(x1.clone()), tape.constant(x2.clone()));
    let vt = fuse.basis_rows(&a, &b).unwrap().into_value();
    let fused = fuse.forward(&a, &b).unwrap().into_value();
    let k = vt.shape()[1];
    let (vd, xd, fd) = (vt.data(), x1.data(), fused.data());
    let mut worst = 0.0f64;
    for ch in 0..4 {
        let r: Vec<f64> = (0..n).map(|s| (xd[ch * n + s] - fd[ch * n + s]) as f64).collect();
        for row in 0..k {
            let v: Vec<f64> = (0..n).map(|s| vd[row * n + s] as f64).collect();
            let dot: f64 = v.iter().zip(&r).map(|(a, b)| a * b).sum();
            worst = worst.max(dot.abs() / (frobenius(&v) * frobenius(&r)));
        }
    }
    ProjectorQuality { asymmetry: frobenius(&asym) / scale, idempotence: frobenius(&idem) / scale, residual_alignment: worst }
}
