mod common;

use rainforge::attention::{blend_weights, GateBranch, MultiAttentionBlock};
use rainforge::losses::{contrastive_reg, total_loss, FeatureExtractor, LossConfig};
use rainforge::model::{Derainer, ModelConfig};
use rainforge::nn::Module;
use rainforge::tensor::{Rng, Tape, Tensor};

#[test]
fn projector_is_symmetric_idempotent_and_orthogonal() {
    for seed in [3, 4] {
        let q = common::projector_quality(seed);
        assert!(q.asymmetry <= 1e-5, "{q:?}");
        assert!(q.idempotence <= 1e-4, "{q:?}");
        assert!(q.residual_alignment <= 1e-3, "{q:?}");
    }
}

#[test]
fn gate_weights_sum_to_one() {
    for gate in [GateBranch::Spatial, GateBranch::Pixel] {
        for theta in [-20.0, 0.0, 20.0] {
            let w = blend_weights(theta, gate);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn saturated_gate_selects_spatial_path() {
    let mut rng = Rng::new(5);
    let mut mab = MultiAttentionBlock::<f32>::new(8, GateBranch::Spatial, &mut rng);
    mab.theta.value = Tensor::full([1], 20.0);
    let x = Tensor::<f32>::randn([2, 8, 6, 6], 1.0, &mut rng);
    let tape = Tape::inference();
    let xv = tape.constant(x);
    let got = mab.forward(&xv).unwrap().into_value();
    let b = mab.branches(&mab.body(&xv).unwrap()).unwrap();
    let want = xv.add(&b.spatial).unwrap().into_value();
    let err = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(err <= 1e-5, "{err}");
}

fn pair() -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = Rng::new(9);
    let clean = Tensor::<f32>::uniform([1, 3, 16, 16], 0.0, 0.8, &mut rng);
    let streaks = Tensor::<f32>::uniform([1, 3, 16, 16], 0.0, 0.3, &mut rng);
    (clean.clone(), clean.zip_map(&streaks, |c, s| c + s).unwrap())
}

#[test]
fn contrastive_geometry() {
    let (clean, rainy) = pair();
    let fx = FeatureExtractor::<f32>::new(1);
    let cfg = LossConfig::default();
    assert_eq!(cfg.lambda, 0.1);
    let tape = Tape::inference();
    let at_clean = contrastive_reg(&tape.constant(clean.clone()), &clean, &rainy, &fx, &cfg).unwrap();
    let at_rainy = contrastive_reg(&tape.constant(rainy.clone()), &clean, &rainy, &fx, &cfg).unwrap();
    assert_eq!(at_clean.value().item().unwrap(), 0.0);
    assert!(at_rainy.value().item().unwrap() > 0.0);

    let lc = total_loss(&tape.constant(clean.clone()), &clean, &rainy, &fx, &cfg).unwrap();
    let lr = total_loss(&tape.constant(rainy.clone()), &clean, &rainy, &fx, &cfg).unwrap();
    assert!(lc.total.value().item().unwrap() < lr.total.value().item().unwrap());
}

#[test]
fn default_model_has_expected_parameter_count() {
    fn conv(i: usize, o: usize, k: usize) -> usize {
        i * o * k * k + o
    }
    fn mab(c: usize) -> usize {
        let r = (c / 4).max(1);
        2 * conv(c, c, 3) + conv(c, r, 1) + conv(r, 1, 1) + conv(2, 1, 3) + conv(c, r, 1) + conv(r, c, 1) + 1
    }
    let cfg = ModelConfig::default();
    let (c, per) = (cfg.base_channels, cfg.mab_per_level);
    let levels: usize = (0..3).map(|i| 2 * per * mab(c << i)).sum();
    let resample = conv(c, 2 * c, 3) + conv(2 * c, 4 * c, 3) + conv(4 * c, 2 * c, 3) + conv(2 * c, c, 3);
    let stage1 = conv(3, c, 3) + levels + resample;
    let sam = conv(c, 3, 3) + conv(3, c, 3) + conv(c, c, 3);
    let hidden = cfg.ffn_ratio * c;
    let block = 2 * c                                      // norm
        + 3 * (c * c + c) + (c * c / 2 + c / 2)             // q, k, v, proj
        + conv(c, c / 2, 3) + conv(c / 2, c / 2, 3)         // conv branch
        + 2 * c + (c * hidden + hidden) + (9 * hidden + hidden) + (hidden * c + c);
    let fusion = conv(2 * c, cfg.nlffm_rank(), 3);
    let expected = stage1 + sam + conv(3, c, 3) + cfg.stage2_blocks * block + (cfg.stage2_blocks - 1) * fusion + conv(c, 3, 3);
    let model = Derainer::<f32>::new(&cfg).unwrap();
    assert_eq!(model.param_count(), expected);
    assert_eq!(expected, 169_896);
}

#[test]
fn fresh_model_returns_input_exactly() {
    let cfg = ModelConfig::default();
    let model = Derainer::<f32>::new(&cfg).unwrap();
    for (h, w) in [(24, 24), (13, 18)] {
        let x = Tensor::<f32>::uniform([2, 3, h, w], 0.0, 1.0, &mut Rng::new(4));
        let tape = Tape::inference();
        let out = model.forward(&tape.constant(x.clone())).unwrap();
        assert_eq!(out.stage2.value(), &x);
        assert_eq!(out.stage1.value(), &x);
    }
}

#[test]
fn every_parameter_reaches_the_loss_once_zero_convs_are_perturbed() {
    let cfg = ModelConfig { base_channels: 4, mab_per_level: 1, ..ModelConfig::default() };
    let mut model = Derainer::<f32>::new(&cfg).unwrap();
    // Small weights and positive biases keep every ReLU active, so the check
    // is about wiring rather than which units an initialization leaves dead.
    // This also lifts the zero-initialized output convolutions.
    let mut rng = Rng::new(8);
    model.visit_mut("", &mut |name, p| {
        p.value = if name.ends_with("bias") {
            Tensor::uniform(p.shape().to_vec(), 0.1, 0.3, &mut rng)
        } else {
            Tensor::randn(p.shape().to_vec(), 0.05, &mut rng)
        };
    });
    let mut reached = std::collections::BTreeSet::new();
    for _ in 0..4 {
        let x = Tensor::<f32>::uniform([2, 3, 12, 12], 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        let out = model.forward(&tape.constant(x)).unwrap();
        let loss = out.stage2.square().sum().add(&out.stage1.square().sum()).unwrap();
        let grads = tape.backward(&loss).unwrap();
        model.visit("", &mut |name, p| {
            if grads.param(p).is_some_and(|g| g.data().iter().any(|&v| v != 0.0)) {
                reached.insert(name.to_string());
            }
        });
    }
    let mut dead = Vec::new();
    model.visit("", &mut |name, _| {
        if !reached.contains(name) {
            dead.push(name.to_string());
        }
    });
    assert!(dead.is_empty(), "no gradient reaches {dead:?}");
}
