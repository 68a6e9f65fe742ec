use proptest::prelude::*;

use rainforge::attention::{blend_weights, GateBranch};
use rainforge::data::image_io::quantize;
use rainforge::data::Transform;
use rainforge::frequency::{dwt2_haar_tensor, idwt2_haar_tensor};
use rainforge::metrics::{psnr, ssim};
use rainforge::tensor::{Rng, Tape, Tensor};
use rainforge::train::Schedule;
use rainforge::window::{shifted_mask, window_merge, window_partition};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn haar_is_invertible_and_orthonormal(n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = Tensor::<f64>::randn([n, c, 2 * h, 2 * w], 1.0, &mut Rng::new(seed));
        let s = dwt2_haar_tensor(&x).unwrap();
        let back = idwt2_haar_tensor(&s).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let e: f64 = x.data().iter().map(|v| v * v).sum();
        prop_assert!((s.energy() - e).abs() <= 1e-10 * e.max(1.0));
    }

    #[test]
    fn windows_round_trip(n in 1usize..3, c in 1usize..4, m in 1usize..5, ph in 1usize..4, pw in 1usize..4, seed in any::<u64>()) {
        let (h, w) = (m * ph, m * pw);
        let x = Tensor::<f32>::randn([n, c, h, w], 1.0, &mut Rng::new(seed));
        let tape = Tape::inference();
        let parts = window_partition(&tape.constant(x.clone()), m).unwrap();
        prop_assert_eq!(window_merge(&parts, h, w, m).unwrap().into_value(), x);
    }

    #[test]
    fn masks_are_symmetric_with_open_diagonal(m in 2usize..6, ph in 1usize..4, pw in 1usize..4, s in 0usize..5) {
        let s = s % m;
        let mask = shifted_mask::<f64>(m * ph, m * pw, m, s);
        let t = m * m;
        for block in mask.data().chunks(t * t) {
            for i in 0..t {
                prop_assert_eq!(block[i * t + i], 0.0);
                for j in 0..t {
                    prop_assert_eq!(block[i * t + j], block[j * t + i]);
                }
            }
        }
        // Only the last row and column of windows can mix regions.
        for (b, block) in mask.data().chunks(t * t).enumerate() {
            let interior = b / pw + 1 < ph && b % pw + 1 < pw;
            if interior || s == 0 {
                prop_assert!(block.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn transforms_are_bijections_onto_the_crop(
        size in 1usize..7, extra_h in 0usize..4, extra_w in 0usize..4, seed in any::<u64>()
    ) {
        let (h, w) = (size + extra_h, size + extra_w);
        let t = Transform::draw(h, w, size, &mut Rng::new(seed)).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for y in 0..size {
            for x in 0..size {
                let (sy, sx) = t.source(y, x);
                prop_assert!(sy >= t.top && sy < t.top + size && sx >= t.left && sx < t.left + size);
                seen.insert((sy, sx));
            }
        }
        prop_assert_eq!(seen.len(), size * size);
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>(), sigma in 0.01f64..0.3) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f64>::uniform([3, 12, 12], 0.0, 1.0, &mut rng);
        let noise = Tensor::<f64>::randn([3, 12, 12], sigma, &mut rng);
        let y = x.zip_map(&noise, |a, b| (a + b).clamp(0.0, 1.0)).unwrap();
        prop_assert!((psnr(&x, &y, 1.0).unwrap() - psnr(&y, &x, 1.0).unwrap()).abs() < 1e-9);
        let (s1, s2) = (ssim(&x, &y, 1.0).unwrap(), ssim(&y, &x, 1.0).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!(s1 <= 1.0 + 1e-12);
    }

    #[test]
    fn schedule_is_monotone(lr_init in 1e-6f64..1e-2, ratio in 0.0f64..1.0, total in 1u64..500) {
        let s = Schedule { lr_init, lr_final: lr_init * ratio, total_iters: total };
        prop_assert_eq!(s.lr_at(0).unwrap(), lr_init);
        prop_assert_eq!(s.lr_at(total).unwrap(), lr_init * ratio);
        let mut prev = f64::INFINITY;
        for i in 0..=total {
            let lr = s.lr_at(i).unwrap();
            prop_assert!(lr <= prev);
            prev = lr;
        }
        prop_assert!(s.lr_at(total + 1).is_err());
    }

    #[test]
    fn gate_weights_form_a_distribution(theta in -50.0f64..50.0, pixel in any::<bool>()) {
        let gate = if pixel { GateBranch::Pixel } else { GateBranch::Spatial };
        let w = blend_weights(theta, gate);
        prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (a, sides) = if pixel { (w[0], [w[1], w[2]]) } else { (w[1], [w[0], w[2]]) };
        prop_assert_eq!(sides[0], sides[1]);
        prop_assert!((a - 1.0 / (1.0 + (-theta).exp())).abs() < 1e-12);
    }
}

#[test]
fn every_byte_survives_scaling() {
    for b in 0..=255u8 {
        assert_eq!(quantize(b as f32 / 255.0), b);
    }
}
