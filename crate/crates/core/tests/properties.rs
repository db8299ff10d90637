use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stgs_core::gaussian::{slot_count, window_features, CameraModel, GaussianSet, TemporalFeatureBank};
use stgs_core::grid::{
    dequantize_attribute, dissimilarity, morton_seed, quantize_attribute, refine, sort_attributes, sort_to_grid,
    AttrQuant, GridLayout, QuantSpec,
};
use stgs_core::losses;
use stgs_core::math::{self, Mat};
use stgs_core::render::{self, DynamicMask};
use stgs_core::video::{decode_feature_video, encode_feature_video, encode_with_reconstruction};

fn random_gaussians(n: usize, seed: u64) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = GaussianSet::zeros(n);
    for i in 0..n {
        for k in 0..3 {
            g.positions.set(i, k, rng.random_range(-1.0..1.0));
            g.scales.set(i, k, math::ln(rng.random_range(0.02..0.3)));
            g.colors.set(i, k, rng.random_range(0.0..1.0));
        }
        for k in 0..4 {
            g.rotations.set(i, k, rng.random_range(-1.0..1.0));
        }
        g.opacities.set(i, 0, rng.random_range(-3.0..3.0));
    }
    g
}

#[test]
fn slot_count_and_window_overlap_exhaustive() {
    let f = 2;
    for w in [1, 3, 5] {
        for g in 1..=100 {
            let mut bank = TemporalFeatureBank::zeros(g, w, f, 2).unwrap();
            assert_eq!(bank.slots(), g + w - 1);
            assert_eq!(slot_count(g, w), g + w - 1);
            assert_eq!(bank.features.rows, (g + w - 1) * 2);
            for s in 0..bank.slots() {
                for i in 0..2 {
                    bank.slot_row_mut(s, i).fill((s * 10 + i) as f64);
                }
            }
            let mut seen = vec![false; bank.slots()];
            for frame in 0..g {
                let win = window_features(&bank, frame).unwrap();
                assert_eq!(win.cols, w * f);
                for k in 0..w {
                    assert_eq!(win.get(1, k * f), ((frame + k) * 10 + 1) as f64);
                    seen[frame + k] = true;
                }
                if frame + 1 < g {
                    let next = window_features(&bank, frame + 1).unwrap();
                    // Columns f.. of this frame equal columns ..(W-1)·f of the next.
                    let shared = (w - 1) * f;
                    for i in 0..2 {
                        assert_eq!(&win.row(i)[f..], &next.row(i)[..shared]);
                    }
                }
            }
            assert!(seen.iter().all(|&s| s), "G={g} W={w} leaves a slot unused");
            assert!(window_features(&bank, g).is_err());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grid_permutation_is_bijective(n in 1usize..=10_000, seed in any::<u64>()) {
        let g = random_gaussians(n, seed);
        let layout = sort_to_grid(&g, seed, 1);
        layout.validate().unwrap();
        prop_assert_eq!(layout.count(), n);
        prop_assert!(layout.cells() >= n);
        let inv = layout.inverse();
        let mut hit = vec![false; n];
        for (g, &cell) in layout.permutation.iter().enumerate() {
            let cell = cell as usize;
            prop_assert!(cell < n && !hit[cell]);
            hit[cell] = true;
            prop_assert_eq!(inv[cell] as usize, g);
        }
        let attrs = sort_attributes(&g);
        let back = layout.from_grid(&layout.to_grid(&attrs).unwrap()).unwrap();
        prop_assert_eq!(back, attrs);
    }

    #[test]
    fn refinement_never_increases_dissimilarity(n in 1usize..600, seed in any::<u64>(), sweeps in 1usize..4) {
        let g = random_gaussians(n, seed);
        let attrs = sort_attributes(&g);
        let seed_layout = morton_seed(&g);
        let before = dissimilarity(&attrs, &seed_layout);
        let after = dissimilarity(&attrs, &refine(&attrs, seed_layout, seed, sweeps));
        prop_assert!(after <= before + 1e-9 * before.abs().max(1.0), "{} > {}", after, before);
    }

    #[test]
    fn splat_order_and_transmittance(n in 0usize..40, seed in any::<u64>()) {
        let g = random_gaussians(n, seed);
        let intr = CameraModel::pinhole(24.0, 24.0, 20, 20);
        let cam = CameraModel::look_at([0.0, -0.5, -3.0], [0.0; 3], [0.0, -1.0, 0.0], intr, 20, 20).unwrap();
        let (img, _) = render::render(&g, &cam).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut perm = GaussianSet::zeros(n);
        for (dst, &src) in order.iter().enumerate() {
            perm.positions.row_mut(dst).copy_from_slice(g.positions.row(src));
            perm.scales.row_mut(dst).copy_from_slice(g.scales.row(src));
            perm.rotations.row_mut(dst).copy_from_slice(g.rotations.row(src));
            perm.opacities.row_mut(dst).copy_from_slice(g.opacities.row(src));
            perm.colors.row_mut(dst).copy_from_slice(g.colors.row(src));
        }
        let (img2, _) = render::render(&perm, &cam).unwrap();
        for (a, b) in img.rgb.iter().zip(&img2.rgb) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        for &t in img.transmittance.as_ref().unwrap() {
            prop_assert!((0.0..=1.0).contains(&t));
        }
        for &v in &img.rgb {
            prop_assert!((0.0..=1.0).contains(&v) && v.is_finite());
        }
    }

    #[test]
    fn losses_are_nonnegative_and_zero_at_fixed_points(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (8, 8);
        let a: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut mask = DynamicMask::all(w, h, false);
        for m in mask.mask.iter_mut() {
            *m = rng.random_bool(0.5);
        }
        prop_assert!(losses::reconstruction_loss(&a, &b, &mask, 0.2).unwrap() >= 0.0);
        prop_assert!(losses::reconstruction_loss(&a, &a, &mask, 0.2).unwrap().abs() < 1e-12);
        let m = |r: &mut ChaCha8Rng| Mat::from_fn(5, 4, |_, _| r.random_range(-1.0..1.0));
        let (p, c, n) = (m(&mut rng), m(&mut rng), m(&mut rng));
        prop_assert!(losses::temporal_consistency(&p, &c, &n, 1.0).unwrap() >= 0.0);
        prop_assert_eq!(losses::temporal_consistency(&c, &c, &c, 1.0).unwrap(), 0.0);
        prop_assert!(losses::self_distill(&p, &c).unwrap() >= 0.0);
        prop_assert_eq!(losses::self_distill(&p, &p).unwrap(), 0.0);
        let o: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
        prop_assert!(losses::opacity_reg(&o) >= 0.0);
        prop_assert_eq!(losses::opacity_reg(&[0.0; 10]), 0.0);
    }

    #[test]
    fn video_prefix_is_closed_loop(k in 1usize..8, qp in 0u32..=51, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Vec<f64>> = (0..8).map(|_| (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let (full, recon) = encode_with_reconstruction(&frames, 8, 8, qp).unwrap();
        let decoded = decode_feature_video(&full).unwrap();
        prop_assert_eq!(&decoded, &recon);
        let prefix = encode_feature_video(&frames[..k], 8, 8, qp).unwrap();
        prop_assert!(full.bitstream.starts_with(&prefix.bitstream));
        prop_assert_eq!(&decode_feature_video(&prefix).unwrap()[..], &decoded[..k]);
    }
}

#[test]
fn quantizer_bounds_on_a_million_samples() {
    let spec = QuantSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let rules: [(&str, AttrQuant, f64); 3] = [
        ("rotation", spec.rotation, 3.0 / 254.0),
        ("opacity", spec.opacity, 8.0 / 126.0),
        ("scale", AttrQuant { clip: Some((-7.0, 1.0)), ..spec.scale }, 8.0 / 126.0),
    ];
    for (name, rule, bound) in rules {
        let (lo, hi) = rule.clip.unwrap();
        let values: Vec<f64> = (0..1_000_000).map(|_| rng.random_range(lo..=hi)).collect();
        let q = quantize_attribute(&values, &rule).unwrap();
        let back = dequantize_attribute(&q);
        let violations = values.iter().zip(&back).filter(|(a, b)| (*a - *b).abs() > bound + 1e-12).count();
        assert_eq!(violations, 0, "{name}");
    }
    // Observed-range scale rule: bound is range/126 of the data itself.
    let values: Vec<f64> = (0..1_000_000).map(|_| rng.random_range(-6.0..-1.0)).collect();
    let q = quantize_attribute(&values, &spec.scale).unwrap();
    let (lo, hi) = q.range();
    let bound = (hi - lo) / 126.0;
    let back = dequantize_attribute(&q);
    assert!(values.iter().zip(&back).all(|(a, b)| (a - b).abs() <= bound + 1e-12));
}

#[test]
fn identity_layout_round_trip() {
    let attrs = Mat::from_fn(7, 3, |r, c| (r * 3 + c) as f64);
    let layout = GridLayout::identity(7);
    assert_eq!(layout.from_grid(&layout.to_grid(&attrs).unwrap()).unwrap(), attrs);
}
