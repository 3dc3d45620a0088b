use octdistill_core::augment::{
    apply_rand_op, rand_augment, random_erasing, train_pipeline, tta_resize, tta_variants, val_pipeline,
    AugmentationProfile, ImageBuffer, RAND_OPS,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pattern(width: usize, height: usize, channels: usize, salt: u64) -> ImageBuffer {
    let data = (0..width * height * channels)
        .map(|i| ((i as u64 * 37 + salt * 101 + (i as u64 / 7) * 13) % 256) as u8)
        .collect();
    ImageBuffer::new(width, height, channels, data).unwrap()
}

#[test]
fn image_buffer_rejects_bad_shapes() {
    assert!(ImageBuffer::new(2, 2, 1, vec![0; 3]).is_err());
    assert!(ImageBuffer::new(2, 2, 2, vec![0; 8]).is_err());
    assert!(ImageBuffer::new(0, 2, 1, vec![]).is_err());
}

#[test]
fn randaugment_magnitude_zero_is_identity() {
    let img = pattern(24, 24, 3, 1);
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        assert_eq!(rand_augment(&img, 4, 0, &mut rng).unwrap(), img);
    }
    for op in RAND_OPS {
        for (pos, horiz) in [(true, true), (false, false)] {
            assert_eq!(apply_rand_op(&img, op, 0, pos, horiz), img, "{op:?}");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(rand_augment(&img, 0, 10, &mut rng).unwrap(), img);
}

#[test]
fn randaugment_rejects_magnitude_above_ten() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(rand_augment(&pattern(8, 8, 1, 0), 1, 11, &mut rng).is_err());
}

#[test]
fn randaugment_is_reproducible_and_nontrivial() {
    let img = pattern(24, 24, 1, 2);
    let run = |seed| rand_augment(&img, 2, 9, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(run(7), run(7));
    assert!((0..10).any(|s| run(s) != img));
}

#[test]
fn collapsed_training_profile_matches_validation() {
    for channels in [1, 3] {
        for (w, h) in [(64, 48), (32, 32), (17, 50)] {
            let img = pattern(w, h, channels, 5);
            let profile = AugmentationProfile::minimal();
            let val = val_pipeline(&img, &profile).unwrap();
            for seed in 0..5 {
                let train = train_pipeline(&img, &profile, seed).unwrap();
                assert_eq!(train.data(), val.data());
                assert_eq!(train.shape(), val.shape());
            }
            let collapsed = AugmentationProfile::teacher().collapsed();
            assert_eq!(
                train_pipeline(&img, &collapsed, 9).unwrap().data(),
                val_pipeline(&img, &collapsed).unwrap().data()
            );
        }
    }
}

#[test]
fn pipelines_are_deterministic_and_well_shaped() {
    let img = pattern(60, 50, 1, 3);
    for profile in [AugmentationProfile::teacher(), AugmentationProfile::student()] {
        let a = train_pipeline(&img, &profile, 42).unwrap();
        let b = train_pipeline(&img, &profile, 42).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[3, 32, 32]);
        assert!(a.data().iter().all(|v| v.is_finite()));
        let c = train_pipeline(&img, &profile, 43).unwrap();
        assert_ne!(a.data(), c.data());
        let v1 = val_pipeline(&img, &profile).unwrap();
        let v2 = val_pipeline(&img, &profile).unwrap();
        assert_eq!(v1.data(), v2.data());
        assert_eq!(v1.shape(), &[3, 32, 32]);
    }
}

#[test]
fn preset_profiles_match_documented_values() {
    let t = AugmentationProfile::teacher();
    assert_eq!((t.randaugment_n, t.randaugment_m, t.rotation_deg), (2, 9, 20.0));
    assert_eq!((t.p_blur, t.p_posterize), (0.2, 0.2));
    let s = AugmentationProfile::student();
    assert_eq!((s.randaugment_n, s.randaugment_m, s.rotation_deg), (2, 7, 15.0));
    assert_eq!((s.p_blur, s.p_posterize), (0.0, 0.0));
    assert_eq!((t.resize_large, t.crop_size), (40, 32));
    assert_eq!(tta_resize(32), 37);
    assert_eq!(tta_resize(224), 256);
}

#[test]
fn degenerate_profiles_are_rejected() {
    let img = pattern(40, 40, 1, 0);
    let mut p = AugmentationProfile::teacher();
    p.crop_size = 41;
    assert!(train_pipeline(&img, &p, 0).is_err());
    let mut p = AugmentationProfile::teacher();
    p.p_hflip = 1.5;
    assert!(p.validate().is_err());
    let mut p = AugmentationProfile::teacher();
    p.posterize_bits = 0;
    assert!(p.validate().is_err());
    let mut p = AugmentationProfile::teacher();
    p.blur_kernel = 4;
    assert!(p.validate().is_err());
    let mut p = AugmentationProfile::teacher();
    p.randaugment_m = 11;
    assert!(p.validate().is_err());
}

#[test]
fn tta_returns_five_variants() {
    let img = pattern(45, 45, 1, 4);
    let profile = AugmentationProfile::teacher();
    let views = tta_variants(&img, &profile).unwrap();
    assert_eq!(views.len(), 5);
    assert_eq!(views[0].data(), val_pipeline(&img, &profile).unwrap().data());
    for v in &views {
        assert_eq!(v.shape(), &[3, 32, 32]);
    }
    // undoing the horizontal flip on the normalized tensor recovers variant 1
    let s = 32;
    let v2 = views[1].data();
    let unflipped: Vec<f32> = (0..v2.len())
        .map(|i| {
            let (row, x) = (i / s, i % s);
            v2[row * s + (s - 1 - x)]
        })
        .collect();
    assert_eq!(unflipped, views[0].data());
    assert_eq!(views, tta_variants(&img, &profile).unwrap());
}

#[test]
fn posterize_masks_low_bits() {
    let img = ImageBuffer::new(1, 1, 1, vec![200]).unwrap();
    assert_eq!(img.posterize(4).unwrap().data(), &[192]);
    let img = pattern(16, 16, 3, 9);
    assert_eq!(img.posterize(8).unwrap(), img);
    let one = img.posterize(1).unwrap();
    let mut distinct: Vec<u8> = one.data().to_vec();
    distinct.sort();
    distinct.dedup();
    assert!(distinct.len() <= 2);
    assert!(img.posterize(0).is_err());
    assert!(img.posterize(9).is_err());
}

#[test]
fn rotation_by_ninety_permutes_two_by_two() {
    let (a, b, c, d) = (10, 20, 30, 40);
    let img = ImageBuffer::new(2, 2, 1, vec![a, b, c, d]).unwrap();
    // counter-clockwise quarter turn: [[a, b], [c, d]] -> [[b, d], [a, c]]
    assert_eq!(img.rotate(90.0).data(), &[b, d, a, c]);
    assert_eq!(img.rotate(-90.0).data(), &[c, a, d, b]);
}

#[test]
fn affine_identity_and_full_turn() {
    let img = pattern(20, 16, 3, 6);
    assert_eq!(img.affine(0.0, 0.0, 1.0, (0.0, 0.0)).unwrap(), img);
    let turned = img.rotate(360.0);
    for (x, y) in turned.data().iter().zip(img.data()) {
        assert!((*x as i16 - *y as i16).abs() <= 1);
    }
    assert!(img.affine(10.0, 0.0, 0.0, (0.0, 0.0)).is_err());
}

#[test]
fn affine_fills_uncovered_pixels_with_black() {
    let img = ImageBuffer::filled(10, 10, 1, 255).unwrap();
    let shifted = img.affine(0.0, 0.0, 1.0, (3.0, 0.0)).unwrap();
    for y in 0..10 {
        for x in 0..3 {
            assert_eq!(shifted.get(x, y, 0), 0);
        }
        assert_eq!(shifted.get(5, y, 0), 255);
    }
}

#[test]
fn random_erasing_bounds() {
    let (c, h, w) = (3, 32, 32);
    let base = vec![1.0f32; c * h * w];
    for seed in 0..200 {
        let mut data = base.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        assert!(random_erasing(&mut data, c, h, w, 0.0, (0.02, 0.1), &mut rng).is_none());
        assert_eq!(data, base);
        let rect = random_erasing(&mut data, c, h, w, 1.0, (0.02, 0.1), &mut rng).unwrap();
        let (left, top, rw, rh) = rect;
        let frac = (rw * rh) as f64 / (h * w) as f64;
        assert!((0.02..=0.1).contains(&frac), "fraction {frac}");
        let ratio = rw as f64 / rh as f64;
        assert!(ratio > 0.2 && ratio < 5.0);
        assert!(left + rw <= w && top + rh <= h);
        let zeros = data.iter().filter(|v| **v == 0.0).count();
        assert_eq!(zeros, c * rw * rh);
        let mut again = base.clone();
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
        random_erasing(&mut again, c, h, w, 0.0, (0.02, 0.1), &mut rng2);
        assert_eq!(random_erasing(&mut again, c, h, w, 1.0, (0.02, 0.1), &mut rng2), Some(rect));
    }
}

#[test]
fn gray_at_mean_standardizes_to_zero() {
    let mut profile = AugmentationProfile::teacher();
    profile.mean = [128.0 / 255.0; 3];
    let img = ImageBuffer::filled(50, 40, 1, 128).unwrap();
    let out = val_pipeline(&img, &profile).unwrap();
    assert!(out.data().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn grayscale_is_replicated_across_channels() {
    let img = pattern(32, 32, 1, 8);
    let mut profile = AugmentationProfile::teacher();
    profile.mean = [0.5; 3];
    profile.std = [0.25; 3];
    let out = val_pipeline(&img, &profile).unwrap();
    let plane = 32 * 32;
    let d = out.data();
    assert_eq!(&d[..plane], &d[plane..2 * plane]);
    assert_eq!(&d[..plane], &d[2 * plane..]);
}

#[test]
fn blur_preserves_constant_images() {
    let img = ImageBuffer::filled(9, 7, 3, 77).unwrap();
    assert_eq!(img.gaussian_blur(3, 0.8).unwrap(), img);
    assert!(img.gaussian_blur(2, 0.8).is_err());
}

proptest! {
    #[test]
    fn flips_are_involutions(w in 1usize..12, h in 1usize..12, gray in any::<bool>(), salt in 0u64..1000) {
        let img = pattern(w, h, if gray { 1 } else { 3 }, salt);
        prop_assert_eq!(img.hflip().hflip(), img.clone());
        prop_assert_eq!(img.vflip().vflip(), img);
    }

    #[test]
    fn posterize_is_idempotent(bits in 1u32..=8, salt in 0u64..1000) {
        let img = pattern(8, 8, 3, salt);
        let once = img.posterize(bits).unwrap();
        prop_assert_eq!(once.posterize(bits).unwrap(), once);
    }

    #[test]
    fn train_outputs_are_finite(seed in any::<u64>(), student in any::<bool>()) {
        let img = pattern(48, 40, 1, seed % 97);
        let profile = if student { AugmentationProfile::student() } else { AugmentationProfile::teacher() };
        let out = train_pipeline(&img, &profile, seed).unwrap();
        prop_assert_eq!(out.shape(), &[3, 32, 32]);
        prop_assert!(out.data().iter().all(|v| v.is_finite()));
    }
}
