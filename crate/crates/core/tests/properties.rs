mod common;

use jamodiff::extractor::{ConvExtractor, IdentityExtractor};
use jamodiff::image::GlyphImage;
use jamodiff::metrics::{frechet_distance, perceptual_distance, rmse, ssim, FeatureStats, SsimConfig};
use jamodiff::schedule::{cosine_schedule, linear_schedule};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_image(side: usize, seed: u64) -> GlyphImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GlyphImage::new(side, (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn random_stats(dim: usize, rank: usize, seed: u64) -> FeatureStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(dim, rank, |_, _| rng.random_range(-1.0..1.0));
    FeatureStats { mean: DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0)), cov: &a * a.transpose() }
}

#[test]
fn schedules_hold_invariants_at_standard_lengths() {
    for steps in [1, 2, 10, 50, 1000] {
        for s in [linear_schedule(steps, 1e-4, 0.02).unwrap(), cosine_schedule(steps, 0.008, 0.999).unwrap()] {
            assert_eq!(common::schedule_violation(&s), None, "T={steps} {:?}", s.spec());
        }
    }
    assert!(cosine_schedule(1000, 0.008, 0.999).unwrap().alpha_bars()[1000] < 1e-3);
}

proptest! {
    #[test]
    fn linear_schedules_hold_invariants(steps in 1usize..400, start in 1e-5f64..1e-2, span in 0.0f64..0.05) {
        let s = linear_schedule(steps, start, start + span).unwrap();
        prop_assert_eq!(common::schedule_violation(&s), None);
    }

    #[test]
    fn cosine_schedules_hold_invariants(steps in 1usize..400, offset in 1e-4f64..0.1, clip in 0.5f64..0.999) {
        let s = cosine_schedule(steps, offset, clip).unwrap();
        prop_assert_eq!(common::schedule_violation(&s), None);
    }

    #[test]
    fn ssim_is_symmetric_bounded_and_one_on_identity(s1 in 0u64..1000, s2 in 0u64..1000) {
        let (a, b) = (unit_image(16, s1), unit_image(16, s2 + 1000));
        let cfg = SsimConfig::default();
        let ab = ssim(&a, &b, &cfg).unwrap();
        prop_assert_eq!(ab, ssim(&b, &a, &cfg).unwrap());
        prop_assert!((-1.0..1.0).contains(&ab));
        prop_assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_is_a_symmetric_nonnegative_distance(s1 in 0u64..1000, s2 in 0u64..1000) {
        let (a, b) = (unit_image(8, s1), unit_image(8, s2 + 1000));
        let d = rmse(&a, &b).unwrap();
        prop_assert!(d > 0.0 && d <= 1.0);
        prop_assert_eq!(d, rmse(&b, &a).unwrap());
    }

    #[test]
    fn perceptual_distance_is_symmetric(s1 in 0u64..200, s2 in 0u64..200) {
        let (a, b) = (unit_image(16, s1).to_signed(), unit_image(16, s2 + 1000).to_signed());
        let ext = ConvExtractor::random(&[4, 8], 3);
        prop_assert_eq!(perceptual_distance(&a, &b, &ext).unwrap(), perceptual_distance(&b, &a, &ext).unwrap());
        prop_assert_eq!(perceptual_distance(&a, &a, &IdentityExtractor).unwrap(), 0.0);
    }

    #[test]
    fn frechet_is_symmetric_and_near_zero_on_itself(dim in 1usize..12, rank in 1usize..12, seed in 0u64..1000) {
        let (s1, s2) = (random_stats(dim, rank, seed), random_stats(dim, rank, seed + 1));
        let (ab, ba) = (frechet_distance(&s1, &s2).unwrap(), frechet_distance(&s2, &s1).unwrap());
        prop_assert!(ab >= 0.0);
        // Null directions contribute square roots of roundoff (about 1e-8 each).
        prop_assert!((ab - ba).abs() <= 1e-6 * ab.max(1.0), "{} vs {}", ab, ba);
        prop_assert!(frechet_distance(&s1, &s1).unwrap() <= 1e-6);
    }
}
