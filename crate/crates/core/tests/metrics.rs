use csts_core::heads::{gaussian_map, TargetConfig};
use csts_core::metrics::{aggregate, binarize_and_score, f1, Counts};
use csts_core::{CstsError, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const K: usize = 19;

fn target(x: f64, y: f64) -> Tensor {
    gaussian_map(x, y, 64, 64, &TargetConfig::default()).unwrap()
}

#[test]
fn perfect_prediction_scores_one() {
    let t = target(0.4, 0.55);
    // smallest in-kernel value relative to the peak
    let max = t.data().iter().cloned().fold(0.0, f64::max);
    let min_in = t.data().iter().cloned().filter(|&v| v > 0.0).fold(f64::MAX, f64::min);
    let c = binarize_and_score(&t, (0.4, 0.55), K, min_in / max).unwrap();
    assert_eq!((c.precision(), c.recall()), (1.0, 1.0));
    let r = aggregate(&[vec![Some(c)]]).unwrap();
    assert_eq!(r.f1, 1.0);
}

#[test]
fn small_gamma_contains_truth() {
    let t = target(0.4, 0.55);
    let c = binarize_and_score(&t, (0.4, 0.55), K, 1e-9).unwrap();
    assert_eq!(c.recall(), 1.0);
}

#[test]
fn uniform_prediction_on_interior_gaze() {
    let u = Tensor::full(&[64, 64], 1.0 / 4096.0);
    let c = binarize_and_score(&u, (0.5, 0.5), K, 0.5).unwrap();
    assert!((c.precision() - 361.0 / 4096.0).abs() < 1e-9);
    assert_eq!(c.recall(), 1.0);
}

#[test]
fn disjoint_prediction_scores_zero() {
    let far = target(0.05, 0.05);
    let c = binarize_and_score(&far, (0.9, 0.9), K, 0.5).unwrap();
    assert_eq!((c.precision(), c.recall()), (0.0, 0.0));
    let zero = Tensor::zeros(&[64, 64]);
    assert_eq!(binarize_and_score(&zero, (0.5, 0.5), K, 0.5).unwrap().precision(), 0.0);
}

#[test]
fn aggregation_pools_counts() {
    let a = Counts { hit: 10, predicted: 10, truth: 10 };
    let b = Counts { hit: 0, predicted: 30, truth: 10 };
    let r = aggregate(&[vec![Some(a), Some(b)]]).unwrap();
    assert!((r.precision - 10.0 / 40.0).abs() < 1e-12);
    assert!((r.recall - 0.5).abs() < 1e-12);
    assert!((r.f1 - f1(0.25, 0.5)).abs() < 1e-12);
    // mean of per-frame f1 would be 0.5
    assert!((r.f1 - 0.5).abs() > 0.1);
    assert_eq!(r.per_frame.len(), 2);
    assert_eq!(r.per_frame[1].f1, 0.0);
    assert!(matches!(aggregate(&[vec![None, None]]), Err(CstsError::Eval(_))));
}

#[test]
fn per_frame_length_tracks_horizon() {
    let c = Counts { hit: 1, predicted: 2, truth: 3 };
    let r = aggregate(&[vec![Some(c); 8], vec![None; 8]]).unwrap();
    assert_eq!(r.per_frame.len(), 8);
    assert_eq!(r.n_frames, 8);
    assert!((r.f1 - 2.0 * 0.5 * (1.0 / 3.0) / (0.5 + 1.0 / 3.0)).abs() < 1e-9);
}

fn random_map(seed: u64) -> Tensor {
    Tensor::uniform(&[32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #[test]
    fn raising_gamma_never_raises_recall(seed in 0u64..5000, g1 in 0.0f64..1.0, g2 in 0.0f64..1.0, x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let m = random_map(seed);
        let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
        let a = binarize_and_score(&m, (x, y), 7, lo).unwrap();
        let b = binarize_and_score(&m, (x, y), 7, hi).unwrap();
        prop_assert!(b.recall() <= a.recall());
        for v in [a.precision(), a.recall(), f1(a.precision(), a.recall())] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn shifting_map_and_gaze_together_is_neutral(seed in 0u64..5000, dx in 0usize..6, dy in 0usize..6) {
        // content lives in the interior so a shift never crosses the border
        let mut base = Tensor::zeros(&[32, 32]);
        let src = random_map(seed);
        for r in 10..20 {
            for c in 10..20 {
                base.data_mut()[r * 32 + c] = src.data()[r * 32 + c];
            }
        }
        let mut moved = Tensor::zeros(&[32, 32]);
        for r in 0..26 {
            for c in 0..26 {
                moved.data_mut()[(r + dy) * 32 + c + dx] = base.data()[r * 32 + c];
            }
        }
        let g0 = (14.5 / 32.0, 15.5 / 32.0);
        let g1 = ((14.5 + dx as f64) / 32.0, (15.5 + dy as f64) / 32.0);
        let a = binarize_and_score(&base, g0, 7, 0.5).unwrap();
        let b = binarize_and_score(&moved, g1, 7, 0.5).unwrap();
        prop_assert_eq!(a, b);
    }
}
