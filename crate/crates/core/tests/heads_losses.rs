use csts_core::autograd::{Graph, ParamStore};
use csts_core::heads::{
    gaussian_map, gaussian_target, heatmaps_from_logits, info_nce, kld, kld_loss, total_loss, ContrastiveConfig,
    ContrastiveHead, TargetConfig, KLD_EPS,
};
use csts_core::{CstsError, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn argmax(t: &[f64]) -> usize {
    t.iter().enumerate().fold(0, |b, (i, &v)| if v > t[b] { i } else { b })
}

#[test]
fn centred_gaussian_is_symmetric() {
    let m = gaussian_map(0.5, 0.5, 64, 64, &TargetConfig::default()).unwrap();
    assert_eq!(argmax(m.data()), 32 * 64 + 32);
    assert!((m.sum() - 1.0).abs() < 1e-12);
    for d in 1..=9 {
        let c = |r: usize, q: usize| m.at(&[r, q]);
        assert!((c(32 + d, 32) - c(32 - d, 32)).abs() < 1e-15);
        assert!((c(32, 32 + d) - c(32 + d, 32)).abs() < 1e-15);
    }
    assert_eq!(m.at(&[32, 42]), 0.0);
    assert!(m.at(&[32, 41]) > 0.0);
}

#[test]
fn corner_gaussian_is_clipped_and_normalised() {
    let m = gaussian_map(0.0, 1.0, 64, 64, &TargetConfig::default()).unwrap();
    assert!((m.sum() - 1.0).abs() < 1e-12);
    assert_eq!(argmax(m.data()), 63 * 64);
    assert_eq!(m.data().iter().filter(|&&v| v > 0.0).count(), 10 * 10);
}

#[test]
fn neighbour_ratio_matches_sigma() {
    let cfg = TargetConfig::default();
    let m = gaussian_map(0.5, 0.5, 64, 64, &cfg).unwrap();
    let ratio = m.at(&[32, 32]) / m.at(&[32, 33]);
    assert!((ratio - (1.0 / (2.0 * 9.0f64)).exp()).abs() < 1e-12);
}

#[test]
fn out_of_range_gaze_is_rejected() {
    assert!(matches!(gaussian_map(1.2, 0.5, 8, 8, &TargetConfig::default()), Err(CstsError::Contract(_))));
    let (t, valid) = gaussian_target(&[Some((0.5, 0.5)), None], 8, 8, &TargetConfig { kernel: 3, sigma: 1.0 }).unwrap();
    assert_eq!(valid, vec![true, false]);
    assert_eq!(t.shape(), &[2, 8, 8]);
}

#[test]
fn kld_closed_forms() {
    let cfg = TargetConfig::default();
    let (t, valid) = gaussian_target(&[Some((0.3, 0.7))], 64, 64, &cfg).unwrap();
    assert!(kld(&t, &t, &valid).unwrap().abs() < 1e-9);

    let mut one_hot = Tensor::zeros(&[1, 64, 64]);
    one_hot.data_mut()[100] = 1.0;
    let uniform = Tensor::full(&[1, 64, 64], 1.0 / 4096.0);
    let v = kld(&uniform, &one_hot, &[true]).unwrap();
    assert!((v - 4096f64.ln()).abs() < 1e-6, "{v}");

    let mut g = Graph::new();
    let p = g.constant(uniform);
    let l = kld_loss(&mut g, p, &one_hot, &[true]).unwrap();
    assert!((g.value(l).item() - 4096f64.ln()).abs() < 1e-6);
}

#[test]
fn kld_skips_invalid_frames_and_rejects_unnormalised() {
    let mut target = Tensor::full(&[2, 2, 2], 0.25);
    target.data_mut()[4..].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
    let pred = Tensor::full(&[2, 2, 2], 0.25);
    // identical maps differ only through the log stabiliser
    let floor = (0.25 / (0.25 + KLD_EPS)).ln();
    assert!((kld(&pred, &target, &[true, false]).unwrap() - floor).abs() < 1e-15);
    assert!((kld(&pred, &target, &[false, true]).unwrap() - 4f64.ln()).abs() < 1e-9);
    let bad = Tensor::full(&[2, 2, 2], 0.5);
    assert!(matches!(kld(&bad, &target, &[true, true]), Err(CstsError::Contract(_))));
}

#[test]
fn constant_logits_give_uniform_heatmaps() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::full(&[4, 4, 4], 0.7));
    let h = heatmaps_from_logits(&mut g, l, [8, 64, 64]).unwrap();
    assert!(g.value(h).data().iter().all(|&v| (v - 1.0 / 4096.0).abs() < 1e-15));
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn nce(wv: &[Vec<f64>], wa: &[Vec<f64>], temp: f64) -> f64 {
    let n = wv.len();
    let d = wv[0].len();
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&[n, d], wv.concat()).unwrap());
    let b = g.constant(Tensor::new(&[n, d], wa.concat()).unwrap());
    let l = info_nce(&mut g, a, b, temp).unwrap();
    g.value(l).item()
}

#[test]
fn info_nce_closed_forms() {
    assert_eq!(nce(&[unit(&[1.0, 2.0])], &[unit(&[-3.0, 0.5])], 0.05), 0.0);
    let e = [vec![1.0, 0.0], vec![0.0, 1.0]];
    let v = nce(&e, &e, 1.0);
    assert!((v - 2.0 * (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-9, "{v}");
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 2]));
    assert!(matches!(info_nce(&mut g, x, x, 0.0), Err(CstsError::Config(_))));
}

#[test]
fn info_nce_approaches_zero_for_separated_pairs() {
    let wv = [vec![1.0, 0.0], vec![-1.0, 0.0]];
    let v = nce(&wv, &wv, 0.01);
    assert!(v >= 0.0 && v < 1e-60, "{v}");
}

#[test]
fn total_loss_arithmetic() {
    let mut g = Graph::new();
    let k = g.constant(Tensor::scalar(1.0));
    let c = g.constant(Tensor::scalar(2.0));
    let t = total_loss(&mut g, k, Some(c), 0.5).unwrap();
    assert_eq!(g.value(t).item(), 2.0);
    let t0 = total_loss(&mut g, k, Some(c), 0.0).unwrap();
    assert_eq!(g.value(t0).item(), 1.0);
}

#[test]
fn projection_is_unit_norm_and_means_identical_tokens() {
    let mut store = ParamStore::new();
    let head = ContrastiveHead::new(&mut store, "c", 8, ContrastiveConfig { dim: 4, ..Default::default() }, &mut rng(1));
    let v = Tensor::randn(&[4, 6, 8], &mut rng(2));
    let tok = Tensor::randn(&[8], &mut rng(3));
    let a = Tensor::from_fn(&[4, 5, 8], |i| tok.data()[i % 8]);
    let mut g = Graph::with_params(&store);
    let (vv, av) = (g.constant(v), g.constant(a));
    let (wv, wa) = head.project(&mut g, vv, av).unwrap();
    for w in [wv, wa] {
        let n: f64 = g.value(w).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    let m = csts_core::heads::mean_token(&mut g, av).unwrap();
    assert!(g.value(m).data().iter().zip(tok.data()).all(|(a, b)| (a - b).abs() < 1e-12));
}

fn distribution(seed: u64, n: usize) -> Tensor {
    let t = Tensor::uniform(&[1, 1, n], 0.01, 1.0, &mut rng(seed));
    let s = t.sum();
    t.map(|v| v / s)
}

proptest! {
    #[test]
    fn kld_is_non_negative(seed in 0u64..10_000, n in 2usize..40) {
        let p = distribution(seed, n);
        let q = distribution(seed + 77_777, n);
        let v = kld(&p, &q, &[true]).unwrap();
        prop_assert!(v >= -1e-12);
        prop_assert!(kld(&p, &p, &[true]).unwrap().abs() < 1e-9);
    }

    #[test]
    fn info_nce_is_permutation_and_scale_invariant(seed in 0u64..10_000, scale in 0.1f64..10.0) {
        let mut r = rng(seed);
        let raw: Vec<Vec<f64>> = (0..3).map(|_| Tensor::randn(&[4], &mut r).into_data()).collect();
        let raw_a: Vec<Vec<f64>> = (0..3).map(|_| Tensor::randn(&[4], &mut r).into_data()).collect();
        let wv: Vec<_> = raw.iter().map(|v| unit(v)).collect();
        let wa: Vec<_> = raw_a.iter().map(|v| unit(v)).collect();
        let base = nce(&wv, &wa, 0.5);
        prop_assert!(base >= 0.0);
        let order = [2, 0, 1];
        let pv: Vec<_> = order.iter().map(|&i| wv[i].clone()).collect();
        let pa: Vec<_> = order.iter().map(|&i| wa[i].clone()).collect();
        prop_assert!((nce(&pv, &pa, 0.5) - base).abs() < 1e-12);

        // scaling projection inputs leaves the normalised vectors unchanged
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], raw.concat()).unwrap());
        let xs = g.scale(x, scale).unwrap();
        let (n1, n2) = (g.l2_normalize(x).unwrap(), g.l2_normalize(xs).unwrap());
        // the 1e-12 norm offset is the only scale-dependent term
        prop_assert!(g.value(n1).max_abs_diff(g.value(n2)) < 1e-10);
    }

    #[test]
    fn heatmaps_are_distributions_for_any_logits(seed in 0u64..10_000, spread in 0.1f64..50.0) {
        let logits = Tensor::randn(&[2, 3, 3], &mut rng(seed)).map(|v| v * spread);
        let mut g = Graph::new();
        let l = g.constant(logits);
        let h = heatmaps_from_logits(&mut g, l, [4, 12, 12]).unwrap();
        for f in g.value(h).data().chunks(144) {
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            prop_assert!(f.iter().all(|&v| v >= 0.0));
        }
    }
}
