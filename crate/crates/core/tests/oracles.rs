//! Library routines against independent reference implementations.

mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tinyunet::data::synth::{synth_full, SyntheticConfig};
use tinyunet::data::PrepConfig;
use tinyunet::graph::Parameter;
use tinyunet::metrics::{auc, grid_threshold, metrics_at, select_threshold, ScoredPixels, THRESHOLD_GRID};
use tinyunet::ops::conv2d;
use tinyunet::train::loss::focal_loss;
use tinyunet::train::{AdamParams, AdamState};
use tinyunet::{Shape, Tensor};

fn scored(rng: &mut ChaCha8Rng, n: usize, levels: Option<u32>) -> (Vec<f64>, Vec<bool>) {
    loop {
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.35)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let scores = (0..n)
                .map(|i| {
                    let base = if labels[i] { 0.25 } else { 0.0 };
                    let s: f64 = (base + rng.random::<f64>() * 0.75).min(1.0);
                    match levels {
                        Some(k) => (s * k as f64).round() / k as f64,
                        None => s,
                    }
                })
                .collect();
            return (scores, labels);
        }
    }
}

fn f1_at(scores: &[f64], labels: &[bool], t: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= t, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    let d = 2.0 * tp + fp + fn_;
    if d == 0.0 {
        0.0
    } else {
        2.0 * tp / d
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv_matches_nested_loops(
        n in 1usize..3, c in 1usize..5, o in 1usize..5,
        h in 1usize..9, w in 1usize..9, three in any::<bool>(), seed in any::<u64>(),
    ) {
        let k = if three { 3 } else { 1 };
        let x = random(Shape::new(n, c, h, w), seed);
        let kern = random(Shape::new(o, c, k, k), seed.wrapping_add(1));
        let got = conv2d(&x, &kern).unwrap();
        let want = conv_oracle(&x, &kern);
        prop_assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!(rel_err(*a, *b) <= 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn auc_matches_pair_count(seed in any::<u64>(), ties in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = scored(&mut rng, 100, ties.then_some(10));
        let got = auc(&ScoredPixels::new(s.clone(), l.clone()).unwrap()).unwrap();
        prop_assert!((got - auc_pairs(&s, &l)).abs() <= 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_transforms(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = scored(&mut rng, 200, Some(40));
        let cubed = s.iter().map(|v| v * v * v).collect();
        let a = auc(&ScoredPixels::new(s, l.clone()).unwrap()).unwrap();
        let b = auc(&ScoredPixels::new(cubed, l).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn auc_of_complement_sums_to_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = scored(&mut rng, 150, None);
        let flipped = s.iter().map(|v| 1.0 - v).collect();
        let a = auc(&ScoredPixels::new(s, l.clone()).unwrap()).unwrap();
        let b = auc(&ScoredPixels::new(flipped, l).unwrap()).unwrap();
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn selected_threshold_beats_every_grid_point(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = scored(&mut rng, 300, None);
        let sp = ScoredPixels::new(s.clone(), l.clone()).unwrap();
        let t = select_threshold(&sp);
        let best = metrics_at(&sp, t).f1;
        prop_assert!((best - f1_at(&s, &l, t)).abs() <= 1e-12);
        for k in 0..THRESHOLD_GRID {
            let f = f1_at(&s, &l, grid_threshold(k));
            prop_assert!(best >= f);
            // ties go to the smallest threshold
            if grid_threshold(k) < t {
                prop_assert!(f < best);
            }
        }
    }

    #[test]
    fn grid_scores_match_exhaustive_scan(seed in any::<u64>()) {
        // scores on the grid itself, so scanning distinct scores sees every cut
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = scored(&mut rng, 250, Some(1000));
        let sp = ScoredPixels::new(s.clone(), l.clone()).unwrap();
        let mut distinct = s.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let exhaustive = distinct.iter().map(|&t| f1_at(&s, &l, t)).fold(0.0, f64::max);
        prop_assert!((metrics_at(&sp, select_threshold(&sp)).f1 - exhaustive).abs() <= 1e-12);
    }

    #[test]
    fn pooled_metrics_equal_concatenated(seed in any::<u64>(), cut in 10usize..90) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = scored(&mut rng, 100, Some(20));
        let whole = ScoredPixels::new(s.clone(), l.clone()).unwrap();
        let mut pooled = ScoredPixels::new(s[..cut].to_vec(), l[..cut].to_vec()).unwrap();
        pooled.extend(&ScoredPixels::new(s[cut..].to_vec(), l[cut..].to_vec()).unwrap());
        prop_assert_eq!(auc(&whole).unwrap(), auc(&pooled).unwrap());
        prop_assert_eq!(select_threshold(&whole), select_threshold(&pooled));
        let (a, b) = (metrics_at(&whole, 0.4), metrics_at(&pooled, 0.4));
        prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn focal_matches_scalar_formula(seed in any::<u64>(), gamma in 0.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(2, 1, 3, 4);
        let p1: Vec<f64> = (0..s.numel()).map(|_| rng.random_range(0.001..0.999)).collect();
        let lab: Vec<f64> = (0..s.numel()).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        let wt: Vec<f64> = (0..s.numel()).map(|_| rng.random_range(0.2..6.0)).collect();
        let mut msk: Vec<f64> = (0..s.numel()).map(|_| rng.random_bool(0.8) as u8 as f64).collect();
        msk[0] = 1.0;

        let mut probs = Tensor::zeros(Shape::new(2, 2, 3, 4));
        for n in 0..2 {
            for i in 0..12 {
                probs.data_mut()[n * 24 + i] = 1.0 - p1[n * 12 + i];
                probs.data_mut()[n * 24 + 12 + i] = p1[n * 12 + i];
            }
        }
        let t = |v: &Vec<f64>| Tensor::from_vec(s, v.clone()).unwrap();
        let got = focal_loss(&probs, &t(&lab), &t(&wt), &t(&msk), gamma).unwrap();

        let (mut sum, mut count) = (0.0, 0.0);
        for i in 0..s.numel() {
            if msk[i] == 1.0 {
                let pt = if lab[i] == 1.0 { p1[i] } else { 1.0 - p1[i] };
                sum += wt[i] * (1.0 - pt).powf(gamma) * -pt.ln();
                count += 1.0;
            }
        }
        prop_assert!(rel_err(got, sum / count) <= 1e-12);
    }
}

#[test]
fn adam_follows_reference_trace() {
    let grad = |th: f64| 2.0 * (th - 0.3) + 0.5 * th.sin();
    for (theta0, lr) in [(1.5, 1e-2), (-0.7, 5e-5), (0.31, 0.2)] {
        let want = adam_reference(theta0, grad, lr, 3);
        let mut params = vec![Parameter::new("w", Tensor::scalar(theta0))];
        let mut opt = AdamState::new(&params, AdamParams::default());
        for (step, w) in want.iter().enumerate() {
            let th = params[0].value.data()[0];
            params[0].grad = Tensor::scalar(grad(th));
            opt.step(&mut params, lr);
            let got = params[0].value.data()[0];
            assert!((got - w).abs() <= 1e-12, "theta0 {theta0} step {}: {got} vs {w}", step + 1);
        }
    }
}

#[test]
fn scores_outside_the_eroded_fov_are_ignored() {
    let cfg = SyntheticConfig { count: 2, width: 48, height: 48, ..SyntheticConfig::default() };
    let ds = synth_full(&cfg, 1, &PrepConfig::default()).unwrap();
    let sample = ds.samples.values().next().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let probs: Vec<f32> = (0..sample.pixels()).map(|_| rng.random()).collect();
    let mut flipped = probs.clone();
    for (p, &inside) in flipped.iter_mut().zip(&sample.fov_eroded) {
        if !inside {
            *p = 1.0 - *p;
        }
    }
    let mut a = ScoredPixels::default();
    a.push_sample(&probs, sample);
    let mut b = ScoredPixels::default();
    b.push_sample(&flipped, sample);
    assert_eq!(a.len(), sample.fov_eroded.iter().filter(|&&v| v).count());
    assert_eq!(auc(&a).unwrap(), auc(&b).unwrap());
    assert_eq!(select_threshold(&a), select_threshold(&b));
    assert_eq!(format!("{:?}", metrics_at(&a, 0.5)), format!("{:?}", metrics_at(&b, 0.5)));
}
