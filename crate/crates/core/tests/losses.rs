//! Loss values against closed forms, an independent CCC and algebraic properties.

mod common;

use common::ccc_oracle;
use emodim_core::data::{fuse_streams, FeatureSequence};
use emodim_core::losses::{
    ccc, ccc_loss, cosine, distillation_loss, gamma_confidence, schedule, total_loss, CccWeights, LossTerms,
    Schedule, COSINE_EPS, LABEL_RANGE,
};
use emodim_core::nnstack::Graph;
use emodim_core::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn shifted_ramp_has_ccc_four_sevenths() {
    let v = ccc(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
    assert!((v - 4.0 / 7.0).abs() <= 1e-12, "{v}");
}

#[test]
fn ccc_agrees_with_compensated_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let n = rng.random_range(2..=512);
        let scale = 10f64.powi(rng.random_range(-2..3));
        let x: Vec<f64> = (0..n).map(|_| 4.0 + scale * rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|a| 0.6 * a + rng.random_range(-1.0..1.0) + 1.0).collect();
        let got = ccc(&x, &y).unwrap();
        let want = ccc_oracle(&x, &y);
        assert!((got - want).abs() <= 1e-10, "n={n}: {got} vs {want}");
    }
}

#[test]
fn ccc_rejects_short_or_mismatched_input() {
    assert!(ccc(&[1.0], &[1.0]).is_err());
    assert!(ccc(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn gamma_of_uniform_three_point_residual_is_one_half() {
    assert_eq!(gamma_confidence(&[4.0, 4.0, 4.0], &[1.0, 7.0, 1.0], LABEL_RANGE).unwrap(), 0.5);
    assert_eq!(gamma_confidence(&[2.0, 3.0, 5.0], &[2.0, 3.0, 5.0], LABEL_RANGE).unwrap(), 1.0);
    assert_eq!(gamma_confidence(&[1.0, 1.0, 1.0], &[7.0, 7.0, 7.0], LABEL_RANGE).unwrap(), 0.0);
    assert_eq!(gamma_confidence(&[1.0, 1.0, 1.0], &[9.0, 9.0, 9.0], LABEL_RANGE).unwrap(), 0.0);
}

#[test]
fn schedule_switches_between_epoch_39_and_40() {
    let before = schedule(39).unwrap();
    let after = schedule(40).unwrap();
    assert_eq!((before.kappa, before.lambda), (0.001, 1.0));
    assert_eq!((after.kappa, after.lambda), (1.0, 0.01));
    assert_eq!(schedule(0).unwrap(), Schedule::default().at(0));
    assert!(schedule(-1).is_err());
}

#[test]
fn total_loss_weights_terms_by_the_schedule() {
    for (epoch, kappa, lambda) in [(39usize, 0.001, 1.0), (40, 1.0, 0.01)] {
        let mut g = Graph::new();
        let ccc_v = g.constant(Matrix::scalar(0.4));
        let ce = g.constant(Matrix::scalar(1.5));
        let dis = g.constant(Matrix::scalar(0.25));
        let state = Schedule::default().at(epoch);
        let with = total_loss(&mut g, LossTerms { ccc: ccc_v, ce, distill: Some(dis) }, &state).unwrap();
        let without = total_loss(&mut g, LossTerms { ccc: ccc_v, ce, distill: None }, &state).unwrap();
        assert_eq!(g.scalar_value(with), kappa * (0.4 + 0.2 * 1.5) + lambda * 0.25);
        assert_eq!(g.scalar_value(without), 0.4 + 0.2 * 1.5);
    }
}

#[test]
fn ccc_loss_is_the_weighted_complement() {
    let labels = Matrix::from_vec(4, 3, vec![1., 2., 3., 2., 3., 4., 3., 4., 5., 4., 6., 6.]).unwrap();
    let preds = Matrix::from_vec(4, 3, vec![1.5, 2., 2., 2., 3.5, 4., 2.5, 4., 6., 4., 5., 7.]).unwrap();
    let col = |m: &Matrix, k: usize| (0..4).map(|r| m.row(r)[k]).collect::<Vec<_>>();
    let want: f64 = (0..3).map(|k| (1.0 - ccc_oracle(&col(&preds, k), &col(&labels, k))) / 3.0).sum();
    let mut g = Graph::new();
    let s = g.constant(preds);
    let l = ccc_loss(&mut g, s, &labels, CccWeights::default()).unwrap();
    assert!((g.scalar_value(l) - want).abs() < 1e-14);
}

#[test]
fn distillation_vanishes_at_zero_confidence() {
    let teacher = Matrix::from_vec(2, 3, vec![1., 0., 0., 0.3, -0.2, 0.9]).unwrap();
    let mut g = Graph::new();
    let s = g.leaf(Matrix::from_vec(2, 3, vec![0., 1., 0., -0.5, 0.5, 0.1]).unwrap());
    let l = distillation_loss(&mut g, &teacher, s, &[0.0, 0.0]).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.scalar_value(l), 0.0);
    assert!(g.grad_or_zeros(s).as_slice().iter().all(|&v| v == 0.0));
}

fn vec_in(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    n.prop_flat_map(|len| proptest::collection::vec(-5.0f64..5.0, len))
}

fn pair(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    n.prop_flat_map(|len| (proptest::collection::vec(-5.0f64..5.0, len), proptest::collection::vec(-5.0f64..5.0, len)))
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

fn spread(x: &[f64]) -> f64 {
    x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min)
}

proptest! {
    #[test]
    fn ccc_is_symmetric((x, y) in pair(2..=64)) {
        prop_assume!(spread(&x) > 1e-3 && spread(&y) > 1e-3);
        prop_assert!((ccc(&x, &y).unwrap() - ccc(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ccc_is_bounded_by_pearson((x, y) in pair(2..=64)) {
        prop_assume!(spread(&x) > 1e-3 && spread(&y) > 1e-3);
        prop_assert!(ccc(&x, &y).unwrap().abs() <= pearson(&x, &y).abs() + 1e-12);
    }

    #[test]
    fn a_mean_shift_lowers_ccc(x in vec_in(3..=64), shift in 0.1f64..10.0) {
        prop_assume!(spread(&x) > 1e-3);
        let y: Vec<f64> = x.iter().map(|a| a + shift).collect();
        let c = ccc(&x, &y).unwrap();
        prop_assert!(c < 1.0);
        let further: Vec<f64> = x.iter().map(|a| a + 2.0 * shift).collect();
        prop_assert!(ccc(&x, &further).unwrap() < c);
    }

    #[test]
    fn gamma_decreases_with_residual(
        labels in proptest::array::uniform3(1.0f64..7.0),
        dir in proptest::array::uniform3(-1.0f64..1.0),
        a in 0.0f64..3.0,
        b in 0.0f64..3.0,
    ) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let at = |s: f64| {
            let t = [labels[0] + s * dir[0], labels[1] + s * dir[1], labels[2] + s * dir[2]];
            gamma_confidence(&labels, &t, LABEL_RANGE).unwrap()
        };
        prop_assert!(at(hi) <= at(lo));
        prop_assert!((0.0..=1.0).contains(&at(hi)));
    }

    #[test]
    fn distillation_ignores_student_scale(
        t in proptest::collection::vec(-1.0f64..1.0, 5),
        s in proptest::collection::vec(-1.0f64..1.0, 5),
        c in 0.1f64..20.0,
    ) {
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assume!(norm(&t) > 0.1 && norm(&s) > 0.1);
        let teacher = Matrix::from_vec(1, 5, t.clone()).unwrap();
        let value_and_grad = |s: &[f64]| {
            let mut g = Graph::new();
            let sv = g.leaf(Matrix::from_vec(1, 5, s.to_vec()).unwrap());
            let l = distillation_loss(&mut g, &teacher, sv, &[0.8]).unwrap();
            g.backward(l).unwrap();
            (g.scalar_value(l), g.grad_or_zeros(sv).as_slice().to_vec())
        };
        let (l1, grad) = value_and_grad(&s);
        let scaled: Vec<f64> = s.iter().map(|v| c * v).collect();
        let (l2, _) = value_and_grad(&scaled);
        prop_assert!((l1 - l2).abs() < 1e-12);
        prop_assert!((l1 - 0.8 * (1.0 - cosine(&t, &s, COSINE_EPS))).abs() < 1e-12);
        let dot: f64 = grad.iter().zip(&s).map(|(a, b)| a * b).sum();
        prop_assert!(dot.abs() < 1e-12 * (1.0 + norm(&grad) * norm(&s)));
    }

    #[test]
    fn fusion_is_associative(frames in 1usize..6, dims in proptest::array::uniform3(1usize..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |d: usize| {
            FeatureSequence::new(d, frames, 20.0, (0..d * frames).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
        };
        let (a, b, c) = (make(dims[0]), make(dims[1]), make(dims[2]));
        let left = fuse_streams(&[fuse_streams(&[a.clone(), b.clone()]).unwrap(), c.clone()]).unwrap();
        let right = fuse_streams(&[a.clone(), fuse_streams(&[b.clone(), c.clone()]).unwrap()]).unwrap();
        let flat = fuse_streams(&[a, b, c]).unwrap();
        prop_assert_eq!(&left, &right);
        prop_assert_eq!(&left, &flat);
    }
}
