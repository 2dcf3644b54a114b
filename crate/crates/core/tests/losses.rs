mod common;

use common::{ce_one_hot, random_unit_batch, rng, scl_brute_force, scl_mean_of_log_brute_force};
use paircl::objectives::{ce_loss, scl_loss, ClassifierParams, SclForm};
use rand::Rng;

#[test]
fn four_identical_reps_give_four_ln_three() {
    let v = common::unit(vec![0.3, -0.2, 0.9]);
    let reps = vec![v.clone(), v.clone(), v.clone(), v];
    let out = scl_loss(&reps, &[0, 0, 1, 1], 0.05, SclForm::LogOfMean).unwrap();
    assert!((out.loss - 4.0 * 3f64.ln()).abs() < 1e-9, "{}", out.loss);
}

#[test]
fn two_same_label_reps_give_zero() {
    let mut r = rng(3);
    let (reps, _) = random_unit_batch(&mut r, 2, 5, 1);
    let out = scl_loss(&reps, &[2, 2], 0.05, SclForm::LogOfMean).unwrap();
    assert_eq!(out.loss, 0.0);
}

#[test]
fn scl_matches_triple_loop_on_fifty_batches() {
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = r.gen_range(2..=8);
        let width = r.gen_range(2..=6);
        let (reps, labels) = random_unit_batch(&mut r, n, width, 3);
        let tau = [0.05, 0.1, 0.5, 1.0][r.gen_range(0..4)];
        let got = scl_loss(&reps, &labels, tau, SclForm::LogOfMean).unwrap().loss;
        let want = scl_brute_force(&reps, &labels, tau);
        worst = worst.max((got - want).abs());
    }
    assert!(worst < 1e-10, "worst |diff| {worst:e}");
}

#[test]
fn mean_of_log_matches_its_oracle() {
    let mut r = rng(77);
    for _ in 0..50 {
        let n = r.gen_range(2..=8);
        let (reps, labels) = random_unit_batch(&mut r, n, 4, 2);
        let got = scl_loss(&reps, &labels, 0.1, SclForm::MeanOfLog).unwrap().loss;
        let want = scl_mean_of_log_brute_force(&reps, &labels, 0.1);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn forms_agree_with_single_positives() {
    // One positive per anchor: mean and log commute.
    let mut r = rng(5);
    let (reps, _) = random_unit_batch(&mut r, 6, 4, 1);
    let labels = [0, 0, 1, 1, 2, 2];
    let a = scl_loss(&reps, &labels, 0.2, SclForm::LogOfMean).unwrap().loss;
    let b = scl_loss(&reps, &labels, 0.2, SclForm::MeanOfLog).unwrap().loss;
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn ce_matches_one_hot_oracle() {
    let mut r = rng(11);
    for trial in 0..50 {
        let width = r.gen_range(1..=10);
        let n = r.gen_range(1..=8);
        let params = ClassifierParams::new(width, 3, trial).unwrap();
        let reps: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..width).map(|_| r.gen_range(-3.0..3.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..3)).collect();
        let w: Vec<Vec<f64>> = (0..3).map(|c| params.w.value.row(c).to_vec()).collect();
        let b = params.b.value.row(0).to_vec();
        let got = ce_loss(&reps, &labels, &params).unwrap().loss;
        let want = ce_one_hot(&reps, &labels, &w, &b);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn scl_gradient_matches_finite_differences() {
    let mut r = rng(8);
    let (reps, labels) = random_unit_batch(&mut r, 6, 3, 2);
    let out = scl_loss(&reps, &labels, 0.05, SclForm::LogOfMean).unwrap();
    let h = 1e-6;
    for i in 0..reps.len() {
        for d in 0..3 {
            let mut plus = reps.clone();
            plus[i][d] += h;
            let mut minus = reps.clone();
            minus[i][d] -= h;
            let numeric = (scl_brute_force(&plus, &labels, 0.05) - scl_brute_force(&minus, &labels, 0.05)) / (2.0 * h);
            let a = out.grads[i][d];
            assert!((a - numeric).abs() <= 1e-5 * a.abs().max(numeric.abs()).max(1e-3), "{a} vs {numeric}");
        }
    }
}

#[test]
fn invalid_inputs_rejected() {
    let reps = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert!(scl_loss(&reps, &[0, 0], 0.0, SclForm::LogOfMean).is_err());
    assert!(scl_loss(&reps[..1], &[0], 0.1, SclForm::LogOfMean).is_err());
    assert!(scl_loss(&reps, &[0], 0.1, SclForm::LogOfMean).is_err());
}
