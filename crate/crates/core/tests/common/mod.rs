//! Independent reference implementations. These deliberately avoid the
//! library's log-sum-exp and logits code: plain loops over `exp`, `ln`.
#![allow(dead_code)]

use paircl::data::{generate, Splits, SynthConfig};
use paircl::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Contrastive loss, log-of-mean form, by direct triple loop:
/// anchor `i`, positive `p`, denominator term `k`.
pub fn scl_brute_force(reps: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let sim = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
    let n = reps.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut pos_sum = 0.0;
        let mut n_pos = 0usize;
        for p in 0..n {
            if p == i || labels[p] != labels[i] {
                continue;
            }
            let mut denom = 0.0;
            for k in 0..n {
                if k != i {
                    denom += sim(&reps[i], &reps[k]).exp();
                }
            }
            pos_sum += sim(&reps[i], &reps[p]).exp() / denom;
            n_pos += 1;
        }
        if n_pos > 0 {
            total -= (pos_sum / n_pos as f64).ln();
        }
    }
    total
}

/// Same, mean-of-log form.
pub fn scl_mean_of_log_brute_force(reps: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let sim = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
    let n = reps.len();
    let mut total = 0.0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| sim(&reps[i], &reps[k]).exp()).sum();
        let mean_log: f64 = positives
            .iter()
            .map(|&p| (sim(&reps[i], &reps[p]).exp() / denom).ln())
            .sum::<f64>()
            / positives.len() as f64;
        total -= mean_log;
    }
    total
}

/// Cross-entropy against explicit one-hot targets, batch mean.
pub fn ce_one_hot(reps: &[Vec<f64>], labels: &[usize], w: &[Vec<f64>], b: &[f64]) -> f64 {
    let c = b.len();
    let mut total = 0.0;
    for (z, &y) in reps.iter().zip(labels) {
        let logits: Vec<f64> = (0..c)
            .map(|j| w[j].iter().zip(z).map(|(a, x)| a * x).sum::<f64>() + b[j])
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let mut row = 0.0;
        for j in 0..c {
            let target = if j == y { 1.0 } else { 0.0 };
            let log_prob = logits[j] - max - denom.ln();
            row -= target * log_prob;
        }
        total += row;
    }
    total / reps.len() as f64
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_unit_batch(rng: &mut ChaCha8Rng, n: usize, width: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let reps = (0..n)
        .map(|_| unit((0..width).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    (reps, labels)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A few-second training setup for checkpoint and resume tests.
pub fn small_run() -> (TrainConfig, Splits) {
    let data = generate(&SynthConfig {
        vocab_size: 60,
        n_train: 240,
        n_dev: 60,
        n_test: 60,
        premise_len: (3, 6),
        hypothesis_len: (2, 4),
        max_len: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 24,
        k: 6,
        d: 4,
        vocab_size: 60,
        max_len: 8,
        probe_epochs: 4,
        ..TrainConfig::default()
    };
    (cfg, data)
}
