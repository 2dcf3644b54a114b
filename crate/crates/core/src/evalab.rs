//! Evaluation reports, ablation sweeps, and representation geometry.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Example, Splits};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::dot;
use crate::train::{train, TrainConfig, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    /// Per class; `NaN`-free: a class never predicted has precision 0.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    /// Mean cosine of `z_norm` over same-class pairs; `None` when some
    /// class has fewer than two examples.
    pub intra_cosine: Option<f64>,
    pub inter_cosine: Option<f64>,
}

/// Confusion-matrix summary of `(true, predicted)` pairs.
pub fn summarize(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<EvalReport> {
    if truth.len() != predicted.len() {
        return Err(Error::shape("summarize", (truth.len(), 1), (predicted.len(), 1)));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Parameter(format!("class id out of range: {t} / {p}")));
        }
        confusion[t][p] += 1;
    }
    let n = truth.len();
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = (0..n_classes)
        .map(|c| ratio(confusion[c][c], (0..n_classes).map(|t| confusion[t][c]).sum()))
        .collect();
    let recall = (0..n_classes)
        .map(|c| ratio(confusion[c][c], confusion[c].iter().sum()))
        .collect();
    Ok(EvalReport {
        n,
        accuracy: ratio(correct, n),
        precision,
        recall,
        confusion,
        intra_cosine: None,
        inter_cosine: None,
    })
}

pub fn accuracy(model: &Model, split: &[Example]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Degenerate("accuracy of an empty split".into()));
    }
    let mut correct = 0;
    for e in split {
        if model.predict(&e.premise, &e.hypothesis)? == e.label.index() {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Forward-only pass over `split`: accuracy, per-class precision/recall,
/// confusion matrix, and (when every class has two members) the cosine
/// geometry of `z_norm`.
pub fn evaluate(model: &Model, split: &[Example]) -> Result<EvalReport> {
    let mut truth = Vec::with_capacity(split.len());
    let mut predicted = Vec::with_capacity(split.len());
    let mut reps = Vec::with_capacity(split.len());
    for e in split {
        let rep = model.represent(&e.premise, &e.hypothesis)?;
        predicted.push(model.classifier.predict(&rep.z));
        truth.push(e.label.index());
        reps.push(rep.z_norm);
    }
    let mut report = summarize(&truth, &predicted, model.dims.n_classes)?;
    if let Ok((intra, inter)) = cosine_separation(&reps, &truth) {
        report.intra_cosine = Some(intra);
        report.inter_cosine = Some(inter);
    }
    Ok(report)
}

/// Mean pairwise cosine within classes and across classes, over all
/// unordered pairs. Zero vectors have cosine 0 with everything.
pub fn cosine_separation(reps: &[Vec<f64>], labels: &[usize]) -> Result<(f64, f64)> {
    if reps.len() != labels.len() {
        return Err(Error::shape("cosine_separation", (reps.len(), 1), (labels.len(), 1)));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_insert(0usize) += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 2) {
        return Err(Error::Degenerate(format!(
            "separation needs >= 2 classes with >= 2 examples each, got counts {counts:?}"
        )));
    }
    let norms: Vec<f64> = reps.iter().map(|r| dot(r, r).sqrt()).collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..reps.len() {
        for j in i + 1..reps.len() {
            let den = norms[i] * norms[j];
            let cos = if den > 0.0 { dot(&reps[i], &reps[j]) / den } else { 0.0 };
            if labels[i] == labels[j] {
                intra += cos;
                n_intra += 1;
            } else {
                inter += cos;
                n_inter += 1;
            }
        }
    }
    Ok((intra / n_intra as f64, inter / n_inter as f64))
}

/// `(intra, inter)` mean cosine of the model's `z_norm` on `split`.
pub fn separation_metrics(model: &Model, split: &[Example]) -> Result<(f64, f64)> {
    let mut reps = Vec::with_capacity(split.len());
    for e in split {
        reps.push(model.represent(&e.premise, &e.hypothesis)?.z_norm);
    }
    let labels: Vec<usize> = split.iter().map(|e| e.label.index()).collect();
    cosine_separation(&reps, &labels)
}

/// The four wirings compared by an ablation sweep.
pub const VARIANTS: [(&str, bool, bool, bool); 4] = [
    // name, no_ce, no_scl, no_crossattn
    ("full", false, false, false),
    ("-ce", true, false, false),
    ("-scl", false, true, false),
    ("-crossattn", false, false, true),
];

pub fn variant_config(base: &TrainConfig, variant: &str) -> Result<TrainConfig> {
    let (_, no_ce, no_scl, no_crossattn) = VARIANTS
        .iter()
        .find(|v| v.0 == variant)
        .copied()
        .ok_or_else(|| Error::Config(format!("unknown ablation variant {variant:?}")))?;
    Ok(TrainConfig {
        no_ce,
        no_scl,
        no_crossattn,
        ..base.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub rep_width: usize,
    pub dev_acc: Vec<f64>,
    pub test_acc: Vec<f64>,
    /// Train-split `(intra, inter)` cosine per seed.
    pub separation: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Fixed-width text table, accuracies to 3 decimals.
    pub fn render(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!("ablation over seeds [{}]\n", seeds.join(", "));
        let _ = writeln!(
            out,
            "{:<12} {:>5}  {:>15}  {:>15}  {:>15}",
            "variant", "|z|", "dev acc", "test acc", "intra-inter"
        );
        for r in &self.rows {
            let (dm, ds) = mean_stdev(&r.dev_acc);
            let (tm, ts) = mean_stdev(&r.test_acc);
            let gaps: Vec<f64> = r.separation.iter().map(|(a, b)| a - b).collect();
            let (gm, gs) = mean_stdev(&gaps);
            let _ = writeln!(
                out,
                "{:<12} {:>5}  {:>7.3} ± {:<5.3}  {:>7.3} ± {:<5.3}  {:>7.3} ± {:<5.3}",
                r.variant, r.rep_width, dm, ds, tm, ts, gm, gs
            );
        }
        out
    }

    /// `variant,seed,dev_acc,test_acc,intra,inter` per run.
    pub fn csv(&self) -> String {
        let mut out = String::from("variant,seed,dev_acc,test_acc,intra,inter\n");
        for r in &self.rows {
            for (i, seed) in self.seeds.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.variant, seed, r.dev_acc[i], r.test_acc[i], r.separation[i].0, r.separation[i].1
                );
            }
        }
        out
    }
}

/// Trains every variant in [`VARIANTS`] for each seed on the same data.
pub fn ablation_sweep(base: &TrainConfig, seeds: &[u64], splits: &Splits) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation sweep needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (name, ..) in VARIANTS {
        let mut row = AblationRow {
            variant: name.to_string(),
            rep_width: 0,
            dev_acc: Vec::new(),
            test_acc: Vec::new(),
            separation: Vec::new(),
        };
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..variant_config(base, name)?
            };
            let out = train(&cfg, splits, TrainOptions::default())?;
            row.rep_width = out.report.rep_width;
            row.dev_acc.push(out.report.best_dev_acc);
            row.test_acc.push(out.report.test_acc);
            row.separation.push(separation_metrics(&out.best, &splits.train)?);
        }
        rows.push(row);
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
