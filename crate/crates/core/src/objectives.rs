//! Supervised contrastive loss over pair representations, softmax
//! cross-entropy classification head, and their weighted sum.
//!
//! For anchor `i` with positives `P_i = {p ≠ i : y_p = y_i}` and similarity
//! logits `s_ik = z_i · z_k / τ`, the default contrastive term is the
//! log-of-mean form
//!
//! ```text
//! L_i = −log( 1/|P_i| · Σ_{p∈P_i} exp(s_ip) / Σ_{k≠i} exp(s_ik) )
//!     = LSE_{k≠i}(s_ik) − LSE_{p∈P_i}(s_ip) + ln|P_i|
//! ```
//!
//! summed over anchors. Anchors without positives contribute nothing and
//! are counted. [`SclForm::MeanOfLog`] selects the more common
//! `−1/|P_i| Σ_p log ℓ_ip` variant instead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crossattn::PairRep;
use crate::encoder::uniform_mat;
use crate::error::{Error, Result};
use crate::tensor::{dot, Mat, Param};

/// Default temperature.
pub const DEFAULT_TAU: f64 = 0.05;
/// Default weight on the cross-entropy term.
pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SclForm {
    /// `−log(mean_p ℓ_ip)`, log outside the positive average.
    #[default]
    LogOfMean,
    /// `−mean_p log(ℓ_ip)`, log inside.
    MeanOfLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SclOutput {
    pub loss: f64,
    /// Gradient with respect to each (normalized) representation.
    pub grads: Vec<Vec<f64>>,
    /// Anchors with an empty positive set.
    pub skipped_anchors: usize,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Contrastive loss over `reps` (expected unit-norm) and their labels.
pub fn scl_loss(reps: &[Vec<f64>], labels: &[usize], tau: f64, form: SclForm) -> Result<SclOutput> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let n = reps.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "contrastive loss needs a batch of at least 2, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(Error::shape("scl_loss", (n, 1), (labels.len(), 1)));
    }
    let width = reps[0].len();
    if let Some(r) = reps.iter().find(|r| r.len() != width) {
        return Err(Error::shape("scl_loss", (1, width), (1, r.len())));
    }

    let mut logits = vec![0.0; n * n];
    for i in 0..n {
        for k in (i + 1)..n {
            let s = dot(&reps[i], &reps[k]) / tau;
            logits[i * n + k] = s;
            logits[k * n + i] = s;
        }
    }

    let mut loss = 0.0;
    let mut skipped = 0;
    let mut grads = vec![vec![0.0; width]; n];
    let mut d_logit = vec![0.0; n];
    for i in 0..n {
        let row = &logits[i * n..(i + 1) * n];
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        let lse_all = log_sum_exp((0..n).filter(|&k| k != i).map(|k| row[k]));
        let n_pos = positives.len() as f64;
        d_logit.iter_mut().for_each(|g| *g = 0.0);
        for k in (0..n).filter(|&k| k != i) {
            d_logit[k] = (row[k] - lse_all).exp();
        }
        match form {
            SclForm::LogOfMean => {
                let lse_pos = log_sum_exp(positives.iter().map(|&p| row[p]));
                loss += lse_all - lse_pos + n_pos.ln();
                for &p in &positives {
                    d_logit[p] -= (row[p] - lse_pos).exp();
                }
            }
            SclForm::MeanOfLog => {
                let mean_pos = positives.iter().map(|&p| row[p]).sum::<f64>() / n_pos;
                loss += lse_all - mean_pos;
                for &p in &positives {
                    d_logit[p] -= 1.0 / n_pos;
                }
            }
        }
        for k in (0..n).filter(|&k| k != i) {
            let g = d_logit[k] / tau;
            if g == 0.0 {
                continue;
            }
            for d in 0..width {
                grads[i][d] += g * reps[k][d];
                grads[k][d] += g * reps[i][d];
            }
        }
    }
    Ok(SclOutput {
        loss,
        grads,
        skipped_anchors: skipped,
    })
}

/// Linear classification head `W z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `C × width`
    pub w: Param,
    /// `1 × C`
    pub b: Param,
}

impl ClassifierParams {
    pub fn new(width: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if width == 0 || n_classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs width >= 1 and >= 2 classes (width {width}, classes {n_classes})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (width as f64).sqrt();
        Ok(ClassifierParams {
            w: Param::new("classifier.w", uniform_mat(&mut rng, n_classes, width, bound)),
            b: Param::new("classifier.b", Mat::zeros(1, n_classes)),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.w.value.rows()
    }

    pub fn width(&self) -> usize {
        self.w.value.cols()
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        let b = self.b.value.row(0);
        (0..self.n_classes())
            .map(|c| dot(self.w.value.row(c), z) + b[c])
            .collect()
    }

    pub fn predict(&self, z: &[f64]) -> usize {
        argmax(&self.logits(z))
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }

    /// Adds a [`CeOutput`]'s parameter gradients, scaled by `weight`.
    pub fn accumulate(&mut self, ce: &CeOutput, weight: f64) -> Result<()> {
        let mut dw = ce.d_w.clone();
        dw.data_mut().iter_mut().for_each(|g| *g *= weight);
        self.w.accumulate(&dw)?;
        let db: Vec<f64> = ce.d_b.iter().map(|g| g * weight).collect();
        self.b.accumulate(&Mat::row_vector(&db))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeOutput {
    pub loss: f64,
    pub d_reps: Vec<Vec<f64>>,
    pub d_w: Mat,
    pub d_b: Vec<f64>,
}

/// Mean over the batch of `−log softmax(W z + b)[y]`, on raw `z`.
pub fn ce_loss(reps: &[Vec<f64>], labels: &[usize], params: &ClassifierParams) -> Result<CeOutput> {
    let n = reps.len();
    if labels.len() != n {
        return Err(Error::shape("ce_loss", (n, 1), (labels.len(), 1)));
    }
    if n == 0 {
        return Err(Error::Degenerate("cross-entropy over an empty batch".into()));
    }
    let c = params.n_classes();
    let width = params.width();
    let mut loss = 0.0;
    let mut d_reps = Vec::with_capacity(n);
    let mut d_w = Mat::zeros(c, width);
    let mut d_b = vec![0.0; c];
    let scale = 1.0 / n as f64;
    for (z, &y) in reps.iter().zip(labels) {
        if y >= c {
            return Err(Error::Parameter(format!("label {y} out of range for {c} classes")));
        }
        if z.len() != width {
            return Err(Error::shape("ce_loss", (1, width), (1, z.len())));
        }
        let logits = params.logits(z);
        let lse = log_sum_exp(logits.iter().copied());
        loss += lse - logits[y];
        let mut d_z = vec![0.0; width];
        for (class, &l) in logits.iter().enumerate() {
            let g = ((l - lse).exp() - if class == y { 1.0 } else { 0.0 }) * scale;
            d_b[class] += g;
            for (dw, zi) in d_w.row_mut(class).iter_mut().zip(z) {
                *dw += g * zi;
            }
            for (dz, w) in d_z.iter_mut().zip(params.w.value.row(class)) {
                *dz += g * w;
            }
        }
        d_reps.push(d_z);
    }
    Ok(CeOutput {
        loss: loss * scale,
        d_reps,
        d_w,
        d_b,
    })
}

/// K pair representations with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub reps: Vec<PairRep>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    pub fn z(&self) -> Vec<Vec<f64>> {
        self.reps.iter().map(|r| r.z.clone()).collect()
    }

    pub fn z_norm(&self) -> Vec<Vec<f64>> {
        self.reps.iter().map(|r| r.z_norm.clone()).collect()
    }
}

/// Which terms are active and how they are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
    pub use_scl: bool,
    pub use_ce: bool,
    pub scl_form: SclForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            use_scl: true,
            use_ce: true,
            scl_form: SclForm::LogOfMean,
        }
    }
}

/// Loss values for one batch. A disabled term is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    pub l_scl: f64,
    pub l_ce: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub tau: f64,
    pub skipped_anchors: usize,
    pub degenerate_reps: usize,
}

/// Gradients of the total loss: per-rep gradients on raw `z` (the
/// contrastive part already mapped back through the normalization), plus
/// the classifier's.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub d_z: Vec<Vec<f64>>,
    pub ce: Option<CeOutput>,
}

/// `L = L_SCL + α·L_CE`, honoring the enabled terms.
pub fn total_loss(
    batch: &Batch,
    cfg: &LossConfig,
    classifier: &ClassifierParams,
) -> Result<(Objectives, BatchGrads)> {
    if !cfg.use_scl && !cfg.use_ce {
        return Err(Error::Config("both loss terms disabled".into()));
    }
    let n = batch.len();
    let width = batch.reps.first().map_or(0, |r| r.len());
    let mut d_z = vec![vec![0.0; width]; n];
    let mut l_scl = 0.0;
    let mut skipped = 0;
    if cfg.use_scl {
        let out = scl_loss(&batch.z_norm(), &batch.labels, cfg.tau, cfg.scl_form)?;
        l_scl = out.loss;
        skipped = out.skipped_anchors;
        for ((dz, rep), g) in d_z.iter_mut().zip(&batch.reps).zip(&out.grads) {
            *dz = rep.normalize_backward(g);
        }
    }
    let mut l_ce = 0.0;
    let mut ce = None;
    if cfg.use_ce {
        let out = ce_loss(&batch.z(), &batch.labels, classifier)?;
        l_ce = out.loss;
        for (dz, g) in d_z.iter_mut().zip(&out.d_reps) {
            for (a, b) in dz.iter_mut().zip(g) {
                *a += cfg.alpha * b;
            }
        }
        ce = Some(out);
    }
    let objectives = Objectives {
        l_scl,
        l_ce,
        l_total: l_scl + cfg.alpha * l_ce,
        alpha: cfg.alpha,
        tau: cfg.tau,
        skipped_anchors: skipped,
        degenerate_reps: batch.reps.iter().filter(|r| r.is_degenerate()).count(),
    };
    Ok((objectives, BatchGrads { d_z, ce }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(angle_deg: f64) -> Vec<f64> {
        let a = angle_deg.to_radians();
        vec![a.cos(), a.sin()]
    }

    #[test]
    fn identical_reps_give_four_ln_three() {
        let reps = vec![vec![0.6, 0.8]; 4];
        let out = scl_loss(&reps, &[0, 0, 1, 1], 0.05, SclForm::LogOfMean).unwrap();
        assert!((out.loss - 4.0 * 3f64.ln()).abs() < 1e-9, "{}", out.loss);
        assert!((out.loss - 4.39445).abs() < 1e-5);
    }

    #[test]
    fn two_same_label_is_zero() {
        for tau in [0.01, 0.05, 1.0, 7.0] {
            let reps = vec![unit(10.0), unit(140.0)];
            let out = scl_loss(&reps, &[2, 2], tau, SclForm::LogOfMean).unwrap();
            assert_eq!(out.loss, 0.0);
        }
    }

    #[test]
    fn parameter_and_batch_errors() {
        let reps = vec![unit(0.0), unit(1.0)];
        assert!(matches!(
            scl_loss(&reps, &[0, 0], 0.0, SclForm::LogOfMean),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            scl_loss(&reps, &[0, 0], -1.0, SclForm::LogOfMean),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            scl_loss(&reps[..1], &[0], 0.05, SclForm::LogOfMean),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn anchors_without_positives_are_skipped() {
        let reps = vec![unit(0.0), unit(10.0), unit(180.0)];
        let out = scl_loss(&reps, &[0, 0, 1], 0.05, SclForm::LogOfMean).unwrap();
        assert_eq!(out.skipped_anchors, 1);
        let out = scl_loss(&reps, &[0, 1, 2], 0.05, SclForm::LogOfMean).unwrap();
        assert_eq!(out.skipped_anchors, 3);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn forms_agree_with_single_positive() {
        let reps = vec![unit(0.0), unit(10.0), unit(180.0), unit(170.0)];
        let labels = [0, 0, 1, 1];
        let a = scl_loss(&reps, &labels, 0.3, SclForm::LogOfMean).unwrap();
        let b = scl_loss(&reps, &labels, 0.3, SclForm::MeanOfLog).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn ce_uniform_logits() {
        let mut params = ClassifierParams::new(4, 3, 0).unwrap();
        params.w.value.fill(0.0);
        let reps = vec![vec![1.0, -2.0, 3.0, 0.5], vec![0.0; 4]];
        let out = ce_loss(&reps, &[0, 2], &params).unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-15);
        assert!((out.loss - 1.09861).abs() < 1e-5);
    }

    #[test]
    fn ce_saturated_correct_class() {
        let mut params = ClassifierParams::new(1, 3, 0).unwrap();
        params.w.value = Mat::from_rows(&[[1000.0], [0.0], [0.0]]).unwrap();
        let out = ce_loss(&[vec![1.0]], &[0], &params).unwrap();
        assert!(out.loss.abs() < 1e-300);
    }

    #[test]
    fn ce_hand_logits() {
        // Identity weights make logits equal z.
        let mut params = ClassifierParams::new(2, 2, 0).unwrap();
        params.w.value = Mat::identity(2);
        let reps = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let out = ce_loss(&reps, &[0, 1], &params).unwrap();
        let e = std::f64::consts::E;
        let expect = (-(e / (e + 1.0)).ln() - (e * e / (e * e + 1.0)).ln()) / 2.0;
        assert!((out.loss - expect).abs() < 1e-15);
    }

    #[test]
    fn ce_label_out_of_range() {
        let params = ClassifierParams::new(2, 3, 0).unwrap();
        assert!(ce_loss(&[vec![0.0, 1.0]], &[3], &params).is_err());
    }

    fn batch_of(zs: &[Vec<f64>], labels: &[usize]) -> Batch {
        Batch {
            reps: zs.iter().map(|z| PairRep::from_z(z.clone())).collect(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn total_loss_flags() {
        let batch = batch_of(
            &[vec![1.0, 0.2, 0.0], vec![0.9, 0.1, 0.3], vec![-1.0, 0.5, 0.2], vec![-0.8, 0.4, 0.0]],
            &[0, 0, 1, 1],
        );
        let cls = ClassifierParams::new(3, 2, 1).unwrap();
        let full = LossConfig::default();
        let (o, _) = total_loss(&batch, &full, &cls).unwrap();
        let scl = scl_loss(&batch.z_norm(), &batch.labels, full.tau, full.scl_form).unwrap().loss;
        let ce = ce_loss(&batch.z(), &batch.labels, &cls).unwrap().loss;
        assert_eq!(o.l_total, scl + ce);
        assert_eq!(o.l_total, o.l_scl + o.alpha * o.l_ce);

        let (o, _) = total_loss(&batch, &LossConfig { alpha: 0.0, ..full }, &cls).unwrap();
        assert_eq!(o.l_total, o.l_scl);

        let (o, g) = total_loss(&batch, &LossConfig { use_scl: false, ..full }, &cls).unwrap();
        assert_eq!(o.l_scl, 0.0);
        assert_eq!(o.l_total, full.alpha * o.l_ce);
        assert!(g.ce.is_some());

        let (o, g) = total_loss(&batch, &LossConfig { use_ce: false, ..full }, &cls).unwrap();
        assert_eq!(o.l_ce, 0.0);
        assert_eq!(o.l_total, o.l_scl);
        assert!(g.ce.is_none());

        let none = LossConfig { use_ce: false, use_scl: false, ..full };
        assert!(total_loss(&batch, &none, &cls).is_err());
    }
}
